//! Binary files with JSON sidecars for fields, dictionaries, coefficients,
//! flow maps and solutions. All numbers are little-endian.
//!
//! A file `name.bin` is described by `name.json`; the pair is addressed by the
//! path without extension.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowMap, PacketLattice, PhasePoint};
use crate::grid::{Grid, RealField, C64};
use crate::packets::{DictionaryParams, FrameMode, LowBand, Packet, PacketDictionary, RadialNode, RadialProfiles, Sparse};
use crate::parametrix::WaveSolution;
use crate::symbols::{CoefficientMatrix, CoefficientMeta};
use crate::transform::PhaseField;

pub const FORMAT_VERSION: u32 = 1;

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn c64s(&mut self, v: &[C64]) {
        for z in v {
            self.f64(z.re);
            self.f64(z.im);
        }
    }
    fn vec3(&mut self, v: &[f64; 3]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn sparse(&mut self, s: &Sparse) {
        self.u32(s.len() as u32);
        for &(i, v) in s {
            self.u32(i);
            self.f64(v);
        }
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn new(buf: &'a [u8]) -> Self {
        In { buf, pos: 0 }
    }
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.buf.len() {
            return Err(Error::Format(format!("truncated file: need {} bytes at offset {}", k, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn c64s(&mut self, count: usize) -> Result<Vec<C64>> {
        (0..count).map(|_| Ok(C64::new(self.f64()?, self.f64()?))).collect()
    }
    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
    fn sparse(&mut self) -> Result<Sparse> {
        let len = self.u32()? as usize;
        (0..len).map(|_| Ok((self.u32()?, self.f64()?))).collect()
    }
    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(want))));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------------------
// real fields

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSidecar {
    pub n: usize,
    pub grid_size: usize,
    pub band_limit: f64,
}

/// `stem.bin`: interleaved complex float64, row-major; `stem.json`: [`FieldSidecar`].
pub fn write_field(stem: &Path, f: &RealField) -> Result<()> {
    let mut out = Out::default();
    out.c64s(&f.data);
    fs::write(with_ext(stem, "bin"), out.0)?;
    write_json(&with_ext(stem, "json"), &FieldSidecar { n: f.grid.n, grid_size: f.grid.size, band_limit: f.band_limit })
}

pub fn read_field(stem: &Path) -> Result<RealField> {
    let side: FieldSidecar = read_json(&with_ext(stem, "json"))?;
    let grid = Grid::new(side.n, side.grid_size)?;
    let bytes = fs::read(with_ext(stem, "bin"))?;
    if bytes.len() != 16 * grid.len() {
        return Err(Error::Format(format!("field file has {} bytes, grid needs {}", bytes.len(), 16 * grid.len())));
    }
    let mut r = In::new(&bytes);
    let data = r.c64s(grid.len())?;
    Ok(RealField { grid, data, band_limit: side.band_limit })
}

// ---------------------------------------------------------------------------------------
// phase fields

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSidecar {
    pub n: usize,
    pub grid_size: usize,
    pub packets: usize,
}

/// Header `PWPF`, version, n, grid size, packet count; an index table of
/// `packets + 1` byte offsets (the low band last), then one block per slice.
pub fn write_phase_field(stem: &Path, f: &PhaseField) -> Result<()> {
    let len = f.grid.len();
    let mut out = Out::default();
    out.0.extend_from_slice(b"PWPF");
    out.u32(FORMAT_VERSION);
    out.u32(f.grid.n as u32);
    out.u32(f.grid.size as u32);
    out.u32(f.packets as u32);
    let table = out.0.len() + 8 * (f.packets + 1);
    for k in 0..=f.packets {
        out.u64((table + 16 * len * k) as u64);
    }
    for k in 0..f.packets {
        out.c64s(f.slice(k));
    }
    out.c64s(&f.low);
    fs::write(with_ext(stem, "bin"), out.0)?;
    write_json(&with_ext(stem, "json"), &PhaseSidecar { n: f.grid.n, grid_size: f.grid.size, packets: f.packets })
}

pub fn read_phase_field(stem: &Path) -> Result<PhaseField> {
    let side: PhaseSidecar = read_json(&with_ext(stem, "json"))?;
    let bytes = fs::read(with_ext(stem, "bin"))?;
    let mut r = In::new(&bytes);
    r.magic(b"PWPF")?;
    let (n, size, packets) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if (n, size, packets) != (side.n, side.grid_size, side.packets) {
        return Err(Error::Format("phase field header disagrees with its sidecar".into()));
    }
    let grid = Grid::new(n, size)?;
    let offsets: Vec<u64> = (0..=packets).map(|_| r.u64()).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(packets * grid.len());
    for (k, &off) in offsets.iter().enumerate() {
        if off as usize != r.pos {
            return Err(Error::Format(format!("block {k} at offset {off}, expected {}", r.pos)));
        }
        if k < packets {
            data.extend(r.c64s(grid.len())?);
        }
    }
    let low = r.c64s(grid.len())?;
    r.finish()?;
    Ok(PhaseField { grid, packets, data, low })
}

// ---------------------------------------------------------------------------------------
// dictionaries

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySidecar {
    pub params: DictionaryParams,
    pub packets: usize,
    pub eps_frame: f64,
}

/// Header `PWPK`, version, n, grid size, mode; then packed packet records, radial
/// nodes, the low band and the raw partition function. Profiles are rebuilt on load.
pub fn write_dictionary(stem: &Path, d: &PacketDictionary) -> Result<()> {
    let mut out = Out::default();
    out.0.extend_from_slice(b"PWPK");
    out.u32(FORMAT_VERSION);
    out.u32(d.grid.n as u32);
    out.u32(d.grid.size as u32);
    out.u8(match d.mode() {
        FrameMode::Raw => 0,
        FrameMode::Renormalized => 1,
    });
    out.u32(d.packets.len() as u32);
    for p in &d.packets {
        out.i32(p.annulus);
        out.u32(p.radial);
        out.u32(p.direction);
        out.vec3(&p.center);
        out.f64(p.weight);
        out.sparse(&p.support);
    }
    out.u32(d.nodes.len() as u32);
    for nd in &d.nodes {
        out.f64(nd.magnitude);
        out.i32(nd.annulus);
        out.u32(nd.level);
        out.f64(nd.c);
        out.u64(nd.first as u64);
        out.u64(nd.count as u64);
    }
    out.f64(d.low.weight);
    out.sparse(&d.low.support);
    out.u64(d.partition.len() as u64);
    d.partition.iter().for_each(|&v| out.f64(v));
    out.f64(d.eps_frame);
    fs::write(with_ext(stem, "bin"), out.0)?;
    write_json(&with_ext(stem, "json"), &DictionarySidecar { params: d.params.clone(), packets: d.len(), eps_frame: d.eps_frame })
}

pub fn read_dictionary(stem: &Path) -> Result<PacketDictionary> {
    let side: DictionarySidecar = read_json(&with_ext(stem, "json"))?;
    let bytes = fs::read(with_ext(stem, "bin"))?;
    let mut r = In::new(&bytes);
    r.magic(b"PWPK")?;
    let (n, size) = (r.u32()? as usize, r.u32()? as usize);
    let mode = match r.u8()? {
        0 => FrameMode::Raw,
        1 => FrameMode::Renormalized,
        m => return Err(Error::Format(format!("unknown frame mode {m}"))),
    };
    if (n, size, mode) != (side.params.n, side.params.grid_size, side.params.mode) {
        return Err(Error::Format("dictionary header disagrees with its sidecar".into()));
    }
    let grid = Grid::new(n, size)?;
    let count = r.u32()? as usize;
    let mut packets = Vec::with_capacity(count);
    for _ in 0..count {
        packets.push(Packet {
            annulus: r.i32()?,
            radial: r.u32()?,
            direction: r.u32()?,
            center: r.vec3()?,
            weight: r.f64()?,
            support: r.sparse()?,
        });
    }
    let nn = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(nn);
    for _ in 0..nn {
        nodes.push(RadialNode {
            magnitude: r.f64()?,
            annulus: r.i32()?,
            level: r.u32()?,
            c: r.f64()?,
            first: r.u64()? as usize,
            count: r.u64()? as usize,
        });
    }
    let low = LowBand { weight: r.f64()?, support: r.sparse()? };
    let plen = r.u64()? as usize;
    let partition = (0..plen).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let eps_frame = r.f64()?;
    r.finish()?;
    if count != side.packets || partition.len() != grid.len() {
        return Err(Error::Format("dictionary record counts disagree with the grid".into()));
    }
    let profiles = Arc::new(RadialProfiles::build(side.params.table_resolution)?);
    Ok(PacketDictionary { params: side.params, grid, profiles, packets, nodes, low, partition, eps_frame })
}

// ---------------------------------------------------------------------------------------
// coefficients

/// `stem.bin`: the `n^2` component fields as float64 blocks, row-major in `(i, j)`;
/// `stem.json`: [`CoefficientMeta`].
pub fn write_coefficients(stem: &Path, c: &CoefficientMatrix) -> Result<()> {
    let n = c.n();
    let mut out = Out::default();
    for i in 0..n {
        for j in 0..n {
            c.get(i, j).iter().for_each(|&v| out.f64(v));
        }
    }
    fs::write(with_ext(stem, "bin"), out.0)?;
    write_json(&with_ext(stem, "json"), &c.meta)
}

pub fn read_coefficients(stem: &Path) -> Result<CoefficientMatrix> {
    let meta: CoefficientMeta = read_json(&with_ext(stem, "json"))?;
    let grid = Grid::new(meta.n, meta.grid_size)?;
    let bytes = fs::read(with_ext(stem, "bin"))?;
    let comps = meta.n * meta.n;
    if bytes.len() != 8 * comps * grid.len() {
        return Err(Error::Format(format!("coefficient file has {} bytes, expected {}", bytes.len(), 8 * comps * grid.len())));
    }
    let mut r = In::new(&bytes);
    let entries = (0..comps).map(|_| (0..grid.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    CoefficientMatrix::from_entries(grid, entries, Some(meta))
}

// ---------------------------------------------------------------------------------------
// flow maps

/// Header `PWFL`, version, t, steps, rate, lattice (coarse size and packet count,
/// zero when absent), point count; then one record per point:
/// source x, xi, image x, xi (3 + 3 + 3 + 3 float64), ham drift, sigma ratio, Jacobian defect.
pub fn write_flow(path: &Path, f: &FlowMap) -> Result<()> {
    let mut out = Out::default();
    out.0.extend_from_slice(b"PWFL");
    out.u32(FORMAT_VERSION);
    let (n, coarse, packets) = f.lattice.as_ref().map_or((0, 0, 0), |l| (l.coarse.n, l.coarse.size, l.packets));
    out.f64(f.t);
    out.u64(f.steps as u64);
    out.f64(f.rate);
    out.u32(n as u32);
    out.u32(coarse as u32);
    out.u64(packets as u64);
    out.u64(f.len() as u64);
    for k in 0..f.len() {
        out.vec3(&f.sources[k].x);
        out.vec3(&f.sources[k].xi);
        out.vec3(&f.images[k].x);
        out.vec3(&f.images[k].xi);
        out.f64(f.ham_drift[k]);
        out.f64(f.sigma_ratio[k]);
        out.f64(f.jac_defect[k]);
    }
    fs::write(path, out.0)?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowMap> {
    let bytes = fs::read(path)?;
    let mut r = In::new(&bytes);
    r.magic(b"PWFL")?;
    let t = r.f64()?;
    let steps = r.u64()? as usize;
    let rate = r.f64()?;
    let n = r.u32()? as usize;
    let coarse = r.u32()? as usize;
    let packets = r.u64()? as usize;
    let lattice = if coarse > 0 { Some(PacketLattice { coarse: Grid::new(n, coarse)?, packets }) } else { None };
    let count = r.u64()? as usize;
    let mut f = FlowMap {
        t,
        steps,
        sources: Vec::with_capacity(count),
        images: Vec::with_capacity(count),
        ham_drift: Vec::with_capacity(count),
        sigma_ratio: Vec::with_capacity(count),
        jac_defect: Vec::with_capacity(count),
        rate,
        lattice,
    };
    for _ in 0..count {
        f.sources.push(PhasePoint { x: r.vec3()?, xi: r.vec3()? });
        f.images.push(PhasePoint { x: r.vec3()?, xi: r.vec3()? });
        f.ham_drift.push(r.f64()?);
        f.sigma_ratio.push(r.f64()?);
        f.jac_defect.push(r.f64()?);
    }
    r.finish()?;
    Ok(f)
}

// ---------------------------------------------------------------------------------------
// solutions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionManifest {
    pub solver: String,
    pub t_grid: Vec<f64>,
    /// Field stems relative to the manifest, one per time.
    pub u: Vec<String>,
    pub ut: Vec<String>,
    pub k: usize,
    pub dt: f64,
    pub residuals: Vec<f64>,
    pub residual_times: Vec<f64>,
    pub picard_norms: Vec<f64>,
    pub config_hash: String,
    pub version: String,
}

/// `dir/u_XXXX.{bin,json}`, `dir/ut_XXXX.{bin,json}` and `dir/manifest.json`.
pub fn write_solution(dir: &Path, s: &WaveSolution, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut u = Vec::new();
    let mut ut = Vec::new();
    for (i, f) in s.u.iter().enumerate() {
        let name = format!("u_{i:04}");
        write_field(&dir.join(&name), f)?;
        u.push(name);
    }
    for (i, f) in s.ut.iter().enumerate() {
        let name = format!("ut_{i:04}");
        write_field(&dir.join(&name), f)?;
        ut.push(name);
    }
    let m = SolutionManifest {
        solver: s.meta.solver.clone(),
        t_grid: s.times.clone(),
        u,
        ut,
        k: s.meta.k,
        dt: s.meta.dt,
        residuals: s.meta.residuals.clone(),
        residual_times: s.meta.residual_times.clone(),
        picard_norms: s.meta.picard_norms.clone(),
        config_hash: config_hash.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

pub fn read_solution(dir: &Path) -> Result<(WaveSolution, SolutionManifest)> {
    let m: SolutionManifest = read_json(&dir.join("manifest.json"))?;
    if m.u.len() != m.t_grid.len() || (!m.ut.is_empty() && m.ut.len() != m.t_grid.len()) {
        return Err(Error::Format("manifest lists a field count different from its time grid".into()));
    }
    let u = m.u.iter().map(|s| read_field(&dir.join(s))).collect::<Result<Vec<_>>>()?;
    let ut = m.ut.iter().map(|s| read_field(&dir.join(s))).collect::<Result<Vec<_>>>()?;
    let meta = crate::parametrix::SolverMeta {
        solver: m.solver.clone(),
        k: m.k,
        dt: m.dt,
        residuals: m.residuals.clone(),
        residual_times: m.residual_times.clone(),
        picard_norms: m.picard_norms.clone(),
        ..Default::default()
    };
    Ok((WaveSolution { times: m.t_grid.clone(), u, ut, meta }, m))
}
