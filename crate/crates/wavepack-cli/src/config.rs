//! Experiment configuration: a TOML document, validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wavepack::error::{Error, Result};
use wavepack::packets::{DictionaryParams, FrameMode, DEFAULT_C_ANG};
use wavepack::reference::Scheme;
use wavepack::symbols::OperatorForm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub grid_size: usize,
    /// Seed for generated data; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dictionary: DictionaryConfig,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default = "default_form")]
    pub form: OperatorForm,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Output times of `solve`; the last one is the end time.
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    #[serde(default)]
    pub norms: Vec<NormSpec>,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
}

fn default_form() -> OperatorForm {
    OperatorForm::Divergence
}

fn default_times() -> Vec<f64> {
    vec![0.5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    #[serde(default = "default_c_ang")]
    pub c_ang: f64,
    #[serde(default = "default_radial")]
    pub radial_nodes: usize,
    #[serde(default = "default_mode")]
    pub mode: FrameMode,
}

fn default_c_ang() -> f64 {
    DEFAULT_C_ANG
}
fn default_radial() -> usize {
    3
}
fn default_mode() -> FrameMode {
    FrameMode::Renormalized
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig { c_ang: default_c_ang(), radial_nodes: default_radial(), mode: default_mode() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoefficientSpec {
    Flat,
    Generated {
        r: f64,
        amplitude: f64,
        /// Defaults to the top-level seed.
        seed: Option<u64>,
    },
    /// Binary coefficient file plus sidecar, addressed by stem.
    File { path: PathBuf },
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec::Flat
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    /// Gaussian coefficients on `lo <= |zeta| <= hi` (hi defaults to the band edge), unit norm.
    Band { lo: f64, hi: Option<f64>, scale: Option<f64> },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_u0")]
    pub u0: FieldSpec,
    #[serde(default = "default_u1")]
    pub u1: FieldSpec,
}

fn default_u0() -> FieldSpec {
    FieldSpec::Band { lo: 0.0, hi: None, scale: None }
}
fn default_u1() -> FieldSpec {
    FieldSpec::Zero
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { u0: default_u0(), u1: default_u1() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverConfig {
    Parametrix {
        #[serde(default = "default_order")]
        order: Order,
        /// Picard truncation of the first-order solver.
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default = "default_h")]
        h: f64,
        /// Invertibility shift; chosen automatically when absent.
        shift: Option<f64>,
        /// PDE residual every this many time steps (0 disables).
        #[serde(default)]
        residual_stride: usize,
    },
    Reference {
        #[serde(default = "default_scheme")]
        scheme: Scheme,
        #[serde(default = "default_ref_dt")]
        dt: f64,
        #[serde(default = "default_true")]
        dealias: bool,
    },
}

fn default_order() -> Order {
    Order::Second
}
fn default_k() -> usize {
    8
}
fn default_dt() -> f64 {
    1.0 / 64.0
}
fn default_h() -> f64 {
    wavepack::parametrix::DEFAULT_H
}
fn default_scheme() -> Scheme {
    Scheme::Leapfrog
}
fn default_ref_dt() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::Parametrix {
            order: default_order(),
            k: default_k(),
            dt: default_dt(),
            h: default_h(),
            shift: None,
            residual_stride: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    /// A number, or the string "inf".
    #[serde(with = "p_value")]
    pub p: f64,
    #[serde(default)]
    pub s: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

mod p_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &f64, s: S) -> Result<S::Ok, S::Error> {
        if p.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*p)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum P {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match P::deserialize(d)? {
            P::Num(v) => Ok(v),
            P::Int(v) => Ok(v as f64),
            P::Text(t) if t == "inf" => Ok(f64::INFINITY),
            P::Text(t) => Err(serde::de::Error::custom(format!("p must be a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnostic {
    Gronwall,
    Flow,
    Kernel,
    Volume,
    Aperture,
    Symbol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    #[serde(default)]
    pub list: Vec<Diagnostic>,
    /// Flow sources per radius for the Gronwall comparison.
    #[serde(default = "default_sources")]
    pub sources: usize,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    /// Flow times for the Gronwall and flow diagnostics.
    #[serde(default = "default_flow_times")]
    pub times: Vec<f64>,
    #[serde(default = "default_steps_per_unit")]
    pub steps_per_unit: f64,
    /// Sampled pairs for the kernel probe.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Monte-Carlo samples per radius for ball volumes.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_sources() -> usize {
    250
}
fn default_radii() -> Vec<f64> {
    vec![16.0, 32.0]
}
fn default_flow_times() -> Vec<f64> {
    vec![-1.0, -0.5, -0.25, 0.25, 0.5, 1.0]
}
fn default_steps_per_unit() -> f64 {
    256.0
}
fn default_pairs() -> usize {
    200
}
fn default_samples() -> usize {
    100_000
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            list: Vec::new(),
            sources: default_sources(),
            radii: default_radii(),
            times: default_flow_times(),
            steps_per_unit: default_steps_per_unit(),
            pairs: default_pairs(),
            samples: default_samples(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        wavepack::grid::Grid::new(self.n, self.grid_size)?;
        if self.times.is_empty() || self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("times must be a non-empty list of finite numbers".into()));
        }
        if self.times.windows(2).any(|w| w[1].abs() < w[0].abs() || w[0] * w[1] < 0.0) {
            return Err(Error::Config("times must share one sign and grow in magnitude".into()));
        }
        for spec in &self.norms {
            if !(spec.p >= 1.0) || !(spec.alpha > 0.0) {
                return Err(Error::Config(format!("norm p = {} alpha = {} out of range", spec.p, spec.alpha)));
            }
        }
        Ok(())
    }

    pub fn dictionary_params(&self) -> DictionaryParams {
        DictionaryParams {
            c_ang: self.dictionary.c_ang,
            radial_nodes: self.dictionary.radial_nodes,
            mode: self.dictionary.mode,
            ..DictionaryParams::new(self.n, self.grid_size)
        }
    }

    /// SHA-256 of the canonical JSON form (after command-line overrides).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_and_full_documents() {
        let c = ExperimentConfig::parse("n = 2\ngrid_size = 64\n").unwrap();
        assert_eq!(c.coefficients, CoefficientSpec::Flat);
        assert_eq!(c.times, vec![0.5]);
        let full = r#"
            n = 2
            grid_size = 64
            seed = 3
            form = "standard"
            times = [0.25, 0.5]
            [dictionary]
            c_ang = 8.0
            mode = "raw"
            [coefficients]
            kind = "generated"
            r = 2.0
            amplitude = 0.2
            [data]
            u0 = { kind = "band", lo = 16.0 }
            u1 = { kind = "zero" }
            [solver]
            kind = "reference"
            scheme = "rk4"
            dt = 0.002
            [[norms]]
            p = "inf"
            [[norms]]
            p = 2
            s = 0.5
            [diagnose]
            list = ["gronwall", "volume"]
        "#;
        let c = ExperimentConfig::parse(full).unwrap();
        assert_eq!(c.norms[0].p, f64::INFINITY);
        assert_eq!(c.norms[1].p, 2.0);
        assert!(matches!(c.solver, SolverConfig::Reference { scheme: Scheme::Rk4, .. }));
        assert_ne!(c.hash(), ExperimentConfig::parse("n = 2\ngrid_size = 64\n").unwrap().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            "n = 2\ngrid_size = 64\ncolour = 1\n",
            "n = 2\ngrid_size = 64\n[solver]\nkind = \"parametrix\"\nkk = 3\n",
            "n = 2\ngrid_size = 64\n[coefficients]\nkind = \"generated\"\nr = 2.0\namplitude = 0.1\nextra = 1\n",
            "n = 2\ngrid_size = 64\n[data]\nu0 = { kind = \"band\", lo = 1.0, wat = 2 }\n",
            "n = 2\ngrid_size = 60\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
