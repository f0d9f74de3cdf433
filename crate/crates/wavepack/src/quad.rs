//! One-dimensional quadrature and cubic Hermite lookup tables.

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..m {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = m as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[m - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre rule: `panels` equal panels of 8 nodes each.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (x, w) = gauss_legendre(8);
    let h = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * f(c + 0.5 * h * xi);
        }
    }
    0.5 * h * s
}

/// Uniform-grid cubic Hermite interpolant from values and exact derivatives.
#[derive(Clone, Debug)]
pub struct HermiteTable {
    a: f64,
    h: f64,
    vals: Vec<f64>,
    ders: Vec<f64>,
}

impl HermiteTable {
    pub fn build(a: f64, b: f64, cells: usize, f: impl Fn(f64) -> (f64, f64)) -> Self {
        let h = (b - a) / cells as f64;
        let (vals, ders) = (0..=cells).map(|i| f(a + i as f64 * h)).unzip();
        HermiteTable { a, h, vals, ders }
    }

    pub fn cells(&self) -> usize {
        self.vals.len() - 1
    }

    pub fn lo(&self) -> f64 {
        self.a
    }

    pub fn hi(&self) -> f64 {
        self.a + self.h * self.cells() as f64
    }

    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.a) / self.h).clamp(0.0, self.cells() as f64);
        let i = (s as usize).min(self.cells() - 1);
        (i, s - i as f64)
    }

    /// Value at `x`, clamped to the table range.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.vals[i] + h10 * self.h * self.ders[i] + h01 * self.vals[i + 1] + h11 * self.h * self.ders[i + 1]
    }

    /// Derivative of the interpolant at `x`.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        let t2 = t * t;
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        (d00 * self.vals[i] + d01 * self.vals[i + 1]) / self.h + d10 * self.ders[i] + d11 * self.ders[i + 1]
    }
}
