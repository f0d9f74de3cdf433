//! Small fixed-size vector helpers. Dimension n <= 3 lives in the leading
//! components; trailing components stay zero.

pub type Vec3 = [f64; 3];

pub const ZERO: Vec3 = [0.0; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(s: f64, a: &Vec3) -> Vec3 {
    [s * a[0], s * a[1], s * a[2]]
}

/// `a + s*b`
#[inline]
pub fn axpy(a: &Vec3, s: f64, b: &Vec3) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Unit vector in the direction of `a`; zero stays zero.
#[inline]
pub fn unit(a: &Vec3) -> Vec3 {
    let r = norm(a);
    if r == 0.0 {
        ZERO
    } else {
        scale(1.0 / r, a)
    }
}

/// Wrap a coordinate difference onto (-pi, pi].
#[inline]
pub fn wrap(d: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut r = d.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r -= tau;
    }
    r
}

/// Componentwise periodic difference `a - b` on the torus [0, 2pi)^n.
#[inline]
pub fn torus_diff(a: &Vec3, b: &Vec3, n: usize) -> Vec3 {
    let mut d = ZERO;
    for i in 0..n {
        d[i] = wrap(a[i] - b[i]);
    }
    d
}
