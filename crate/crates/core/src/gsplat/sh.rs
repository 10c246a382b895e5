//! Real spherical harmonics up to degree 3, with the constants and sign
//! conventions used by common splat viewers.

use std::ops::{Add, Mul, Sub};

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Coefficients per color channel for a degree.
pub fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Value with its gradient with respect to the three direction components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Mul<f64> for Dual3 {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        Self {
            v: self.v * c,
            d: [self.d[0] * c, self.d[1] * c, self.d[2] * c],
        }
    }
}

trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self>
{
    fn lit(v: f64) -> Self;
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
}

impl Scalar for Dual3 {
    fn lit(v: f64) -> Self {
        Dual3::constant(v)
    }
}

fn basis_generic<T: Scalar>(degree: usize, x: T, y: T, z: T, out: &mut [T]) {
    out[0] = T::lit(C0);
    if degree < 1 {
        return;
    }
    out[1] = y * -C1;
    out[2] = z * C1;
    out[3] = x * -C1;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = xy * C2[0];
    out[5] = yz * C2[1];
    out[6] = (zz * 2.0 - xx - yy) * C2[2];
    out[7] = xz * C2[3];
    out[8] = (xx - yy) * C2[4];
    if degree < 3 {
        return;
    }
    out[9] = y * (xx * 3.0 - yy) * C3[0];
    out[10] = xy * z * C3[1];
    out[11] = y * (zz * 4.0 - xx - yy) * C3[2];
    out[12] = z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * C3[3];
    out[13] = x * (zz * 4.0 - xx - yy) * C3[4];
    out[14] = z * (xx - yy) * C3[5];
    out[15] = x * (xx - yy * 3.0) * C3[6];
}

/// Basis values at a unit direction.
pub fn basis(degree: usize, dir: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; num_coeffs(degree)];
    basis_generic(degree, dir[0], dir[1], dir[2], &mut out);
    out
}

/// Basis values and their gradients with respect to the direction.
pub(crate) fn basis_with_grad(degree: usize, dir: [f64; 3]) -> Vec<Dual3> {
    let mut out = vec![Dual3::constant(0.0); num_coeffs(degree)];
    basis_generic(
        degree,
        Dual3::var(dir[0], 0),
        Dual3::var(dir[1], 1),
        Dual3::var(dir[2], 2),
        &mut out,
    );
    out
}

/// RGB before the `+0.5` offset and clamp. `coeffs` is laid out
/// coefficient-major: `coeffs[k * 3 + c]`.
pub fn eval(degree: usize, coeffs: &[f64], dir: [f64; 3]) -> [f64; 3] {
    let b = basis(degree, dir);
    let mut rgb = [0.0; 3];
    for (k, bk) in b.iter().enumerate() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += coeffs[k * 3 + c] * bk;
        }
    }
    rgb
}

/// DC coefficient that produces `rgb` after the offset.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * C0 + 0.5
}

/// Rotate degree-0/1 coefficients so that colors evaluated along `q·d`
/// match the originals along `d`. Higher bands are not supported.
pub fn rotate_band1(coeffs: &mut [f64], q: &nalgebra::Matrix3<f64>) {
    // band-1 basis is C1 * m * d with this signed permutation
    let m = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0);
    let t = m * q * m.transpose();
    for c in 0..3 {
        let v = nalgebra::Vector3::new(coeffs[3 + c], coeffs[6 + c], coeffs[9 + c]);
        let r = t * v;
        coeffs[3 + c] = r.x;
        coeffs[6 + c] = r.y;
        coeffs[9 + c] = r.z;
    }
}
