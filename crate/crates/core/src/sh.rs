//! Real spherical harmonics up to degree 3 in the sign convention used by
//! 3DGS exports.

use crate::cloud::{sh_count, ShCoeffs, SH_COEFFS};
use crate::geom::Vec3;
use crate::scalar::Real;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values `Y_k(dir)` for `k < (degree+1)²`; higher entries are zero.
pub fn sh_basis<T: Real>(dir: Vec3<T>, degree: usize) -> [T; SH_COEFFS] {
    let mut y = [T::zero(); SH_COEFFS];
    y[0] = T::lit(SH_C0);
    if degree == 0 {
        return y;
    }
    let [x, yy, z] = dir;
    let c1 = T::lit(SH_C1);
    y[1] = -c1 * yy;
    y[2] = c1 * z;
    y[3] = -c1 * x;
    if degree == 1 {
        return y;
    }
    let (xx, y2, zz) = (x * x, yy * yy, z * z);
    let (xy, yz, xz) = (x * yy, yy * z, x * z);
    let c2 = SH_C2.map(T::lit);
    y[4] = c2[0] * xy;
    y[5] = c2[1] * yz;
    y[6] = c2[2] * (T::two() * zz - xx - y2);
    y[7] = c2[3] * xz;
    y[8] = c2[4] * (xx - y2);
    if degree == 2 {
        return y;
    }
    let c3 = SH_C3.map(T::lit);
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    y[9] = c3[0] * yy * (three * xx - y2);
    y[10] = c3[1] * xy * z;
    y[11] = c3[2] * yy * (four * zz - xx - y2);
    y[12] = c3[3] * z * (T::two() * zz - three * xx - three * y2);
    y[13] = c3[4] * x * (four * zz - xx - y2);
    y[14] = c3[5] * z * (xx - y2);
    y[15] = c3[6] * x * (xx - three * y2);
    y
}

/// SH colour before the `[0,1]` clamp: `0.5 + Σ c_k Y_k(dir)`.
pub fn eval_sh_unclamped<T: Real>(coeffs: &ShCoeffs<T>, dir: Vec3<T>, degree: usize) -> [T; 3] {
    let basis = sh_basis(dir, degree);
    let mut out = [T::half(); 3];
    for k in 0..sh_count(degree.min(3)) {
        for c in 0..3 {
            out[c] += coeffs[k][c] * basis[k];
        }
    }
    out
}

/// SH colour clamped to `[0,1]` per channel.
pub fn eval_sh<T: Real>(coeffs: &ShCoeffs<T>, dir: Vec3<T>, degree: usize) -> [T; 3] {
    eval_sh_unclamped(coeffs, dir, degree).map(|v| v.max(T::zero()).min(T::one()))
}
