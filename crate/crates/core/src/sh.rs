//! Real spherical-harmonic color up to degree 3, in the basis ordering and
//! sign convention common to gaussian-splatting checkpoints.

use nalgebra::Vector3;

pub const SH_MAX_COEFFS: usize = 16;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients used by a degree-`deg` expansion, (deg+1)².
pub fn coeff_count(deg: usize) -> usize {
    (deg + 1) * (deg + 1)
}

/// Basis values for a unit direction.
pub fn basis(d: &Vector3<f64>) -> [f64; SH_MAX_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Gradients of each basis polynomial with respect to (x, y, z).
fn basis_gradient(d: &Vector3<f64>) -> [Vector3<f64>; SH_MAX_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let v = Vector3::new;
    [
        v(0.0, 0.0, 0.0),
        v(0.0, -SH_C1, 0.0),
        v(0.0, 0.0, SH_C1),
        v(-SH_C1, 0.0, 0.0),
        v(SH_C2[0] * y, SH_C2[0] * x, 0.0),
        v(0.0, SH_C2[1] * z, SH_C2[1] * y),
        v(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z),
        v(SH_C2[3] * z, 0.0, SH_C2[3] * x),
        v(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0),
        v(6.0 * SH_C3[0] * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0),
        v(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
        v(
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * SH_C3[2] * y * z,
        ),
        v(
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ),
        v(
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        ),
        v(2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
        v(SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, 0.0),
    ]
}

/// RGB color seen from `view_direction` (unit), using the first
/// `coeff_count(degree)` coefficients. Not clamped.
pub fn eval_sh_color(sh: &[Vector3<f64>], degree: usize, view_direction: &Vector3<f64>) -> Vector3<f64> {
    let b = basis(view_direction);
    let n = coeff_count(degree).min(sh.len());
    let mut c = Vector3::repeat(0.5);
    for k in 0..n {
        c += sh[k] * b[k];
    }
    c
}

/// Backward of [`eval_sh_color`] where the direction is `offset / |offset|`.
/// Accumulates dL/dsh into `d_sh` and returns dL/d(offset).
pub fn eval_sh_color_backward(
    sh: &[Vector3<f64>],
    degree: usize,
    offset: &Vector3<f64>,
    d_color: &Vector3<f64>,
    d_sh: &mut [Vector3<f64>],
) -> Vector3<f64> {
    let len = offset.norm();
    let dir = offset / len;
    let b = basis(&dir);
    let n = coeff_count(degree).min(sh.len());
    for k in 0..n {
        d_sh[k] += d_color * b[k];
    }
    if n == 1 {
        return Vector3::zeros();
    }
    let grads = basis_gradient(&dir);
    let mut d_dir = Vector3::zeros();
    for k in 1..n {
        d_dir += grads[k] * sh[k].dot(d_color);
    }
    (d_dir - dir * dir.dot(&d_dir)) / len
}
