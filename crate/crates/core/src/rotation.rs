//! Rotation parameterizations: unit quaternions (w, x, y, z) for gaussian
//! orientation and axis-angle vectors for joint rotations, with the
//! derivatives needed by the backward passes.

use nalgebra::{Matrix3, Vector3, Vector4};

pub type Quat = Vector4<f64>;

pub fn identity_quat() -> Quat {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a unit quaternion stored as (w, x, y, z).
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the (unit) quaternion
/// that produced it.
pub fn quat_to_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}

/// Normalizes `q`, returning the unit quaternion and the original norm.
pub fn normalize_quat(q: &Quat) -> (Quat, f64) {
    let n = q.norm();
    (q / n, n)
}

/// Backward of `q / |q|`.
pub fn normalize_quat_backward(unit: &Quat, norm: f64, g: &Quat) -> Quat {
    (g - unit * unit.dot(g)) / norm
}

/// Hamilton product a ⊗ b.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

pub fn quat_from_axis_angle(v: &Vector3<f64>) -> Quat {
    let angle = v.norm();
    if angle < 1e-12 {
        return identity_quat();
    }
    let axis = v / angle;
    let (s, c) = (0.5 * angle).sin_cos();
    Vector4::new(c, axis.x * s, axis.y * s, axis.z * s)
}

/// Rodrigues' formula.
pub fn axis_angle_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = skew(v);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives dR/dv_i of Rodrigues' formula, i = 0..3.
pub fn axis_angle_jacobian(v: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = v.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < 1e-12 {
        return basis.map(|e| skew(&e));
    }
    let r = axis_angle_to_matrix(v);
    let vx = skew(v);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let i = e.iamax();
        let w = v.cross(&(i_minus_r * e));
        (vx * v[i] + skew(&w)) * r / theta2
    })
}

/// Pulls a gradient on R(v) back onto the axis-angle vector v.
pub fn axis_angle_backward(v: &Vector3<f64>, g: &Matrix3<f64>) -> Vector3<f64> {
    let jac = axis_angle_jacobian(v);
    Vector3::new(jac[0].dot(g), jac[1].dot(g), jac[2].dot(g))
}

/// Logarithm map SO(3) -> axis-angle with angle in [0, π].
pub fn matrix_to_axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < 1e-6 {
        return vee * 0.5;
    }
    if std::f64::consts::PI - angle > 1e-4 {
        return vee * (angle / (2.0 * angle.sin()));
    }
    // Near π: (R + Rᵀ)/2 = cos·I + (1 − cos) n nᵀ; read n off the dominant column.
    let sym = ((r + r.transpose()) * 0.5 - Matrix3::identity() * cos) / (1.0 - cos);
    let d = sym.diagonal();
    let k = d.imax();
    let mut axis = sym.column(k) / d[k].max(1e-300).sqrt();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn quaternion_matches_axis_angle() {
        let v = Vector3::new(0.3, -0.7, 0.2);
        let q = quat_from_axis_angle(&v);
        assert_relative_eq!(quat_to_matrix(&q), axis_angle_to_matrix(&v), epsilon = 1e-14);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let p = r * Vector3::x();
        assert_relative_eq!(p, Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn log_inverts_exp_including_near_pi() {
        for v in [
            Vector3::new(0.1, 0.2, -0.3),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-9, 0.0, 0.0),
            Vector3::new(0.0, 3.14159, 0.0),
            Vector3::new(1.2, -1.9, 2.0).normalize() * (std::f64::consts::PI - 1e-6),
        ] {
            let back = matrix_to_axis_angle(&axis_angle_to_matrix(&v));
            assert_relative_eq!(back, v, epsilon = 1e-6);
        }
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        for v in [
            Vector3::new(0.4, -0.2, 0.9),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.5, 0.1, 0.3),
        ] {
            let jac = axis_angle_jacobian(&v);
            for i in 0..3 {
                let h = 1e-6;
                let mut vp = v;
                vp[i] += h;
                let mut vm = v;
                vm[i] -= h;
                let fd = (axis_angle_to_matrix(&vp) - axis_angle_to_matrix(&vm)) / (2.0 * h);
                assert_relative_eq!(jac[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let q = Vector4::new(0.7, -0.2, 0.4, 0.3);
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let analytic = quat_to_matrix_backward(&q, &g);
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            qp[i] += h;
            let mut qm = q;
            qm[i] -= h;
            let fd = (quat_to_matrix(&qp).dot(&g) - quat_to_matrix(&qm).dot(&g)) / (2.0 * h);
            assert_relative_eq!(analytic[i], fd, epsilon = 1e-8);
        }
    }
}
