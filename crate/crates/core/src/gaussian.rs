//! The 3D gaussian primitive, covariance assembly and the KL divergence
//! between two gaussians.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rotation::{identity_quat, quat_to_matrix, Quat};
use crate::sh::SH_MAX_COEFFS;

/// Lower bound on activated per-axis scale; keeps every covariance invertible.
pub const MIN_SCALE: f64 = 1e-6;

/// Length of the flat parameter row of one gaussian:
/// position(3) rotation(4) log_scale(3) raw_opacity(1) sh(16 × 3).
pub const PARAM_LEN: usize = 3 + 4 + 3 + 1 + 3 * SH_MAX_COEFFS;
pub const OFF_POSITION: usize = 0;
pub const OFF_ROTATION: usize = 3;
pub const OFF_SCALE: usize = 7;
pub const OFF_OPACITY: usize = 10;
pub const OFF_SH: usize = 11;

pub type ParamRow = [f64; PARAM_LEN];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic gaussian in canonical space. Rotation is a (w, x, y, z)
/// quaternion, scale is stored as log standard deviations, opacity as a
/// logit. `sh[k]` holds the RGB coefficient of real SH basis function k;
/// entries above the owning cloud's degree are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub raw_opacity: f64,
    pub sh: [Vector3<f64>; SH_MAX_COEFFS],
}

impl Default for Gaussian3D {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: identity_quat(),
            log_scale: Vector3::zeros(),
            raw_opacity: 0.0,
            sh: [Vector3::zeros(); SH_MAX_COEFFS],
        }
    }
}

impl Gaussian3D {
    /// Activated per-axis standard deviations, floored at [`MIN_SCALE`].
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(|l| l.exp().max(MIN_SCALE))
    }

    pub fn max_scale(&self) -> f64 {
        self.scale().max()
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&(self.rotation / self.rotation.norm()))
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(&self.rotation, &self.log_scale)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.raw_opacity.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn to_row(&self) -> ParamRow {
        let mut row = [0.0; PARAM_LEN];
        row[OFF_POSITION..OFF_POSITION + 3].copy_from_slice(self.position.as_slice());
        row[OFF_ROTATION..OFF_ROTATION + 4].copy_from_slice(self.rotation.as_slice());
        row[OFF_SCALE..OFF_SCALE + 3].copy_from_slice(self.log_scale.as_slice());
        row[OFF_OPACITY] = self.raw_opacity;
        for (k, c) in self.sh.iter().enumerate() {
            row[OFF_SH + 3 * k..OFF_SH + 3 * k + 3].copy_from_slice(c.as_slice());
        }
        row
    }

    pub fn from_row(row: &ParamRow) -> Self {
        let mut sh = [Vector3::zeros(); SH_MAX_COEFFS];
        for (k, c) in sh.iter_mut().enumerate() {
            *c = Vector3::from_column_slice(&row[OFF_SH + 3 * k..OFF_SH + 3 * k + 3]);
        }
        Self {
            position: Vector3::from_column_slice(&row[OFF_POSITION..OFF_POSITION + 3]),
            rotation: Quat::from_column_slice(&row[OFF_ROTATION..OFF_ROTATION + 4]),
            log_scale: Vector3::from_column_slice(&row[OFF_SCALE..OFF_SCALE + 3]),
            raw_opacity: row[OFF_OPACITY],
            sh,
        }
    }
}

/// Optimizer and densification bookkeeping carried alongside each gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Bookkeeping {
    pub adam_m: ParamRow,
    pub adam_v: ParamRow,
    /// Sum over steps of the screen-space mean gradient norm (pixels⁻¹).
    pub grad2d_sum: f64,
    /// Number of steps in which the gaussian was visible.
    pub grad_count: u32,
    /// Sum over steps of the canonical position gradient.
    pub pos_grad_sum: Vector3<f64>,
}

impl Default for Bookkeeping {
    fn default() -> Self {
        Self {
            adam_m: [0.0; PARAM_LEN],
            adam_v: [0.0; PARAM_LEN],
            grad2d_sum: 0.0,
            grad_count: 0,
            pos_grad_sum: Vector3::zeros(),
        }
    }
}

impl Bookkeeping {
    pub fn mean_grad2d(&self) -> f64 {
        if self.grad_count == 0 {
            0.0
        } else {
            self.grad2d_sum / self.grad_count as f64
        }
    }

    pub fn reset_stats(&mut self) {
        self.grad2d_sum = 0.0;
        self.grad_count = 0;
        self.pos_grad_sum = Vector3::zeros();
    }
}

/// A set of canonical-space gaussians. `gaussians` and `book` always have
/// the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian3D>,
    book: Vec<Bookkeeping>,
    /// Highest SH degree stored (0..=3).
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= 3, "sh degree must be in 0..=3");
        Self {
            gaussians: Vec::new(),
            book: Vec::new(),
            sh_degree,
        }
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian3D>, sh_degree: usize) -> Self {
        let mut cloud = Self::new(sh_degree);
        for g in gaussians {
            cloud.push(g);
        }
        cloud
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Appends a gaussian with fresh bookkeeping.
    pub fn push(&mut self, g: Gaussian3D) {
        self.push_with(g, Bookkeeping::default());
    }

    pub fn push_with(&mut self, mut g: Gaussian3D, book: Bookkeeping) {
        let used = crate::sh::coeff_count(self.sh_degree);
        for c in &mut g.sh[used..] {
            *c = Vector3::zeros();
        }
        self.gaussians.push(g);
        self.book.push(book);
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        &mut self.gaussians
    }

    pub fn get(&self, i: usize) -> &Gaussian3D {
        &self.gaussians[i]
    }

    pub fn bookkeeping(&self) -> &[Bookkeeping] {
        &self.book
    }

    pub fn bookkeeping_mut(&mut self) -> &mut [Bookkeeping] {
        &mut self.book
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&mut Gaussian3D, &mut Bookkeeping)> {
        self.gaussians.iter_mut().zip(self.book.iter_mut())
    }

    /// Keeps only the rows at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        Self {
            gaussians: indices.iter().map(|&i| self.gaussians[i].clone()).collect(),
            book: indices.iter().map(|&i| self.book[i].clone()).collect(),
            sh_degree: self.sh_degree,
        }
    }

    pub fn reset_stats(&mut self) {
        self.book.iter_mut().for_each(Bookkeeping::reset_stats);
    }

    pub fn density_at(&self, index: usize, x: &Vector3<f64>) -> Result<f64> {
        eval_density(&self.gaussians[index], x).map_err(|e| match e {
            Error::SingularCovariance { .. } => Error::SingularCovariance { index },
            other => other,
        })
    }

    /// Checks the per-gaussian invariants: finite parameters and unit
    /// quaternions.
    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gaussian {i} has non-finite parameters")));
            }
            let n = g.rotation.norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("gaussian {i} quaternion norm {n}")));
            }
        }
        Ok(())
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: {values:?}")))
    }
}

/// Σ = R S Sᵀ Rᵀ with S = diag(max(exp(log_scale), MIN_SCALE)). The
/// quaternion is normalized before use.
pub fn build_covariance(rotation: &Quat, log_scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_finite("rotation", rotation.as_slice())?;
    check_finite("log_scale", log_scale.as_slice())?;
    let n = rotation.norm();
    if n == 0.0 {
        return Err(Error::NonFinite("zero quaternion".into()));
    }
    let r = quat_to_matrix(&(rotation / n));
    let s = log_scale.map(|l| l.exp().max(MIN_SCALE));
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // Exact symmetry.
    Ok((cov + cov.transpose()) * 0.5)
}

/// Normalized gaussian density at `x`.
pub fn eval_density(g: &Gaussian3D, x: &Vector3<f64>) -> Result<f64> {
    let cov = g.covariance()?;
    check_finite("x", x.as_slice())?;
    let chol = cov.cholesky().ok_or(Error::SingularCovariance { index: 0 })?;
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::SingularCovariance { index: 0 });
    }
    let d = x - g.position;
    let maha = d.dot(&chol.solve(&d));
    let norm = (2.0 * std::f64::consts::PI).powf(1.5) * det.sqrt();
    Ok((-0.5 * maha).exp() / norm)
}

/// KL(g0 ‖ g1) from dense covariances with a general matrix inverse and
/// determinant.
pub fn kl_divergence(g0: &Gaussian3D, g1: &Gaussian3D) -> Result<f64> {
    if g0 == g1 {
        return Ok(0.0);
    }
    let cov0 = g0.covariance()?;
    let cov1 = g1.covariance()?;
    let inv1 = cov1.try_inverse().ok_or(Error::SingularCovariance { index: 1 })?;
    let det0 = cov0.determinant();
    let det1 = cov1.determinant();
    if !(det0 > 0.0 && det1 > 0.0) {
        return Err(Error::SingularCovariance {
            index: if det1 > 0.0 { 0 } else { 1 },
        });
    }
    let dp = g1.position - g0.position;
    let trace = (inv1 * cov0).trace();
    let maha = dp.dot(&(inv1 * dp));
    Ok(0.5 * (trace + (det1 / det0).ln() + maha - 3.0))
}

/// KL(g0 ‖ g1) using the rotation/scale factorization: Σ₁⁻¹ = R S⁻² Rᵀ and
/// ln det Σ = 2 Σ ln sᵢ. No general matrix inverse is formed.
pub fn kl_divergence_fast(g0: &Gaussian3D, g1: &Gaussian3D) -> Result<f64> {
    if g0 == g1 {
        return Ok(0.0);
    }
    for g in [g0, g1] {
        check_finite("rotation", g.rotation.as_slice())?;
        check_finite("log_scale", g.log_scale.as_slice())?;
        check_finite("position", g.position.as_slice())?;
    }
    let r0 = g0.rotation_matrix();
    let r1 = g1.rotation_matrix();
    let s0 = g0.scale();
    let s1 = g1.scale();
    let inv_var1 = s1.map(|s| 1.0 / (s * s));
    if inv_var1.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance { index: 1 });
    }
    // tr(Σ₁⁻¹ Σ₀) = Σᵢⱼ (R₁ᵀR₀)ᵢⱼ² s₀ⱼ² / s₁ᵢ²
    let m = r1.transpose() * r0;
    let mut trace = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            trace += m[(i, j)] * m[(i, j)] * s0[j] * s0[j] * inv_var1[i];
        }
    }
    let local = r1.transpose() * (g1.position - g0.position);
    let maha: f64 = (0..3).map(|i| local[i] * local[i] * inv_var1[i]).sum();
    let log_det_ratio = 2.0 * (0..3).map(|i| s1[i].ln() - s0[i].ln()).sum::<f64>();
    Ok(0.5 * (trace + log_det_ratio + maha - 3.0))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::quat_from_axis_angle;
    use approx::assert_relative_eq;
    use nalgebra::{SymmetricEigen, Vector4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::tests_support::random_gaussian;

    fn iso(position: Vector3<f64>, log_s: f64) -> Gaussian3D {
        Gaussian3D {
            position,
            log_scale: Vector3::repeat(log_s),
            ..Default::default()
        }
    }

    /// Oracle: Σ built with a plain matrix product R·diag(s²)·Rᵀ.
    fn oracle_cov(q: &Quat, ls: &Vector3<f64>) -> Matrix3<f64> {
        let r = quat_to_matrix(&(q / q.norm()));
        let d = Matrix3::from_diagonal(&ls.map(|l| (2.0 * l).exp()));
        r * d * r.transpose()
    }

    #[test]
    fn identity_covariance() {
        let c = build_covariance(&identity_quat(), &Vector3::zeros()).unwrap();
        assert_eq!(c, Matrix3::identity());
    }

    #[test]
    fn rotated_covariance_matches_oracle() {
        let q = quat_from_axis_angle(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let ls = Vector3::new(2f64.ln(), 0.0, 0.0);
        let c = build_covariance(&q, &ls).unwrap();
        assert_relative_eq!(c, oracle_cov(&q, &ls), epsilon = 1e-12);
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_determinant_and_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let c = g.covariance().unwrap();
            assert!((c - c.transpose()).norm() <= 1e-12);
            let expected_det = (2.0 * g.log_scale.sum()).exp();
            assert_relative_eq!(c.determinant(), expected_det, max_relative = 1e-9);
            let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = g.log_scale.iter().map(|l| (2.0 * l).exp()).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(build_covariance(&identity_quat(), &Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(build_covariance(&Vector4::new(f64::INFINITY, 0.0, 0.0, 0.0), &Vector3::zeros()).is_err());
    }

    #[test]
    fn density_values() {
        let g = iso(Vector3::new(0.5, -1.0, 2.0), 0.0);
        let peak = (2.0 * std::f64::consts::PI).powf(-1.5);
        assert_relative_eq!(eval_density(&g, &g.position).unwrap(), peak, epsilon = 1e-15);
        assert_relative_eq!(peak, 0.06349, epsilon = 1e-5);
        let x = g.position + Vector3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(eval_density(&g, &x).unwrap(), peak * (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn anisotropic_density_matches_generic_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = random_gaussian(&mut rng);
            let x = g.position + Vector3::new(0.1, -0.05, 0.2);
            let cov = oracle_cov(&g.rotation, &g.log_scale);
            let inv = cov.try_inverse().unwrap();
            let d = x - g.position;
            let want =
                (-0.5 * d.dot(&(inv * d))).exp() / ((2.0 * std::f64::consts::PI).powf(1.5) * cov.determinant().sqrt());
            let got = eval_density(&g, &x).unwrap();
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "{got} vs {want}");
            assert!(got <= eval_density(&g, &g.position).unwrap());
        }
    }

    #[test]
    fn cloud_density_error_names_index() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(iso(Vector3::zeros(), 0.0));
        cloud.push(Gaussian3D {
            log_scale: Vector3::new(f64::NAN, 0.0, 0.0),
            ..Default::default()
        });
        assert!(cloud.density_at(0, &Vector3::zeros()).is_ok());
        assert!(cloud.density_at(1, &Vector3::zeros()).is_err());
    }

    #[test]
    fn kl_anchor_values() {
        let a = iso(Vector3::zeros(), 0.0);
        let b = iso(Vector3::new(1.0, 0.0, 0.0), 0.0);
        let c = iso(Vector3::zeros(), 2f64.ln());
        for f in [kl_divergence, kl_divergence_fast] {
            assert_eq!(f(&a, &a).unwrap(), 0.0);
            assert!((f(&a, &b).unwrap() - 0.5).abs() < 1e-12);
            let want = 0.5 * (0.75 + 64f64.ln() - 3.0);
            assert!((f(&a, &c).unwrap() - want).abs() < 1e-12);
            assert!((want - 0.95444).abs() < 1e-5);
        }
    }

    #[test]
    fn kl_is_asymmetric_for_anisotropic_pair() {
        let a = Gaussian3D {
            log_scale: Vector3::new(0.0, -1.0, -2.0),
            ..Default::default()
        };
        let b = Gaussian3D {
            position: Vector3::new(0.2, 0.0, 0.0),
            rotation: quat_from_axis_angle(&Vector3::new(0.0, 0.5, 0.0)),
            log_scale: Vector3::new(-1.0, -0.5, 0.0),
            ..Default::default()
        };
        let ab = kl_divergence(&a, &b).unwrap();
        let ba = kl_divergence(&b, &a).unwrap();
        assert!((ab - ba).abs() > 1e-3, "{ab} {ba}");
    }

    #[test]
    fn kl_fast_matches_generic_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            let slow = kl_divergence(&a, &b).unwrap();
            let fast = kl_divergence_fast(&a, &b).unwrap();
            assert!(slow >= -1e-12);
            assert!((slow - fast).abs() <= 1e-9 * slow.abs(), "{slow} vs {fast}");
        }
    }

    #[test]
    fn kl_fast_handles_scale_floor() {
        let a = Gaussian3D {
            log_scale: Vector3::new(-20.0, -14.0, 0.0),
            ..Default::default()
        };
        let b = Gaussian3D {
            position: Vector3::new(1e-6, 0.0, 0.0),
            log_scale: Vector3::new(-13.8, -30.0, -1.0),
            ..Default::default()
        };
        let v = kl_divergence_fast(&a, &b).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn kl_invariant_under_common_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            let rot = quat_from_axis_angle(&Vector3::new(0.3, -1.1, 0.6));
            let rm = quat_to_matrix(&rot);
            let t = Vector3::new(2.0, -0.5, 1.0);
            let move_it = |g: &Gaussian3D| Gaussian3D {
                position: rm * g.position + t,
                rotation: crate::rotation::quat_mul(&rot, &g.rotation),
                ..g.clone()
            };
            let before = kl_divergence(&a, &b).unwrap();
            let after = kl_divergence(&move_it(&a), &move_it(&b)).unwrap();
            assert!((before - after).abs() <= 1e-8 * before.max(1.0));
        }
    }

    #[test]
    fn row_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = random_gaussian(&mut rng);
        g.sh[3] = Vector3::new(0.1, 0.2, 0.3);
        g.raw_opacity = -0.7;
        assert_eq!(Gaussian3D::from_row(&g.to_row()), g);
    }
}
