//! The articulated model: canonical gaussians, the skinned template and
//! the two deformation networks, with the full skinning chain and its
//! reverse pass down to canonical parameters and network weights.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    build_covariance, sigmoid, GaussianCloud, ParamRow, MIN_SCALE, OFF_OPACITY, OFF_POSITION, OFF_ROTATION, OFF_SCALE,
    OFF_SH, PARAM_LEN,
};
use crate::kinematics::{
    blend_transforms_unchecked, forward_kinematics_backward, forward_kinematics_local, nearest_vertex_weights,
    JointTransforms, Pose, SkinnedTemplate,
};
use crate::nets::{
    compute_lbs_weights, compute_lbs_weights_backward, LbsOffsetNet, MlpCache, MlpGrads, PoseRefineNet, PoseRefinement,
};
use crate::rasterizer::{PosedScene, SceneGradients};
use crate::rotation::{normalize_quat, normalize_quat_backward, quat_to_matrix, quat_to_matrix_backward};
use crate::sh::coeff_count;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformOptions {
    /// Learn skinning-weight offsets on top of nearest-vertex weights.
    pub lbs_offsets: bool,
    /// Learn per-joint rotation corrections.
    pub pose_refine: bool,
    /// Let offset-network gradients reach gaussian positions through the
    /// positional encoding.
    pub offset_position_grad: bool,
}

impl Default for DeformOptions {
    fn default() -> Self {
        Self {
            lbs_offsets: true,
            pose_refine: true,
            offset_position_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformNets {
    pub lbs: LbsOffsetNet,
    pub pose: PoseRefineNet,
}

impl DeformNets {
    pub fn new(template: &SkinnedTemplate, seed: u64) -> Self {
        let k = template.joint_count();
        Self {
            lbs: LbsOffsetNet::new(k, seed),
            pose: PoseRefineNet::new(k.max(2), template.root(), seed.wrapping_add(1)),
        }
    }
}

/// Everything needed to pose and render without evaluating a network.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceCache {
    /// Row-major U×K skinning weights.
    pub weights: Vec<f64>,
    pub joint_count: usize,
    /// Refined pose of every training frame.
    pub poses: Vec<Pose>,
}

impl InferenceCache {
    pub fn float_count(&self) -> usize {
        self.weights.len()
            + self
                .poses
                .iter()
                .map(|p| 3 * p.joint_rotations.len() + 3)
                .sum::<usize>()
    }
}

/// Forward state of one posed frame.
#[derive(Debug, Clone)]
pub struct SkinnedFrame {
    pub scene: PosedScene,
    /// Row-major U×K.
    pub weights: Vec<f64>,
    pub joints: JointTransforms,
    pub refined_pose: Pose,
    local: Vec<Matrix3<f64>>,
    refinement: Option<PoseRefinement>,
    offsets: Option<MlpCache>,
    blended: Vec<Matrix3<f64>>,
    canonical_cov: Vec<Matrix3<f64>>,
}

/// Gradients of a scalar loss with respect to every trainable quantity.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub gaussians: Vec<ParamRow>,
    pub lbs: Option<MlpGrads>,
    pub pose: Option<MlpGrads>,
}

fn validate_inputs(template: &SkinnedTemplate, cloud: &GaussianCloud, pose: &Pose) -> Result<()> {
    if pose.joint_rotations.len() != template.joint_count() {
        return Err(Error::Shape(format!(
            "pose has {} joints, template has {}",
            pose.joint_rotations.len(),
            template.joint_count()
        )));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Per-gaussian skinning weights, row-major U×K, plus the offset-network
/// cache when offsets are active.
pub fn skinning_weights(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    nets: &DeformNets,
    opts: &DeformOptions,
) -> Result<(Vec<f64>, Option<MlpCache>)> {
    let k = template.joint_count();
    let mut weights = Vec::with_capacity(cloud.len() * k);
    if !opts.lbs_offsets {
        for g in cloud.gaussians() {
            weights.extend_from_slice(nearest_vertex_weights(template, &g.position).0);
        }
        return Ok((weights, None));
    }
    let positions: Vec<Vector3<f64>> = cloud.gaussians().iter().map(|g| g.position).collect();
    let (offsets, cache) = nets.lbs.forward(&positions)?;
    for (i, p) in positions.iter().enumerate() {
        let base = nearest_vertex_weights(template, p).0;
        weights.extend(compute_lbs_weights(base, offsets.column(i).as_slice()));
    }
    Ok((weights, Some(cache)))
}

fn pose_with(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    weights: Vec<f64>,
    local: Vec<Matrix3<f64>>,
    refined_pose: Pose,
) -> Result<SkinnedFrame> {
    let k = template.joint_count();
    let joints = forward_kinematics_local(template, &local, &refined_pose.root_translation);
    let n = cloud.len();
    let mut scene = PosedScene {
        positions: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        sh: Vec::with_capacity(n),
        sh_degree: cloud.sh_degree,
    };
    let mut blended = Vec::with_capacity(n);
    let mut canonical_cov = Vec::with_capacity(n);
    for (i, g) in cloud.gaussians().iter().enumerate() {
        let cov = build_covariance(&g.rotation, &g.log_scale).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("gaussian {i}: {msg}")),
            other => other,
        })?;
        let (gm, b) = blend_transforms_unchecked(&weights[i * k..(i + 1) * k], &joints);
        scene.push(
            gm * g.position + b,
            gm * cov * gm.transpose(),
            sigmoid(g.raw_opacity),
            g.sh,
        );
        blended.push(gm);
        canonical_cov.push(cov);
    }
    Ok(SkinnedFrame {
        scene,
        weights,
        joints,
        refined_pose,
        local,
        refinement: None,
        offsets: None,
        blended,
        canonical_cov,
    })
}

/// Poses the canonical cloud for `pose`, evaluating the deformation
/// networks that `opts` enables.
pub fn pose_cloud(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    nets: &DeformNets,
    opts: &DeformOptions,
    pose: &Pose,
) -> Result<SkinnedFrame> {
    validate_inputs(template, cloud, pose)?;
    let (weights, offsets) = skinning_weights(template, cloud, nets, opts)?;
    let (local, refined, refinement) = if opts.pose_refine && template.joint_count() > 1 {
        let r = nets.pose.forward(pose)?;
        (r.local_rotations.clone(), r.refined.clone(), Some(r))
    } else {
        (pose.local_rotations(), pose.clone(), None)
    };
    let mut frame = pose_with(template, cloud, weights, local, refined)?;
    frame.refinement = refinement;
    frame.offsets = offsets;
    Ok(frame)
}

/// Poses the cloud from cached weights and an already refined pose; no
/// network is evaluated.
pub fn pose_cloud_cached(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    weights: &[f64],
    refined_pose: &Pose,
) -> Result<PosedScene> {
    validate_inputs(template, cloud, refined_pose)?;
    if weights.len() != cloud.len() * template.joint_count() {
        return Err(Error::Shape(format!(
            "{} cached weights for {} gaussians and {} joints",
            weights.len(),
            cloud.len(),
            template.joint_count()
        )));
    }
    let frame = pose_with(
        template,
        cloud,
        weights.to_vec(),
        refined_pose.local_rotations(),
        refined_pose.clone(),
    )?;
    Ok(frame.scene)
}

/// Final skinning weights and refined training poses.
pub fn cache_inference_artifacts(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    nets: &DeformNets,
    opts: &DeformOptions,
    poses: &[Pose],
) -> Result<InferenceCache> {
    let (weights, _) = skinning_weights(template, cloud, nets, opts)?;
    let poses = poses
        .iter()
        .map(|p| {
            if opts.pose_refine && template.joint_count() > 1 {
                Ok(nets.pose.forward(p)?.refined)
            } else {
                Ok(p.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceCache {
        weights,
        joint_count: template.joint_count(),
        poses,
    })
}

/// Reverse pass from posed-space gradients to canonical parameters and the
/// enabled networks.
pub fn skinning_backward(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    nets: &DeformNets,
    opts: &DeformOptions,
    pose: &Pose,
    frame: &SkinnedFrame,
    grads: &SceneGradients,
) -> ModelGrads {
    let k = template.joint_count();
    let n = cloud.len();
    let need_weight_grads = frame.offsets.is_some();
    let need_joint_grads = frame.refinement.is_some();
    let mut rows = vec![[0.0; PARAM_LEN]; n];
    let mut d_weights = if need_weight_grads {
        DMatrix::zeros(k, n)
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut d_rot = vec![Matrix3::zeros(); k];
    let mut d_trans = vec![Vector3::zeros(); k];
    let n_sh = coeff_count(cloud.sh_degree);

    for (i, g) in cloud.gaussians().iter().enumerate() {
        let dp_t = grads.positions[i];
        let dcov_t = grads.covariances[i];
        let row = &mut rows[i];
        let o = sigmoid(g.raw_opacity);
        row[OFF_OPACITY] = grads.opacities[i] * o * (1.0 - o);
        for c in 0..n_sh {
            row[OFF_SH + 3 * c..OFF_SH + 3 * c + 3].copy_from_slice(grads.sh[i][c].as_slice());
        }
        if dp_t == Vector3::zeros() && dcov_t == Matrix3::zeros() {
            continue;
        }
        let gm = &frame.blended[i];
        let cov_c = &frame.canonical_cov[i];
        let dp_c = gm.transpose() * dp_t;
        let dcov_c = gm.transpose() * dcov_t * gm;
        row[OFF_POSITION..OFF_POSITION + 3].copy_from_slice(dp_c.as_slice());

        // Σ = sym(M Mᵀ), M = R S.
        let (unit, norm) = normalize_quat(&g.rotation);
        let r = quat_to_matrix(&unit);
        let s = g.scale();
        let m = r * Matrix3::from_diagonal(&s);
        let d_m = (dcov_c + dcov_c.transpose()) * m;
        let d_r = d_m * Matrix3::from_diagonal(&s);
        for a in 0..3 {
            if g.log_scale[a].exp() > MIN_SCALE {
                let ds = r.column(a).dot(&d_m.column(a));
                row[OFF_SCALE + a] = ds * s[a];
            }
        }
        let dq = normalize_quat_backward(&unit, norm, &quat_to_matrix_backward(&unit, &d_r));
        row[OFF_ROTATION..OFF_ROTATION + 4].copy_from_slice(dq.as_slice());

        if need_weight_grads || need_joint_grads {
            let d_g = dp_t * g.position.transpose() + (dcov_t + dcov_t.transpose()) * gm * cov_c;
            let w = &frame.weights[i * k..(i + 1) * k];
            for j in 0..k {
                if need_weight_grads {
                    d_weights[(j, i)] = d_g.dot(&frame.joints.rotations[j]) + dp_t.dot(&frame.joints.translations[j]);
                }
                if need_joint_grads && w[j] != 0.0 {
                    d_rot[j] += d_g * w[j];
                    d_trans[j] += dp_t * w[j];
                }
            }
        }
    }

    let lbs = frame.offsets.as_ref().map(|cache| {
        let mut d_off = DMatrix::zeros(k, n);
        for i in 0..n {
            let d = compute_lbs_weights_backward(&frame.weights[i * k..(i + 1) * k], d_weights.column(i).as_slice());
            d_off.column_mut(i).copy_from_slice(&d);
        }
        let positions: Vec<Vector3<f64>> = cloud.gaussians().iter().map(|g| g.position).collect();
        let (net_grads, d_pos) = nets.lbs.backward(&positions, cache, d_off);
        if opts.offset_position_grad {
            for (row, d) in rows.iter_mut().zip(&d_pos) {
                for a in 0..3 {
                    row[OFF_POSITION + a] += d[a];
                }
            }
        }
        net_grads
    });

    let pose_grads = frame.refinement.as_ref().map(|state| {
        let (d_local, _) = forward_kinematics_backward(template, &frame.local, &frame.joints, &d_rot, &d_trans);
        nets.pose.backward(pose, state, &d_local)
    });

    ModelGrads {
        gaussians: rows,
        lbs,
        pose: pose_grads,
    }
}

/// Euclidean-distance base weights of the template vertex nearest to
/// every gaussian, without offsets.
pub fn base_weights(template: &SkinnedTemplate, cloud: &GaussianCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len() * template.joint_count());
    for g in cloud.gaussians() {
        out.extend_from_slice(nearest_vertex_weights(template, &g.position).0);
    }
    out
}
