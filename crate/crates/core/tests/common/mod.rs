#![allow(dead_code)]

use artisplat::camera::Camera;
use artisplat::gaussian::{Gaussian3D, GaussianCloud};
use artisplat::image::Image;
use artisplat::kinematics::nearest_vertex_weights;
use artisplat::kinematics::{Pose, SkinnedTemplate};
use artisplat::loss::{total_loss, LossWeights};
use artisplat::model::{pose_cloud, skinning_backward, DeformNets, DeformOptions, ModelGrads};
use artisplat::rasterizer::{render_backward, render_with_state};
use nalgebra::{DMatrix, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three-joint chain along +x with a handful of skinned vertices.
pub fn chain_template() -> SkinnedTemplate {
    let joints = vec![
        Vector3::zeros(),
        Vector3::new(0.3, 0.0, 0.0),
        Vector3::new(0.6, 0.0, 0.0),
    ];
    let mut vertices = Vec::new();
    let mut weights = Vec::new();
    for i in 0..9 {
        let x = i as f64 * 0.09;
        vertices.push(Vector3::new(x, 0.02 * (i % 3) as f64 - 0.02, 0.0));
        let mut w = vec![0.0; 3];
        let t = (x / 0.3).min(1.999);
        let j = t.floor() as usize;
        let f = t - j as f64;
        w[j] = 1.0 - f;
        w[j + 1] = f;
        weights.push(w);
    }
    SkinnedTemplate::new(vec![None, Some(0), Some(1)], joints, vertices, weights).unwrap()
}

/// Small fully-randomized scene for gradient checks.
#[derive(Clone)]
pub struct GradScene {
    pub template: SkinnedTemplate,
    pub cloud: GaussianCloud,
    pub nets: DeformNets,
    pub opts: DeformOptions,
    pub pose: Pose,
    pub camera: Camera,
    pub background: Vector3<f64>,
    pub target: Image,
    pub mask: Image,
}

fn randomize_output(m: &mut DMatrix<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for v in m.iter_mut() {
        *v = rng.random_range(-scale..scale);
    }
}

impl GradScene {
    pub fn new(seed: u64, opts: DeformOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = chain_template();
        let mut cloud = GaussianCloud::new(3);
        for i in 0..4 {
            let mut sh = [Vector3::zeros(); 16];
            for (k, c) in sh.iter_mut().enumerate() {
                let s = if k == 0 { 1.0 } else { 0.3 };
                *c = Vector3::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                );
            }
            cloud.push(Gaussian3D {
                position: Vector3::new(
                    0.1 + 0.15 * i as f64 + rng.random_range(-0.03..0.03),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
                rotation: Vector4::new(
                    rng.random_range(0.5..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
                log_scale: Vector3::new(
                    rng.random_range(-3.2..-2.2),
                    rng.random_range(-3.2..-2.2),
                    rng.random_range(-3.2..-2.2),
                ),
                raw_opacity: rng.random_range(-1.0..1.5),
                sh,
            });
        }
        let mut nets = DeformNets::new(&template, seed);
        let last = nets.lbs.mlp.layers.len() - 1;
        randomize_output(&mut nets.lbs.mlp.layers[last].weight, &mut rng, 0.1);
        let last = nets.pose.mlp.layers.len() - 1;
        randomize_output(&mut nets.pose.mlp.layers[last].weight, &mut rng, 0.02);
        let mut pose = Pose::zero(3);
        for r in &mut pose.joint_rotations {
            *r = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
        }
        pose.root_translation = Vector3::new(0.0, 0.02, 0.0);
        let camera = Camera::look_at(
            Vector3::new(0.3, 0.1, 1.2),
            Vector3::new(0.3, 0.0, 0.0),
            Vector3::y(),
            0.9,
            32,
            32,
        )
        .unwrap();
        let target = Image::from_data(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mask = Image::from_data(
            32,
            32,
            1,
            (0..32 * 32)
                .map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        Self {
            template,
            cloud,
            nets,
            opts,
            pose,
            camera,
            background: Vector3::new(0.1, 0.2, 0.05),
            target,
            mask,
        }
    }
}

pub fn loss_of(s: &GradScene) -> f64 {
    let frame = pose_cloud(&s.template, &s.cloud, &s.nets, &s.opts, &s.pose).unwrap();
    let (out, _) = render_with_state(&frame.scene, &s.camera, &s.background);
    total_loss(&out, &s.target, &s.mask, &LossWeights::default())
        .unwrap()
        .total
}

pub fn grads_of(s: &GradScene) -> ModelGrads {
    let frame = pose_cloud(&s.template, &s.cloud, &s.nets, &s.opts, &s.pose).unwrap();
    let (out, state) = render_with_state(&frame.scene, &s.camera, &s.background);
    let l = total_loss(&out, &s.target, &s.mask, &LossWeights::default()).unwrap();
    let g = render_backward(&frame.scene, &s.camera, &state, &l.d_color, &l.d_alpha);
    skinning_backward(&s.template, &s.cloud, &s.nets, &s.opts, &s.pose, &frame, &g)
}

pub const EPS: f64 = 1e-4;
/// Network weights sit behind ReLU kinks, so those checks use a smaller step.
pub const NET_EPS: f64 = 1e-6;
/// The offset encoding reaches frequency 2⁹π; position steps through it
/// must stay far below one period of the fastest band.
pub const ENCODING_EPS: f64 = 1e-7;

/// Relative error with the denominator floored at 1e-4, so components
/// that are tiny next to the rest of the gradient are judged on absolute
/// truncation error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn check_tol(name: &str, analytic: f64, fd: f64, tol: f64, worst: &mut f64) {
    let e = rel_err(analytic, fd);
    assert!(e < tol, "{name}: analytic {analytic:e} vs fd {fd:e} (rel {e:e})");
    *worst = worst.max(e);
}

pub fn check(name: &str, analytic: f64, fd: f64, worst: &mut f64) {
    check_tol(name, analytic, fd, 1e-4, worst);
}

/// Base skinning weights come from the nearest template vertex and are
/// piecewise constant; a position step that changes that vertex straddles
/// a jump and is not differentiable.
pub fn crosses_vertex_boundary(s: &GradScene, i: usize, axis: usize, eps: f64) -> bool {
    let mut p = s.cloud.get(i).position;
    p[axis] += eps;
    let mut m = s.cloud.get(i).position;
    m[axis] -= eps;
    nearest_vertex_weights(&s.template, &p).1 != nearest_vertex_weights(&s.template, &m).1
}

pub fn blend_counts(s: &GradScene) -> Vec<u32> {
    let frame = pose_cloud(&s.template, &s.cloud, &s.nets, &s.opts, &s.pose).unwrap();
    let (_, state) = render_with_state(&frame.scene, &s.camera, &s.background);
    state.blend_counts().to_vec()
}

/// Central difference, or `None` when the two probes blend a different set
/// of splats somewhere (a splat crossing the α = 1/255 cut or the
/// transmittance stop), which makes the loss jump.
pub fn central_with<F: FnMut(&mut GradScene, f64)>(s: &GradScene, eps: f64, mut set: F) -> Option<f64> {
    let mut p = s.clone();
    set(&mut p, eps);
    let mut m = s.clone();
    set(&mut m, -eps);
    if blend_counts(&p) != blend_counts(&m) {
        return None;
    }
    Some((loss_of(&p) - loss_of(&m)) / (2.0 * eps))
}

pub fn central<F: FnMut(&mut GradScene, f64)>(s: &GradScene, set: F) -> Option<f64> {
    central_with(s, EPS, set)
}
