//! Synthetic articulated scenes with known ground truth.
//!
//! A skeleton preset is dressed with capsule-shaped surfaces: template
//! vertices and ground-truth gaussians are both sampled on them. Frames
//! are rendered from the ground-truth model through the same skinning and
//! rasterization code used for training.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::checkpoint::{save_model, Model};
use crate::dataset::{save_pose, save_split, save_template, CameraRecord, Dataset, FrameRecord, Split};
use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian3D, GaussianCloud};
use crate::image::Image;
use crate::kinematics::{Pose, SkinnedTemplate};
use crate::model::{pose_cloud, DeformNets, DeformOptions};
use crate::rasterizer::render;
use crate::rotation::matrix_to_axis_angle;
use crate::sh::SH_C0;
use crate::train::TrainFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// `biped-15` or `chain-N`.
    pub preset: String,
    pub gaussians_per_bone: usize,
    pub vertices_per_bone: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Peak joint angle of the sinusoidal trajectory, radians.
    pub amplitude: f64,
    /// Total yaw of the root over the sequence, radians.
    pub root_yaw: f64,
    /// Standard deviation of the noise added to the written poses.
    pub noise: f64,
    /// Cameras evenly spaced in azimuth; camera 0 is the training view.
    pub cameras: usize,
    pub camera_distance: f64,
    pub camera_height: f64,
    pub fov_x: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            preset: "biped-15".into(),
            gaussians_per_bone: 60,
            vertices_per_bone: 40,
            frames: 30,
            width: 128,
            height: 128,
            amplitude: 0.4,
            root_yaw: TAU,
            noise: 0.02,
            cameras: 4,
            camera_distance: 3.0,
            camera_height: 0.0,
            fov_x: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gaussians_per_bone == 0 || self.vertices_per_bone == 0 || self.frames == 0 || self.cameras == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        if !(0.0..PI / 2.0).contains(&self.amplitude) {
            return Err(Error::Config("amplitude must lie in [0, pi/2)".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        if !(self.camera_distance > 0.0 && self.fov_x > 0.0 && self.fov_x < PI) {
            return Err(Error::Config("bad camera orbit".into()));
        }
        self.skeleton().map(|_| ())
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        if self.preset == "biped-15" {
            return Ok(biped15());
        }
        if let Some(n) = self.preset.strip_prefix("chain-") {
            let n: usize = n
                .parse()
                .ok()
                .filter(|n| *n >= 1)
                .ok_or_else(|| Error::Config(format!("bad chain length in preset {}", self.preset)))?;
            return Ok(chain(n));
        }
        Err(Error::Config(format!("unknown preset {}", self.preset)))
    }
}

/// A capsule surface rigidly attached to `joint`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub joint: usize,
    pub start: Vector3<f64>,
    pub tip: Vector3<f64>,
    pub radius: f64,
    pub color: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub names: Vec<&'static str>,
    pub parents: Vec<Option<usize>>,
    pub joints: Vec<Vector3<f64>>,
    pub bones: Vec<Bone>,
    /// Bending axis of each joint for the synthetic trajectory.
    pub axes: Vec<Vector3<f64>>,
}

fn chain(n: usize) -> Skeleton {
    let len = 0.3;
    let joints: Vec<Vector3<f64>> = (0..n)
        .map(|i| Vector3::new((i as f64 - 0.5 * n as f64) * len, 0.0, 0.0))
        .collect();
    let bones = (0..n)
        .map(|i| Bone {
            joint: i,
            start: joints[i],
            tip: joints[i] + Vector3::new(len, 0.0, 0.0),
            radius: 0.05,
            color: palette(i),
        })
        .collect();
    Skeleton {
        names: vec!["link"; n],
        parents: (0..n).map(|i| i.checked_sub(1)).collect(),
        joints,
        bones,
        axes: vec![Vector3::z(); n],
    }
}

/// Pelvis root, two spine joints, and hip/knee/ankle and
/// shoulder/elbow/wrist on each side. The head is a second capsule on the
/// upper spine joint.
fn biped15() -> Skeleton {
    let v = Vector3::new;
    let table: [(
        &'static str,
        Option<usize>,
        Vector3<f64>,
        Vector3<f64>,
        f64,
        Vector3<f64>,
    ); 15] = [
        ("pelvis", None, v(0.0, 1.0, 0.0), v(0.0, 1.2, 0.0), 0.13, Vector3::y()),
        (
            "spine1",
            Some(0),
            v(0.0, 1.2, 0.0),
            v(0.0, 1.38, 0.0),
            0.12,
            Vector3::x(),
        ),
        (
            "spine2",
            Some(1),
            v(0.0, 1.38, 0.0),
            v(0.0, 1.53, 0.0),
            0.12,
            Vector3::z(),
        ),
        (
            "l_hip",
            Some(0),
            v(0.09, 0.95, 0.0),
            v(0.09, 0.52, 0.0),
            0.07,
            Vector3::x(),
        ),
        (
            "l_knee",
            Some(3),
            v(0.09, 0.52, 0.0),
            v(0.09, 0.1, 0.0),
            0.055,
            Vector3::x(),
        ),
        (
            "l_ankle",
            Some(4),
            v(0.09, 0.1, 0.0),
            v(0.09, 0.05, 0.16),
            0.04,
            Vector3::x(),
        ),
        (
            "r_hip",
            Some(0),
            v(-0.09, 0.95, 0.0),
            v(-0.09, 0.52, 0.0),
            0.07,
            Vector3::x(),
        ),
        (
            "r_knee",
            Some(6),
            v(-0.09, 0.52, 0.0),
            v(-0.09, 0.1, 0.0),
            0.055,
            Vector3::x(),
        ),
        (
            "r_ankle",
            Some(7),
            v(-0.09, 0.1, 0.0),
            v(-0.09, 0.05, 0.16),
            0.04,
            Vector3::x(),
        ),
        (
            "l_shoulder",
            Some(2),
            v(0.17, 1.46, 0.0),
            v(0.43, 1.46, 0.0),
            0.045,
            Vector3::z(),
        ),
        (
            "l_elbow",
            Some(9),
            v(0.43, 1.46, 0.0),
            v(0.68, 1.46, 0.0),
            0.04,
            Vector3::y(),
        ),
        (
            "l_wrist",
            Some(10),
            v(0.68, 1.46, 0.0),
            v(0.8, 1.46, 0.0),
            0.035,
            Vector3::z(),
        ),
        (
            "r_shoulder",
            Some(2),
            v(-0.17, 1.46, 0.0),
            v(-0.43, 1.46, 0.0),
            0.045,
            Vector3::z(),
        ),
        (
            "r_elbow",
            Some(12),
            v(-0.43, 1.46, 0.0),
            v(-0.68, 1.46, 0.0),
            0.04,
            Vector3::y(),
        ),
        (
            "r_wrist",
            Some(13),
            v(-0.68, 1.46, 0.0),
            v(-0.8, 1.46, 0.0),
            0.035,
            Vector3::z(),
        ),
    ];
    let mut bones: Vec<Bone> = table
        .iter()
        .enumerate()
        .map(|(j, t)| Bone {
            joint: j,
            start: t.2,
            tip: t.3,
            radius: t.4,
            color: palette(j),
        })
        .collect();
    bones.push(Bone {
        joint: 2,
        start: v(0.0, 1.6, 0.0),
        tip: v(0.0, 1.76, 0.0),
        radius: 0.09,
        color: palette(15),
    });
    Skeleton {
        names: table.iter().map(|t| t.0).collect(),
        parents: table.iter().map(|t| t.1).collect(),
        joints: table.iter().map(|t| t.2).collect(),
        bones,
        axes: table.iter().map(|t| t.5).collect(),
    }
}

fn palette(i: usize) -> Vector3<f64> {
    const COLORS: [[f64; 3]; 8] = [
        [0.85, 0.35, 0.3],
        [0.3, 0.6, 0.85],
        [0.35, 0.75, 0.4],
        [0.9, 0.75, 0.3],
        [0.65, 0.4, 0.8],
        [0.3, 0.8, 0.75],
        [0.9, 0.55, 0.7],
        [0.6, 0.6, 0.55],
    ];
    Vector3::from(COLORS[i % COLORS.len()])
}

/// Orthonormal frame (axis, u, v) of a bone.
fn bone_frame(b: &Bone) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let axis = (b.tip - b.start).normalize();
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (axis, u, v)
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Evenly spread surface points of a capsule side: point i sits at height
/// (i + 0.5)/n along the bone and advances by the golden angle around it.
/// Returns (point, outward normal).
fn capsule_points(b: &Bone, n: usize, phase: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let (axis, u, v) = bone_frame(b);
    let len = (b.tip - b.start).norm();
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let phi = phase + i as f64 * GOLDEN_ANGLE;
            let normal = u * phi.cos() + v * phi.sin();
            (b.start + axis * (t * len) + normal * b.radius, normal)
        })
        .collect()
}

/// Normalized inverse-distance weights to the two nearest joints.
fn two_joint_weights(p: &Vector3<f64>, joints: &[Vector3<f64>]) -> Vec<f64> {
    let mut w = vec![0.0; joints.len()];
    if joints.len() == 1 {
        w[0] = 1.0;
        return w;
    }
    let mut d: Vec<(f64, usize)> = joints.iter().enumerate().map(|(j, q)| ((p - q).norm(), j)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (d0, j0) = d[0];
    let (d1, j1) = d[1];
    if d0 == 0.0 {
        w[j0] = 1.0;
        return w;
    }
    let (a, b) = (1.0 / d0, 1.0 / d1);
    w[j0] = a / (a + b);
    w[j1] = b / (a + b);
    w
}

pub fn build_template(skel: &Skeleton, vertices_per_bone: usize) -> Result<SkinnedTemplate> {
    let vertices: Vec<Vector3<f64>> = skel
        .bones
        .iter()
        .flat_map(|b| capsule_points(b, vertices_per_bone, 0.0))
        .map(|(p, _)| p)
        .collect();
    let weights = vertices.iter().map(|p| two_joint_weights(p, &skel.joints)).collect();
    SkinnedTemplate::new(skel.parents.clone(), skel.joints.clone(), vertices, weights)
}

fn rotation_to_quat(r: &Matrix3<f64>) -> nalgebra::Vector4<f64> {
    crate::rotation::quat_from_axis_angle(&matrix_to_axis_angle(r))
}

/// Ground-truth gaussians: flattened discs tangent to each capsule, with
/// per-bone colors varied per gaussian. Values are float32-exact.
pub fn ground_truth_cloud(skel: &Skeleton, per_bone: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(0);
    for b in &skel.bones {
        let (axis, _, _) = bone_frame(b);
        let len = (b.tip - b.start).norm();
        let spacing = (TAU * b.radius * len / per_bone as f64).sqrt();
        for (p, normal) in capsule_points(b, per_bone, 1.0) {
            let tangent = normal.cross(&axis);
            let r = Matrix3::from_columns(&[axis, tangent, normal]);
            let shade = rng.random_range(0.8..1.1);
            let color = (b.color * shade).map(|c| c.clamp(0.02, 0.98));
            let mut g = Gaussian3D {
                position: p,
                rotation: rotation_to_quat(&r),
                log_scale: Vector3::new(0.55 * spacing, 0.55 * spacing, 0.15 * spacing).map(f64::ln),
                raw_opacity: logit(0.9),
                ..Gaussian3D::default()
            };
            g.sh[0] = (color - Vector3::repeat(0.5)) / SH_C0;
            let row = g.to_row().map(|v| v as f32 as f64);
            cloud.push(Gaussian3D::from_row(&row));
        }
    }
    cloud
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Clean pose of frame `f`: sinusoidal bends about each joint's axis and a
/// root yaw advancing linearly over the sequence.
pub fn trajectory_pose(spec: &SyntheticSpec, skel: &Skeleton, f: usize, phases: &[(f64, f64)]) -> Pose {
    let k = skel.joints.len();
    let t = TAU * f as f64 / spec.frames as f64;
    let mut pose = Pose::zero(k);
    for j in 0..k {
        if skel.parents[j].is_none() {
            let yaw = wrap_angle(spec.root_yaw * f as f64 / spec.frames as f64);
            pose.joint_rotations[j] = Vector3::y() * yaw;
        } else {
            let (freq, phase) = phases[j];
            pose.joint_rotations[j] = skel.axes[j] * (spec.amplitude * (freq * t + phase).sin());
        }
    }
    pose
}

/// A generated scene held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub template: SkinnedTemplate,
    pub ground_truth: GaussianCloud,
    pub clean_poses: Vec<Pose>,
    /// The poses handed to training and evaluation.
    pub noisy_poses: Vec<Pose>,
    pub cameras: Vec<Camera>,
    /// `images[f][c]`: quantized color and binary mask of frame f seen
    /// from camera c.
    pub images: Vec<Vec<(Image, Image)>>,
}

fn ground_truth_options() -> DeformOptions {
    DeformOptions {
        lbs_offsets: false,
        pose_refine: false,
        offset_position_grad: false,
    }
}

pub fn orbit_cameras(spec: &SyntheticSpec, target: Vector3<f64>) -> Result<Vec<Camera>> {
    (0..spec.cameras)
        .map(|c| {
            let az = TAU * c as f64 / spec.cameras as f64;
            let eye = target
                + Vector3::new(az.sin(), 0.0, az.cos()) * spec.camera_distance
                + Vector3::y() * spec.camera_height;
            Camera::look_at(eye, target, Vector3::y(), spec.fov_x, spec.width, spec.height)
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let skel = spec.skeleton()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let template = build_template(&skel, spec.vertices_per_bone)?;
    let ground_truth = ground_truth_cloud(&skel, spec.gaussians_per_bone, &mut rng);
    let phases: Vec<(f64, f64)> = (0..skel.joints.len())
        .map(|_| (rng.random_range(1..=2) as f64, rng.random_range(0.0..TAU)))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid noise");
    let clean_poses: Vec<Pose> = (0..spec.frames)
        .map(|f| trajectory_pose(spec, &skel, f, &phases))
        .collect();
    let noisy_poses: Vec<Pose> = clean_poses
        .iter()
        .map(|p| {
            let mut q = p.clone();
            for (j, r) in q.joint_rotations.iter_mut().enumerate() {
                if skel.parents[j].is_some() && spec.noise > 0.0 {
                    *r += Vector3::from_fn(|_, _| noise.sample(&mut rng));
                }
            }
            q
        })
        .collect();
    let (lo, hi) = template.bounds();
    let cameras = orbit_cameras(spec, 0.5 * (lo + hi))?;
    let nets = DeformNets::new(&template, 0);
    let opts = ground_truth_options();
    let background = Vector3::zeros();
    let mut images = Vec::with_capacity(spec.frames);
    for pose in &clean_poses {
        let posed = pose_cloud(&template, &ground_truth, &nets, &opts, pose)?;
        let mut row = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let out = render(&posed.scene, cam, &background);
            let mask_data = out
                .alpha
                .data
                .iter()
                .map(|&a| if a > 0.5 { 1.0 } else { 0.0 })
                .collect();
            let mask = Image::from_data(cam.width, cam.height, 1, mask_data)?;
            row.push((out.color.quantized(), mask));
        }
        images.push(row);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        template,
        ground_truth,
        clean_poses,
        noisy_poses,
        cameras,
        images,
    })
}

impl SyntheticScene {
    fn frames_for(&self, cameras: &[usize], clean: bool) -> Vec<TrainFrame> {
        let poses = if clean { &self.clean_poses } else { &self.noisy_poses };
        let mut out = Vec::new();
        for (f, row) in self.images.iter().enumerate() {
            for &c in cameras {
                out.push(TrainFrame {
                    image: row[c].0.clone(),
                    mask: row[c].1.clone(),
                    camera: self.cameras[c].clone(),
                    pose: poses[f].clone(),
                });
            }
        }
        out
    }

    /// Camera 0 with the (noisy) given poses.
    pub fn train_frames(&self) -> Vec<TrainFrame> {
        self.frames_for(&[0], false)
    }

    /// All other cameras with the given poses.
    pub fn eval_frames(&self) -> Vec<TrainFrame> {
        let cams: Vec<usize> = (1..self.cameras.len()).collect();
        self.frames_for(&cams, false)
    }

    /// Frames from `cameras` posed with the hidden clean poses.
    pub fn clean_frames(&self, cameras: &[usize]) -> Vec<TrainFrame> {
        self.frames_for(cameras, true)
    }

    /// Writes the dataset layout plus a ground-truth checkpoint under
    /// `gt_ckpt/` and the clean poses under `gt_poses/`.
    pub fn write(&self, dir: &Path) -> Result<Dataset> {
        save_template(&dir.join("template.json"), &self.template)?;
        let cameras = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| CameraRecord::from_camera(i, c))
            .collect();
        let mut frames = Vec::new();
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for (f, row) in self.images.iter().enumerate() {
            let pose_name = format!("poses/{f:04}.json");
            save_pose(&dir.join(&pose_name), &self.noisy_poses[f])?;
            save_pose(&dir.join(format!("gt_poses/{f:04}.json")), &self.clean_poses[f])?;
            for (c, (image, mask)) in row.iter().enumerate() {
                let image_name = format!("images/{f:04}_{c}.ppm");
                let mask_name = format!("masks/{f:04}_{c}.pgm");
                image.write_ppm(&dir.join(&image_name))?;
                mask.write_pgm(&dir.join(&mask_name))?;
                if c == 0 {
                    train.push(frames.len());
                } else {
                    eval.push(frames.len());
                }
                frames.push(FrameRecord {
                    image: image_name,
                    mask: mask_name,
                    camera: c,
                    pose: pose_name.clone(),
                });
            }
        }
        let ds = Dataset {
            template: "template.json".into(),
            cameras,
            frames,
        };
        ds.save(dir)?;
        save_split(&dir.join("train.json"), &Split { frames: train })?;
        save_split(&dir.join("eval.json"), &Split { frames: eval })?;
        let model = Model {
            template: self.template.clone(),
            cloud: self.ground_truth.clone(),
            nets: DeformNets::new(&self.template, 0),
            deform: ground_truth_options(),
            background: Vector3::zeros(),
            iteration: 0,
        };
        save_model(&dir.join("gt_ckpt"), &model, &self.clean_poses)?;
        crate::io::write_json(&dir.join("spec.json"), &self.spec)?;
        Ok(ds)
    }
}
