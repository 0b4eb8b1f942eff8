//! Checkpoints: a PLY gaussian cloud, flat network weights with a JSON
//! manifest, cached inference artifacts, and an exact optimizer state for
//! resuming.
//!
//! Model files hold float32 values. [`round_to_f32`] snaps a model to that
//! precision first, so a saved and reloaded model renders bit for bit like
//! the one in memory.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::camera::Camera;
use crate::dataset::{load_template, save_template};
use crate::density::DensifyEvent;
use crate::error::{Error, Result};
use crate::gaussian::{Bookkeeping, Gaussian3D, GaussianCloud, PARAM_LEN};
use crate::io::{read_json, write_atomic, write_json};
use crate::kinematics::{Pose, SkinnedTemplate};
use crate::model::{cache_inference_artifacts, pose_cloud_cached, DeformNets, DeformOptions, InferenceCache};
use crate::rasterizer::{render, RenderOutput};
use crate::sh::SH_MAX_COEFFS;
use crate::train::{LogRow, TrainConfig, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const NETS_FILE: &str = "nets.bin";
pub const CACHE_FILE: &str = "cache.bin";
pub const TEMPLATE_FILE: &str = "template.json";
pub const STATE_FILE: &str = "state.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const DENSIFY_LOG_FILE: &str = "densify_log.csv";
const FORMAT_NAME: &str = "artisplat-checkpoint";
const STATE_MAGIC: &[u8; 8] = b"ASPSTAT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub gaussian_count: usize,
    pub sh_degree: usize,
    pub joint_count: usize,
    pub lbs_widths: Vec<usize>,
    pub pose_widths: Vec<usize>,
    pub deform: DeformOptions,
    pub background: [f64; 3],
    pub template: String,
    pub cloud: String,
    pub networks: String,
    pub cache: String,
}

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub template: SkinnedTemplate,
    pub cloud: GaussianCloud,
    pub nets: DeformNets,
    pub deform: DeformOptions,
    pub background: Vector3<f64>,
    pub iteration: usize,
}

impl Model {
    /// The pose the renderer uses for `pose`: refined when the model was
    /// trained with pose refinement.
    pub fn refine(&self, pose: &Pose) -> Result<Pose> {
        if self.deform.pose_refine && self.template.joint_count() > 1 {
            Ok(self.nets.pose.forward(pose)?.refined)
        } else {
            pose.validate()?;
            Ok(pose.clone())
        }
    }

    /// Renders `pose` through cached skinning weights; only the pose network
    /// is evaluated.
    pub fn render_cached(&self, cache: &InferenceCache, pose: &Pose, camera: &Camera) -> Result<RenderOutput> {
        let refined = self.refine(pose)?;
        let scene = pose_cloud_cached(&self.template, &self.cloud, &cache.weights, &refined)?;
        Ok(render(&scene, camera, &self.background))
    }
}

fn round(v: f64) -> f64 {
    v as f32 as f64
}

/// Rounds every gaussian and network parameter to float32 precision.
pub fn round_to_f32(cloud: &mut GaussianCloud, nets: &mut DeformNets) {
    for (g, _) in cloud.iter_mut() {
        let row = g.to_row().map(round);
        *g = Gaussian3D::from_row(&row);
    }
    for s in nets.lbs.mlp.slices_mut().into_iter().chain(nets.pose.mlp.slices_mut()) {
        s.iter_mut().for_each(|v| *v = round(*v));
    }
}

// ---------------------------------------------------------------- PLY

fn ply_property_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((0..3).map(|c| format!("f_dc_{c}")));
    names.extend((0..3 * (SH_MAX_COEFFS - 1)).map(|i| format!("f_rest_{i}")));
    names
}

/// Row of PLY values: position, rotation, log scale, opacity logit, DC
/// color, then the higher SH bands channel by channel.
fn gaussian_to_ply(g: &Gaussian3D) -> Vec<f32> {
    let mut v = Vec::with_capacity(PARAM_LEN);
    v.extend(g.position.iter().map(|&x| x as f32));
    v.extend(g.rotation.iter().map(|&x| x as f32));
    v.extend(g.log_scale.iter().map(|&x| x as f32));
    v.push(g.raw_opacity as f32);
    v.extend(g.sh[0].iter().map(|&x| x as f32));
    for c in 0..3 {
        for k in 1..SH_MAX_COEFFS {
            v.push(g.sh[k][c] as f32);
        }
    }
    v
}

fn gaussian_from_ply(v: &[f32]) -> Gaussian3D {
    let f = |i: usize| v[i] as f64;
    let mut g = Gaussian3D {
        position: Vector3::new(f(0), f(1), f(2)),
        rotation: nalgebra::Vector4::new(f(3), f(4), f(5), f(6)),
        log_scale: Vector3::new(f(7), f(8), f(9)),
        raw_opacity: f(10),
        ..Gaussian3D::default()
    };
    g.sh[0] = Vector3::new(f(11), f(12), f(13));
    for c in 0..3 {
        for k in 1..SH_MAX_COEFFS {
            g.sh[k][c] = f(14 + c * (SH_MAX_COEFFS - 1) + k - 1);
        }
    }
    g
}

pub fn save_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let names = ply_property_names();
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\ncomment sh_degree {}\nelement vertex {}\n",
        cloud.sh_degree,
        cloud.len()
    )
    .into_bytes();
    for n in &names {
        out.extend_from_slice(format!("property float {n}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in cloud.gaussians() {
        for v in gaussian_to_ply(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

fn format_at(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::FormatAt {
        path: path.into(),
        offset,
        msg: msg.into(),
    }
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut count = None;
    let mut sh_degree = 3;
    let mut props = Vec::new();
    let mut first = true;
    loop {
        let line_start = pos;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_at(path, pos, "unterminated PLY header"))?;
        let line =
            std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| format_at(path, pos, "non-text PLY header"))?;
        pos += end + 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        if first {
            if line != "ply" {
                return Err(format_at(path, line_start, "missing 'ply' magic"));
            }
            first = false;
            continue;
        }
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(format_at(path, line_start, format!("unsupported PLY format '{line}'"))),
            ["comment", "sh_degree", d] => {
                sh_degree = d
                    .parse::<usize>()
                    .ok()
                    .filter(|d| *d <= 3)
                    .ok_or_else(|| format_at(path, line_start, "bad sh_degree comment"))?;
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| format_at(path, line_start, "bad vertex count"))?,
                );
            }
            ["element", ..] => return Err(format_at(path, line_start, "unexpected PLY element")),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ..] => return Err(format_at(path, line_start, "only float properties are supported")),
            ["end_header"] => break,
            _ => {
                return Err(format_at(
                    path,
                    line_start,
                    format!("unrecognized header line '{line}'"),
                ))
            }
        }
    }
    let count = count.ok_or_else(|| format_at(path, pos, "PLY header has no vertex element"))?;
    if props != ply_property_names() {
        return Err(format_at(path, pos, "unexpected PLY property layout"));
    }
    let stride = props.len() * 4;
    let need = count * stride;
    if bytes.len() - pos != need {
        return Err(format_at(
            path,
            bytes.len().min(pos + need),
            format!("expected {need} bytes of vertex data, found {}", bytes.len() - pos),
        ));
    }
    let mut cloud = GaussianCloud::new(sh_degree);
    for i in 0..count {
        let rec = &bytes[pos + i * stride..pos + (i + 1) * stride];
        let vals: Vec<f32> = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let g = gaussian_from_ply(&vals);
        if !g.is_finite() {
            return Err(format_at(
                path,
                pos + i * stride,
                format!("gaussian {i} has non-finite values"),
            ));
        }
        cloud.push(g);
    }
    Ok(cloud)
}

// ---------------------------------------------------------------- binary helpers

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_at(self.path, self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, max: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        if n as usize > max {
            return Err(format_at(self.path, at, format!("length {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out {
            *v = self.f64()?;
        }
        Ok(())
    }
    fn f32s(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out {
            *v = f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64;
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_at(self.path, self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- networks and cache

fn save_nets(path: &Path, nets: &DeformNets) -> Result<()> {
    let mut out = Vec::new();
    for s in nets.lbs.mlp.slices().into_iter().chain(nets.pose.mlp.slices()) {
        for v in s {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

fn load_nets(path: &Path, template: &SkinnedTemplate, manifest: &Manifest) -> Result<DeformNets> {
    let mut nets = DeformNets::new(template, 0);
    if nets.lbs.mlp.widths() != manifest.lbs_widths || nets.pose.mlp.widths() != manifest.pose_widths {
        return Err(Error::format(path, "network widths do not match the template"));
    }
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    for s in nets.lbs.mlp.slices_mut().into_iter().chain(nets.pose.mlp.slices_mut()) {
        r.f32s(s)?;
    }
    r.finish()?;
    if !nets.lbs.mlp.is_finite() || !nets.pose.mlp.is_finite() {
        return Err(Error::format(path, "non-finite network weights"));
    }
    Ok(nets)
}

pub fn save_cache(path: &Path, cache: &InferenceCache) -> Result<()> {
    let mut w = Writer::default();
    let k = cache.joint_count;
    w.u64((cache.weights.len() / k.max(1)) as u64);
    w.u64(k as u64);
    w.u64(cache.poses.len() as u64);
    w.f64s(&cache.weights);
    for p in &cache.poses {
        for r in &p.joint_rotations {
            w.f64s(r.as_slice());
        }
        w.f64s(p.root_translation.as_slice());
    }
    write_atomic(path, &w.0)
}

pub fn load_cache(path: &Path) -> Result<InferenceCache> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let cap = bytes.len() / 8;
    let u = r.len(cap)?;
    let k = r.len(cap)?;
    let n_poses = r.len(cap)?;
    let mut weights =
        vec![
            0.0;
            u.checked_mul(k)
                .filter(|n| *n <= cap)
                .ok_or_else(|| format_at(path, 8, "bad cache shape"))?
        ];
    r.f64s(&mut weights)?;
    let mut poses = Vec::with_capacity(n_poses);
    for _ in 0..n_poses {
        let mut flat = vec![0.0; 3 * k + 3];
        r.f64s(&mut flat)?;
        poses.push(Pose {
            joint_rotations: (0..k)
                .map(|j| Vector3::from_column_slice(&flat[3 * j..3 * j + 3]))
                .collect(),
            root_translation: Vector3::from_column_slice(&flat[3 * k..]),
        });
    }
    r.finish()?;
    Ok(InferenceCache {
        weights,
        joint_count: k,
        poses,
    })
}

// ---------------------------------------------------------------- model

/// Writes the model files. The cloud and networks are expected to be
/// float32-exact already (see [`round_to_f32`]); `training_poses` are
/// refined and cached alongside the skinning weights.
pub fn save_model(dir: &Path, model: &Model, training_poses: &[Pose]) -> Result<Manifest> {
    let cache = cache_inference_artifacts(
        &model.template,
        &model.cloud,
        &model.nets,
        &model.deform,
        training_poses,
    )?;
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: 1,
        iteration: model.iteration,
        gaussian_count: model.cloud.len(),
        sh_degree: model.cloud.sh_degree,
        joint_count: model.template.joint_count(),
        lbs_widths: model.nets.lbs.mlp.widths(),
        pose_widths: model.nets.pose.mlp.widths(),
        deform: model.deform,
        background: model.background.into(),
        template: TEMPLATE_FILE.into(),
        cloud: CLOUD_FILE.into(),
        networks: NETS_FILE.into(),
        cache: CACHE_FILE.into(),
    };
    save_template(&dir.join(TEMPLATE_FILE), &model.template)?;
    save_ply(&dir.join(CLOUD_FILE), &model.cloud)?;
    save_nets(&dir.join(NETS_FILE), &model.nets)?;
    save_cache(&dir.join(CACHE_FILE), &cache)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: Manifest = read_json(&path)?;
    if m.format != FORMAT_NAME || m.version != 1 {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint format {} v{}", m.format, m.version),
        ));
    }
    Ok(m)
}

pub fn load_model(dir: &Path) -> Result<(Model, InferenceCache)> {
    let manifest = load_manifest(dir)?;
    let template = load_template(&dir.join(&manifest.template))?;
    let cloud_path = dir.join(&manifest.cloud);
    let mut cloud = load_ply(&cloud_path)?;
    if cloud.len() != manifest.gaussian_count || cloud.sh_degree != manifest.sh_degree {
        return Err(Error::format(
            &cloud_path,
            "gaussian count or SH degree disagrees with the manifest",
        ));
    }
    cloud.sh_degree = manifest.sh_degree;
    if template.joint_count() != manifest.joint_count {
        return Err(Error::format(
            dir.join(&manifest.template),
            "joint count disagrees with the manifest",
        ));
    }
    let nets = load_nets(&dir.join(&manifest.networks), &template, &manifest)?;
    let cache_path = dir.join(&manifest.cache);
    let cache = load_cache(&cache_path)?;
    if cache.joint_count != template.joint_count() || cache.weights.len() != cloud.len() * template.joint_count() {
        return Err(Error::format(&cache_path, "cache shape disagrees with the model"));
    }
    let model = Model {
        template,
        cloud,
        nets,
        deform: manifest.deform,
        background: Vector3::from(manifest.background),
        iteration: manifest.iteration,
    };
    Ok((model, cache))
}

// ---------------------------------------------------------------- trainer state

fn write_adam(w: &mut Writer, s: &AdamState) {
    w.u64(s.step);
    for (m, v) in s.m.iter().zip(&s.v) {
        w.f64s(m);
        w.f64s(v);
    }
}

fn read_adam(r: &mut Reader, s: &mut AdamState) -> Result<()> {
    s.step = r.u64()?;
    for (m, v) in s.m.iter_mut().zip(s.v.iter_mut()) {
        r.f64s(m)?;
        r.f64s(v)?;
    }
    Ok(())
}

/// Exact float64 optimizer state: gaussians with moments and statistics,
/// network weights and moments, counters.
pub fn save_trainer_state(path: &Path, t: &Trainer) -> Result<()> {
    let mut w = Writer::default();
    w.0.extend_from_slice(STATE_MAGIC);
    w.u64(t.step as u64);
    w.u64(t.gaussian_adam_step);
    w.u64(t.skipped_steps as u64);
    w.u64(t.cloud.sh_degree as u64);
    w.u64(t.cloud.len() as u64);
    for (g, b) in t.cloud.gaussians().iter().zip(t.cloud.bookkeeping()) {
        w.f64s(&g.to_row());
        w.f64s(&b.adam_m);
        w.f64s(&b.adam_v);
        w.f64(b.grad2d_sum);
        w.u64(b.grad_count as u64);
        w.f64s(b.pos_grad_sum.as_slice());
    }
    for s in t.nets.lbs.mlp.slices().into_iter().chain(t.nets.pose.mlp.slices()) {
        w.f64s(s);
    }
    write_adam(&mut w, &t.lbs_adam);
    write_adam(&mut w, &t.pose_adam);
    write_atomic(path, &w.0)
}

/// Restores state written by [`save_trainer_state`] into a trainer built
/// from the same template and configuration.
pub fn load_trainer_state(path: &Path, t: &mut Trainer) -> Result<()> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != STATE_MAGIC {
        return Err(format_at(path, 0, "not a trainer state file"));
    }
    let cap = bytes.len();
    t.step = r.u64()? as usize;
    t.gaussian_adam_step = r.u64()?;
    t.skipped_steps = r.u64()? as usize;
    let sh_degree = r.u64()? as usize;
    if sh_degree > 3 {
        return Err(format_at(path, r.pos - 8, "bad SH degree"));
    }
    let n = r.len(cap)?;
    let mut cloud = GaussianCloud::new(sh_degree);
    for _ in 0..n {
        let mut row = [0.0; PARAM_LEN];
        r.f64s(&mut row)?;
        let mut b = Bookkeeping::default();
        r.f64s(&mut b.adam_m)?;
        r.f64s(&mut b.adam_v)?;
        b.grad2d_sum = r.f64()?;
        b.grad_count = r.u64()? as u32;
        let mut p = [0.0; 3];
        r.f64s(&mut p)?;
        b.pos_grad_sum = Vector3::from(p);
        cloud.push_with(Gaussian3D::from_row(&row), b);
    }
    for s in t
        .nets
        .lbs
        .mlp
        .slices_mut()
        .into_iter()
        .chain(t.nets.pose.mlp.slices_mut())
    {
        r.f64s(s)?;
    }
    read_adam(&mut r, &mut t.lbs_adam)?;
    read_adam(&mut r, &mut t.pose_adam)?;
    r.finish()?;
    cloud.validate()?;
    t.cloud = cloud;
    Ok(())
}

// ---------------------------------------------------------------- full checkpoint

pub fn write_train_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut text = String::from(LogRow::CSV_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn write_densify_log(path: &Path, events: &[DensifyEvent]) -> Result<()> {
    let mut text = String::from(DensifyEvent::CSV_HEADER);
    text.push('\n');
    for e in events {
        text.push_str(&e.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// The model a trainer would save: its cloud and networks rounded to
/// float32.
pub fn final_model(t: &Trainer) -> Model {
    let mut cloud = t.cloud.clone();
    let mut nets = t.nets.clone();
    round_to_f32(&mut cloud, &mut nets);
    Model {
        template: t.template.clone(),
        cloud,
        nets,
        deform: t.cfg.deform,
        background: Vector3::from(t.cfg.background),
        iteration: t.step,
    }
}

/// Writes model files, resume state, config and logs for a trainer.
pub fn save_checkpoint(dir: &Path, t: &Trainer, training_poses: &[Pose]) -> Result<Manifest> {
    let manifest = save_model(dir, &final_model(t), training_poses)?;
    save_trainer_state(&dir.join(STATE_FILE), t)?;
    write_atomic(&dir.join(CONFIG_FILE), t.cfg.to_key_values().as_bytes())?;
    write_train_log(&dir.join(TRAIN_LOG_FILE), &t.log)?;
    write_densify_log(&dir.join(DENSIFY_LOG_FILE), &t.events)?;
    Ok(manifest)
}

/// Rebuilds a trainer from a checkpoint directory so training can continue.
/// Logs are not restored.
pub fn resume_trainer(dir: &Path, cfg: TrainConfig) -> Result<Trainer> {
    let template = load_template(&dir.join(TEMPLATE_FILE))?;
    let mut t = Trainer::new(template, cfg)?;
    load_trainer_state(&dir.join(STATE_FILE), &mut t)?;
    Ok(t)
}
