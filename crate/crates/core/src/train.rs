//! The optimization loop.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_update, AdamState};
use crate::camera::Camera;
use crate::density::{densify_step, init_from_template, init_random, reset_opacity, DensifyConfig, DensifyEvent};
use crate::error::{Error, Result};
use crate::gaussian::{
    Gaussian3D, GaussianCloud, OFF_OPACITY, OFF_POSITION, OFF_ROTATION, OFF_SCALE, OFF_SH, PARAM_LEN,
};
use crate::image::Image;
use crate::kinematics::{Pose, SkinnedTemplate};
use crate::loss::{psnr, ssim, total_loss, LossWeights};
use crate::model::{pose_cloud, skinning_backward, DeformNets, DeformOptions, ModelGrads};
use crate::rasterizer::{render, render_backward, render_with_state};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Template,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Position rates are multiplied by the scene radius.
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    /// Rate of the DC color coefficient.
    pub lr_sh: f64,
    /// Rate of the higher SH bands.
    pub lr_sh_rest: f64,
    pub lr_lbs_net: f64,
    pub lr_pose_net: f64,
    pub sh_degree_max: usize,
    pub sh_promote_interval: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub loss: LossWeights,
    pub deform: DeformOptions,
    pub densify: DensifyConfig,
    pub init: InitMode,
    /// Gaussian count for random initialization; 0 means one per template
    /// vertex.
    pub init_count: usize,
    /// Scale used when a point has no neighbours.
    pub init_default_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lr_sh_rest: 2.5e-3 / 20.0,
            lr_lbs_net: 1e-5,
            lr_pose_net: 1e-5,
            sh_degree_max: 3,
            sh_promote_interval: 500,
            seed: 0,
            background: [0.0; 3],
            loss: LossWeights::default(),
            deform: DeformOptions::default(),
            densify: DensifyConfig::default(),
            init: InitMode::Template,
            init_count: 0,
            init_default_scale: 0.01,
        }
    }
}

impl TrainConfig {
    /// Parses flat `key = value` lines over the defaults. Nested fields use
    /// dotted keys (`densify.grad_threshold = 3e-4`); values are JSON
    /// literals, with bare words read as strings. `#` starts a comment.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default()).expect("config serializes");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("line {}: unknown key {key}", lineno + 1)))?;
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> String {
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
            match v {
                serde_json::Value::Object(map) => {
                    for (k, v) in map {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, v, out);
                    }
                }
                other => out.push_str(&format!("{prefix} = {other}\n")),
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        let rates = [
            self.lr_position_init,
            self.lr_position_final,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_sh,
            self.lr_sh_rest,
            self.lr_lbs_net,
            self.lr_pose_net,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if self.sh_degree_max > 3 {
            return Err(Error::Config("sh_degree_max must be at most 3".into()));
        }
        if self.loss.lambda_mask < 0.0 || self.loss.lambda_ssim < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        self.densify.validate()
    }

    /// Position learning rate after `step` of the run: exponential
    /// interpolation from the initial to the final rate.
    pub fn position_lr(&self, step: usize, scene_radius: f64) -> f64 {
        let (a, b) = (self.lr_position_init, self.lr_position_final);
        if a <= 0.0 || b <= 0.0 {
            return a * scene_radius;
        }
        let t = (step as f64 / self.iterations as f64).clamp(0.0, 1.0);
        (a.ln() * (1.0 - t) + b.ln() * t).exp() * scene_radius
    }
}

/// One supervised view.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub image: Image,
    /// Single-channel foreground mask.
    pub mask: Image,
    pub camera: Camera,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub count: usize,
    pub ms: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iter,loss,psnr,count,ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.6},{},{:.3}",
            self.iter, self.loss, self.psnr, self.count, self.ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub psnr: f64,
    /// False when the step was skipped because a gradient was non-finite.
    pub applied: bool,
}

/// Model and optimizer state for a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub template: SkinnedTemplate,
    pub cloud: GaussianCloud,
    pub nets: DeformNets,
    /// Completed steps.
    pub step: usize,
    /// Adam step counter of the gaussian parameters.
    pub gaussian_adam_step: u64,
    pub lbs_adam: AdamState,
    pub pose_adam: AdamState,
    pub scene_radius: f64,
    pub skipped_steps: usize,
    pub log: Vec<LogRow>,
    pub events: Vec<DensifyEvent>,
}

fn net_shapes(slices: Vec<&[f64]>) -> Vec<usize> {
    slices.iter().map(|s| s.len()).collect()
}

impl Trainer {
    pub fn new(template: SkinnedTemplate, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let cloud = match cfg.init {
            InitMode::Template => init_from_template(&template, cfg.init_default_scale),
            InitMode::Random => {
                let n = if cfg.init_count == 0 {
                    template.vertices().len()
                } else {
                    cfg.init_count
                };
                init_random(&template, n, cfg.init_default_scale, cfg.seed)
            }
        };
        Self::with_cloud(template, cloud, cfg)
    }

    pub fn with_cloud(template: SkinnedTemplate, cloud: GaussianCloud, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cloud.validate()?;
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let nets = DeformNets::new(&template, cfg.seed);
        let lbs_adam = AdamState::new(&net_shapes(nets.lbs.mlp.slices()));
        let pose_adam = AdamState::new(&net_shapes(nets.pose.mlp.slices()));
        let scene_radius = template.extent().1.max(1e-6);
        Ok(Self {
            cfg,
            template,
            cloud,
            nets,
            step: 0,
            gaussian_adam_step: 0,
            lbs_adam,
            pose_adam,
            scene_radius,
            skipped_steps: 0,
            log: Vec::new(),
            events: Vec::new(),
        })
    }

    fn background(&self) -> Vector3<f64> {
        Vector3::from(self.cfg.background)
    }

    /// Forward, backward and one optimizer update on a single frame.
    pub fn train_step(&mut self, frame: &TrainFrame) -> Result<StepStats> {
        let bg = self.background();
        let posed = pose_cloud(&self.template, &self.cloud, &self.nets, &self.cfg.deform, &frame.pose)?;
        let (out, state) = render_with_state(&posed.scene, &frame.camera, &bg);
        let loss = total_loss(&out, &frame.image, &frame.mask, &self.cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step + 1)));
        }
        let quality = psnr(&out.color, &frame.image)?;
        let g = render_backward(&posed.scene, &frame.camera, &state, &loss.d_color, &loss.d_alpha);
        let grads = skinning_backward(
            &self.template,
            &self.cloud,
            &self.nets,
            &self.cfg.deform,
            &frame.pose,
            &posed,
            &g,
        );
        self.step += 1;
        let finite = grads.gaussians.iter().all(|r| r.iter().all(|v| v.is_finite()))
            && grads.lbs.as_ref().is_none_or(|n| n.is_finite())
            && grads.pose.as_ref().is_none_or(|n| n.is_finite());
        if !finite {
            self.skipped_steps += 1;
            log::warn!("step {}: non-finite gradient, update skipped", self.step);
            return Ok(StepStats {
                loss: loss.total,
                psnr: quality,
                applied: false,
            });
        }

        let half = Vector3::new(0.5 * frame.camera.width as f64, 0.5 * frame.camera.height as f64, 0.0);
        for (i, book) in self.cloud.bookkeeping_mut().iter_mut().enumerate() {
            if g.visible[i] {
                let m = g.mean2d[i];
                book.grad2d_sum += (m.x * half.x).hypot(m.y * half.y);
                book.grad_count += 1;
            }
            book.pos_grad_sum += Vector3::from_column_slice(&grads.gaussians[i][OFF_POSITION..OFF_POSITION + 3]);
        }
        self.apply_updates(&grads);
        self.after_step()?;
        Ok(StepStats {
            loss: loss.total,
            psnr: quality,
            applied: true,
        })
    }

    fn apply_updates(&mut self, grads: &ModelGrads) {
        self.gaussian_adam_step += 1;
        let t = self.gaussian_adam_step;
        let mut lr = [self.cfg.lr_sh_rest; PARAM_LEN];
        let lr_pos = self.cfg.position_lr(self.step, self.scene_radius);
        lr[OFF_POSITION..OFF_POSITION + 3].fill(lr_pos);
        lr[OFF_ROTATION..OFF_ROTATION + 4].fill(self.cfg.lr_rotation);
        lr[OFF_SCALE..OFF_SCALE + 3].fill(self.cfg.lr_scale);
        lr[OFF_OPACITY] = self.cfg.lr_opacity;
        lr[OFF_SH..OFF_SH + 3].fill(self.cfg.lr_sh);
        for ((gauss, book), grad) in self.cloud.iter_mut().zip(&grads.gaussians) {
            let mut row = gauss.to_row();
            for k in 0..PARAM_LEN {
                adam_update(&mut row[k], grad[k], &mut book.adam_m[k], &mut book.adam_v[k], lr[k], t);
            }
            let rotation_changed =
                row[OFF_ROTATION..OFF_ROTATION + 4] != gauss.to_row()[OFF_ROTATION..OFF_ROTATION + 4];
            let mut updated = Gaussian3D::from_row(&row);
            if rotation_changed {
                let n = updated.rotation.norm();
                if n > 0.0 {
                    updated.rotation /= n;
                }
            }
            *gauss = updated;
        }
        if let Some(lbs) = &grads.lbs {
            self.lbs_adam
                .step(self.nets.lbs.mlp.slices_mut(), lbs.slices(), self.cfg.lr_lbs_net);
        }
        if let Some(pose) = &grads.pose {
            self.pose_adam
                .step(self.nets.pose.mlp.slices_mut(), pose.slices(), self.cfg.lr_pose_net);
        }
    }

    fn after_step(&mut self) -> Result<()> {
        let step = self.step;
        if self.cfg.sh_promote_interval > 0
            && step.is_multiple_of(self.cfg.sh_promote_interval)
            && self.cloud.sh_degree < self.cfg.sh_degree_max
        {
            self.cloud.sh_degree += 1;
        }
        let d = &self.cfg.densify;
        if d.is_densify_step(step, self.cfg.iterations) {
            let event = densify_step(
                &mut self.cloud,
                &self.template,
                d,
                self.scene_radius,
                step,
                self.cfg.seed,
            )?;
            log::debug!("densify {}", event.csv_row());
            self.events.push(event);
        }
        if d.opacity_reset_interval > 0
            && step.is_multiple_of(d.opacity_reset_interval)
            && step <= (d.densify_stop_fraction * self.cfg.iterations as f64) as usize
        {
            reset_opacity(&mut self.cloud);
        }
        self.cloud.validate()
    }

    /// Runs the remaining iterations, cycling through `frames` in order.
    /// `on_step` sees every completed step and may stop the run by
    /// returning false.
    pub fn run_with<F: FnMut(&Trainer) -> bool>(&mut self, frames: &[TrainFrame], mut on_step: F) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Config("dataset has no frames".into()));
        }
        while self.step < self.cfg.iterations {
            let frame = &frames[self.step % frames.len()];
            let start = Instant::now();
            let stats = self.train_step(frame)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            self.log.push(LogRow {
                iter: self.step,
                loss: stats.loss,
                psnr: stats.psnr,
                count: self.cloud.len(),
                ms,
            });
            if !on_step(self) {
                break;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, frames: &[TrainFrame]) -> Result<()> {
        self.run_with(frames, |_| true)
    }

    /// Training poses after refinement, in frame order.
    pub fn evaluate(&self, frames: &[TrainFrame]) -> Result<Vec<FrameMetrics>> {
        evaluate(
            &self.template,
            &self.cloud,
            &self.nets,
            &self.cfg.deform,
            &self.background(),
            frames,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders each frame with the live networks and scores it.
pub fn evaluate(
    template: &SkinnedTemplate,
    cloud: &GaussianCloud,
    nets: &DeformNets,
    opts: &DeformOptions,
    background: &Vector3<f64>,
    frames: &[TrainFrame],
) -> Result<Vec<FrameMetrics>> {
    frames
        .iter()
        .map(|f| {
            let posed = pose_cloud(template, cloud, nets, opts, &f.pose)?;
            let out = render(&posed.scene, &f.camera, background);
            Ok(FrameMetrics {
                psnr: psnr(&out.color, &f.image)?,
                ssim: ssim(&out.color, &f.image)?,
            })
        })
        .collect()
}

pub fn mean_metrics(m: &[FrameMetrics]) -> FrameMetrics {
    let n = m.len().max(1) as f64;
    FrameMetrics {
        psnr: m.iter().map(|x| x.psnr).sum::<f64>() / n,
        ssim: m.iter().map(|x| x.ssim).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_override_defaults() {
        let cfg = TrainConfig::from_key_values(
            "# comment\niterations = 10\ndensify.grad_threshold = 3e-4\ninit = random\nbackground = [1, 1, 1]\n",
        )
        .unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.densify.grad_threshold, 3e-4);
        assert_eq!(cfg.init, InitMode::Random);
        assert_eq!(cfg.background, [1.0; 3]);
        assert!(TrainConfig::from_key_values("bogus = 1").is_err());
        assert!(TrainConfig::from_key_values("iterations = 0").is_err());
        let round = TrainConfig::from_key_values(&cfg.to_key_values()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn position_rate_decays_exponentially() {
        let cfg = TrainConfig::default();
        assert!((cfg.position_lr(0, 2.0) - 3.2e-4).abs() < 1e-18);
        assert!((cfg.position_lr(3000, 1.0) - 1.6e-6).abs() < 1e-18);
        assert!((cfg.position_lr(1500, 1.0) - 1.6e-5).abs() < 1e-15);
    }
}
