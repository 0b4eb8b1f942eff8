//! Adaptive density control: initialization, KL-gated split/clone, merge
//! and articulated pruning.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{kl_divergence_fast, logit, Bookkeeping, Gaussian3D, GaussianCloud};
use crate::kdtree::KdTree;
use crate::kinematics::{distance_to_template, SkinnedTemplate};
use crate::rotation::identity_quat;

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const CLONE_NUDGE: f64 = 0.01;
pub const INIT_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space position-gradient norm (NDC units) above which a
    /// gaussian is a densification candidate.
    pub grad_threshold: f64,
    /// Candidates whose nearest-neighbour KL exceeds this may split or
    /// clone. Zero disables the gate.
    pub kl_split_clone_min: f64,
    pub kl_merge_max: f64,
    /// Split/clone boundary on the largest activated scale, as a fraction
    /// of the scene radius.
    pub scale_split_fraction: f64,
    /// Prune ceiling on the largest activated scale, as a fraction of the
    /// scene radius.
    pub scale_prune_fraction: f64,
    pub opacity_prune_min: f64,
    pub template_distance_max: f64,
    pub merge_scale_factor: f64,
    pub merge_enabled: bool,
    pub densify_interval: usize,
    pub densify_start: usize,
    /// Last step at which densification runs, as a fraction of the total
    /// iteration count.
    pub densify_stop_fraction: f64,
    pub max_gaussians: usize,
    /// Every this many steps, opacities are clamped down to 0.01. Zero
    /// disables the reset.
    pub opacity_reset_interval: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            kl_split_clone_min: 0.4,
            kl_merge_max: 0.1,
            scale_split_fraction: 0.01,
            scale_prune_fraction: 0.1,
            opacity_prune_min: 0.005,
            template_distance_max: 0.1,
            merge_scale_factor: 1.25,
            merge_enabled: true,
            densify_interval: 100,
            densify_start: 100,
            densify_stop_fraction: 0.6,
            max_gaussians: 50_000,
            opacity_reset_interval: 0,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.grad_threshold,
            self.kl_merge_max,
            self.scale_split_fraction,
            self.scale_prune_fraction,
            self.opacity_prune_min,
            self.template_distance_max,
            self.merge_scale_factor,
        ];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config("densification thresholds must be positive".into()));
        }
        if !self.kl_split_clone_min.is_finite() || self.kl_split_clone_min < 0.0 {
            return Err(Error::Config("kl_split_clone_min must be nonnegative".into()));
        }
        if self.kl_split_clone_min > 0.0 && self.kl_merge_max >= self.kl_split_clone_min {
            return Err(Error::Config("kl_merge_max must be below kl_split_clone_min".into()));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.densify_stop_fraction) {
            return Err(Error::Config("densify_stop_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Whether densification runs after `step` (1-based) of `iterations`.
    pub fn is_densify_step(&self, step: usize, iterations: usize) -> bool {
        let stop = (self.densify_stop_fraction * iterations as f64).floor() as usize;
        step >= self.densify_start && step <= stop && step.is_multiple_of(self.densify_interval)
    }
}

fn fresh_gaussian(position: Vector3<f64>, scale: f64) -> Gaussian3D {
    Gaussian3D {
        position,
        rotation: identity_quat(),
        log_scale: Vector3::repeat(scale.ln()),
        raw_opacity: logit(INIT_OPACITY),
        ..Gaussian3D::default()
    }
}

/// Mean distance from each point to its 3 nearest other points, or
/// `fallback` when a point has no neighbours.
fn neighbour_scales(points: &[Vector3<f64>], fallback: f64) -> Vec<f64> {
    let tree = KdTree::new(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.k_nearest(p, 3, Some(i));
            let d = nn.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / nn.len().max(1) as f64;
            if nn.is_empty() || d <= 0.0 {
                fallback
            } else {
                d
            }
        })
        .collect()
}

/// One gaussian per template vertex: isotropic scale from the 3 nearest
/// vertices, opacity 0.1, neutral gray color.
pub fn init_from_template(template: &SkinnedTemplate, default_scale: f64) -> GaussianCloud {
    let scales = neighbour_scales(template.vertices(), default_scale);
    let gaussians = template
        .vertices()
        .iter()
        .zip(scales)
        .map(|(v, s)| fresh_gaussian(*v, s))
        .collect();
    GaussianCloud::from_gaussians(gaussians, 0)
}

/// `count` gaussians uniformly distributed in the template's bounding box,
/// otherwise initialized like [`init_from_template`].
pub fn init_random(template: &SkinnedTemplate, count: usize, default_scale: f64, seed: u64) -> GaussianCloud {
    let (lo, hi) = template.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vector3<f64>> = (0..count)
        .map(|_| {
            Vector3::from_fn(|a, _| {
                if hi[a] > lo[a] {
                    Uniform::new(lo[a], hi[a]).expect("valid range").sample(&mut rng)
                } else {
                    lo[a]
                }
            })
        })
        .collect();
    let scales = neighbour_scales(&points, default_scale);
    let gaussians = points
        .into_iter()
        .zip(scales)
        .map(|(p, s)| fresh_gaussian(p, s))
        .collect();
    GaussianCloud::from_gaussians(gaussians, 0)
}

/// For each gaussian, its nearest neighbour by center distance and the KL
/// divergence from it to that neighbour. `None` when the cloud has a
/// single gaussian.
pub fn nearest_pairs(cloud: &GaussianCloud) -> Result<Vec<Option<(usize, f64)>>> {
    let centers: Vec<Vector3<f64>> = cloud.gaussians().iter().map(|g| g.position).collect();
    let tree = KdTree::new(&centers);
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| match tree.nearest(c, Some(i)) {
            Some((j, _)) => Ok(Some((j, kl_divergence_fast(cloud.get(i), cloud.get(j))?))),
            None => Ok(None),
        })
        .collect()
}

/// Two children sampled from the parent's density, each with its scale
/// divided by 1.6.
pub fn split(g: &Gaussian3D, rng: &mut ChaCha8Rng) -> (Gaussian3D, Gaussian3D) {
    let r = g.rotation_matrix();
    let s = g.scale();
    let mut child = || {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let mut c = g.clone();
        c.position = g.position + r * s.component_mul(&z);
        c.log_scale = g.log_scale.add_scalar(-SPLIT_SCALE_DIVISOR.ln());
        c
    };
    let a = child();
    let b = child();
    (a, b)
}

/// A copy moved by 0.01·max scale along `direction` (left in place when
/// the direction is zero).
pub fn clone_gaussian(g: &Gaussian3D, direction: &Vector3<f64>) -> Gaussian3D {
    let mut c = g.clone();
    if let Some(d) = direction.try_normalize(0.0) {
        let step = CLONE_NUDGE * g.log_scale.max().exp();
        c.position = g.position + d * step;
    }
    c
}

/// Position, opacity logit and SH are averaged; rotation and scale come
/// from `g0`, with the scale multiplied by `factor`.
pub fn merge(g0: &Gaussian3D, g1: &Gaussian3D, factor: f64) -> Gaussian3D {
    let mut m = g0.clone();
    m.position = 0.5 * (g0.position + g1.position);
    m.raw_opacity = 0.5 * (g0.raw_opacity + g1.raw_opacity);
    for (k, c) in m.sh.iter_mut().enumerate() {
        *c = 0.5 * (g0.sh[k] + g1.sh[k]);
    }
    m.log_scale = g0.log_scale.add_scalar(factor.ln());
    m
}

pub fn should_prune(g: &Gaussian3D, template: &SkinnedTemplate, cfg: &DensifyConfig, scene_radius: f64) -> bool {
    g.opacity() < cfg.opacity_prune_min
        || g.max_scale() > cfg.scale_prune_fraction * scene_radius
        || distance_to_template(template, &g.position) > cfg.template_distance_max
}

/// Removes low-opacity, oversized and off-template gaussians. Returns the
/// number removed.
pub fn prune(
    cloud: &mut GaussianCloud,
    template: &SkinnedTemplate,
    cfg: &DensifyConfig,
    scene_radius: f64,
) -> Result<usize> {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| !should_prune(cloud.get(i), template, cfg, scene_radius))
        .collect();
    let removed = cloud.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if removed > 0 {
        *cloud = cloud.gather(&keep);
    }
    Ok(removed)
}

/// Clamps every opacity to at most 0.01.
pub fn reset_opacity(cloud: &mut GaussianCloud) {
    let cap = logit(0.01);
    for (g, _) in cloud.iter_mut() {
        g.raw_opacity = g.raw_opacity.min(cap);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub step: usize,
    pub count_before: usize,
    pub n_split: usize,
    pub n_clone: usize,
    pub n_merge: usize,
    pub n_prune: usize,
    pub count_after: usize,
}

impl DensifyEvent {
    pub const CSV_HEADER: &'static str = "step,count_before,n_split,n_clone,n_merge,n_prune,count_after";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.count_before, self.n_split, self.n_clone, self.n_merge, self.n_prune, self.count_after
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Keep,
    Split,
    Clone,
    Merge,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One round of density control using the statistics accumulated in the
/// cloud's bookkeeping since the last round. New gaussians start with zero
/// optimizer moments; statistics are reset afterwards.
pub fn densify_step(
    cloud: &mut GaussianCloud,
    template: &SkinnedTemplate,
    cfg: &DensifyConfig,
    scene_radius: f64,
    step: usize,
    seed: u64,
) -> Result<DensifyEvent> {
    let count_before = cloud.len();
    let scale_split = cfg.scale_split_fraction * scene_radius;
    let pairs = if cloud.len() >= 2 {
        nearest_pairs(cloud)?
    } else {
        vec![None; cloud.len()]
    };
    let mut actions = vec![Action::Keep; cloud.len()];
    let mut budget = cfg.max_gaussians.saturating_sub(cloud.len());
    let mut merge_candidates = Vec::new();
    for i in 0..cloud.len() {
        if cloud.bookkeeping()[i].mean_grad2d() <= cfg.grad_threshold {
            continue;
        }
        let kl = pairs[i].map(|(_, kl)| kl);
        let large = cloud.get(i).max_scale() > scale_split;
        let open = match kl {
            Some(kl) => cfg.kl_split_clone_min <= 0.0 || kl > cfg.kl_split_clone_min,
            None => true,
        };
        if open {
            if budget > 0 {
                actions[i] = if large { Action::Split } else { Action::Clone };
                budget -= 1;
            }
        } else if let (Some((j, kl)), false, true) = (pairs[i], large, cfg.merge_enabled) {
            if kl < cfg.kl_merge_max {
                merge_candidates.push((i.min(j), i.max(j)));
            }
        }
    }
    merge_candidates.sort_unstable();
    let mut merges = Vec::new();
    for (a, b) in merge_candidates {
        if actions[a] == Action::Keep && actions[b] == Action::Keep {
            actions[a] = Action::Merge;
            actions[b] = Action::Merge;
            merges.push((a, b));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, step));
    let mut next = GaussianCloud::new(cloud.sh_degree);
    let mut added = Vec::new();
    let (mut n_split, mut n_clone) = (0, 0);
    for (i, action) in actions.iter().enumerate() {
        let g = cloud.get(i);
        let book = &cloud.bookkeeping()[i];
        match action {
            Action::Keep => next.push_with(g.clone(), book.clone()),
            Action::Split => {
                let (a, b) = split(g, &mut rng);
                added.push(a);
                added.push(b);
                n_split += 1;
            }
            Action::Clone => {
                next.push_with(g.clone(), book.clone());
                added.push(clone_gaussian(g, &(-book.pos_grad_sum)));
                n_clone += 1;
            }
            Action::Merge => {}
        }
    }
    for &(a, b) in &merges {
        added.push(merge(cloud.get(a), cloud.get(b), cfg.merge_scale_factor));
    }
    for g in added {
        next.push_with(g, Bookkeeping::default());
    }
    let n_prune = prune(&mut next, template, cfg, scene_radius)?;
    next.reset_stats();
    next.validate()?;
    *cloud = next;
    Ok(DensifyEvent {
        step,
        count_before,
        n_split,
        n_clone,
        n_merge: merges.len(),
        n_prune,
        count_after: cloud.len(),
    })
}
