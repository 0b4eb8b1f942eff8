//! Tile-based differentiable rasterizer for posed 3D gaussians.
//!
//! Pixel (x, y) has its center at (x + 0.5, y + 0.5). Splats are binned
//! into 16×16 tiles, sorted front to back and alpha-composited; the reverse
//! pass walks each pixel's list back to front, recovering transmittance by
//! division, and reduces per-tile gradient buffers in tile order so results
//! are bitwise reproducible.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::image::Image;
use crate::sh::{eval_sh_color, eval_sh_color_backward, SH_MAX_COEFFS};

pub const TILE_SIZE: usize = 16;
/// Added to every screen covariance, in pixels².
pub const COV2D_BLUR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

pub type ShCoeffs = [Vector3<f64>; SH_MAX_COEFFS];

/// Gaussians after skinning: world positions, full world covariances,
/// activated opacities and SH coefficients.
#[derive(Debug, Clone, Default)]
pub struct PosedScene {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
    pub sh_degree: usize,
}

impl PosedScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector3<f64>, covariance: Matrix3<f64>, opacity: f64, sh: ShCoeffs) {
        self.positions.push(position);
        self.covariances.push(covariance);
        self.opacities.push(opacity);
        self.sh.push(sh);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// Inverse covariance entries (a, b, c) of [[a, b], [b, c]].
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub index: usize,
    /// Mahalanobis² beyond which α < 1/255.
    cutoff: f64,
    /// Inclusive pixel range whose centers may receive α ≥ 1/255.
    pixel_min: [usize; 2],
    pixel_max: [usize; 2],
}

impl Splat2D {
    #[inline]
    fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if m > self.cutoff {
            return None;
        }
        let g = (-0.5 * m).exp();
        let alpha = (self.opacity * g).min(ALPHA_MAX);
        (alpha >= ALPHA_MIN).then_some((alpha, g, dx, dy))
    }

    /// Inclusive tile range (tx0, ty0, tx1, ty1).
    pub fn tile_range(&self) -> [usize; 4] {
        [
            self.pixel_min[0] / TILE_SIZE,
            self.pixel_min[1] / TILE_SIZE,
            self.pixel_max[0] / TILE_SIZE,
            self.pixel_max[1] / TILE_SIZE,
        ]
    }
}

/// Projects one posed gaussian. Returns `None` when it lies in front of the
/// near plane, is too transparent to ever reach α = 1/255, or its footprint
/// covers no pixel center.
///
/// The footprint is the exact bounding box of the ellipse where α can reach
/// 1/255, i.e. Mahalanobis radius √(2 ln(255·o)) (≈3.3σ at o = 1).
pub fn project_gaussian(
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    opacity: f64,
    color: Vector3<f64>,
    index: usize,
    cam: &Camera,
) -> Option<Splat2D> {
    let q = cam.to_camera(position);
    if !(q.z > cam.near_clip) {
        return None;
    }
    if !(opacity * 255.0 >= 1.0) {
        return None;
    }
    let t = projection_jacobian(cam, &q) * cam.rotation;
    let cov = t * covariance * t.transpose() + Matrix2::identity() * COV2D_BLUR;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = [
        cov[(1, 1)] / det,
        -0.5 * (cov[(0, 1)] + cov[(1, 0)]) / det,
        cov[(0, 0)] / det,
    ];
    let iz = 1.0 / q.z;
    let mean = Vector2::new(cam.fx * q.x * iz + cam.cx, cam.fy * q.y * iz + cam.cy);
    let r2 = 2.0 * (255.0 * opacity).ln();
    let cutoff = r2 * (1.0 + 1e-9) + 1e-12;
    let half = Vector2::new((cutoff * cov[(0, 0)]).sqrt(), (cutoff * cov[(1, 1)]).sqrt());
    // Pixel centers c + 0.5 inside [mean − half, mean + half].
    let lo = mean - half - Vector2::repeat(0.5);
    let hi = mean + half - Vector2::repeat(0.5);
    let (w, h) = (cam.width as f64, cam.height as f64);
    if !(hi.x >= 0.0 && hi.y >= 0.0 && lo.x <= w - 1.0 && lo.y <= h - 1.0) {
        return None;
    }
    let x0 = lo.x.ceil().max(0.0);
    let y0 = lo.y.ceil().max(0.0);
    let x1 = hi.x.floor().min(w - 1.0);
    let y1 = hi.y.floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(Splat2D {
        mean,
        cov,
        conic,
        depth: q.z,
        opacity,
        color,
        index,
        cutoff,
        pixel_min: [x0 as usize, y0 as usize],
        pixel_max: [x1 as usize, y1 as usize],
    })
}

/// Local affine approximation of the perspective map at camera point q.
fn projection_jacobian(cam: &Camera, q: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / q.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * q.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * q.y * iz2,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, indices into the splat list sorted by (depth, source index).
    pub lists: Vec<Vec<u32>>,
}

pub fn bin_tiles(splats: &[Splat2D], width: usize, height: usize) -> TileBins {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let [tx0, ty0, tx1, ty1] = s.tile_range();
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
        });
    }
    TileBins {
        tiles_x,
        tiles_y,
        lists,
    }
}

struct PixelResult {
    color: Vector3<f64>,
    transmittance: f64,
    n_contrib: u32,
    n_used: u32,
}

#[inline]
fn composite<'a>(
    ordered: impl Iterator<Item = &'a Splat2D>,
    px: f64,
    py: f64,
    background: &Vector3<f64>,
) -> PixelResult {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut n_contrib = 0;
    let mut n_used = 0;
    for (k, s) in ordered.enumerate() {
        let Some((alpha, ..)) = s.alpha_at(px, py) else {
            continue;
        };
        let next = t * (1.0 - alpha);
        if next < TRANSMITTANCE_MIN {
            break;
        }
        color += s.color * (alpha * t);
        t = next;
        n_contrib = k as u32 + 1;
        n_used += 1;
    }
    PixelResult {
        color: color + background * t,
        transmittance: t,
        n_contrib,
        n_used,
    }
}

/// Front-to-back compositing of depth-ordered splats at pixel position
/// `x`. Returns (color, accumulated alpha).
pub fn composite_pixel(ordered: &[Splat2D], x: &Vector2<f64>, background: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let r = composite(ordered.iter(), x.x, x.y, background);
    (r.color, 1.0 - r.transmittance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Three channels; not clamped.
    pub color: Image,
    /// Accumulated opacity 1 − T_final.
    pub alpha: Image,
}

/// Forward intermediates needed by [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderState {
    pub splats: Vec<Splat2D>,
    pub bins: TileBins,
    final_t: Vec<f64>,
    n_contrib: Vec<u32>,
    n_used: Vec<u32>,
    background: Vector3<f64>,
}

impl RenderState {
    /// Number of splats blended into each pixel. Two renders with equal
    /// counts everywhere share the same discrete compositing structure.
    pub fn blend_counts(&self) -> &[u32] {
        &self.n_used
    }
}

/// Per-gaussian gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
    /// dL/d(screen mean) in pixels, for densification statistics.
    pub mean2d: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            covariances: vec![Matrix3::zeros(); n],
            opacities: vec![0.0; n],
            sh: vec![[Vector3::zeros(); SH_MAX_COEFFS]; n],
            mean2d: vec![Vector2::zeros(); n],
            visible: vec![false; n],
        }
    }
}

/// View direction used for SH color: from the camera center to the gaussian.
fn view_offset(position: &Vector3<f64>, cam_center: &Vector3<f64>) -> Vector3<f64> {
    position - cam_center
}

/// Projects and colors every gaussian; culled ones are dropped.
pub fn project_scene(scene: &PosedScene, cam: &Camera) -> Vec<Splat2D> {
    let center = cam.center();
    (0..scene.len())
        .filter_map(|i| {
            let mut s = project_gaussian(
                &scene.positions[i],
                &scene.covariances[i],
                scene.opacities[i],
                Vector3::zeros(),
                i,
                cam,
            )?;
            let dir = view_offset(&scene.positions[i], &center).normalize();
            s.color = eval_sh_color(&scene.sh[i], scene.sh_degree, &dir);
            Some(s)
        })
        .collect()
}

pub fn render(scene: &PosedScene, cam: &Camera, background: &Vector3<f64>) -> RenderOutput {
    render_with_state(scene, cam, background).0
}

fn tile_pixels(tile: usize, bins: &TileBins, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let tx = tile % bins.tiles_x;
    let ty = tile / bins.tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(cam.width);
    let y1 = (y0 + TILE_SIZE).min(cam.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

pub fn render_with_state(scene: &PosedScene, cam: &Camera, background: &Vector3<f64>) -> (RenderOutput, RenderState) {
    let splats = project_scene(scene, cam);
    let bins = bin_tiles(&splats, cam.width, cam.height);
    let per_tile: Vec<Vec<(usize, PixelResult)>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            tile_pixels(tile, &bins, cam)
                .map(|(x, y)| {
                    let r = composite(
                        list.iter().map(|&i| &splats[i as usize]),
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        background,
                    );
                    (y * cam.width + x, r)
                })
                .collect()
        })
        .collect();
    let n = cam.pixel_count();
    let mut color = Image::new(cam.width, cam.height, 3);
    let mut alpha = Image::new(cam.width, cam.height, 1);
    let mut final_t = vec![1.0; n];
    let mut n_contrib = vec![0; n];
    let mut n_used = vec![0; n];
    for (p, r) in per_tile.into_iter().flatten() {
        color.data[3 * p..3 * p + 3].copy_from_slice(r.color.as_slice());
        alpha.data[p] = 1.0 - r.transmittance;
        final_t[p] = r.transmittance;
        n_contrib[p] = r.n_contrib;
        n_used[p] = r.n_used;
    }
    (
        RenderOutput { color, alpha },
        RenderState {
            splats,
            bins,
            final_t,
            n_contrib,
            n_used,
            background: *background,
        },
    )
}

/// Screen-space gradient of one splat: mean (2), conic (a, b, c),
/// opacity, color (3).
type SplatGrad = [f64; 9];

/// Exact reverse pass of [`render_with_state`] given dL/dcolor (3 channels)
/// and dL/dalpha. Culling, tile membership and early termination are held
/// fixed.
pub fn render_backward(
    scene: &PosedScene,
    cam: &Camera,
    state: &RenderState,
    d_color: &Image,
    d_alpha: &Image,
) -> SceneGradients {
    let splats = &state.splats;
    let bins = &state.bins;
    let bg = state.background;
    let per_tile: Vec<Vec<SplatGrad>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let mut grads = vec![[0.0; 9]; list.len()];
            if list.is_empty() {
                return grads;
            }
            for (x, y) in tile_pixels(tile, bins, cam) {
                let p = y * cam.width + x;
                let dc = Vector3::from_column_slice(&d_color.data[3 * p..3 * p + 3]);
                let da = d_alpha.data[p];
                if dc == Vector3::zeros() && da == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t_final = state.final_t[p];
                let mut t = t_final;
                let mut behind = bg;
                for k in (0..state.n_contrib[p] as usize).rev() {
                    let s = &splats[list[k] as usize];
                    let Some((alpha, g, dx, dy)) = s.alpha_at(px, py) else {
                        continue;
                    };
                    let one_minus = 1.0 - alpha;
                    t /= one_minus;
                    let gr = &mut grads[k];
                    let w = alpha * t;
                    gr[6] += w * dc.x;
                    gr[7] += w * dc.y;
                    gr[8] += w * dc.z;
                    let d_alpha_k = t * (s.color - behind).dot(&dc) + da * t_final / one_minus;
                    behind = s.color * alpha + behind * one_minus;
                    if s.opacity * g < ALPHA_MAX {
                        gr[5] += g * d_alpha_k;
                        let dm = -0.5 * alpha * d_alpha_k;
                        let [a, b, c] = s.conic;
                        gr[0] += -2.0 * (a * dx + b * dy) * dm;
                        gr[1] += -2.0 * (b * dx + c * dy) * dm;
                        gr[2] += dx * dx * dm;
                        gr[3] += 2.0 * dx * dy * dm;
                        gr[4] += dy * dy * dm;
                    }
                }
            }
            grads
        })
        .collect();

    let mut splat_grads = vec![[0.0; 9]; splats.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            let acc = &mut splat_grads[bins.lists[tile][k] as usize];
            for c in 0..9 {
                acc[c] += g[c];
            }
        }
    }

    let mut out = SceneGradients::zeros(scene.len());
    let center = cam.center();
    for (s, g) in splats.iter().zip(&splat_grads) {
        let i = s.index;
        out.visible[i] = true;
        let d_mean = Vector2::new(g[0], g[1]);
        out.mean2d[i] = d_mean;
        out.opacities[i] = g[5];
        let d_col = Vector3::new(g[6], g[7], g[8]);
        let offset = view_offset(&scene.positions[i], &center);
        let dp_color = eval_sh_color_backward(&scene.sh[i], scene.sh_degree, &offset, &d_col, &mut out.sh[i]);

        let [a, b, c] = s.conic;
        let conic = Matrix2::new(a, b, b, c);
        let g_conic = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
        let d_cov2 = -(conic * g_conic * conic);

        let q = cam.to_camera(&scene.positions[i]);
        let j = projection_jacobian(cam, &q);
        let t = j * cam.rotation;
        let sigma = &scene.covariances[i];
        out.covariances[i] = t.transpose() * d_cov2 * t;
        let d_t = (d_cov2 + d_cov2.transpose()) * t * sigma;
        let d_j = d_t * cam.rotation.transpose();

        let iz = 1.0 / q.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let (fx, fy) = (cam.fx, cam.fy);
        let dq = Vector3::new(
            d_j[(0, 2)] * (-fx * iz2) + d_mean.x * fx * iz,
            d_j[(1, 2)] * (-fy * iz2) + d_mean.y * fy * iz,
            d_j[(0, 0)] * (-fx * iz2)
                + d_j[(0, 2)] * (2.0 * fx * q.x * iz3)
                + d_j[(1, 1)] * (-fy * iz2)
                + d_j[(1, 2)] * (2.0 * fy * q.y * iz3)
                - d_mean.x * fx * q.x * iz2
                - d_mean.y * fy * q.y * iz2,
        );
        out.positions[i] = cam.rotation.transpose() * dq + dp_color;
    }
    out
}
