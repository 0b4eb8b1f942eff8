//! Training losses and image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rasterizer::RenderOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 0.5,
            lambda_ssim: 0.01,
        }
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

fn mse_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let loss = mse(a, b)?;
    let scale = 2.0 / a.data.len() as f64;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| scale * (x - y)).collect();
    Ok((loss, Image::from_data(a.width, a.height, a.channels, data)?))
}

/// Mean squared error over all pixels and channels.
pub fn color_loss(pred: &Image, target: &Image) -> Result<f64> {
    mse(pred, target)
}

pub fn color_loss_grad(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    mse_with_grad(pred, target)
}

/// Mean squared error between the accumulated alpha and the mask.
pub fn mask_loss(alpha: &Image, mask: &Image) -> Result<f64> {
    mse(alpha, mask)
}

pub fn mask_loss_grad(alpha: &Image, mask: &Image) -> Result<(f64, Image)> {
    mse_with_grad(alpha, mask)
}

/// 10·log10(1 / MSE), capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a w×h plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (t, kv) in k.iter().enumerate() {
            let src = &rows[(y + t) * ow..(y + t + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an (w−10)×(h−10) map back to w×h.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for (t, kv) in k.iter().enumerate() {
            let src = &map[y * ow..(y + 1) * ow];
            let dst = &mut rows[(y + t) * ow..(y + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (t, kv) in k.iter().enumerate() {
                dst[x + t] += kv * v;
            }
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let exx = filter_valid(&xx, w, h, &k);
    let eyy = filter_valid(&yy, w, h, &k);
    let exy = filter_valid(&xy, w, h, &k);
    let m = mx.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
        (vec![0.0; m], vec![0.0; m], vec![0.0; m])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for q in 0..m {
        let (ux, uy) = (mx[q], my[q]);
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * (exy[q] - ux * uy) + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = (exx[q] - ux * ux) + (eyy[q] - uy * uy) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            g_mu[q] = 2.0 * uy * (d_a1 - d_a2) + 2.0 * ux * (d_b1 - d_b2);
            g_xx[q] = d_b2;
            g_xy[q] = 2.0 * d_a2;
        }
    }
    let mean = total / m as f64;
    if !want_grad {
        return (mean, None);
    }
    let inv = 1.0 / m as f64;
    let a_mu = filter_valid_adjoint(&g_mu, w, h, &k);
    let a_xx = filter_valid_adjoint(&g_xx, w, h, &k);
    let a_xy = filter_valid_adjoint(&g_xy, w, h, &k);
    let grad = (0..w * h)
        .map(|p| inv * (a_mu[p] + 2.0 * x[p] * a_xx[p] + y[p] * a_xy[p]))
        .collect();
    (mean, Some(grad))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {}x{}",
            a.width, a.height
        )));
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let pa = a.channel(c).data;
        let pb = b.channel(c).data;
        let (s, g) = ssim_plane(&pa, &pb, w, h, want_grad);
        total += s;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (p, v) in g.iter().enumerate() {
                out.data[p * ch + c] = v / ch as f64;
            }
        }
    }
    Ok((total / ch as f64, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, valid positions only),
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the first argument.
pub fn ssim_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub color: f64,
    pub mask: f64,
    pub ssim: f64,
    pub d_color: Image,
    pub d_alpha: Image,
}

/// L = color + λ_mask·mask + λ_ssim·(1 − ssim), with gradients on the
/// rendered color and alpha.
pub fn total_loss(pred: &RenderOutput, target: &Image, mask: &Image, w: &LossWeights) -> Result<LossOutput> {
    let (color, mut d_color) = color_loss_grad(&pred.color, target)?;
    let (mask_l, mut d_alpha) = mask_loss_grad(&pred.alpha, mask)?;
    for v in &mut d_alpha.data {
        *v *= w.lambda_mask;
    }
    let mut ssim_v = 1.0;
    if w.lambda_ssim != 0.0 {
        let (s, g) = ssim_grad(&pred.color, target)?;
        ssim_v = s;
        for (d, gv) in d_color.data.iter_mut().zip(&g.data) {
            *d -= w.lambda_ssim * gv;
        }
    }
    Ok(LossOutput {
        total: color + w.lambda_mask * mask_l + w.lambda_ssim * (1.0 - ssim_v),
        color,
        mask: mask_l,
        ssim: ssim_v,
        d_color,
        d_alpha,
    })
}
