//! Central finite-difference checks of the full render-and-skin chain.

mod common;

use artisplat::gaussian::{OFF_OPACITY, OFF_POSITION, OFF_ROTATION, OFF_SCALE, OFF_SH};
use artisplat::model::{pose_cloud, skinning_backward, DeformOptions};
use artisplat::rasterizer::{render_backward, render_with_state};

use common::*;

#[test]
fn gaussian_parameters_match_finite_differences() {
    for seed in 0..3 {
        // Offsets are evaluated on detached positions, so the offset head
        // keeps its zero output layer here: positions then have no path
        // through the encoding in either the analytic or numeric gradient.
        let mut s = GradScene::new(seed, DeformOptions::default());
        s.nets.lbs = artisplat::nets::LbsOffsetNet::new(s.template.joint_count(), seed);
        let g = grads_of(&s);
        let mut worst: f64 = 0.0;
        let mut nonzero = 0;
        let mut skipped = 0;
        for i in 0..s.cloud.len() {
            let mut offsets: Vec<(String, usize)> = Vec::new();
            for a in 0..3 {
                offsets.push((format!("position[{a}]"), OFF_POSITION + a));
                offsets.push((format!("log_scale[{a}]"), OFF_SCALE + a));
            }
            for a in 0..4 {
                offsets.push((format!("rotation[{a}]"), OFF_ROTATION + a));
            }
            offsets.push(("raw_opacity".into(), OFF_OPACITY));
            for k in 0..16 {
                offsets.push((format!("sh[{k}].r"), OFF_SH + 3 * k));
            }
            for (name, off) in offsets {
                if off < OFF_POSITION + 3 && crosses_vertex_boundary(&s, i, off - OFF_POSITION, EPS) {
                    continue;
                }
                let Some(fd) = central(&s, |sc, h| {
                    let mut row = sc.cloud.get(i).to_row();
                    row[off] += h;
                    sc.cloud.gaussians_mut()[i] = artisplat::gaussian::Gaussian3D::from_row(&row);
                }) else {
                    skipped += 1;
                    continue;
                };
                let a = g.gaussians[i][off];
                if a.abs() > 1e-6 {
                    nonzero += 1;
                }
                check(&format!("seed {seed} gaussian {i} {name}"), a, fd, &mut worst);
            }
        }
        assert!(nonzero > 40, "too few informative gradients: {nonzero}");
        assert!(skipped < 10, "{skipped} probes straddled a discontinuity");
    }
}

#[test]
fn network_parameters_match_finite_differences() {
    let s = GradScene::new(11, DeformOptions::default());
    let g = grads_of(&s);
    let lbs = g.lbs.as_ref().unwrap();
    let pose = g.pose.as_ref().unwrap();
    let mut worst: f64 = 0.0;
    for (l, layer) in s.nets.lbs.mlp.layers.iter().enumerate() {
        let n = layer.weight.len();
        for idx in (0..n).step_by(n / 12 + 1) {
            let Some(fd) = central_with(&s, NET_EPS, |sc, h| {
                sc.nets.lbs.mlp.layers[l].weight.as_mut_slice()[idx] += h
            }) else {
                continue;
            };
            check(
                &format!("lbs w{l}[{idx}]"),
                lbs.layers[l].weight.as_slice()[idx],
                fd,
                &mut worst,
            );
        }
        for idx in 0..layer.bias.len().min(6) {
            let Some(fd) = central_with(&s, NET_EPS, |sc, h| sc.nets.lbs.mlp.layers[l].bias[idx] += h) else {
                continue;
            };
            check(&format!("lbs b{l}[{idx}]"), lbs.layers[l].bias[idx], fd, &mut worst);
        }
    }
    for (l, layer) in s.nets.pose.mlp.layers.iter().enumerate() {
        let n = layer.weight.len();
        for idx in (0..n).step_by(n / 12 + 1) {
            let Some(fd) = central_with(&s, NET_EPS, |sc, h| {
                sc.nets.pose.mlp.layers[l].weight.as_mut_slice()[idx] += h
            }) else {
                continue;
            };
            check(
                &format!("pose w{l}[{idx}]"),
                pose.layers[l].weight.as_slice()[idx],
                fd,
                &mut worst,
            );
        }
        for idx in 0..layer.bias.len().min(6) {
            let Some(fd) = central_with(&s, NET_EPS, |sc, h| sc.nets.pose.mlp.layers[l].bias[idx] += h) else {
                continue;
            };
            check(&format!("pose b{l}[{idx}]"), pose.layers[l].bias[idx], fd, &mut worst);
        }
    }
}

#[test]
fn offset_gradient_reaches_positions_when_enabled() {
    let opts = DeformOptions {
        offset_position_grad: true,
        ..DeformOptions::default()
    };
    let s = GradScene::new(5, opts);
    let g = grads_of(&s);
    let mut worst: f64 = 0.0;
    for i in 0..s.cloud.len() {
        for a in 0..3 {
            if crosses_vertex_boundary(&s, i, a, ENCODING_EPS) {
                continue;
            }
            let Some(fd) = central_with(&s, ENCODING_EPS, |sc, h| sc.cloud.gaussians_mut()[i].position[a] += h) else {
                continue;
            };
            // The 384 ReLU units behind the encoding leave kink noise in any
            // finite difference, hence the looser bound on this optional path.
            let a_val = g.gaussians[i][OFF_POSITION + a];
            check_tol(&format!("gaussian {i} position[{a}]"), a_val, fd, 1e-3, &mut worst);
        }
    }
}

#[test]
fn zero_upstream_gradient_gives_zero() {
    let s = GradScene::new(2, DeformOptions::default());
    let frame = pose_cloud(&s.template, &s.cloud, &s.nets, &s.opts, &s.pose).unwrap();
    let (out, state) = render_with_state(&frame.scene, &s.camera, &s.background);
    let zc = artisplat::image::Image::new(out.color.width, out.color.height, 3);
    let za = artisplat::image::Image::new(out.color.width, out.color.height, 1);
    let g = render_backward(&frame.scene, &s.camera, &state, &zc, &za);
    let mg = skinning_backward(&s.template, &s.cloud, &s.nets, &s.opts, &s.pose, &frame, &g);
    assert!(mg.gaussians.iter().all(|r| r.iter().all(|&v| v == 0.0)));
    assert!(mg.lbs.unwrap().slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    assert!(mg.pose.unwrap().slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
}
