use std::fs;
use std::path::{Path, PathBuf};

use artisplat::checkpoint::{final_model, load_model, load_ply, round_to_f32, save_checkpoint, save_ply, CLOUD_FILE};
use artisplat::dataset::{load_pose, load_split, load_template, save_pose, save_template, Dataset};
use artisplat::error::Error;
use artisplat::gaussian::{Gaussian3D, GaussianCloud};
use artisplat::image::Image;
use artisplat::kinematics::Pose;
use artisplat::loss::psnr;
use artisplat::model::{pose_cloud, DeformNets, DeformOptions};
use artisplat::rasterizer::render;
use artisplat::synth::{generate_synthetic, SyntheticScene, SyntheticSpec};
use artisplat::train::{TrainConfig, Trainer};
use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        preset: "chain-2".into(),
        gaussians_per_bone: 50,
        vertices_per_bone: 20,
        frames: 20,
        width: 32,
        height: 32,
        cameras: 1,
        ..SyntheticSpec::default()
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    files_under(dir)
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .count()
}

fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

fn random_f32_cloud(n: usize, sh_degree: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |lo: f64, hi: f64| f32_exact(rng.random_range(lo..hi));
    let mut cloud = GaussianCloud::new(sh_degree);
    for _ in 0..n {
        let mut g = Gaussian3D {
            position: Vector3::new(r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0)),
            rotation: Vector4::new(r(0.1, 1.0), r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0)),
            log_scale: Vector3::new(r(-5.0, -1.0), r(-5.0, -1.0), r(-5.0, -1.0)),
            raw_opacity: r(-3.0, 3.0),
            ..Gaussian3D::default()
        };
        for k in 0..16 {
            g.sh[k] = Vector3::new(r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0));
        }
        cloud.push(g);
    }
    cloud
}

fn expect_offset<T: std::fmt::Debug>(result: artisplat::Result<T>) -> usize {
    match result {
        Err(Error::FormatAt { offset, .. }) => offset,
        other => panic!("expected a byte-offset error, got {other:?}"),
    }
}

#[test]
fn chain_two_sequence_bookkeeping() {
    let scene = generate_synthetic(&small_spec()).unwrap();
    assert_eq!(scene.ground_truth.len(), 100);
    assert_eq!(scene.template.joint_count(), 2);
    let dir = tempfile::tempdir().unwrap();
    let ds = scene.write(dir.path()).unwrap();
    assert_eq!(ds.frames.len(), 20);
    assert_eq!(count_ext(&dir.path().join("images"), "ppm"), 20);
    assert_eq!(count_ext(&dir.path().join("masks"), "pgm"), 20);
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    assert_eq!(load_split(&dir.path().join("train.json")).unwrap().frames.len(), 20);
    assert!(load_split(&dir.path().join("eval.json")).unwrap().frames.is_empty());
}

#[test]
fn still_trajectory_gives_identical_frames() {
    let spec = SyntheticSpec {
        amplitude: 0.0,
        root_yaw: 0.0,
        noise: 0.0,
        cameras: 2,
        frames: 5,
        ..small_spec()
    };
    let scene = generate_synthetic(&spec).unwrap();
    for row in &scene.images[1..] {
        assert_eq!(row, &scene.images[0]);
    }
}

#[test]
fn masks_threshold_ground_truth_alpha() {
    let scene = generate_synthetic(&SyntheticSpec {
        frames: 3,
        cameras: 2,
        ..small_spec()
    })
    .unwrap();
    let opts = DeformOptions {
        lbs_offsets: false,
        pose_refine: false,
        offset_position_grad: false,
    };
    let nets = DeformNets::new(&scene.template, 0);
    let mut foreground = 0;
    for (f, pose) in scene.clean_poses.iter().enumerate() {
        let posed = pose_cloud(&scene.template, &scene.ground_truth, &nets, &opts, pose).unwrap();
        for (c, cam) in scene.cameras.iter().enumerate() {
            let out = render(&posed.scene, cam, &Vector3::zeros());
            let mask = &scene.images[f][c].1;
            for (a, m) in out.alpha.data.iter().zip(&mask.data) {
                assert_eq!(*m, if *a > 0.5 { 1.0 } else { 0.0 });
            }
            foreground += mask.data.iter().filter(|m| **m > 0.0).count();
        }
    }
    assert!(foreground > 0);
}

#[test]
fn datasets_are_bitwise_reproducible() {
    let spec = SyntheticSpec {
        frames: 4,
        cameras: 2,
        ..small_spec()
    };
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    generate_synthetic(&spec).unwrap().write(a.path()).unwrap();
    generate_synthetic(&spec).unwrap().write(b.path()).unwrap();
    generate_synthetic(&SyntheticSpec { seed: 1, ..spec })
        .unwrap()
        .write(c.path())
        .unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), fb.len());
    let mut differs = false;
    for (pa, pb) in fa.iter().zip(&fb) {
        assert_eq!(pa.strip_prefix(a.path()).unwrap(), pb.strip_prefix(b.path()).unwrap());
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap(), "{}", pa.display());
        let pc = c.path().join(pa.strip_prefix(a.path()).unwrap());
        differs |= fs::read(pa).unwrap() != fs::read(pc).unwrap();
    }
    assert!(differs, "a different seed should change the dataset");
}

#[test]
fn ground_truth_checkpoint_matches_its_own_renders() {
    let spec = SyntheticSpec {
        preset: "biped-15".into(),
        frames: 4,
        cameras: 3,
        width: 48,
        height: 48,
        ..SyntheticSpec::default()
    };
    let scene = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = scene.write(dir.path()).unwrap();
    let (model, cache) = load_model(&dir.path().join("gt_ckpt")).unwrap();
    assert_eq!(model.cloud.len(), scene.ground_truth.len());
    for (i, rec) in ds.frames.iter().enumerate() {
        let frame = ds.load_frame(dir.path(), i).unwrap();
        let f: usize = rec.pose[6..10].parse().unwrap();
        let clean = load_pose(&dir.path().join(format!("gt_poses/{f:04}.json"))).unwrap();
        assert_eq!(clean, scene.clean_poses[f]);
        let out = model.render_cached(&cache, &clean, &frame.camera).unwrap();
        let p = psnr(&out.color, &frame.image).unwrap();
        assert!(p >= 50.0, "frame {i}: {p:.2} dB");
    }
}

#[test]
fn template_and_pose_json_round_trip() {
    let scene = generate_synthetic(&SyntheticSpec {
        frames: 2,
        ..small_spec()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    save_template(&path, &scene.template).unwrap();
    assert_eq!(load_template(&path).unwrap(), scene.template);
    let pose_path = dir.path().join("p.json");
    save_pose(&pose_path, &scene.noisy_poses[1]).unwrap();
    assert_eq!(load_pose(&pose_path).unwrap(), scene.noisy_poses[1]);
}

#[test]
fn ply_round_trip_is_exact_for_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    for sh in 0..=3 {
        let cloud = random_f32_cloud(17, sh, sh as u64);
        let path = dir.path().join(format!("c{sh}.ply"));
        save_ply(&path, &cloud).unwrap();
        let back = load_ply(&path).unwrap();
        assert_eq!(back.sh_degree, sh);
        assert_eq!(back.gaussians(), cloud.gaussians());
    }
}

#[test]
fn malformed_ply_reports_byte_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.ply");
    save_ply(&good, &random_f32_cloud(3, 1, 9)).unwrap();
    let bytes = fs::read(&good).unwrap();
    let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    let bad = dir.path().join("bad.ply");

    fs::write(&bad, [b"plx\n".as_slice(), &bytes[4..]].concat()).unwrap();
    assert_eq!(expect_offset(load_ply(&bad)), 0);

    let text = String::from_utf8_lossy(&bytes[..header_end]).into_owned();
    let line = text.find("element vertex").unwrap();
    let edited = text.replace("element vertex 3", "element vertex x");
    fs::write(&bad, [edited.as_bytes(), &bytes[header_end..]].concat()).unwrap();
    assert_eq!(expect_offset(load_ply(&bad)), line);

    fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
    let off = expect_offset(load_ply(&bad));
    assert!(off > header_end && off <= bytes.len() - 5, "offset {off}");

    fs::write(&bad, &bytes[..header_end - 3]).unwrap();
    assert!(expect_offset(load_ply(&bad)) < header_end);

    let err = load_ply(&bad).unwrap_err().to_string();
    assert!(err.contains("bad.ply") && err.contains("byte offset"), "{err}");
}

#[test]
fn frame_dimension_mismatch_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec {
        frames: 2,
        ..small_spec()
    })
    .unwrap()
    .write(dir.path())
    .unwrap();
    let mask_path = dir.path().join(&ds.frames[1].mask);
    Image::new(16, 32, 1).write_pgm(&mask_path).unwrap();
    ds.load_frame(dir.path(), 0).unwrap();
    let err = ds.load_frame(dir.path(), 1).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(mask_path.to_str().unwrap()), "{err}");
}

#[test]
fn dataset_with_unknown_camera_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = generate_synthetic(&SyntheticSpec {
        frames: 2,
        ..small_spec()
    })
    .unwrap()
    .write(dir.path())
    .unwrap();
    ds.frames[1].camera = 7;
    ds.save(dir.path()).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("dataset.json") && err.contains("camera 7"), "{err}");
}

fn trained(scene: &SyntheticScene, iterations: usize) -> Trainer {
    let cfg = TrainConfig {
        iterations,
        lr_pose_net: 1e-3,
        lr_lbs_net: 1e-3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(scene.template.clone(), cfg).unwrap();
    t.run(&scene.train_frames()).unwrap();
    t
}

#[test]
fn checkpoint_round_trip_renders_bitwise() {
    let scene = generate_synthetic(&SyntheticSpec {
        frames: 6,
        cameras: 2,
        ..small_spec()
    })
    .unwrap();
    let t = trained(&scene, 20);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_checkpoint(dir.path(), &t, &scene.noisy_poses).unwrap();
    assert_eq!(manifest.gaussian_count, t.cloud.len());
    let (model, cache) = load_model(dir.path()).unwrap();
    let expected = final_model(&t);
    assert_eq!(model.template, expected.template);
    assert_eq!(model.cloud.gaussians(), expected.cloud.gaussians());
    assert_eq!(model.cloud.sh_degree, expected.cloud.sh_degree);
    assert_eq!(model.nets, expected.nets);
    assert_eq!(
        (model.deform, model.background, model.iteration),
        (expected.deform, expected.background, expected.iteration)
    );
    assert_eq!(cache.poses.len(), scene.noisy_poses.len());

    let mut cloud = t.cloud.clone();
    let mut nets = t.nets.clone();
    round_to_f32(&mut cloud, &mut nets);
    assert_eq!(cloud.gaussians(), model.cloud.gaussians());
    assert_eq!(nets, model.nets);

    for pose in &scene.noisy_poses {
        let live = pose_cloud(&model.template, &model.cloud, &model.nets, &model.deform, pose).unwrap();
        for cam in &scene.cameras {
            let a = render(&live.scene, cam, &model.background);
            let b = model.render_cached(&cache, pose, cam).unwrap();
            assert_eq!(a.color, b.color);
            assert_eq!(a.alpha, b.alpha);
        }
    }

    let (again, cache2) = load_model(dir.path()).unwrap();
    assert_eq!(again, model);
    assert_eq!(cache2, cache);
}

#[test]
fn checkpoint_with_wrong_count_is_rejected() {
    let scene = generate_synthetic(&SyntheticSpec {
        frames: 2,
        ..small_spec()
    })
    .unwrap();
    let t = trained(&scene, 2);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &t, &scene.noisy_poses).unwrap();
    save_ply(&dir.path().join(CLOUD_FILE), &t.cloud.gather(&[0, 1])).unwrap();
    let err = load_model(dir.path()).unwrap_err().to_string();
    assert!(err.contains(CLOUD_FILE), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_files_round_trip(
        rots in prop::collection::vec(prop::array::uniform3(-1.8f64..1.8), 1..20),
        t in prop::array::uniform3(-10.0f64..10.0),
    ) {
        let pose = Pose {
            joint_rotations: rots.iter().map(|r| Vector3::from(*r)).collect(),
            root_translation: Vector3::from(t),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_pose(&path, &pose).unwrap();
        prop_assert_eq!(load_pose(&path).unwrap(), pose);
    }

    #[test]
    fn ply_files_round_trip(n in 1usize..40, sh in 0usize..4, seed in any::<u64>()) {
        let cloud = random_f32_cloud(n, sh, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        save_ply(&path, &cloud).unwrap();
        let back = load_ply(&path).unwrap();
        prop_assert_eq!(back.gaussians(), cloud.gaussians());
        prop_assert_eq!(back.sh_degree, sh);
    }
}
