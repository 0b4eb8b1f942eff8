use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn artisplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artisplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = artisplat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_inputs(dir: &Path) {
    fs::write(
        dir.join("spec.json"),
        r#"{"preset": "chain-2", "gaussians_per_bone": 30, "vertices_per_bone": 40,
            "frames": 6, "width": 32, "height": 32, "cameras": 2, "seed": 5}"#,
    )
    .unwrap();
    fs::write(
        dir.join("train.txt"),
        "# short run\niterations = 40\ndensify.densify_start = 10\ndensify.densify_interval = 10\n",
    )
    .unwrap();
}

#[test]
fn synth_train_render_eval_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);
    let data = dir.join("data");
    let ckpt = dir.join("ckpt");

    let said = ok(&["synth", "--spec", p(&dir.join("spec.json")), "--out", p(&data)]);
    assert!(
        said.contains("6 frames, 2 cameras, 60 ground-truth gaussians"),
        "{said}"
    );

    let said = ok(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&dir.join("train.txt")),
        "--out",
        p(&ckpt),
    ]);
    assert!(said.starts_with("trained 40 iterations"), "{said}");
    let log = fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 41);
    let final_count: usize = log.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(said.contains(&format!(", {final_count} gaussians,")), "{said}");

    let inspect = ok(&["inspect", "--ckpt", p(&ckpt)]);
    let first = inspect.lines().next().unwrap();
    assert_eq!(
        first.split_whitespace().collect::<Vec<_>>(),
        ["gaussians", &final_count.to_string()]
    );
    assert!(inspect.contains("iteration      40"), "{inspect}");
    assert!(inspect.contains("memory"), "{inspect}");

    let image = dir.join("frame.ppm");
    let said = ok(&[
        "render",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--camera",
        "1",
        "--pose",
        p(&data.join("poses/0002.json")),
        "--out",
        p(&image),
        "--repeat",
        "2",
    ]);
    assert!(said.contains("32x32") && said.contains("FPS"), "{said}");
    assert!(fs::read(&image).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let table = dir.join("eval.csv");
    let said = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&table)]);
    assert!(said.starts_with("6 frames: mean psnr"), "{said}");
    let csv = fs::read_to_string(&table).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame,camera,psnr,ssim"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("1")));

    let gt = ok(&[
        "eval",
        "--ckpt",
        p(&data.join("gt_ckpt")),
        "--data",
        p(&data),
        "--split",
        p(&data.join("train.json")),
    ]);
    assert_eq!(gt.lines().count(), 7);
}

#[test]
fn render_matches_eval_time_render() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);
    let data = dir.join("data");
    ok(&["synth", "--spec", p(&dir.join("spec.json")), "--out", p(&data)]);
    let ckpt = data.join("gt_ckpt");
    let image = dir.join("a.ppm");
    for name in ["a.ppm", "b.ppm"] {
        ok(&[
            "render",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&data),
            "--camera",
            "0",
            "--pose",
            p(&data.join("gt_poses/0003.json")),
            "--out",
            p(&dir.join(name)),
            "--repeat",
            "1",
        ]);
    }
    let a = fs::read(&image).unwrap();
    assert_eq!(a, fs::read(dir.join("b.ppm")).unwrap());
    assert_eq!(a, fs::read(data.join("images/0003_0.ppm")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(artisplat(&[]).status.code(), Some(1));
    assert_eq!(artisplat(&["paint"]).status.code(), Some(1));
    assert_eq!(artisplat(&["render", "--ckpt", "x"]).status.code(), Some(1));
    assert_eq!(artisplat(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two_and_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = dir.join("nowhere");
    let out = artisplat(&["inspect", "--ckpt", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere") && err.lines().count() == 1, "{err}");

    write_inputs(dir);
    let data = dir.join("data");
    ok(&["synth", "--spec", p(&dir.join("spec.json")), "--out", p(&data)]);
    let ply = data.join("gt_ckpt/cloud.ply");
    let bytes = fs::read(&ply).unwrap();
    fs::write(&ply, &bytes[..bytes.len() - 7]).unwrap();
    let out = artisplat(&["inspect", "--ckpt", p(&data.join("gt_ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cloud.ply") && err.contains("byte offset"), "{err}");

    fs::write(dir.join("bad.txt"), "iterations = 10\nnot_a_key = 3\n").unwrap();
    let out = artisplat(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&dir.join("bad.txt")),
        "--out",
        p(&dir.join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.txt") && err.contains("not_a_key"), "{err}");
}

#[test]
fn numeric_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);
    let data = dir.join("data");
    ok(&["synth", "--spec", p(&dir.join("spec.json")), "--out", p(&data)]);
    fs::write(dir.join("prune.txt"), "iterations = 20\ndensify.densify_start = 10\ndensify.densify_interval = 10\ndensify.scale_prune_fraction = 1e-4\n").unwrap();
    let out = artisplat(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&dir.join("prune.txt")),
        "--out",
        p(&dir.join("c")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pruning removed every gaussian"));
    assert!(!dir.join("c").exists());
}
