use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use artisplat::checkpoint::{load_model, save_checkpoint, CACHE_FILE, CLOUD_FILE, NETS_FILE};
use artisplat::dataset::{load_pose, load_split, optional_file, Dataset};
use artisplat::error::{Error, Result};
use artisplat::gaussian::GaussianCloud;
use artisplat::io::write_atomic;
use artisplat::loss::{psnr, ssim};
use artisplat::sh::coeff_count;
use artisplat::synth::{generate_synthetic, SyntheticSpec};
use artisplat::train::{TrainConfig, Trainer};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "artisplat",
    version,
    about = "Articulated gaussian splatting for skinned subjects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated dataset.
    Synth {
        /// JSON spec; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frame split; defaults to `train.json` in the dataset when present.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one frame from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset holding the camera table.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        pose: PathBuf,
        /// Output PPM.
        #[arg(long)]
        out: PathBuf,
        /// Timed renders for the FPS report.
        #[arg(long, default_value_t = 10)]
        repeat: usize,
    },
    /// Score a checkpoint against dataset frames.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frame split; defaults to `eval.json` in the dataset when present.
        #[arg(long)]
        split: Option<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint statistics.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Train {
            data,
            config,
            split,
            out,
        } => train(&data, config.as_deref(), split.as_deref(), &out),
        Command::Render {
            ckpt,
            data,
            camera,
            pose,
            out,
            repeat,
        } => render_frame(&ckpt, &data, camera, &pose, &out, repeat),
        Command::Eval { ckpt, data, split, out } => eval(&ckpt, &data, split.as_deref(), out.as_deref()),
        Command::Inspect { ckpt } => inspect(&ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn synth(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = match spec_path {
        Some(p) => artisplat::io::read_json(p)?,
        None => SyntheticSpec::default(),
    };
    let scene = generate_synthetic(&spec)?;
    let ds = scene.write(out)?;
    println!(
        "wrote {} frames, {} cameras, {} ground-truth gaussians to {}",
        scene.images.len(),
        ds.cameras.len(),
        scene.ground_truth.len(),
        out.display()
    );
    Ok(())
}

fn split_indices(ds: &Dataset, data: &Path, split: Option<&Path>, default: &str) -> Result<Vec<usize>> {
    let path = split.map(Path::to_path_buf).or_else(|| optional_file(data, default));
    let Some(path) = path else {
        return Ok(ds.all_indices());
    };
    let split = load_split(&path)?;
    if let Some(&bad) = split.frames.iter().find(|&&i| i >= ds.frames.len()) {
        return Err(Error::Format {
            path,
            msg: format!("frame {bad} out of range"),
        });
    }
    Ok(split.frames)
}

fn train(data: &Path, config: Option<&Path>, split: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            TrainConfig::from_key_values(&text).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    let ds = Dataset::load(data)?;
    let template = ds.load_template(data)?;
    let indices = split_indices(&ds, data, split, "train.json")?;
    let frames = ds.load_frames(data, &indices)?;
    if frames.is_empty() {
        return Err(Error::Config("no training frames".into()));
    }
    let mut trainer = Trainer::new(template, cfg)?;
    let start = Instant::now();
    trainer.run_with(&frames, |t| {
        if t.step % 100 == 0 {
            let row = t.log.last().expect("logged");
            log::info!(
                "iter {} loss {:.5} psnr {:.2} gaussians {}",
                row.iter,
                row.loss,
                row.psnr,
                row.count
            );
        }
        true
    })?;
    let secs = start.elapsed().as_secs_f64();
    let poses: Vec<_> = frames.iter().map(|f| f.pose.clone()).collect();
    let manifest = save_checkpoint(out, &trainer, &poses)?;
    println!(
        "trained {} iterations in {:.1} s ({} skipped), {} gaussians, checkpoint {}",
        trainer.step,
        secs,
        trainer.skipped_steps,
        manifest.gaussian_count,
        out.display()
    );
    Ok(())
}

fn render_frame(ckpt: &Path, data: &Path, camera: usize, pose: &Path, out: &Path, repeat: usize) -> Result<()> {
    let (model, cache) = load_model(ckpt)?;
    let ds = Dataset::load(data)?;
    let cam = ds
        .camera(camera)
        .ok_or_else(|| Error::Config(format!("no camera {camera} in {}", data.display())))?
        .to_camera()?;
    let pose = load_pose(pose)?;
    let image = model.render_cached(&cache, &pose, &cam)?;
    let start = Instant::now();
    for _ in 0..repeat {
        model.render_cached(&cache, &pose, &cam)?;
    }
    image.color.write_ppm(out)?;
    if repeat > 0 {
        let ms = start.elapsed().as_secs_f64() * 1e3 / repeat as f64;
        println!("{}x{} in {ms:.2} ms/frame ({:.1} FPS)", cam.width, cam.height, 1e3 / ms);
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (model, cache) = load_model(ckpt)?;
    let ds = Dataset::load(data)?;
    let indices = split_indices(&ds, data, split, "eval.json")?;
    let mut csv = String::from("frame,camera,psnr,ssim\n");
    let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
    for &i in &indices {
        let frame = ds.load_frame(data, i)?;
        let pred = model.render_cached(&cache, &frame.pose, &frame.camera)?;
        let p = psnr(&pred.color, &frame.image)?;
        let s = ssim(&pred.color, &frame.image)?;
        sum_psnr += p;
        sum_ssim += s;
        csv.push_str(&format!("{i},{},{p:.6},{s:.6}\n", ds.frames[i].camera));
    }
    let n = indices.len().max(1) as f64;
    let summary = format!(
        "{} frames: mean psnr {:.3} dB, mean ssim {:.4}",
        indices.len(),
        sum_psnr / n,
        sum_ssim / n
    );
    match out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            println!("{summary}");
        }
        None => {
            print!("{csv}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

struct Summary {
    min: f64,
    mean: f64,
    max: f64,
}

fn summarize(values: impl Iterator<Item = f64>) -> Summary {
    let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
        n += 1;
    }
    Summary {
        min,
        mean: sum / n.max(1) as f64,
        max,
    }
}

fn print_stats(name: &str, s: Summary) {
    println!(
        "  {name:<10} min {:>10.5}  mean {:>10.5}  max {:>10.5}",
        s.min, s.mean, s.max
    );
}

fn file_size(path: &Path) -> u64 {
    fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

fn cloud_stats(cloud: &GaussianCloud) {
    let g = cloud.gaussians();
    print_stats("opacity", summarize(g.iter().map(|g| g.opacity())));
    print_stats("max scale", summarize(g.iter().map(|g| g.max_scale())));
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        print_stats(name, summarize(g.iter().map(|g| g.position[axis])));
    }
}

fn inspect(ckpt: &Path) -> Result<()> {
    let (model, cache) = load_model(ckpt)?;
    let n = model.cloud.len();
    let sh = model.cloud.sh_degree;
    println!("gaussians      {n}");
    println!("sh degree      {sh}");
    println!("joints         {}", model.template.joint_count());
    println!("iteration      {}", model.iteration);
    println!(
        "networks       lbs {:?}, pose {:?}, offsets {}, pose refine {}",
        model.nets.lbs.mlp.widths(),
        model.nets.pose.mlp.widths(),
        model.deform.lbs_offsets,
        model.deform.pose_refine
    );
    cloud_stats(&model.cloud);
    let floats_per_gaussian = 3 + 4 + 3 + 1 + 3 * coeff_count(sh);
    let gaussian_bytes = n * floats_per_gaussian * 4;
    let net_bytes = (model.nets.lbs.mlp.param_count() + model.nets.pose.mlp.param_count()) * 4;
    println!(
        "memory         gaussians {:.3} MB, networks {:.3} MB, cache {:.3} MB (f64)",
        gaussian_bytes as f64 / 1e6,
        net_bytes as f64 / 1e6,
        (cache.float_count() * 8) as f64 / 1e6
    );
    println!(
        "files          {} {} B, {} {} B, {} {} B",
        CLOUD_FILE,
        file_size(&ckpt.join(CLOUD_FILE)),
        NETS_FILE,
        file_size(&ckpt.join(NETS_FILE)),
        CACHE_FILE,
        file_size(&ckpt.join(CACHE_FILE))
    );
    Ok(())
}
