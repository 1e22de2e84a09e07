use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sha2::{Digest, Sha256};

use handrig::camera::RigCalibration;
use handrig::detections::{load_detections, ConfidenceThresholds};
use handrig::evaluation::{cdf_svg, evaluate, noise_svg, EvalReport, NoisePoint};
use handrig::image::{equalize_histogram, resample_crop, GrayImage};
use handrig::pipeline::{
    crops_to_text, fit_to_file, plan_crops, run_pipeline, sha256_file, triangulate_to_file, PipelineConfig,
};
use handrig::synth::{
    fixture_rig, generate_sequence, load_gt, visibility_report, write_dataset, Motion, SynthConfig,
};
use handrig::triangulation::load_keypoints;

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "handrig", version, about = "Multi-view fisheye hand keypoint annotation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Plan perspective crops from body-stage detections.
    Crop(CropArgs),
    /// Triangulate detections into 3D keypoints.
    Triangulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit hand poses to 3D keypoints.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write posed OBJ meshes into this directory.
        #[arg(long)]
        meshes: Option<PathBuf>,
    },
    /// Run triangulation and fitting end to end.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score keypoints against a ground-truth sidecar.
    Eval {
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file (TOML).
        #[arg(long)]
        out: PathBuf,
        /// Per-frame table (CSV).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Comma-separated condition tags to report; defaults to those present.
        #[arg(long, value_delimiter = ',')]
        conditions: Option<Vec<String>>,
    },
    /// Print the table of a saved report.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render error plots as SVG.
    Plot {
        /// Report whose per-frame errors feed the CDF plot.
        #[arg(long, requires = "cdf")]
        report: Option<PathBuf>,
        #[arg(long)]
        cdf: Option<PathBuf>,
        /// `SIGMA=REPORT` pairs for the error-vs-noise plot.
        #[arg(long = "noise-point", value_parser = parse_noise_point, requires = "noise_out")]
        noise_points: Vec<(f64, PathBuf)>,
        #[arg(long)]
        noise_out: Option<PathBuf>,
        /// Condition used for the error-vs-noise plot.
        #[arg(long, default_value = "no_interaction")]
        condition: String,
    },
}

fn parse_noise_point(s: &str) -> Result<(f64, PathBuf), String> {
    let (sigma, path) = s.split_once('=').ok_or("expected SIGMA=REPORT")?;
    let sigma: f64 = sigma.parse().map_err(|e| format!("bad sigma: {e}"))?;
    Ok((sigma, PathBuf::from(path)))
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Static,
    SinusoidalJoints,
    RandomWalkGlobal,
}

impl From<MotionArg> for Motion {
    fn from(m: MotionArg) -> Self {
        match m {
            MotionArg::Static => Motion::Static,
            MotionArg::SinusoidalJoints => Motion::SinusoidalJoints,
            MotionArg::RandomWalkGlobal => Motion::RandomWalkGlobal,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator config (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rig calibration; defaults to the bundled 10-camera fixture.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    motion: Option<MotionArg>,
    #[arg(long)]
    pixel_sigma: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long)]
    outlier_magnitude: Option<f64>,
    #[arg(long)]
    dropout_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    #[arg(long)]
    no_crops: bool,
    /// Also write a per-joint camera visibility report.
    #[arg(long)]
    visibility: bool,
}

#[derive(Args)]
struct CropArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Source image (PNG) to resample into equalized crops.
    #[arg(long, requires_all = ["image_camera", "png_dir"])]
    image: Option<PathBuf>,
    /// Camera the source image belongs to.
    #[arg(long)]
    image_camera: Option<String>,
    /// Restrict image crops to this frame.
    #[arg(long)]
    image_frame: Option<u64>,
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

/// Pipeline config file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    headset: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    left_profile: Option<PathBuf>,
    #[arg(long)]
    right_profile: Option<PathBuf>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[arg(long, requires = "hand_threshold")]
    body_threshold: Option<f64>,
    #[arg(long, requires = "body_threshold")]
    hand_threshold: Option<f64>,
    #[arg(long)]
    crop_padding: Option<f64>,
    #[arg(long)]
    crop_margin_px: Option<f64>,
    #[arg(long)]
    crop_alpha_min_deg: Option<f64>,
    #[arg(long)]
    inlier_angle_rad: Option<f64>,
    #[arg(long)]
    ransac_max_iters: Option<usize>,
    #[arg(long)]
    min_inliers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ik_max_iters: Option<usize>,
    #[arg(long)]
    ik_tol: Option<f64>,
    #[arg(long)]
    limit_penalty_weight: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    warm_start: bool,
    #[arg(long)]
    write_meshes: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, Box<dyn Error>> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
            if v.is_some() {
                slot.clone_from(v);
            }
        }
        let p = &mut cfg.paths;
        set_path(&mut p.calibration, &self.calibration);
        set_path(&mut p.headset, &self.headset);
        set_path(&mut p.detections, &self.detections);
        set_path(&mut p.output_dir, &self.output_dir);
        set_path(&mut p.left_profile, &self.left_profile);
        set_path(&mut p.right_profile, &self.right_profile);
        set(&mut cfg.confidence_threshold, &self.confidence_threshold);
        if let (Some(body), Some(hand)) = (self.body_threshold, self.hand_threshold) {
            cfg.detector_thresholds = Some(ConfidenceThresholds { body, hand });
        }
        set(&mut cfg.crop.padding, &self.crop_padding);
        set(&mut cfg.crop.margin_px, &self.crop_margin_px);
        set(&mut cfg.crop.alpha_min_deg, &self.crop_alpha_min_deg);
        set(&mut cfg.ransac.inlier_angle_rad, &self.inlier_angle_rad);
        set(&mut cfg.ransac.max_iters, &self.ransac_max_iters);
        set(&mut cfg.ransac.min_inliers, &self.min_inliers);
        set(&mut cfg.ransac.seed, &self.seed);
        set(&mut cfg.ik.max_iters, &self.ik_max_iters);
        set(&mut cfg.ik.tol, &self.ik_tol);
        set(&mut cfg.ik.limit_penalty_weight, &self.limit_penalty_weight);
        set(&mut cfg.workers, &self.workers);
        set(&mut cfg.chunk_size, &self.chunk_size);
        cfg.warm_start |= self.warm_start;
        cfg.write_meshes |= self.write_meshes;
        Ok(cfg)
    }
}

fn synth(args: &SynthArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)
            .map_err(|e| format!("{}: {e}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some(v) = args.motion {
        cfg.motion = v.into();
    }
    if let Some(v) = args.pixel_sigma {
        cfg.noise.pixel_sigma = v;
    }
    if let Some(v) = args.outlier_fraction {
        cfg.noise.outlier_fraction = v;
    }
    if let Some(v) = args.outlier_magnitude {
        cfg.noise.outlier_magnitude = v;
    }
    if let Some(v) = args.dropout_fraction {
        cfg.noise.dropout_fraction = v;
    }
    if let Some(v) = &args.conditions {
        cfg.conditions.clone_from(v);
    }
    cfg.emit_crops &= !args.no_crops;
    let rig = match &args.rig {
        Some(p) => RigCalibration::load(p)?,
        None => fixture_rig(),
    };
    let seq = generate_sequence(&cfg, &rig)?;
    let paths = write_dataset(&args.out, &seq, &cfg, &rig)?;
    let mut dataset = Sha256::new();
    for p in &paths {
        let h = sha256_file(p)?;
        let name = p.file_name().unwrap_or_default().to_string_lossy();
        println!("{h}  {name}");
        dataset.update(format!("{h}  {name}\n").as_bytes());
    }
    println!("dataset {}", hex::encode(dataset.finalize()));
    if args.visibility {
        let gt: Vec<_> = seq.gt.iter().map(|g| g.keypoints.clone()).collect();
        let report = visibility_report(&rig, &seq.headset, &gt);
        let path = args.out.join("visibility.txt");
        std::fs::write(&path, report.to_text()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

fn crop(args: &CropArgs) -> CliResult {
    let cfg = args.cfg.resolve()?;
    cfg.validate()?;
    let calib_path = cfg.paths.calibration.as_ref().ok_or("no calibration path configured")?;
    let det_path = cfg.paths.detections.as_ref().ok_or("no detections path configured")?;
    let calib = RigCalibration::load(calib_path)?;
    let mut records = Vec::new();
    for frame in load_detections(det_path)? {
        match frame {
            Ok(frame) => records.extend(plan_crops(&frame, &calib, &cfg)),
            Err(e) => log::warn!("{e}; skipping the record"),
        }
    }
    std::fs::write(&args.out, crops_to_text(&records)).map_err(|e| format!("{}: {e}", args.out.display()))?;
    info!("wrote {} crops", records.len());
    if let (Some(image), Some(camera), Some(dir)) = (&args.image, &args.image_camera, &args.png_dir) {
        let src = GrayImage::load_png(image)?;
        let cam = calib.camera(camera).ok_or_else(|| format!("camera {camera} not in calibration"))?;
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        for r in records
            .iter()
            .filter(|r| r.virt.source_camera_id() == camera && args.image_frame.is_none_or(|f| f == r.frame_index))
        {
            let out = equalize_histogram(&resample_crop(&src, &cam.intrinsics, &r.virt))?;
            out.save_png(dir.join(format!("frame_{:06}_{camera}_{}.png", r.frame_index, r.hand.tag())))?;
        }
    }
    Ok(())
}

fn print_stats(stats: &handrig::pipeline::RunStats) {
    println!(
        "frames: {} read, {} written, {} skipped",
        stats.frames_read,
        stats.frames_written,
        stats.failed_frames.len()
    );
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Crop(args) => crop(&args),
        Command::Triangulate { cfg, out } => {
            let stats = triangulate_to_file(&cfg.resolve()?, &out)?;
            print_stats(&stats);
            Ok(())
        }
        Command::Fit {
            cfg,
            keypoints,
            out,
            meshes,
        } => {
            let stats = fit_to_file(&cfg.resolve()?, &keypoints, &out, meshes.as_deref())?;
            print_stats(&stats);
            Ok(())
        }
        Command::Pipeline { cfg } => {
            let (stats, _) = run_pipeline(&cfg.resolve()?)?;
            print_stats(&stats);
            Ok(())
        }
        Command::Eval {
            keypoints,
            gt,
            out,
            csv,
            conditions,
        } => {
            let pred = load_keypoints(&keypoints)?;
            let gt = load_gt(&gt)?;
            let report = evaluate(&pred, &gt, conditions.as_deref())?;
            report.save(&out)?;
            if let Some(csv) = csv {
                write_text(&csv, &report.to_csv())?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Report { report, csv } => {
            let report = EvalReport::load(&report)?;
            if let Some(csv) = csv {
                write_text(&csv, &report.to_csv())?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Plot {
            report,
            cdf,
            noise_points,
            noise_out,
            condition,
        } => {
            if let (Some(report), Some(cdf)) = (report, cdf) {
                write_text(&cdf, &cdf_svg(&EvalReport::load(&report)?))?;
            }
            if let Some(out) = noise_out {
                let mut points = Vec::new();
                for (sigma, path) in &noise_points {
                    let r = EvalReport::load(path)?;
                    let a = r
                        .aggregates
                        .iter()
                        .find(|a| a.condition == condition)
                        .ok_or_else(|| format!("{}: no condition {condition:?}", path.display()))?;
                    points.push(NoisePoint {
                        sigma_px: *sigma,
                        median_mm: a.aggregate.median_mm,
                        p90_mm: a.aggregate.p90_mm,
                    });
                }
                write_text(&out, &noise_svg(&points))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error");
            ExitCode::from(2)
        }
    }
}
