use clap::{Parser, Subcommand};
use rkhs_slam::bow::Vocabulary;
use rkhs_slam::config::{Mode, RunConfig};
use rkhs_slam::dataset::DepthMap;
use rkhs_slam::evaluation::{ate_residuals, ate_rmse, rpe_rmse, TrajectoryEstimate};
use rkhs_slam::features::{extract_features, Descriptor};
use rkhs_slam::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rkhs-slam",
    about = "Keyframe-based RGB-D SLAM via kernelized point-cloud registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry or full SLAM on a TUM-format sequence.
    Run {
        /// TOML configuration file; omitted sections use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides the config file).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// odometry | slam
        #[arg(long)]
        mode: Option<Mode>,
        /// Output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// RANSAC seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Process at most N frames.
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Evaluate an estimated trajectory against ground truth.
    Eval {
        estimate: PathBuf,
        groundtruth: PathBuf,
        /// RPE window in seconds.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
    },
    /// Train a descriptor vocabulary from a directory of PNG images.
    BuildVocab {
        /// Directory of grayscale or color PNG images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        branching: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export cumulative-error CSV from run output directories.
    ExportPlot {
        /// Run output directories (each with trajectory.txt and
        /// groundtruth.txt).
        dirs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            config,
            dataset,
            mode,
            output,
            seed,
            max_frames,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(d) = dataset {
                cfg.dataset.path = d;
            }
            if let Some(m) = mode {
                cfg.run.mode = m;
            }
            if let Some(o) = output {
                cfg.run.output = o;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(n) = max_frames {
                cfg.run.max_frames = Some(n);
            }
            let summary = pipeline::run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Eval {
            estimate,
            groundtruth,
            delta,
        } => {
            let est = TrajectoryEstimate::load(&estimate)?;
            let gt = TrajectoryEstimate::load(&groundtruth)?;
            let ate = ate_rmse(&est, &gt)?;
            let (rpe_t, rpe_r) = rpe_rmse(&est, &gt, delta)?;
            println!(
                "{}",
                serde_json::json!({
                    "ate_rmse_m": ate,
                    "rpe_translational_m_per_s": rpe_t,
                    "rpe_rotational_deg_per_s": rpe_r,
                    "rpe_delta_s": delta,
                })
            );
            Ok(())
        }
        Command::BuildVocab {
            images,
            output,
            branching,
            depth,
            seed,
        } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                anyhow::bail!("no .png images in {}", images.display());
            }
            let mut per_image: Vec<Vec<Descriptor>> = Vec::new();
            for path in &paths {
                let gray = image::open(path)?.to_luma8();
                // Constant unit depth: descriptors only, geometry unused.
                let depth_map = DepthMap::from_meters(
                    gray.width(),
                    gray.height(),
                    vec![1.0; (gray.width() * gray.height()) as usize],
                );
                let features = extract_features(&gray, &depth_map);
                if !features.is_empty() {
                    per_image.push(features.descriptors);
                }
            }
            let vocab = Vocabulary::train(&per_image, branching, depth, seed)?;
            vocab.save(&output)?;
            println!(
                "vocabulary: {} words from {} images -> {}",
                vocab.word_count(),
                per_image.len(),
                output.display()
            );
            Ok(())
        }
        Command::ExportPlot { dirs, output } => {
            if dirs.is_empty() {
                anyhow::bail!("no run directories given");
            }
            let mut csv = String::from("run,error_m,fraction\n");
            for dir in &dirs {
                let est = TrajectoryEstimate::load(&dir.join("trajectory.txt"))?;
                let gt_path = dir.join("groundtruth.txt");
                if !gt_path.exists() {
                    log::warn!("{}: no groundtruth.txt, skipping", dir.display());
                    continue;
                }
                let gt = TrajectoryEstimate::load(&gt_path)?;
                let mut residuals = ate_residuals(&est, &gt)?;
                residuals.sort_by(f64::total_cmp);
                let n = residuals.len() as f64;
                let name = dir.display();
                for (i, r) in residuals.iter().enumerate() {
                    csv.push_str(&format!("{name},{r:.9},{:.6}\n", (i + 1) as f64 / n));
                }
            }
            std::fs::write(&output, csv)?;
            Ok(())
        }
    }
}
