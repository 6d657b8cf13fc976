//! `dynfield`: generate synthetic videos, train, render, evaluate and export.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad input.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dynfield::eval::{self, EvalOptions, MfeProtocol};
use dynfield::grids;
use dynfield::particles;
use dynfield::radiance;
use dynfield::scene::{self, Dataset, SceneSpec};
use dynfield::trainer::{self, TrainConfig, TrainState};
use dynfield::{Error, Result};

use manifest::RunManifest;

/// Environment variable capping worker threads when `--threads` is absent.
const THREADS_ENV: &str = "DYNFIELD_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dynfield", version, about = "Particle / grid radiance fields for dynamic scenes")]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic monocular video with its manifest.
    GenScene {
        /// Preset name: fall, orbit or bounce.
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// Scene description JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the frame count.
        #[arg(long)]
        frames: Option<usize>,
        /// Override the square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat key = value configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
        /// Final grid edge in voxels; training starts at half the edge.
        #[arg(long)]
        grid: Option<usize>,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render frames from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose poses (and times) are rendered.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame indices to render (default: all).
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        /// Times overriding the frame times, one per frame or one for all.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Also dump depths, densities and weights of the center ray.
        #[arg(long)]
        ray_debug: bool,
    },
    /// Held-out image metrics and motion field errors.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of a comparison model (e.g. deformation dynamics).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Report path (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Voxels per axis of the motion protocol.
        #[arg(long, default_value_t = 30)]
        mfe_res: usize,
    },
    /// Export particle trajectories, particle positions or the static grid.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
        #[arg(long)]
        out: PathBuf,
        /// Time for particles-at-t.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// Number of trajectory samples in [0, 1].
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Keep only the first N alive particles in the trajectory export.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportKind {
    Trajectories,
    ParticlesAtT,
    StaticGrid,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_bad_input() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    match cmd {
        Command::GenScene {
            preset,
            spec,
            out,
            seed,
            frames,
            size,
        } => {
            let mut s = match (preset, spec) {
                (Some(p), None) => SceneSpec::preset(&p)?,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Format {
                        path: path.clone(),
                        message: e.to_string(),
                    })?
                }
                _ => return Err(Error::InvalidArgument("give exactly one of --preset or --spec".into())),
            };
            if let Some(f) = frames {
                s.frames = f;
            }
            if let Some(px) = size {
                s.camera.width = px;
                s.camera.height = px;
            }
            let data = scene::generate(&s, seed)?;
            data.save(&out)?;
            println!("{} frames written to {}", data.frames.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            steps,
            particles,
            grid,
            resume,
        } => {
            let dataset = load_dataset(&data)?;
            let mut m = RunManifest::start("train", &args);
            let mut state = match &resume {
                Some(p) => TrainState::load(p)?,
                None => {
                    let mut cfg = match &config {
                        Some(p) => TrainConfig::load(p)?,
                        None => TrainConfig::default(),
                    };
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    if let Some(s) = steps {
                        cfg.steps = s;
                    }
                    if let Some(p) = particles {
                        cfg.particles = p;
                    }
                    if let Some(g) = grid {
                        cfg.grid_voxels_final = g.pow(3);
                        cfg.grid_voxels_initial = (g / 2).max(2).pow(3);
                    }
                    cfg.validate()?;
                    TrainState::new(cfg, dataset.bbox)?
                }
            };
            let (hist, files) = trainer::train_to_dir(&mut state, &dataset, &out)?;
            m.seed = Some(state.config.seed);
            m.config = Some(state.config.to_text());
            m.artifacts = vec![files.config, files.loss_csv, files.lifecycle_csv, files.checkpoint];
            m.artifacts.extend(files.checkpoints);
            m.artifacts.extend(files.validation);
            m.finish(&out.join("run_manifest.json"))?;
            if let Some(last) = hist.steps.last() {
                println!("step {} total loss {:.6} alive {}", last.step, last.total, last.alive);
            }
            Ok(())
        }
        Command::Render {
            checkpoint,
            data,
            out,
            frames,
            times,
            samples,
            ray_debug,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let frames = if frames.is_empty() {
                (0..dataset.frames.len()).collect()
            } else {
                frames
            };
            if !(times.is_empty() || times.len() == 1 || times.len() == frames.len()) {
                return Err(Error::InvalidArgument("--times needs one value or one per frame".into()));
            }
            if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
            }
            let n = samples.unwrap_or(state.config.samples_per_ray);
            std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
            let mut m = RunManifest::start("render", &args);
            m.config = Some(state.config.to_text());
            let mut debug = Vec::new();
            for (k, &f) in frames.iter().enumerate() {
                let frame = dataset
                    .frames
                    .get(f)
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {f} out of range")))?;
                let t = match times.len() {
                    0 => frame.time,
                    1 => times[0],
                    _ => times[k],
                };
                let img = state.model.render_image(&frame.pose, t, n)?;
                let p = out.join(format!("{f:04}.png"));
                img.save_png(&p)?;
                m.artifacts.push(p);
                if ray_debug {
                    let (o, d) = frame.pose.ray_for_pixel(frame.pose.width / 2, frame.pose.height / 2)?;
                    debug.push(state.model.render_ray(o, d, n, t)?);
                }
            }
            if ray_debug {
                let p = out.join("rays.csv");
                radiance::write_ray_debug(&p, &debug)?;
                m.artifacts.push(p);
            }
            m.finish(&out.join("run_manifest.json"))?;
            println!("{} frames rendered to {}", frames.len(), out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            baseline,
            out,
            mfe_res,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let base = baseline.as_deref().map(TrainState::load).transpose()?;
            let opts = EvalOptions {
                samples_per_ray: state.config.samples_per_ray,
                eps_alpha: state.config.eps_alpha,
                protocol: MfeProtocol {
                    res: mfe_res,
                    ..MfeProtocol::default()
                },
                steps: state.step,
                baseline: base.as_ref().map(|b| &b.model),
            };
            let report = eval::evaluate(&state.model, &dataset, &opts)?;
            if let Some(p) = &out {
                report.save(p)?;
            }
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Export {
            checkpoint,
            what,
            out,
            t,
            samples,
            limit,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let model = &state.model;
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
            }
            match what {
                ExportKind::Trajectories => {
                    if samples < 2 {
                        return Err(Error::InvalidArgument("--samples must be at least 2".into()));
                    }
                    let times: Vec<f64> = (0..samples).map(|k| k as f64 / (samples - 1) as f64).collect();
                    let mut set = model.particles.clone();
                    if let Some(n) = limit {
                        for i in set.alive_indices().into_iter().skip(n) {
                            set.alive[i as usize] = false;
                        }
                    }
                    particles::write_trajectories_csv(&out, &set, &model.motion, &times)?;
                }
                ExportKind::ParticlesAtT => {
                    particles::write_ply(&out, &particles::alive_positions(&model.particles, &model.motion, t)?)?;
                }
                ExportKind::StaticGrid => grids::save_grid(&model.static_grid, &out)?,
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("dataset directory {} does not exist", dir.display())));
    }
    Dataset::load(dir)
}
