use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use vifusion::cli::{cmd_eval, cmd_simulate, cmd_track, SimulateArgs, TrackArgs, TrajectorySpec};
use vifusion::config::RunConfig;
use vifusion::imu::NoiseProfile;
use vifusion::par::Execution;
use vifusion::tracker::ImuMode;

#[derive(Parser)]
#[command(
    name = "vifusion",
    version,
    about = "RGB-D-inertial tracking and surfel mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Imu {
    Full,
    Gyro,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Synthetic,
    Real,
}

impl From<Profile> for NoiseProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Synthetic => NoiseProfile::Synthetic,
            Profile::Real => NoiseProfile::Real,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D + IMU sequence.
    Simulate {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image size as WxH; both must be divisible by 4.
        #[arg(long, default_value = "160x120", value_parser = parse_resolution)]
        resolution: (usize, usize),
        #[arg(long, value_enum, default_value = "synthetic")]
        profile: Profile,
        /// Seconds; defaults to the scene's length.
        #[arg(long)]
        duration: Option<f64>,
        /// `scene`, `stationary` or a TUM file of scene-from-camera poses.
        #[arg(long, default_value = "scene")]
        trajectory: String,
        #[arg(long)]
        no_image_noise: bool,
    },
    /// Track a sequence directory.
    Track {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        imu: Option<Imu>,
        #[arg(long, value_enum)]
        slam: Option<Switch>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML run configuration; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the profile the sequence was generated with.
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        /// Loop-closure constraint file.
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Single-threaded execution.
        #[arg(long)]
        sequential: bool,
    },
    /// Score an estimated trajectory against a sequence's ground truth.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Report directory; defaults to the estimate's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn main() -> ExitCode {
    env_logger::init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> vifusion::Result<()> {
    let start = Instant::now();
    match command {
        Command::Simulate {
            scene,
            out,
            seed,
            resolution,
            profile,
            duration,
            trajectory,
            no_image_noise,
        } => {
            let args = SimulateArgs {
                seed,
                width: resolution.0,
                height: resolution.1,
                profile: profile.into(),
                duration,
                trajectory: trajectory.parse::<TrajectorySpec>()?,
                image_noise: !no_image_noise,
                ..SimulateArgs::new(&scene, out)
            };
            let n = cmd_simulate(&args)?;
            println!("wrote {n} frames to {}", args.out.display());
        }
        Command::Track {
            sequence,
            out,
            imu,
            slam,
            seed,
            config,
            profile,
            constraints,
            sequential,
        } => {
            let mut run = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(m) = imu {
                run.imu = match m {
                    Imu::Full => ImuMode::Full,
                    Imu::Gyro => ImuMode::Gyro,
                    Imu::Off => ImuMode::Off,
                };
            }
            if let Some(s) = slam {
                run.slam = matches!(s, Switch::On);
            }
            if let Some(s) = seed {
                run.seed = s;
            }
            if constraints.is_some() {
                run.constraints = constraints;
            }
            if sequential {
                run.execution = Execution::Sequential;
            }
            let args = TrackArgs {
                sequence,
                out,
                config: run,
                profile: profile.map(Into::into),
            };
            let s = cmd_track(&args)?;
            println!(
                "tracked {} frames, {} flagged, {} closures, {} surfels ({:.1} s)",
                s.frames,
                s.failed_frames.len(),
                s.closures.len(),
                s.surfels,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Eval {
            estimate,
            sequence,
            out,
        } => {
            let out = out.unwrap_or_else(|| estimate.parent().map(Into::into).unwrap_or_default());
            let r = cmd_eval(&estimate, &sequence, &out)?;
            println!("ATE RMSE {:.4} m over {} poses", r.ate_rmse, r.matched);
            if let Some(rec) = &r.reconstruction {
                println!(
                    "reconstruction error mean {:.4} m, median {:.4} m",
                    rec.mean, rec.median
                );
            }
            if let (Some(d), Some(e)) = (r.distance, r.final_drift) {
                println!("drift {e:.4} m after {d:.2} m");
            }
            if r.failed {
                println!("run counts as a tracking failure");
            }
        }
    }
    Ok(())
}
