use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rrvq::features::{log_mel_frames, read_features, read_wav, synth_gaussian, synth_gmm, write_features};
use rrvq::harness::{compare_truncation, run_experiment, run_grid, EvalMetrics, ExperimentConfig};
use rrvq::store::{load_stack, save_stack};
use rrvq::training::fit_codebooks;
use rrvq::{par, Error, Result};

#[derive(Parser)]
#[command(name = "rrvq", version, about = "Random residual vector quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Gaussian,
    Gmm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Baseline,
    Randrvq1,
    Randrvq2,
    Randrvq3,
}

#[derive(Subcommand)]
enum Command {
    /// Write a feature file from a WAV file or a synthetic generator.
    Features {
        /// Input WAV (16-bit integer or 32-bit float PCM).
        #[arg(long, conflicts_with = "synthetic")]
        wav: Option<PathBuf>,
        #[arg(long, value_enum)]
        synthetic: Option<Synthetic>,
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        n_fft: usize,
        #[arg(long, default_value_t = 256)]
        hop: usize,
        #[arg(long, default_value_t = 32)]
        n_mels: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit a stack on a feature file and write it as a directory.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Model seed; defaults to the first seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Quantize a feature file with a stored stack.
    Quantize {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run one experiment config over all of its seeds.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also compare the trained stack truncated to this many stages.
        #[arg(long)]
        truncate: Option<usize>,
    },
    /// Run several configs and write a merged comparison table.
    Grid {
        /// Config files; a file may also hold a JSON array of configs.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Directory for the individual JSON reports.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Print a preset config as JSON.
    Config {
        #[arg(value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(&fs::read_to_string(path)?)
}

fn load_configs(path: &PathBuf) -> Result<Vec<ExperimentConfig>> {
    let raw = fs::read_to_string(path)?;
    if raw.trim_start().starts_with('[') {
        serde_json::from_str(&raw).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    } else {
        Ok(vec![ExperimentConfig::from_json(&raw)?])
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features {
            wav,
            synthetic,
            frames,
            dim,
            clusters,
            separation,
            seed,
            n_fft,
            hop,
            n_mels,
            out,
        } => {
            let fs = match (wav, synthetic) {
                (Some(path), _) => {
                    let (signal, sr) = read_wav(&path)?;
                    log_mel_frames(&signal, sr, n_fft, hop, n_mels)?
                }
                (None, Some(Synthetic::Gaussian)) => synth_gaussian(frames, dim, seed)?,
                (None, Some(Synthetic::Gmm)) => synth_gmm(frames, dim, clusters, separation, seed)?,
                (None, None) => return Err(Error::InvalidArgument("pass --wav or --synthetic".into())),
            };
            write_features(&out, &fs)?;
            println!("wrote {} frames of dimension {} to {}", fs.len(), fs.dim(), out.display());
        }
        Command::Train {
            features,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let data = read_features(&features)?;
            if data.dim() != cfg.dim {
                return Err(Error::InvalidArgument(format!(
                    "features have dimension {} but the config sets D={}",
                    data.dim(),
                    cfg.dim
                )));
            }
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let mut stack = cfg.build_stack(seed)?;
            let training = cfg.training(seed);
            let fit = fit_codebooks(&mut stack, &data.frames, &training)?;
            save_stack(&out, &stack, Some(&training))?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
        }
        Command::Quantize {
            stack,
            features,
            tokens,
            metrics,
        } => {
            let stack = load_stack(&stack)?;
            let data = read_features(&features)?;
            let result = stack.quantize_sequence(&data.frames)?;
            result.token_stream().write(&tokens)?;
            let m = EvalMetrics::compute(&data.frames, &result)?;
            let json = serde_json::to_string_pretty(&m)?;
            match metrics {
                Some(p) => fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Experiment {
            config,
            out,
            csv,
            truncate,
        } => {
            let cfg = load_config(&config)?;
            let report = run_experiment(&cfg)?;
            let json = report.to_json()?;
            match out {
                Some(p) => fs::write(p, json)?,
                None => println!("{json}"),
            }
            if let Some(p) = csv {
                fs::write(p, report.to_csv()?)?;
            }
            if let Some(k) = truncate {
                let t = compare_truncation(&cfg, k)?;
                println!("{}", serde_json::to_string_pretty(&t)?);
            }
        }
        Command::Grid { configs, out, reports } => {
            let mut cfgs = Vec::new();
            for p in &configs {
                cfgs.extend(load_configs(p)?);
            }
            let (done, table) = run_grid(&cfgs)?;
            if let Some(dir) = reports {
                fs::create_dir_all(&dir)?;
                for r in &done {
                    fs::write(dir.join(format!("{}.json", r.config.name)), r.to_json()?)?;
                }
            }
            fs::write(&out, table.to_csv()?)?;
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => ExperimentConfig::default(),
                Preset::Baseline => ExperimentConfig::baseline(),
                Preset::Randrvq1 => ExperimentConfig::randrvq1(),
                Preset::Randrvq2 => ExperimentConfig::randrvq2(),
                Preset::Randrvq3 => ExperimentConfig::randrvq3(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("RRVQ_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::configure_threads(n);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
