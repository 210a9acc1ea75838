use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use cirlab::ablation::{ablate, apply_preset, Table};
use cirlab::checks::{gradient_suite, invariant_suite};
use cirlab::report::write_run;
use cirlab::stream::{ingest_dataset, synth_image, write_dataset};
use cirlab::{run_stream, Error, ImageSource, RunConfig, RunOptions};

#[derive(Parser)]
#[command(
    name = "cirlab",
    version,
    about = "Class-incremental learning with repetition on synthetic streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the challenge-scale defaults instead of the desk-scale ones.
    #[arg(long)]
    challenge: bool,
    /// Override one key; repeatable and applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// CIRD image file to draw stream images from instead of the generator.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train over one stream and write metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Flag preset (ft, baseline, baseline+ssl, baseline+mlkd, full, ...).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; the run goes to `<out>/<name>`.
        #[arg(long, env = "CIRLAB_OUT", default_value = "out")]
        out: PathBuf,
        /// Run directory name [default: <preset>-s<seed>]
        #[arg(long)]
        name: Option<String>,
    },
    /// Run every preset of a table over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// 1: components, 2: distillation, 3: pool size, 4: dynamic weighting.
        #[arg(long)]
        table: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Also write the report as JSON to `<out>/ablation-table<N>.json`.
        #[arg(long, env = "CIRLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks or invariant checks.
    Check {
        suite: Suite,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic CIRD image file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0.35)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        preset: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Gradients,
    Invariants,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn resolve(args: &ConfigArgs, preset: Option<&str>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut config = if args.challenge {
        RunConfig::challenge()
    } else {
        RunConfig::default()
    };
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    if let Some(p) = preset {
        config = apply_preset(&config, p)?;
    }
    if let Some(s) = seed {
        config = config.with_seed(s);
    }
    config.apply_overrides(&args.overrides)?;
    config.validate()?;
    Ok(config)
}

fn source(args: &ConfigArgs) -> Result<ImageSource, Failure> {
    match &args.data {
        None => Ok(ImageSource::Synthetic),
        Some(path) => {
            let store =
                ingest_dataset(path).map_err(|e| Failure::Config(format!("cannot load {}: {e}", path.display())))?;
            Ok(ImageSource::Store(Arc::new(store)))
        }
    }
}

fn prepare_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| Failure::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            cfg,
            preset,
            seed,
            out,
            name,
        } => {
            let config = resolve(&cfg, preset.as_deref(), seed)?;
            let src = source(&cfg)?;
            let name = name.unwrap_or_else(|| format!("{}-s{}", preset.as_deref().unwrap_or("run"), config.seed));
            let dir = out.join(name);
            prepare_dir(&dir)?;
            let options = RunOptions {
                checkpoint_dir: config.checkpoints.then(|| dir.join("checkpoints")),
            };
            let metrics = run_stream::<f64>(&config, &src, &options)?;
            write_run(&dir, &config, &metrics)?;
            for e in &metrics.experiences {
                println!(
                    "experience {:>3}  acc {:.4}  single {:.4}  loss {:.4}",
                    e.index, e.accuracy, e.single_model_accuracy, e.mean_loss.total
                );
            }
            println!("final accuracy {:.4}", metrics.final_accuracy);
            println!("wrote {}", dir.display());
        }
        Command::Ablate { cfg, table, seeds, out } => {
            let table: Table = table.parse()?;
            let config = resolve(&cfg, None, None)?;
            let src = source(&cfg)?;
            if let Some(dir) = &out {
                prepare_dir(dir)?;
            }
            let report = ablate(table, &config, &seeds, &src)?;
            println!("{report}");
            if let Some(dir) = out {
                let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
                let path = dir.join(format!("ablation-table{}.json", table.number()));
                fs::write(&path, json).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
        }
        Command::Check { suite, instances, seed } => {
            let report = match suite {
                Suite::Gradients => gradient_suite(instances, seed)?,
                Suite::Invariants => invariant_suite(seed)?,
            };
            print!("{report}");
            if !report.passed() {
                return Err(Failure::Runtime("some checks failed".into()));
            }
        }
        Command::GenData {
            out,
            classes,
            per_class,
            side,
            noise,
            seed,
        } => {
            if classes == 0 || per_class == 0 || side < 2 {
                return Err(Failure::Config("need classes >= 1, per-class >= 1, side >= 2".into()));
            }
            let records: Vec<_> = (0..classes)
                .flat_map(|c| (0..per_class).map(move |i| (c, i)))
                .map(|(c, i)| {
                    let instance = seed.wrapping_mul(0x9E37_79B9).wrapping_add((c * per_class + i) as u64);
                    (synth_image(c, instance, side, noise), c)
                })
                .collect();
            write_dataset(&out, side, classes, &records)?;
            println!(
                "wrote {} images of {classes} classes to {}",
                records.len(),
                out.display()
            );
        }
        Command::Config { cfg, preset } => {
            print!("{}", resolve(&cfg, preset.as_deref(), None)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
