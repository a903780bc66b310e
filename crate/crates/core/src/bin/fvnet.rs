use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use fvnet::bundle::{count_parameters, count_parameters_symbolic, load_bundle, save_bundle, ParamCounts};
use fvnet::config::RunConfig;
use fvnet::data::{generate_synthetic, load_manifest, Split};
use fvnet::pipeline::classify_video;
use fvnet::train::gradcheck::{self, Layer, Probe};
use fvnet::train::{finetune_with, init_pipeline, metrics_csv};
use fvnet::Error;

/// Discriminative Fisher-vector network: synthetic data, unsupervised
/// initialization, end-to-end finetuning and evaluation.
///
/// Errors are printed as one line, `error[<category>]: <message>`, and map to
/// exit codes: config 2, missing_file 3, parse 4, dim_mismatch 5, shape 6,
/// validation 7, numeric 8, non_finite 9, version 10, io 11, gradient check
/// failure 12, internal 13.
#[derive(Parser)]
#[command(name = "fvnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test splits described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Unsupervised initialization; writes <run.dir>/init.
    Init {
        #[arg(long)]
        config: PathBuf,
    },
    /// End-to-end finetuning; writes metrics.csv, per-epoch checkpoints and
    /// <run.dir>/final.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Starting bundle (default <run.dir>/init).
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Classify a split; writes predictions_<split>.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of every backward pass on a random probe
    /// network. Exits 0 only if every layer is within tolerance.
    Gradcheck {
        /// extractor, pool, projection, gmm, fisher, fisher_power, svm,
        /// full, full_power or all.
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
    },
    /// Trainable parameter counts, from a bundle or from sizes.
    Params {
        #[arg(long, conflicts_with_all = ["nc", "k", "d", "m"])]
        bundle: Option<PathBuf>,
        /// Projected dimension.
        #[arg(long)]
        nc: Option<usize>,
        /// Mixture components.
        #[arg(long)]
        k: Option<usize>,
        /// Pooled descriptor dimension.
        #[arg(long)]
        d: Option<usize>,
        /// Classes.
        #[arg(long)]
        m: Option<usize>,
    },
}

enum Failure {
    Lib(Error),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "missing_file" => 3,
        "parse" => 4,
        "dim_mismatch" => 5,
        "shape" => 6,
        "validation" => 7,
        "numeric" => 8,
        "non_finite" => 9,
        "version" => 10,
        "io" => 11,
        _ => 13,
    }
}

fn load_config(path: &Path) -> fvnet::Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    info!("resolved config:\n{}", cfg.to_toml());
    fs::create_dir_all(&cfg.run.dir).map_err(|e| io_err(&cfg.run.dir, e))?;
    let snapshot = cfg.run.dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()).map_err(|e| io_err(&snapshot, e))?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> fvnet::Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn print_counts(c: &ParamCounts) {
    println!("projection {}", c.projection);
    println!("gmm {}", c.gmm);
    println!("classifier {}", c.classifier);
    println!("extractor {} (not in total)", c.extractor);
    println!("total {}", c.total);
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = load_config(&config)?;
            for (split, train) in [(Split::Train, true), (Split::Test, false)] {
                let m = generate_synthetic(&cfg.synthetic_config(train), split, &cfg.synthetic.out_dir)?;
                println!("{} {} videos in {}", split.as_str(), m.len(), cfg.synthetic.out_dir.display());
            }
        }
        Command::Init { config } => {
            let cfg = load_config(&config)?;
            let manifest = load_manifest(&cfg.data.train_manifest)?;
            let train = manifest.load_samples()?;
            let bundle = init_pipeline(&train, manifest.classes, &cfg.init_config()?)?;
            let out = cfg.run.dir.join("init");
            save_bundle(&out, &bundle)?;
            println!("initialized bundle written to {}", out.display());
        }
        Command::Finetune { config, bundle } => {
            let cfg = load_config(&config)?;
            let start = load_bundle(bundle.unwrap_or_else(|| cfg.run.dir.join("init")))?;
            let train = load_manifest(&cfg.data.train_manifest)?.load_samples()?;
            let test = load_manifest(&cfg.data.test_manifest)?.load_samples()?;
            let checkpoints = cfg.run.dir.join("checkpoints");
            let (bundle, metrics) = finetune_with(&start, &train, Some(&test), &cfg.finetune_config()?, |epoch, b| {
                save_bundle(checkpoints.join(format!("epoch_{epoch:03}")), b)
            })?;
            write(&cfg.run.dir.join("metrics.csv"), &metrics_csv(&metrics))?;
            save_bundle(cfg.run.dir.join("final"), &bundle)?;
            print!("{}", metrics_csv(&metrics));
        }
        Command::Eval { config, bundle, split } => {
            let cfg = load_config(&config)?;
            let split = Split::parse(&split).ok_or_else(|| Error::Config(format!("unknown split {split:?}")))?;
            let path = match split {
                Split::Train => &cfg.data.train_manifest,
                Split::Test => &cfg.data.test_manifest,
            };
            let bundle = load_bundle(bundle)?;
            let manifest = load_manifest(path)?;
            let samples = manifest.load_samples()?;
            let crops = cfg.crops();
            let results = samples
                .par_iter()
                .map(|s| classify_video(&bundle, &s.video, cfg.eval.delta_t, &crops))
                .collect::<fvnet::Result<Vec<_>>>()?;
            let mut csv = String::from("video,predicted,label");
            for j in 0..bundle.classes() {
                write!(csv, ",score_{j}").unwrap();
            }
            csv.push('\n');
            let mut correct = 0;
            for ((entry, s), r) in manifest.entries.iter().zip(&samples).zip(&results) {
                correct += usize::from(r.class == s.label);
                write!(csv, "{},{},{}", entry.path.display(), r.class, s.label).unwrap();
                for v in &r.scores {
                    write!(csv, ",{v:.9e}").unwrap();
                }
                csv.push('\n');
            }
            write(&cfg.run.dir.join(format!("predictions_{}.csv", split.as_str())), &csv)?;
            println!(
                "accuracy {:.6} ({correct}/{})",
                correct as f64 / samples.len() as f64,
                samples.len()
            );
        }
        Command::Gradcheck { layer, seed, step } => {
            let layers =
                Layer::parse_selector(&layer).ok_or_else(|| Error::Config(format!("unknown layer {layer:?}")))?;
            let probe = Probe::random(seed)?;
            let mut ok = true;
            for rep in gradcheck::run(&probe, &layers, step)? {
                ok &= rep.passed();
                println!(
                    "{:<4} {:<12} {:<18} max_rel_error {:.3e} (tol {:.0e}, {} coords)",
                    if rep.passed() { "ok" } else { "FAIL" },
                    rep.layer.as_str(),
                    rep.target,
                    rep.max_rel_error,
                    rep.layer.tolerance(),
                    rep.coords
                );
            }
            if !ok {
                return Err(Failure::GradCheck);
            }
        }
        Command::Params { bundle, nc, k, d, m } => {
            let counts = match (bundle, nc, k, d, m) {
                (Some(path), ..) => count_parameters(&load_bundle(path)?),
                (None, Some(nc), Some(k), Some(d), Some(m)) => count_parameters_symbolic(d, nc, k, m),
                _ => return Err(Error::Config("give --bundle or all of --nc --k --d --m".into()).into()),
            };
            print_counts(&counts);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => {
            eprintln!("error[gradcheck]: one or more layers exceeded tolerance");
            ExitCode::from(12)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(e.category()))
        }
    }
}
