//! Initialize and finetune on the synthetic motion dataset, in memory, using a
//! run config. Prints the metrics table.
//!
//! cargo run --release --example train_synthetic -- [config.toml]

use std::time::Instant;

use fvnet::config::RunConfig;
use fvnet::data::{prepare, synthesize, InputKind, VideoSample};
use fvnet::train::{finetune_with, init_pipeline, metrics_csv};

fn load(cfg: &RunConfig, train: bool) -> fvnet::Result<Vec<VideoSample>> {
    Ok(synthesize(&cfg.synthetic_config(train))?
        .into_iter()
        .map(|s| VideoSample {
            video: prepare(InputKind::Frames, &s.video),
            label: s.label,
        })
        .collect())
}

fn main() -> fvnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/synthetic.toml").into());
    let cfg = RunConfig::load(path)?;

    let train = load(&cfg, true)?;
    let test = load(&cfg, false)?;
    let start = Instant::now();
    let bundle = init_pipeline(&train, cfg.synthetic.classes, &cfg.init_config()?)?;
    println!("init took {:.1?}", start.elapsed());
    let (_, metrics) = finetune_with(&bundle, &train, Some(&test), &cfg.finetune_config()?, |_, _| Ok(()))?;
    print!("{}", metrics_csv(&metrics));
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
