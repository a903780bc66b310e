//! TOML run configuration. Every key is required and unknown keys are
//! rejected, so a config file is a complete record of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::fisher::Region;
use crate::pipeline::CropSpec;
use crate::pool::PoolConfig;
use crate::train::{ExtractorSpec, FinetuneConfig, InitConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub extractor: ExtractorSection,
    pub pool: PoolSection,
    pub init: InitSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub out_dir: PathBuf,
    pub train_seed: u64,
    pub test_seed: u64,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub speed: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSection {
    /// `"conv"` or `"precomputed"`.
    pub kind: String,
    pub channels: usize,
    pub kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub init_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    pub n_sigma: usize,
    pub n_tau: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub t: usize,
    pub delta_s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub subvolumes_per_video: usize,
    pub pca_samples_per_video: usize,
    pub components: usize,
    pub projection_dim: usize,
    pub c: f64,
    pub power_norm: bool,
    pub em_iters: usize,
    pub em_tol: f64,
    pub svm_epochs: usize,
    pub svm_learning_rate: f64,
    pub delta_t: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// `"sgd_momentum"` or `"adagrad"`.
    pub optimizer: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub dropout_p: f64,
    pub epochs: usize,
    pub delta_t: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub delta_t: usize,
    /// Extra crops as `[row, col, height, width]` on the descriptor grid.
    pub crops: Vec<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and resolve relative paths against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.test_manifest,
            &mut cfg.synthetic.out_dir,
            &mut cfg.run.dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.init_config()?.validate()?;
        self.finetune_config()?.validate()?;
        self.synthetic_config(true).validate()?;
        if self.eval.delta_t == 0 {
            return Err(Error::config("eval.delta_t must be positive"));
        }
        Ok(())
    }

    pub fn pool_config(&self) -> PoolConfig {
        let p = self.pool;
        PoolConfig {
            n_sigma: p.n_sigma,
            n_tau: p.n_tau,
            s_h: p.s_h,
            s_w: p.s_w,
            t: p.t,
            delta_s: p.delta_s,
        }
    }

    pub fn extractor_spec(&self) -> Result<ExtractorSpec> {
        let e = &self.extractor;
        match e.kind.as_str() {
            "conv" => Ok(ExtractorSpec::Conv {
                channels: e.channels,
                kernel: e.kernel,
                pool_window: e.pool_window,
                pool_stride: e.pool_stride,
                init_std: e.init_std,
            }),
            "precomputed" => Ok(ExtractorSpec::Precomputed),
            other => Err(Error::config(format!("extractor.kind {other:?} is not conv or precomputed"))),
        }
    }

    pub fn init_config(&self) -> Result<InitConfig> {
        let i = &self.init;
        Ok(InitConfig {
            extractor: self.extractor_spec()?,
            pool: self.pool_config(),
            subvolumes_per_video: i.subvolumes_per_video,
            pca_samples_per_video: i.pca_samples_per_video,
            components: i.components,
            projection_dim: i.projection_dim,
            c: i.c,
            power_norm: i.power_norm,
            em_iters: i.em_iters,
            em_tol: i.em_tol,
            svm_epochs: i.svm_epochs,
            svm_learning_rate: i.svm_learning_rate,
            delta_t: i.delta_t,
            seed: i.seed,
        })
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let f = &self.finetune;
        Ok(FinetuneConfig {
            optimizer: OptimizerKind::parse(&f.optimizer)
                .ok_or_else(|| Error::config(format!("finetune.optimizer {:?} is not sgd_momentum or adagrad", f.optimizer)))?,
            learning_rate: f.learning_rate,
            momentum: f.momentum,
            lr_decay: f.lr_decay,
            dropout_p: f.dropout_p,
            epochs: f.epochs,
            delta_t: f.delta_t,
            seed: f.seed,
        })
    }

    pub fn synthetic_config(&self, train: bool) -> SyntheticConfig {
        let s = &self.synthetic;
        SyntheticConfig {
            seed: if train { s.train_seed } else { s.test_seed },
            classes: s.classes,
            per_class: if train { s.train_per_class } else { s.test_per_class },
            frames: s.frames,
            height: s.height,
            width: s.width,
            speed: s.speed,
            blob_sigma: s.blob_sigma,
            blob_amplitude: s.blob_amplitude,
            noise_std: s.noise_std,
        }
    }

    pub fn crops(&self) -> CropSpec {
        CropSpec::new(
            self.eval
                .crops
                .iter()
                .map(|&[row, col, height, width]| Region { row, col, height, width })
                .collect(),
        )
    }
}
