//! Two-phase training: unsupervised layer-wise initialization, then
//! end-to-end finetuning one video at a time.

pub mod dropout;
pub mod gradcheck;
pub mod optim;

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::bundle::{Extractor, ModelBundle};
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::extract::{extract, ConvExtractorParams};
use crate::gmm::{em_fit, EmConfig};
use crate::pipeline::{backward, classify_video, forward, trace_loss, CropSpec};
use crate::pool::{pool_position, PoolConfig};
use crate::reduce::pca_fit;
use crate::rng;
use crate::svm::{train_svm, SvmTrainConfig};

pub use dropout::{dropout_forward, DropoutMask};
pub use optim::{adagrad_step, sgd_momentum_step, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtractorSpec {
    Conv {
        channels: usize,
        kernel: usize,
        pool_window: usize,
        pool_stride: usize,
        init_std: f64,
    },
    Precomputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub extractor: ExtractorSpec,
    pub pool: PoolConfig,
    /// Random aligned subvolumes drawn per video for the mixture fit.
    pub subvolumes_per_video: usize,
    /// How many of those also feed the projection fit.
    pub pca_samples_per_video: usize,
    pub components: usize,
    pub projection_dim: usize,
    pub c: f64,
    pub power_norm: bool,
    pub em_iters: usize,
    pub em_tol: f64,
    pub svm_epochs: usize,
    pub svm_learning_rate: f64,
    /// Temporal stride used when encoding the training videos.
    pub delta_t: usize,
    pub seed: u64,
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        if self.subvolumes_per_video == 0
            || self.pca_samples_per_video == 0
            || self.components == 0
            || self.projection_dim == 0
            || self.delta_t == 0
        {
            return Err(Error::config("initialization counts must be positive"));
        }
        if self.pca_samples_per_video > self.subvolumes_per_video {
            return Err(Error::config("pca_samples_per_video exceeds subvolumes_per_video"));
        }
        if !(self.c > 0.0) {
            return Err(Error::config("C must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    /// Probability of dropping a feature-map entry.
    pub dropout_p: f64,
    pub epochs: usize,
    pub delta_t: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p must be in [0, 1)"));
        }
        if self.delta_t == 0 {
            return Err(Error::config("delta_t must be positive"));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        writeln!(out, "{},{},{:.12e},{:.6}", r.epoch, r.split, r.loss, r.accuracy).unwrap();
    }
    out
}

fn feature_maps(extractor: &Extractor, video: &crate::Tensor4) -> Result<crate::Tensor4> {
    match extractor {
        Extractor::Conv(p) => extract(video, p),
        Extractor::Precomputed { .. } => Ok(video.clone()),
    }
}

/// Pooled descriptors of random aligned subvolumes: a random window start and
/// a random grid position per draw.
fn sample_descriptors(
    extractor: &Extractor,
    pool: &PoolConfig,
    video: &crate::Tensor4,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let maps = feature_maps(extractor, video)?;
    let [frames, f_h, f_w, d] = maps.dims();
    if frames < pool.t {
        return Err(Error::Validation(format!("video has {frames} frames, the window needs {}", pool.t)));
    }
    let (gh, gw) = pool.output_dims(f_h, f_w)?;
    let dim = pool.descriptor_dim(d);
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let start = r.random_range(0..=frames - pool.t);
        let gy = r.random_range(0..gh);
        let gx = r.random_range(0..gw);
        let window = maps.frames(start, pool.t)?;
        let mut v = vec![0.0; dim];
        pool_position(&window, pool, gy * pool.delta_s, gx * pool.delta_s, &mut v);
        out.push(v);
    }
    Ok(out)
}

/// Unsupervised initialization: projection fit, mixture fit, then the
/// classifier on the resulting Fisher vectors.
pub fn init_pipeline(train: &[VideoSample], classes: usize, cfg: &InitConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let in_channels = train[0].video.dims()[3];
    let extractor = match cfg.extractor {
        ExtractorSpec::Conv {
            channels,
            kernel,
            pool_window,
            pool_stride,
            init_std,
        } => Extractor::Conv(ConvExtractorParams::random(
            channels,
            kernel,
            in_channels,
            pool_window,
            pool_stride,
            init_std,
            rng::derive_seed(cfg.seed, 0),
        )?),
        ExtractorSpec::Precomputed => Extractor::Precomputed { channels: in_channels },
    };

    let per_video = train
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            sample_descriptors(
                &extractor,
                &cfg.pool,
                &s.video,
                cfg.subvolumes_per_video,
                rng::derive_seed(cfg.seed, 1_000 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pca_samples: Vec<Vec<f64>> = per_video
        .iter()
        .flat_map(|v| v[..cfg.pca_samples_per_video].iter().cloned())
        .collect();
    info!("projection fit on {} descriptors of dimension {}", pca_samples.len(), pca_samples[0].len());
    let projection = pca_fit(&pca_samples, cfg.projection_dim)?;

    let projected = per_video
        .iter()
        .flatten()
        .map(|v| projection.project_vector(v))
        .collect::<Result<Vec<_>>>()?;
    info!("mixture fit on {} projected descriptors", projected.len());
    let fit = em_fit(
        &projected,
        &EmConfig {
            components: cfg.components,
            max_iters: cfg.em_iters,
            tol: cfg.em_tol,
            seed: rng::derive_seed(cfg.seed, 2),
        },
    )?;
    if fit.reseeded > 0 {
        warn!("{} empty mixture components were reseeded", fit.reseeded);
    }

    let svm = crate::svm::SvmParams::zeros(classes, crate::fisher::fv_dim(cfg.components, cfg.projection_dim), cfg.c, train.len())?;
    let mut bundle = ModelBundle::new(extractor, cfg.pool, projection, fit.params, svm, cfg.power_norm)?;

    let features = train
        .par_iter()
        .map(|s| Ok(classify_video(&bundle, &s.video, cfg.delta_t, &CropSpec::full())?.fvs.swap_remove(0).values))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let (svm, history) = train_svm(
        &features,
        &labels,
        classes,
        &SvmTrainConfig {
            c: cfg.c,
            epochs: cfg.svm_epochs,
            learning_rate: cfg.svm_learning_rate,
            ..SvmTrainConfig::default()
        },
    )?;
    info!(
        "classifier objective {:.6} after {} epochs",
        history.last().copied().unwrap_or(f64::NAN),
        history.len()
    );
    bundle.svm = svm;
    Ok(bundle)
}

/// Mean classifier loss and accuracy of `bundle` over `samples`, without
/// dropout.
pub fn evaluate(bundle: &ModelBundle, samples: &[VideoSample], delta_t: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let per = samples
        .par_iter()
        .map(|s| {
            let trace = forward(bundle, &s.video, delta_t, &CropSpec::full(), None)?;
            let loss = trace_loss(bundle, &trace, s.label)?;
            let class = crate::svm::predict(&trace.scores)?;
            Ok((loss, class == s.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Finetune with metrics on the training set only.
pub fn finetune(bundle: &ModelBundle, train: &[VideoSample], cfg: &FinetuneConfig) -> Result<(ModelBundle, Vec<EpochMetrics>)> {
    finetune_with(bundle, train, None, cfg, |_, _| Ok(()))
}

/// Finetune end to end, one optimizer step per video. Epoch 0 of the metrics
/// is the starting bundle. `on_epoch` sees each finished epoch's bundle.
pub fn finetune_with(
    bundle: &ModelBundle,
    train: &[VideoSample],
    test: Option<&[VideoSample]>,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<(ModelBundle, Vec<EpochMetrics>)> {
    cfg.validate()?;
    bundle.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut b = bundle.clone();
    let sizes = b.group_sizes();
    let reuse = matches!(&b.optimizer, Some(o) if o.kind == cfg.optimizer);
    let mut state = if reuse {
        b.optimizer.take().unwrap()
    } else {
        OptimizerState::new(cfg.optimizer, &sizes)
    };

    let mut metrics = Vec::new();
    let record = |epoch: usize, b: &ModelBundle, metrics: &mut Vec<EpochMetrics>| -> Result<()> {
        let (loss, accuracy) = evaluate(b, train, cfg.delta_t)?;
        metrics.push(EpochMetrics {
            epoch,
            split: "train",
            loss,
            accuracy,
        });
        if let Some(test) = test {
            let (loss, accuracy) = evaluate(b, test, cfg.delta_t)?;
            metrics.push(EpochMetrics {
                epoch,
                split: "test",
                loss,
                accuracy,
            });
        }
        info!(
            "epoch {epoch}: {}",
            metrics
                .iter()
                .filter(|m| m.epoch == epoch)
                .map(|m| format!("{} loss {:.5} acc {:.4}", m.split, m.loss, m.accuracy))
                .collect::<Vec<_>>()
                .join(", ")
        );
        Ok(())
    };
    record(0, &b, &mut metrics)?;

    let mut lr = cfg.learning_rate;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        for (step, &i) in order.iter().enumerate() {
            let sample = &train[i];
            let drop_seed = rng::derive_seed(cfg.seed, ((epoch as u64) << 32) | step as u64);
            let trace = forward(&b, &sample.video, cfg.delta_t, &CropSpec::full(), Some((cfg.dropout_p, drop_seed)))?;
            let loss = trace_loss(&b, &trace, sample.label)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { layer: "loss" });
            }
            let grads = backward(&b, &trace, sample.label)?;
            let gs = grads.groups();
            if gs.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite { layer: "gradient" });
            }
            for (gi, (param, grad)) in b.groups_mut().into_iter().zip(gs).enumerate() {
                state.step(gi, param, grad, lr, cfg.momentum);
            }
            b.gmm.clamp_variances();
        }
        lr *= cfg.lr_decay;
        record(epoch, &b, &mut metrics)?;
        b.optimizer = Some(state.clone());
        on_epoch(epoch, &b)?;
        b.optimizer = None;
    }
    b.optimizer = Some(state);
    Ok((b, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticConfig};

    fn tiny_set(seed: u64, per_class: usize) -> Vec<VideoSample> {
        let mut cfg = SyntheticConfig::new(seed, 2, per_class, 15, 32, 32);
        cfg.noise_std = 0.1;
        synthesize(&cfg)
            .unwrap()
            .into_iter()
            .map(|s| VideoSample {
                video: crate::data::prepare(crate::data::InputKind::Frames, &s.video),
                label: s.label,
            })
            .collect()
    }

    fn tiny_init(seed: u64) -> InitConfig {
        InitConfig {
            extractor: ExtractorSpec::Conv {
                channels: 3,
                kernel: 5,
                pool_window: 4,
                pool_stride: 4,
                init_std: 0.2,
            },
            pool: PoolConfig {
                n_sigma: 2,
                n_tau: 3,
                s_h: 2,
                s_w: 2,
                t: 15,
                delta_s: 2,
            },
            subvolumes_per_video: 20,
            pca_samples_per_video: 10,
            components: 2,
            projection_dim: 4,
            c: 100.0,
            power_norm: true,
            em_iters: 20,
            em_tol: 1e-6,
            svm_epochs: 50,
            svm_learning_rate: 0.5,
            delta_t: 15,
            seed,
        }
    }

    fn tiny_finetune(lr: f64) -> FinetuneConfig {
        FinetuneConfig {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: lr,
            momentum: 0.9,
            lr_decay: 0.95,
            dropout_p: 0.0,
            epochs: 1,
            delta_t: 15,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let data = tiny_set(1, 3);
        let a = init_pipeline(&data, 2, &tiny_init(4)).unwrap();
        let b = init_pipeline(&data, 2, &tiny_init(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_sizes_still_build() {
        let data = tiny_set(2, 2);
        let mut cfg = tiny_init(5);
        cfg.components = 1;
        cfg.projection_dim = 1;
        let b = init_pipeline(&data, 2, &cfg).unwrap();
        assert_eq!(b.fv_dim(), 3);
        b.validate().unwrap();
    }

    #[test]
    fn zero_rate_leaves_bundle_unchanged() {
        let data = tiny_set(3, 2);
        let b = init_pipeline(&data, 2, &tiny_init(6)).unwrap();
        let (after, metrics) = finetune(&b, &data, &tiny_finetune(0.0)).unwrap();
        assert_eq!(after.groups(), b.groups());
        assert_eq!(metrics.len(), 2);
        assert_eq!(metrics[0].loss, metrics[1].loss);
    }

    #[test]
    fn every_group_gets_gradient() {
        let data = tiny_set(4, 2);
        let mut b = init_pipeline(&data, 2, &tiny_init(7)).unwrap();
        // shrink the classifier so some margins are violated
        b.svm.weights.iter_mut().for_each(|w| *w *= 0.1);
        let mut seen = [false; 9];
        for s in &data {
            let trace = forward(&b, &s.video, 15, &CropSpec::full(), None).unwrap();
            let g = backward(&b, &trace, s.label).unwrap();
            for (flag, group) in seen.iter_mut().zip(g.groups()) {
                *flag |= group.iter().any(|&v| v != 0.0);
            }
        }
        assert!(seen.iter().all(|&s| s), "{seen:?}");
    }

    #[test]
    fn metrics_csv_format() {
        let rows = [EpochMetrics {
            epoch: 0,
            split: "train",
            loss: 1.5,
            accuracy: 0.25,
        }];
        assert_eq!(metrics_csv(&rows), "epoch,split,loss,accuracy\n0,train,1.500000000000e0,0.250000\n");
    }

    #[test]
    fn bad_configs() {
        let mut f = tiny_finetune(0.1);
        f.dropout_p = 1.0;
        assert!(f.validate().is_err());
        let mut i = tiny_init(1);
        i.pca_samples_per_video = 100;
        assert!(i.validate().is_err());
    }
}
