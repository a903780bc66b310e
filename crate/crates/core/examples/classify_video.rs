//! Initialize a small network, classify a long video with several crops, and
//! reload the bundle from disk.

use fvnet::bundle::{load_bundle, save_bundle};
use fvnet::data::{prepare, synthesize, InputKind, SyntheticConfig, VideoSample};
use fvnet::fisher::Region;
use fvnet::pipeline::{classify_video, CropSpec};
use fvnet::pool::PoolConfig;
use fvnet::train::{init_pipeline, ExtractorSpec, InitConfig};

fn main() -> fvnet::Result<()> {
    let mut cfg = SyntheticConfig::new(5, 4, 8, 30, 32, 32);
    cfg.noise_std = 0.5;
    let samples: Vec<VideoSample> = synthesize(&cfg)?
        .into_iter()
        .map(|s| VideoSample {
            video: prepare(InputKind::Frames, &s.video),
            label: s.label,
        })
        .collect();
    let init = InitConfig {
        extractor: ExtractorSpec::Conv {
            channels: 4,
            kernel: 5,
            pool_window: 2,
            pool_stride: 2,
            init_std: 1.0,
        },
        pool: PoolConfig {
            n_sigma: 2,
            n_tau: 3,
            s_h: 3,
            s_w: 3,
            t: 15,
            delta_s: 2,
        },
        subvolumes_per_video: 30,
        pca_samples_per_video: 20,
        components: 4,
        projection_dim: 6,
        c: 100.0,
        power_norm: true,
        em_iters: 50,
        em_tol: 1e-6,
        svm_epochs: 200,
        svm_learning_rate: 0.5,
        delta_t: 5,
        seed: 1,
    };
    let bundle = init_pipeline(&samples, 4, &init)?;

    // the descriptor grid is 5x5; add the four 3x3 corners as extra crops
    let corners = [(0, 0), (0, 2), (2, 0), (2, 2)]
        .iter()
        .map(|&(row, col)| Region { row, col, height: 3, width: 3 })
        .collect();
    let crops = CropSpec::new(corners);
    let video = &samples[3];
    let result = classify_video(&bundle, &video.video, 5, &crops)?;
    println!("label {}, predicted {}", video.label, result.class);
    println!("averaged scores {:.3?} over {} crops", result.scores, result.fvs.len());

    let dir = std::env::temp_dir().join("fvnet_classify_bundle");
    save_bundle(&dir, &bundle)?;
    let reloaded = load_bundle(&dir)?;
    let again = classify_video(&reloaded, &video.video, 5, &crops)?;
    println!("identical after reload: {}", again == result);
    Ok(())
}
