//! The complete network and its on-disk form.
//!
//! A bundle directory holds `bundle.txt`, a `key=value` header with every
//! hyperparameter and tensor shape, plus one `FVNT` file per parameter tensor
//! (and per optimizer slot, when training state is saved):
//!
//! ```text
//! bundle.txt
//! extractor_filters.fvnt   (d, k_h, k_w, c)       conv extractor only
//! extractor_biases.fvnt    (d)                    conv extractor only
//! projection_mean.fvnt     (D)
//! projection_axes.fvnt     (n_c, D)
//! gmm_alpha.fvnt           (K)
//! gmm_means.fvnt           (K, n_c)
//! gmm_log_vars.fvnt        (K, n_c)
//! svm_weights.fvnt         (m, d_FV)
//! svm_bias.fvnt            (m)
//! optim_<group>.fvnt       one per parameter group
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::extract::ConvExtractorParams;
use crate::fisher::fv_dim;
use crate::gmm::GmmParams;
use crate::pool::PoolConfig;
use crate::reduce::ProjectionParams;
use crate::svm::SvmParams;
use crate::tensor::{decode_raw, encode_raw, DType, Tensor4};
use crate::train::{OptimizerKind, OptimizerState};

pub const BUNDLE_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "bundle.txt";

/// Parameter groups in canonical order. Optimizer slots, gradients and the
/// files on disk all follow it.
pub const GROUPS: [&str; 9] = [
    "extractor_filters",
    "extractor_biases",
    "projection_mean",
    "projection_axes",
    "gmm_alpha",
    "gmm_means",
    "gmm_log_vars",
    "svm_weights",
    "svm_bias",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Conv(ConvExtractorParams),
    /// Inputs are already `(L, F_h, F_w, d)` feature maps.
    Precomputed { channels: usize },
}

impl Extractor {
    pub fn channels(&self) -> usize {
        match self {
            Extractor::Conv(p) => p.channels(),
            Extractor::Precomputed { channels } => *channels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Extractor::Conv(p) => p.parameter_count(),
            Extractor::Precomputed { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub extractor: Extractor,
    pub pool: PoolConfig,
    pub projection: ProjectionParams,
    pub gmm: GmmParams,
    pub svm: SvmParams,
    pub power_norm: bool,
    pub optimizer: Option<OptimizerState>,
}

/// Per-layer trainable parameter counts. The extractor is reported but not
/// part of `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub extractor: usize,
    pub projection: usize,
    pub gmm: usize,
    pub classifier: usize,
    pub total: usize,
}

/// Counts for a network with descriptor size `d`, `n_c` projected dimensions,
/// `k` components and `m` classes.
pub fn count_parameters_symbolic(d: usize, n_c: usize, k: usize, m: usize) -> ParamCounts {
    let projection = d * (n_c + 1);
    let gmm = k * (2 * n_c + 1);
    let classifier = m * k * (2 * n_c + 1) + m;
    ParamCounts {
        extractor: 0,
        projection,
        gmm,
        classifier,
        total: projection + gmm + classifier,
    }
}

pub fn count_parameters(bundle: &ModelBundle) -> ParamCounts {
    let projection = bundle.projection.parameter_count();
    let gmm = bundle.gmm.parameter_count();
    let classifier = bundle.svm.parameter_count();
    ParamCounts {
        extractor: bundle.extractor.parameter_count(),
        projection,
        gmm,
        classifier,
        total: projection + gmm + classifier,
    }
}

impl ModelBundle {
    pub fn new(
        extractor: Extractor,
        pool: PoolConfig,
        projection: ProjectionParams,
        gmm: GmmParams,
        svm: SvmParams,
        power_norm: bool,
    ) -> Result<Self> {
        let b = ModelBundle {
            extractor,
            pool,
            projection,
            gmm,
            svm,
            power_norm,
            optimizer: None,
        };
        b.validate()?;
        Ok(b)
    }

    /// Check that each layer's output size is the next layer's input size.
    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        if let Extractor::Conv(p) = &self.extractor {
            p.validate()?;
        }
        let dim = |msg: String| Err(Error::DimInconsistency(msg));
        let descriptor = self.pool.descriptor_dim(self.extractor.channels());
        if self.projection.input_dim != descriptor {
            return dim(format!(
                "pooling yields {descriptor}-dim descriptors, projection expects {}",
                self.projection.input_dim
            ));
        }
        if self.gmm.dim != self.projection.components {
            return dim(format!(
                "projection yields {} dims, mixture expects {}",
                self.projection.components, self.gmm.dim
            ));
        }
        let fv = fv_dim(self.gmm.components, self.gmm.dim);
        if self.svm.dim != fv {
            return dim(format!("Fisher vectors have {fv} entries, classifier expects {}", self.svm.dim));
        }
        if let Some(opt) = &self.optimizer {
            let sizes = self.group_sizes();
            if opt.slots.len() != sizes.len() || opt.slots.iter().zip(&sizes).any(|(s, &n)| s.len() != n) {
                return dim("optimizer state does not match parameter groups".into());
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.svm.classes
    }

    pub fn fv_dim(&self) -> usize {
        fv_dim(self.gmm.components, self.gmm.dim)
    }

    /// Parameter tensors in [`GROUPS`] order. A precomputed extractor
    /// contributes two empty groups.
    pub fn groups(&self) -> [&[f64]; 9] {
        let (filters, biases): (&[f64], &[f64]) = match &self.extractor {
            Extractor::Conv(p) => (p.filters.data(), &p.biases),
            Extractor::Precomputed { .. } => (&[], &[]),
        };
        [
            filters,
            biases,
            &self.projection.mean,
            &self.projection.axes,
            &self.gmm.alpha,
            &self.gmm.means,
            &self.gmm.log_vars,
            &self.svm.weights,
            &self.svm.bias,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 9] {
        let (filters, biases): (&mut [f64], &mut [f64]) = match &mut self.extractor {
            Extractor::Conv(p) => (p.filters.data_mut(), &mut p.biases),
            Extractor::Precomputed { .. } => (&mut [], &mut []),
        };
        [
            filters,
            biases,
            &mut self.projection.mean,
            &mut self.projection.axes,
            &mut self.gmm.alpha,
            &mut self.gmm.means,
            &mut self.gmm.log_vars,
            &mut self.svm.weights,
            &mut self.svm.bias,
        ]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups().iter().map(|g| g.len()).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_bundle(dir, self)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_bundle(dir)
    }
}

fn write_raw(dir: &Path, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    let path = dir.join(format!("{name}.fvnt"));
    fs::write(&path, encode_raw(dims, DType::F64, data)).map_err(|e| Error::io(&path, e))
}

fn header_text(b: &ModelBundle) -> String {
    let mut h = Vec::new();
    h.push(format!("format_version={BUNDLE_VERSION}"));
    match &b.extractor {
        Extractor::Conv(p) => {
            let [d, kh, kw, cin] = p.filters.dims();
            h.push("extractor=conv".into());
            h.push(format!("extractor.channels={d}"));
            h.push(format!("extractor.kernel_h={kh}"));
            h.push(format!("extractor.kernel_w={kw}"));
            h.push(format!("extractor.in_channels={cin}"));
            h.push(format!("extractor.pool_window={}", p.pool_window));
            h.push(format!("extractor.pool_stride={}", p.pool_stride));
        }
        Extractor::Precomputed { channels } => {
            h.push("extractor=precomputed".into());
            h.push(format!("extractor.channels={channels}"));
        }
    }
    let p = &b.pool;
    h.push(format!("pool.n_sigma={}", p.n_sigma));
    h.push(format!("pool.n_tau={}", p.n_tau));
    h.push(format!("pool.s_h={}", p.s_h));
    h.push(format!("pool.s_w={}", p.s_w));
    h.push(format!("pool.t={}", p.t));
    h.push(format!("pool.delta_s={}", p.delta_s));
    h.push(format!("projection.input_dim={}", b.projection.input_dim));
    h.push(format!("projection.components={}", b.projection.components));
    h.push(format!("gmm.components={}", b.gmm.components));
    h.push(format!("gmm.dim={}", b.gmm.dim));
    h.push(format!("svm.classes={}", b.svm.classes));
    h.push(format!("svm.dim={}", b.svm.dim));
    h.push(format!("svm.c={:?}", b.svm.c));
    h.push(format!("svm.n_train={}", b.svm.n_train));
    h.push(format!("power_norm={}", b.power_norm));
    h.push(format!(
        "optimizer={}",
        b.optimizer.as_ref().map_or("none", |o| o.kind.as_str())
    ));
    h.join("\n") + "\n"
}

/// Write `bundle` into directory `dir`, creating it if needed.
pub fn save_bundle(dir: impl AsRef<Path>, bundle: &ModelBundle) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Extractor::Conv(p) = &bundle.extractor {
        write_raw(dir, "extractor_filters", &p.filters.dims(), p.filters.data())?;
        write_raw(dir, "extractor_biases", &[p.biases.len()], &p.biases)?;
    }
    let (k, n_c) = (bundle.gmm.components, bundle.gmm.dim);
    let pr = &bundle.projection;
    write_raw(dir, "projection_mean", &[pr.input_dim], &pr.mean)?;
    write_raw(dir, "projection_axes", &[pr.components, pr.input_dim], &pr.axes)?;
    write_raw(dir, "gmm_alpha", &[k], &bundle.gmm.alpha)?;
    write_raw(dir, "gmm_means", &[k, n_c], &bundle.gmm.means)?;
    write_raw(dir, "gmm_log_vars", &[k, n_c], &bundle.gmm.log_vars)?;
    let s = &bundle.svm;
    write_raw(dir, "svm_weights", &[s.classes, s.dim], &s.weights)?;
    write_raw(dir, "svm_bias", &[s.classes], &s.bias)?;
    if let Some(opt) = &bundle.optimizer {
        for (name, slot) in GROUPS.iter().zip(&opt.slots) {
            write_raw(dir, &format!("optim_{name}"), &[slot.len()], slot)?;
        }
    }
    let path = dir.join(HEADER_FILE);
    fs::write(&path, header_text(bundle)).map_err(|e| Error::io(&path, e))
}

struct Header {
    map: BTreeMap<String, String>,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Manifest {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Header { map })
    }

    fn str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("bundle header lacks {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("bundle header {key}={v} is not a number")))
    }
}

fn read_raw(dir: &Path, name: &str, expected: &[usize]) -> Result<Vec<f64>> {
    let path = dir.join(format!("{name}.fvnt"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (dims, _, data) = decode_raw(&bytes)?;
    if dims != expected {
        return Err(Error::DimInconsistency(format!(
            "{name} stored as {dims:?}, header implies {expected:?}"
        )));
    }
    Ok(data)
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let h = Header::parse(&text)?;
    let version: u32 = h.num("format_version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let channels: usize = h.num("extractor.channels")?;
    let extractor = match h.str("extractor")? {
        "conv" => {
            let dims = [
                channels,
                h.num("extractor.kernel_h")?,
                h.num("extractor.kernel_w")?,
                h.num("extractor.in_channels")?,
            ];
            let filters = Tensor4::new(dims, read_raw(dir, "extractor_filters", &dims)?)?;
            let biases = read_raw(dir, "extractor_biases", &[channels])?;
            Extractor::Conv(ConvExtractorParams::new(
                filters,
                biases,
                h.num("extractor.pool_window")?,
                h.num("extractor.pool_stride")?,
            )?)
        }
        "precomputed" => Extractor::Precomputed { channels },
        other => return Err(Error::config(format!("unknown extractor kind {other:?}"))),
    };
    let pool = PoolConfig {
        n_sigma: h.num("pool.n_sigma")?,
        n_tau: h.num("pool.n_tau")?,
        s_h: h.num("pool.s_h")?,
        s_w: h.num("pool.s_w")?,
        t: h.num("pool.t")?,
        delta_s: h.num("pool.delta_s")?,
    };
    let input_dim: usize = h.num("projection.input_dim")?;
    let n_c: usize = h.num("projection.components")?;
    let projection = ProjectionParams::new(
        read_raw(dir, "projection_mean", &[input_dim])?,
        read_raw(dir, "projection_axes", &[n_c, input_dim])?,
        n_c,
    )?;
    let k: usize = h.num("gmm.components")?;
    let gmm_dim: usize = h.num("gmm.dim")?;
    let gmm = GmmParams::new(
        read_raw(dir, "gmm_alpha", &[k])?,
        read_raw(dir, "gmm_means", &[k, gmm_dim])?,
        read_raw(dir, "gmm_log_vars", &[k, gmm_dim])?,
    )?;
    let classes: usize = h.num("svm.classes")?;
    let svm_dim: usize = h.num("svm.dim")?;
    let mut svm = SvmParams::zeros(classes, svm_dim, h.num("svm.c")?, h.num("svm.n_train")?)?;
    svm.weights = read_raw(dir, "svm_weights", &[classes, svm_dim])?;
    svm.bias = read_raw(dir, "svm_bias", &[classes])?;
    let power_norm = match h.str("power_norm")? {
        "true" => true,
        "false" => false,
        other => return Err(Error::config(format!("power_norm={other} is not a boolean"))),
    };
    let mut bundle = ModelBundle {
        extractor,
        pool,
        projection,
        gmm,
        svm,
        power_norm,
        optimizer: None,
    };
    bundle.validate()?;
    let opt = h.str("optimizer")?;
    if opt != "none" {
        let kind = OptimizerKind::parse(opt).ok_or_else(|| Error::config(format!("unknown optimizer {opt:?}")))?;
        let slots = GROUPS
            .iter()
            .zip(bundle.group_sizes())
            .map(|(name, n)| read_raw(dir, &format!("optim_{name}"), &[n]))
            .collect::<Result<Vec<_>>>()?;
        bundle.optimizer = Some(OptimizerState { kind, slots });
    }
    Ok(bundle)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    pub(crate) fn small_bundle(seed: u64) -> ModelBundle {
        let mut r = rng::seeded(seed);
        let ext = ConvExtractorParams::random(3, 3, 1, 2, 2, 0.5, seed).unwrap();
        let pool = PoolConfig {
            n_sigma: 2,
            n_tau: 1,
            s_h: 1,
            s_w: 1,
            t: 2,
            delta_s: 1,
        };
        let d = pool.descriptor_dim(3);
        let (n_c, k, m) = (2, 3, 2);
        let mut gen = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let projection = ProjectionParams::new(gen(d), gen(n_c * d), n_c).unwrap();
        let gmm = GmmParams::new(gen(k), gen(k * n_c), gen(k * n_c)).unwrap();
        let mut svm = SvmParams::zeros(m, fv_dim(k, n_c), 100.0, 10).unwrap();
        svm.weights = gen(m * fv_dim(k, n_c));
        svm.bias = gen(m);
        ModelBundle::new(Extractor::Conv(ext), pool, projection, gmm, svm, true).unwrap()
    }

    #[test]
    fn reference_scale_count() {
        let c = count_parameters_symbolic(6144, 100, 256, 101);
        assert_eq!(c.total, 5_869_157);
    }

    #[test]
    fn tiny_count_by_hand() {
        let c = count_parameters_symbolic(1, 1, 1, 2);
        assert_eq!((c.projection, c.gmm, c.classifier, c.total), (2, 3, 8, 13));
    }

    #[test]
    fn count_matches_enumeration() {
        let b = small_bundle(5);
        let c = count_parameters(&b);
        let sizes = b.group_sizes();
        assert_eq!(c.extractor, sizes[0] + sizes[1]);
        assert_eq!(c.total, sizes[2..].iter().sum::<usize>());
        let sym = count_parameters_symbolic(b.projection.input_dim, b.gmm.dim, b.gmm.components, b.classes());
        assert_eq!(sym.total, c.total);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = small_bundle(9);
        b.optimizer = Some(OptimizerState {
            kind: OptimizerKind::Adagrad,
            slots: b.group_sizes().iter().map(|&n| vec![0.25; n]).collect(),
        });
        save_bundle(dir.path(), &b).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        for (x, y) in back.groups().iter().zip(b.groups()) {
            assert!(x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn inconsistent_header_is_dim_error() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &small_bundle(1)).unwrap();
        let path = dir.path().join(HEADER_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("gmm.components=3", "gmm.components=4");
        fs::write(&path, text).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert_eq!(err.category(), "dim_mismatch", "{err}");
        assert!(err.to_string().contains("dim inconsistency"));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &small_bundle(1)).unwrap();
        let path = dir.path().join(HEADER_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("format_version=1", "format_version=2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut b = small_bundle(2);
        b.gmm = GmmParams::new(vec![0.0], vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(matches!(b.validate(), Err(Error::DimInconsistency(_))));
    }
}
