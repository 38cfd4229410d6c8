//! Seeded Gaussian open-set benchmarks, vector augmentations and batch
//! sampling.
//!
//! ID classes are isotropic Gaussians whose means sit on a circle of radius
//! `cluster_spread * cluster_std` in the plane of coordinates 0 and 1.
//! Extra-cluster OOD means have the same norm as the class means. They sit at
//! angles between the ID classes, tilted out of the class plane towards
//! coordinate 2 by [`OOD_LIFT_DEGREES`]. The unlabeled pool is built from two prefix-nested streams so
//! that runs at different OOD fractions share their leading samples.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Tilt of the extra-cluster OOD means out of the class plane. Smaller tilts
/// put OOD closer to the ID classes and make the benchmark harder.
pub const OOD_LIFT_DEGREES: f64 = 85.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// Gaussian clusters at angles between the ID classes, tilted out of the
    /// class plane with alternating sign along coordinate 2.
    ExtraClusters,
    /// Uniform samples over the bounding box of the ID classes (means +- 3 std).
    UniformNoise,
}

impl OodKind {
    pub const ALL: [OodKind; 2] = [OodKind::ExtraClusters, OodKind::UniformNoise];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::ExtraClusters => "extra_clusters",
            OodKind::UniformNoise => "uniform_noise",
        }
    }
}

impl FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown OOD kind `{s}`")))
    }
}

impl std::fmt::Display for OodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub n_labeled: usize,
    /// Unlabeled pool size at an OOD fraction of 0.5. Lower fractions drop
    /// OOD samples from it, higher fractions drop ID samples.
    pub n_unlabeled: usize,
    pub ood_fraction: f64,
    pub ood_kind: OodKind,
    pub n_ood_clusters: usize,
    /// Radius of the class-mean circle in units of `cluster_std`.
    pub cluster_spread: f64,
    pub cluster_std: f64,
    pub n_test_id: usize,
    pub n_test_ood: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            num_classes: 4,
            n_labeled: 40,
            n_unlabeled: 4000,
            ood_fraction: 0.5,
            ood_kind: OodKind::ExtraClusters,
            n_ood_clusters: 2,
            cluster_spread: 6.0,
            cluster_std: 0.1,
            n_test_id: 1000,
            n_test_ood: 1000,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input_dim < 2 {
            return cfg(format!("input_dim must be >= 2, got {}", self.input_dim));
        }
        if self.num_classes == 0 {
            return cfg("num_classes must be >= 1".into());
        }
        if self.n_labeled == 0 || self.n_labeled % self.num_classes != 0 {
            return cfg(format!(
                "n_labeled ({}) must be a positive multiple of num_classes ({})",
                self.n_labeled, self.num_classes
            ));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return cfg(format!("ood_fraction must lie in [0, 1], got {}", self.ood_fraction));
        }
        if self.n_ood_clusters == 0 {
            return cfg("n_ood_clusters must be >= 1".into());
        }
        if !(self.cluster_std > 0.0) || !self.cluster_std.is_finite() {
            return cfg(format!("cluster_std must be > 0, got {}", self.cluster_std));
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return cfg(format!("cluster_spread must be >= 0, got {}", self.cluster_spread));
        }
        if self.ood_kind == OodKind::ExtraClusters && self.input_dim < 3 {
            return cfg("extra_clusters needs input_dim >= 3".into());
        }
        Ok(())
    }

    fn radius(&self) -> f64 {
        self.cluster_spread * self.cluster_std
    }

    /// Mean of ID class `c`.
    pub fn class_mean(&self, c: usize) -> Vec<f64> {
        let theta = 2.0 * PI * c as f64 / self.num_classes as f64;
        self.on_circle(theta)
    }

    fn on_circle(&self, theta: f64) -> Vec<f64> {
        let mut m = vec![0.0; self.input_dim];
        m[0] = self.radius() * theta.cos();
        m[1] = self.radius() * theta.sin();
        m
    }

    /// Mean of OOD cluster `j` of the extra-clusters kind.
    pub fn ood_cluster_mean(&self, j: usize) -> Vec<f64> {
        let alpha = OOD_LIFT_DEGREES.to_radians();
        let mut m = self.on_circle(2.0 * PI * (j as f64 + 0.5) / self.num_classes as f64);
        for v in &mut m {
            *v *= alpha.cos();
        }
        m[2] = if j % 2 == 0 { 1.0 } else { -1.0 } * self.radius() * alpha.sin();
        m
    }

    /// Numbers of (ID, OOD) unlabeled samples for the configured fraction.
    pub fn unlabeled_counts(&self) -> (usize, usize) {
        let anchor = (self.n_unlabeled / 2) as f64;
        let f = self.ood_fraction;
        if f <= 0.5 {
            (anchor as usize, (anchor * f / (1.0 - f)).round() as usize)
        } else {
            ((anchor * (1.0 - f) / f).round() as usize, anchor as usize)
        }
    }
}

/// Ground truth for unlabeled samples. Only evaluation and bookkeeping read it.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledTruth {
    pub is_ood: Vec<bool>,
    pub class: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetDataset {
    pub num_classes: usize,
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
    pub unlabeled_truth: Option<UnlabeledTruth>,
    pub test_id_x: Tensor,
    pub test_id_y: Vec<usize>,
    pub test_ood_x: Tensor,
    pub unseen_ood_x: Option<Tensor>,
}

impl OpenSetDataset {
    pub fn input_dim(&self) -> usize {
        self.labeled_x.cols()
    }

    pub fn realized_ood_fraction(&self) -> Option<f64> {
        let t = self.unlabeled_truth.as_ref()?;
        if t.is_ood.is_empty() {
            return None;
        }
        Some(t.is_ood.iter().filter(|&&b| b).count() as f64 / t.is_ood.len() as f64)
    }
}

fn gaussian_around<R: Rng>(rng: &mut R, mean: &[f64], std: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn stack(rows: Vec<Vec<f64>>, cols: usize) -> Tensor {
    let n = rows.len();
    Tensor::new(n, cols, rows.concat()).expect("rows have the configured width")
}

fn id_samples(cfg: &DataConfig, seed: u64, stream: u64, n: usize) -> (Tensor, Vec<usize>) {
    let mut rng = rng::stream(seed, stream, 0);
    let means: Vec<Vec<f64>> = (0..cfg.num_classes).map(|c| cfg.class_mean(c)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    let rows = labels
        .iter()
        .map(|&c| gaussian_around(&mut rng, &means[c], cfg.cluster_std))
        .collect();
    (stack(rows, cfg.input_dim), labels)
}

/// `n` OOD samples of `kind`, drawn from the stream `(seed, stream, 0)`.
pub fn ood_samples(cfg: &DataConfig, kind: OodKind, seed: u64, stream: u64, n: usize) -> Result<Tensor> {
    let d = cfg.input_dim;
    if kind == OodKind::ExtraClusters && d < 3 {
        return Err(Error::Config("extra_clusters needs input_dim >= 3".into()));
    }
    let mut rng = rng::stream(seed, stream, 0);
    let rows = match kind {
        OodKind::ExtraClusters => {
            let k = cfg.n_ood_clusters;
            let means: Vec<Vec<f64>> = (0..k).map(|j| cfg.ood_cluster_mean(j)).collect();
            (0..n)
                .map(|i| gaussian_around(&mut rng, &means[i % k], cfg.cluster_std))
                .collect()
        }
        OodKind::UniformNoise => {
            let margin = 3.0 * cfg.cluster_std;
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for c in 0..cfg.num_classes {
                for (j, m) in cfg.class_mean(c).into_iter().enumerate() {
                    lo[j] = lo[j].min(m - margin);
                    hi[j] = hi[j].max(m + margin);
                }
            }
            (0..n)
                .map(|_| (0..d).map(|j| rng.random_range(lo[j]..hi[j])).collect())
                .collect()
        }
    };
    Ok(stack(rows, d))
}

/// Builds the full benchmark. A pure function of `(seed, cfg)`.
pub fn generate_gaussian_openset(seed: u64, cfg: &DataConfig) -> Result<OpenSetDataset> {
    cfg.validate()?;
    let c = cfg.num_classes;

    let mut rng = rng::stream(seed, tag::LABELED, 0);
    let per_class = cfg.n_labeled / c;
    let mut rows = Vec::with_capacity(cfg.n_labeled);
    let mut labeled_y = Vec::with_capacity(cfg.n_labeled);
    for class in 0..c {
        let mean = cfg.class_mean(class);
        for _ in 0..per_class {
            rows.push(gaussian_around(&mut rng, &mean, cfg.cluster_std));
            labeled_y.push(class);
        }
    }
    let labeled_x = stack(rows, cfg.input_dim);

    let (n_id, n_ood) = cfg.unlabeled_counts();
    let (id_x, id_y) = id_samples(cfg, seed, tag::UNLABELED_ID, n_id);
    let ood_x = ood_samples(cfg, cfg.ood_kind, seed, tag::UNLABELED_OOD, n_ood)?;
    let mut data = id_x.into_data();
    data.extend_from_slice(ood_x.data());
    let unlabeled_x = Tensor::new(n_id + n_ood, cfg.input_dim, data)?;
    let truth = UnlabeledTruth {
        is_ood: (0..n_id + n_ood).map(|i| i >= n_id).collect(),
        class: id_y.into_iter().map(Some).chain(std::iter::repeat_n(None, n_ood)).collect(),
    };

    let (test_id_x, test_id_y) = id_samples(cfg, seed, tag::TEST_ID, cfg.n_test_id);
    let test_ood_x = ood_samples(cfg, cfg.ood_kind, seed, tag::TEST_OOD, cfg.n_test_ood)?;

    Ok(OpenSetDataset {
        num_classes: c,
        labeled_x,
        labeled_y,
        unlabeled_x,
        unlabeled_truth: Some(truth),
        test_id_x,
        test_id_y,
        test_ood_x,
        unseen_ood_x: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_mask_prob: f64,
    pub strong_scale_lo: f64,
    pub strong_scale_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.15,
            strong_mask_prob: 0.2,
            strong_scale_lo: 0.8,
            strong_scale_hi: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weak_noise_sigma", self.weak_noise_sigma),
            ("strong_noise_sigma", self.strong_noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::Config(format!(
                "strong_mask_prob must lie in [0, 1], got {}",
                self.strong_mask_prob
            )));
        }
        if !(self.strong_scale_lo > 0.0 && self.strong_scale_lo <= self.strong_scale_hi)
            || !self.strong_scale_hi.is_finite()
        {
            return Err(Error::Config(format!(
                "strong scale range must satisfy 0 < lo <= hi, got ({}, {})",
                self.strong_scale_lo, self.strong_scale_hi
            )));
        }
        Ok(())
    }
}

fn add_noise<R: Rng>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Additive Gaussian noise at `weak_noise_sigma`.
pub fn weak_augment<R: Rng>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    add_noise(x, cfg.weak_noise_sigma, rng)
}

/// Noise at `strong_noise_sigma`, then per-coordinate zero masking, then a
/// global uniform rescale.
pub fn strong_augment<R: Rng>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = add_noise(x, cfg.strong_noise_sigma, rng);
    for v in &mut out {
        if rng.random::<f64>() < cfg.strong_mask_prob {
            *v = 0.0;
        }
    }
    let scale = if cfg.strong_scale_lo == cfg.strong_scale_hi {
        cfg.strong_scale_lo
    } else {
        rng.random_range(cfg.strong_scale_lo..=cfg.strong_scale_hi)
    };
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// One training step's inputs. Carries no OOD ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetBatch {
    /// Weakly augmented labeled inputs, `B x D`.
    pub labeled_x: Tensor,
    /// `B x C`.
    pub labeled_onehot: Tensor,
    /// `mu*B x D`.
    pub unlabeled_weak: Tensor,
    /// `mu*B x D`, strong views of the same rows as `unlabeled_weak`.
    pub unlabeled_strong: Tensor,
}

/// Draws `batch` labeled and `mu * batch` unlabeled examples with replacement.
pub fn sample_batch<R: Rng>(
    dataset: &OpenSetDataset,
    batch: usize,
    mu: usize,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<OpenSetBatch> {
    let d = dataset.input_dim();
    let c = dataset.num_classes;
    if dataset.labeled_x.rows() == 0 {
        return Err(Error::Contract("labeled pool is empty".into()));
    }
    let n_u = mu * batch;
    if n_u > 0 && dataset.unlabeled_x.rows() == 0 {
        return Err(Error::Contract("unlabeled pool is empty".into()));
    }
    let mut lx = Vec::with_capacity(batch * d);
    let mut onehot = Tensor::zeros(batch, c);
    for r in 0..batch {
        let i = rng.random_range(0..dataset.labeled_x.rows());
        lx.extend(weak_augment(dataset.labeled_x.row(i), aug, rng));
        onehot.set(r, dataset.labeled_y[i], 1.0);
    }
    let mut weak = Vec::with_capacity(n_u * d);
    let mut strong = Vec::with_capacity(n_u * d);
    for _ in 0..n_u {
        let i = rng.random_range(0..dataset.unlabeled_x.rows());
        let x = dataset.unlabeled_x.row(i);
        weak.extend(weak_augment(x, aug, rng));
        strong.extend(strong_augment(x, aug, rng));
    }
    Ok(OpenSetBatch {
        labeled_x: Tensor::new(batch, d, lx)?,
        labeled_onehot: onehot,
        unlabeled_weak: Tensor::new(n_u, d, weak)?,
        unlabeled_strong: Tensor::new(n_u, d, strong)?,
    })
}

const SPLIT_LABELED: &str = "labeled";
const SPLIT_UNLABELED: &str = "unlabeled";
const SPLIT_TEST_ID: &str = "test_id";
const SPLIT_TEST_OOD: &str = "test_ood";
const SPLIT_UNSEEN_OOD: &str = "unseen_ood";

/// Path of the bookkeeping file holding unlabeled ground truth.
pub fn hidden_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".hidden");
    path.with_file_name(name)
}

/// Writes `split,x_0..x_{D-1},label,is_ood`. Label is -1 for unlabeled and
/// OOD rows; `is_ood` is blank for the training splits.
pub fn write_dataset_csv<W: Write>(w: W, ds: &OpenSetDataset) -> Result<()> {
    let d = ds.input_dim();
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["split".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.extend(["label".to_string(), "is_ood".to_string()]);
    csv.write_record(&header)?;
    let mut emit = |split: &str, x: &Tensor, labels: Option<&[usize]>, is_ood: Option<bool>| -> Result<()> {
        for (i, row) in x.row_iter().enumerate() {
            let mut rec = vec![split.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(labels.map_or("-1".to_string(), |l| l[i].to_string()));
            rec.push(is_ood.map_or(String::new(), |b| u8::from(b).to_string()));
            csv.write_record(&rec)?;
        }
        Ok(())
    };
    emit(SPLIT_LABELED, &ds.labeled_x, Some(&ds.labeled_y), None)?;
    emit(SPLIT_UNLABELED, &ds.unlabeled_x, None, None)?;
    emit(SPLIT_TEST_ID, &ds.test_id_x, Some(&ds.test_id_y), Some(false))?;
    emit(SPLIT_TEST_OOD, &ds.test_ood_x, None, Some(true))?;
    if let Some(u) = &ds.unseen_ood_x {
        emit(SPLIT_UNSEEN_OOD, u, None, Some(true))?;
    }
    csv.flush()?;
    Ok(())
}

/// Writes `index,is_ood,hidden_class` for the unlabeled rows (class -1 for OOD).
pub fn write_hidden_csv<W: Write>(w: W, truth: &UnlabeledTruth) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["index", "is_ood", "hidden_class"])?;
    for (i, (ood, class)) in truth.is_ood.iter().zip(&truth.class).enumerate() {
        let class = class.map_or("-1".to_string(), |c| c.to_string());
        csv.write_record([i.to_string(), u8::from(*ood).to_string(), class])?;
    }
    csv.flush()?;
    Ok(())
}

/// Saves the dataset CSV and, when ground truth is known, its bookkeeping file.
pub fn save_dataset(path: &Path, ds: &OpenSetDataset) -> Result<()> {
    write_dataset_csv(std::fs::File::create(path)?, ds)?;
    if let Some(t) = &ds.unlabeled_truth {
        write_hidden_csv(std::fs::File::create(hidden_path(path))?, t)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path, num_classes: usize) -> Result<OpenSetDataset> {
    let mut ds = read_dataset_csv(std::fs::File::open(path)?, num_classes)?;
    let hidden = hidden_path(path);
    if hidden.exists() {
        let truth = read_hidden_csv(std::fs::File::open(hidden)?)?;
        if truth.is_ood.len() != ds.unlabeled_x.rows() {
            return Err(Error::Format(format!(
                "bookkeeping file has {} rows for {} unlabeled samples",
                truth.is_ood.len(),
                ds.unlabeled_x.rows()
            )));
        }
        ds.unlabeled_truth = Some(truth);
    }
    Ok(ds)
}

fn parse<T: FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse {what} `{field}`")))
}

pub fn read_dataset_csv<R: Read>(r: R, num_classes: usize) -> Result<OpenSetDataset> {
    let mut csv = csv::Reader::from_reader(r);
    let header = csv.headers()?.clone();
    let d = header.len().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| {
        Error::Format("dataset header needs split, x_0.., label, is_ood".into())
    })?;
    for (j, name) in header.iter().enumerate().skip(1).take(d) {
        if name != format!("x_{}", j - 1) {
            return Err(Error::Format(format!("unexpected column `{name}`")));
        }
    }

    let mut parts: [(Vec<f64>, Vec<usize>); 5] = Default::default();
    let mut unseen = false;
    for (n, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let slot = match &rec[0] {
            SPLIT_LABELED => 0,
            SPLIT_UNLABELED => 1,
            SPLIT_TEST_ID => 2,
            SPLIT_TEST_OOD => 3,
            SPLIT_UNSEEN_OOD => {
                unseen = true;
                4
            }
            other => return Err(Error::Format(format!("line {line}: unknown split `{other}`"))),
        };
        for j in 0..d {
            parts[slot].0.push(parse(&rec[1 + j], "coordinate", line)?);
        }
        if slot == 0 || slot == 2 {
            let y: usize = parse(&rec[1 + d], "label", line)?;
            if y >= num_classes {
                return Err(Error::Format(format!(
                    "line {line}: label {y} out of range for {num_classes} classes"
                )));
            }
            parts[slot].1.push(y);
        }
    }
    let [lab, unl, tid, tood, uood] = parts;
    let t = |v: Vec<f64>| Tensor::new(v.len() / d, d, v);
    Ok(OpenSetDataset {
        num_classes,
        labeled_x: t(lab.0)?,
        labeled_y: lab.1,
        unlabeled_x: t(unl.0)?,
        unlabeled_truth: None,
        test_id_x: t(tid.0)?,
        test_id_y: tid.1,
        test_ood_x: t(tood.0)?,
        unseen_ood_x: if unseen { Some(t(uood.0)?) } else { None },
    })
}

pub fn read_hidden_csv<R: Read>(r: R) -> Result<UnlabeledTruth> {
    let mut csv = csv::Reader::from_reader(r);
    let mut truth = UnlabeledTruth {
        is_ood: Vec::new(),
        class: Vec::new(),
    };
    for (n, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let ood: u8 = parse(&rec[1], "is_ood", line)?;
        let class: i64 = parse(&rec[2], "hidden_class", line)?;
        truth.is_ood.push(ood == 1);
        truth.class.push(usize::try_from(class).ok());
    }
    Ok(truth)
}
