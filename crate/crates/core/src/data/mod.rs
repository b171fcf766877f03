//! Synthetic dataset generation against fixed task statistics, the
//! train/val/test split protocol, and the target/feature file formats.

mod csv;
mod fpft;

pub use csv::{format_targets_csv, load_targets_csv, parse_targets_csv, save_targets_csv, RejectedRow, TargetFile, TargetRecord};
pub use fpft::{encode_features_bin, load_features_bin, parse_features_bin, save_features_bin};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// The three measurement tasks, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    #[serde(rename = "MRD1")]
    Mrd1,
    #[serde(rename = "MRD2")]
    Mrd2,
    #[serde(rename = "LF")]
    Lf,
}

impl TaskName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "MRD1" => Ok(TaskName::Mrd1),
            "MRD2" => Ok(TaskName::Mrd2),
            "LF" => Ok(TaskName::Lf),
            other => Err(Error::Schema(format!("unknown task name {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::Mrd1 => "MRD1",
            TaskName::Mrd2 => "MRD2",
            TaskName::Lf => "LF",
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Target distribution descriptor for one task: mean/sd of the measurement
/// and its valid range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TaskSpec {
    pub fn mrd1() -> Self {
        TaskSpec { name: TaskName::Mrd1, mean: 2.59, sd: 1.21, lo: 0.0, hi: 6.0 }
    }

    pub fn mrd2() -> Self {
        TaskSpec { name: TaskName::Mrd2, mean: 5.51, sd: 0.83, lo: 1.5, hi: 10.0 }
    }

    pub fn lf() -> Self {
        TaskSpec { name: TaskName::Lf, mean: 12.1, sd: 2.12, lo: 3.5, hi: 18.0 }
    }

    pub fn for_task(name: TaskName) -> Self {
        match name {
            TaskName::Mrd1 => TaskSpec::mrd1(),
            TaskName::Mrd2 => TaskSpec::mrd2(),
            TaskName::Lf => TaskSpec::lf(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.mean && self.mean < self.hi) || !(self.sd > 0.0) {
            return Err(Error::Config(format!(
                "degenerate task spec: lo {} mean {} hi {} sd {}",
                self.lo, self.mean, self.hi, self.sd
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    File,
}

/// Features plus millimetre targets. The feature tensor's leading dimension
/// is the sample count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub targets: Vec<f64>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(features: Tensor, targets: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let n = features.shape()[0];
        if n == 0 || targets.len() != n {
            return Err(Error::Contract(format!(
                "dataset needs matching n ≥ 1: features {:?}, {} targets",
                features.shape(),
                targets.len()
            )));
        }
        Ok(Dataset { features, targets, provenance })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.numel() / self.len()
    }

    /// Row-gathers features and targets for an index subset.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.feature_dim();
        let mut feats = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("index {i} out of range for n={}", self.len())));
            }
            feats.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
            targets.push(self.targets[i]);
        }
        let mut shape = self.features.shape().to_vec();
        shape[0] = indices.len();
        Ok(Dataset {
            features: Tensor::new(shape, feats)?,
            targets,
            provenance: self.provenance,
        })
    }
}

/// Draws targets from the task's normal distribution truncated to its range
/// by rejection, then lifts each target through a fixed seeded random linear
/// map plus independent Gaussian feature noise. Targets stay recoverable by
/// regression on the features.
pub fn synth_generate(spec: &TaskSpec, n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 || d == 0 {
        return Err(Error::Config(format!("synth_generate needs n ≥ 1 and d ≥ 1, got n={n} d={d}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be ≥ 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(spec.mean, spec.sd).expect("validated sd");

    let mut targets = Vec::with_capacity(n);
    while targets.len() < n {
        let v = normal.sample(&mut rng);
        if spec.contains(v) {
            targets.push(v);
        }
    }

    let lift: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise_dist = Normal::new(0.0, 1.0).expect("unit normal");
    let mut feats = Vec::with_capacity(n * d);
    for &t in &targets {
        for &l in &lift {
            let eps = if noise > 0.0 { noise * noise_dist.sample(&mut rng) } else { 0.0 };
            feats.push(t * l + eps);
        }
    }
    Dataset::new(Tensor::new(vec![n, d], feats)?, targets, Provenance::Synthetic)
}

/// Disjoint train/val/test index lists covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_half_up_tenths(numerator: usize) -> usize {
    // round_half_up(numerator / 10) in exact integer arithmetic.
    (numerator + 5) / 10
}

/// Seeded shuffle, then 90/10 between train+val and test, then 80/20 within
/// train+val. The 90% group size is `round_half_up(0.9·n)`, which reproduces
/// the reference case sizes (822 → 740/82, 685 → 617/68).
pub fn split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 10 {
        return Err(Error::Config(format!("split needs n ≥ 10, got {n}")));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let trainval_n = round_half_up_tenths(9 * n);
    let val_n = round_half_up_tenths(2 * trainval_n);
    let train_n = trainval_n - val_n;

    let train = indices[..train_n].to_vec();
    let val = indices[train_n..trainval_n].to_vec();
    let test = indices[trainval_n..].to_vec();
    Ok(SplitIndices { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_reproduces_reference_sizes() {
        let s = split(822, 0).unwrap();
        assert_eq!(s.train.len() + s.val.len(), 740);
        assert_eq!(s.test.len(), 82);
        assert_eq!(s.val.len(), 148);

        let s = split(685, 0).unwrap();
        assert_eq!(s.train.len() + s.val.len(), 617);
        assert_eq!(s.test.len(), 68);
        assert_eq!(s.val.len(), 123);
    }

    #[test]
    fn split_is_seed_deterministic() {
        assert_eq!(split(100, 7).unwrap(), split(100, 7).unwrap());
        assert_ne!(split(100, 7).unwrap(), split(100, 8).unwrap());
        assert!(matches!(split(9, 0), Err(Error::Config(_))));
    }

    #[test]
    fn synth_targets_stay_in_range_for_all_tasks() {
        for spec in [TaskSpec::mrd1(), TaskSpec::mrd2(), TaskSpec::lf()] {
            let ds = synth_generate(&spec, 10_000, 4, 0.1, 3).unwrap();
            assert_eq!(ds.len(), 10_000);
            assert!(ds.targets.iter().all(|&v| spec.contains(v)));
        }
    }

    #[test]
    fn synth_mean_matches_monte_carlo_truncated_mean() {
        // Oracle: 10⁶ rejection samples of the truncated normal.
        let spec = TaskSpec::mrd1();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let normal = Normal::new(spec.mean, spec.sd).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mc_n = 1_000_000;
        let mut kept = 0usize;
        while kept < mc_n {
            let v = normal.sample(&mut rng);
            if spec.contains(v) {
                sum += v;
                sum_sq += v * v;
                kept += 1;
            }
        }
        let mc_mean = sum / mc_n as f64;
        let mc_sd = (sum_sq / mc_n as f64 - mc_mean * mc_mean).sqrt();

        let n = 10_000;
        let ds = synth_generate(&spec, n, 4, 0.0, 4).unwrap();
        let sample_mean: f64 = ds.targets.iter().sum::<f64>() / n as f64;
        let se = mc_sd / (n as f64).sqrt();
        assert!(
            (sample_mean - mc_mean).abs() <= 3.0 * se,
            "sample mean {sample_mean} vs truncated mean {mc_mean} (se {se})"
        );
    }

    #[test]
    fn noiseless_lift_is_exactly_recoverable_by_column_regression() {
        let spec = TaskSpec::mrd2();
        let ds = synth_generate(&spec, 200, 8, 0.0, 5).unwrap();
        let d = ds.feature_dim();
        // Pick the strongest column and regress the target on it alone.
        let col = |j: usize| -> Vec<f64> {
            (0..ds.len()).map(|i| ds.features.data()[i * d + j]).collect()
        };
        let best = (0..d)
            .max_by(|&a, &b| {
                let na: f64 = col(a).iter().map(|v| v * v).sum();
                let nb: f64 = col(b).iter().map(|v| v * v).sum();
                na.partial_cmp(&nb).unwrap()
            })
            .unwrap();
        let x = col(best);
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let xy: f64 = x.iter().zip(&ds.targets).map(|(a, b)| a * b).sum();
        let coef = xy / xx;
        for (xi, yi) in x.iter().zip(&ds.targets) {
            assert!((coef * xi - yi).abs() < 1e-9, "recovery failed: {} vs {yi}", coef * xi);
        }
    }

    #[test]
    fn synth_rejects_degenerate_specs() {
        let mut bad = TaskSpec::mrd1();
        bad.sd = 0.0;
        assert!(matches!(synth_generate(&bad, 10, 2, 0.0, 0), Err(Error::Config(_))));
        let mut inverted = TaskSpec::mrd1();
        inverted.lo = 7.0;
        assert!(matches!(synth_generate(&inverted, 10, 2, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(
            synth_generate(&TaskSpec::mrd1(), 10, 2, -0.5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_select_gathers_rows() {
        let ds = synth_generate(&TaskSpec::mrd1(), 10, 3, 0.0, 6).unwrap();
        let sub = ds.select(&[2, 5, 9]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.targets[1], ds.targets[5]);
        assert_eq!(
            &sub.features.data()[3..6],
            &ds.features.data()[5 * 3..5 * 3 + 3]
        );
        assert!(ds.select(&[10]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn split_is_disjoint_and_covers(n in 10usize..5000, seed in 0u64..1000) {
            let s = split(n, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            let expected: Vec<usize> = (0..n).collect();
            prop_assert_eq!(all, expected);
        }
    }
}
