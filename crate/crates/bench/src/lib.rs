//! Fixtures shared by the kernel benchmarks.

use mctl_core::data::{make_ground_truth, sample_covariates, sample_labels};
use mctl_core::rng::{stream, Purpose};
use mctl_core::{CovariateSpec, DenseMatrix, GroundTruth, LabeledDataset, TruthConfig};

/// Pre-training sample of size `n` from a default-scale truth.
pub fn pretrain_fixture(n: usize, d: usize, r: usize, k: usize, seed: u64) -> (GroundTruth, LabeledDataset) {
    let cfg = TruthConfig {
        d,
        r,
        k,
        ..TruthConfig::default()
    };
    let truth = make_ground_truth(&cfg, &mut stream(seed, &[], Purpose::Truth)).expect("feasible truth");
    let spec = CovariateSpec::isotropic(d).expect("valid spec");
    let x = sample_covariates(&spec, n, &mut stream(seed, &[], Purpose::PretrainCovariates)).expect("sampling");
    let y = sample_labels(&truth.rep, &truth.pre_head, &x, &mut stream(seed, &[], Purpose::PretrainLabels))
        .expect("labels");
    let data = LabeledDataset::new(x, y, k, seed).expect("dataset");
    (truth, data)
}

/// Symmetric `n x n` matrix with entries `sin(i + 2j) + sin(j + 2i)`.
pub fn symmetric_fixture(n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, n, |i, j| ((i + 2 * j) as f64).sin() + ((j + 2 * i) as f64).sin())
}

/// Logit vector of length `len` spread over `[-3, 3]`.
pub fn logits_fixture(len: usize) -> Vec<f64> {
    (0..len).map(|i| 3.0 * ((i as f64) * 0.7).sin()).collect()
}
