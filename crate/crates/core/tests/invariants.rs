use proptest::prelude::*;

use mctl_core::data::{make_ground_truth, sample_covariates, sample_labels};
use mctl_core::diagnostics::{evaluate_risk_bound, excess_risk_on, schur_complement_bound, BoundParams, ConstantsProfile};
use mctl_core::harness::fit_power_law;
use mctl_core::linalg::sym_spectral;
use mctl_core::model::orthonormality_error;
use mctl_core::rng::{stream, Purpose};
use mctl_core::train::{fit_downstream_head, pretrain};
use mctl_core::{CovariateSpec, HypothesisConfig, LabeledDataset, OptimConfig, RepKind, TruthConfig};

fn small_truth(d: usize, r: usize, k: usize, seed: u64) -> (mctl_core::GroundTruth, CovariateSpec) {
    let cfg = TruthConfig {
        d,
        r,
        k,
        k_prime: 2,
        ..TruthConfig::default()
    };
    let truth = make_ground_truth(&cfg, &mut stream(seed, &[0], Purpose::Truth)).unwrap();
    (truth, CovariateSpec::isotropic(d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_keeps_constraints_and_descends(
        seed in 0u64..10_000,
        d in 3usize..8,
        r in 1usize..3,
        lambda in prop_oneof![Just(0.0), Just(0.3)],
    ) {
        let k = 5;
        let (truth, spec) = small_truth(d, r, k, seed);
        let x = sample_covariates(&spec, 150, &mut stream(seed, &[1], Purpose::PretrainCovariates)).unwrap();
        let y = sample_labels(&truth.rep, &truth.pre_head, &x, &mut stream(seed, &[1], Purpose::PretrainLabels)).unwrap();
        let data = LabeledDataset::new(x, y, k, seed).unwrap();
        let hyp = HypothesisConfig { r, head_cap: 1.5, ..HypothesisConfig::default() };
        let optim = OptimConfig { max_iters: 300, ..OptimConfig::default() };
        let fit = pretrain(&data, &hyp, lambda, &optim, &mut stream(seed, &[2], Purpose::Init)).unwrap();
        prop_assert!(fit.trace.is_monotone());
        prop_assert!(orthonormality_error(fit.rep.as_subspace().unwrap().basis()) <= 1e-8);
        prop_assert!(fit.head.alpha().column_norms().iter().all(|&c| c <= 1.5 * (1.0 + 1e-10)));

        let xd = sample_covariates(&spec, 60, &mut stream(seed, &[3], Purpose::DownstreamCovariates)).unwrap();
        let yd = sample_labels(&truth.rep, &truth.down_head, &xd, &mut stream(seed, &[3], Purpose::DownstreamLabels)).unwrap();
        let down = LabeledDataset::new(xd, yd, 2, seed).unwrap();
        let (head, trace) = fit_downstream_head(&fit.rep, &down, 3.0, &optim).unwrap();
        prop_assert!(trace.is_monotone());
        prop_assert!(head.alpha().column_norms().iter().all(|&c| c <= 3.0 * (1.0 + 1e-10)));

        let xe = sample_covariates(&spec, 400, &mut stream(seed, &[4], Purpose::Evaluation)).unwrap();
        let (risk, se) = excess_risk_on(&xe, &truth.rep, &truth.down_head, &fit.rep, &head).unwrap();
        prop_assert!(risk >= 0.0 && se >= 0.0);
        let (zero, _) = excess_risk_on(&xe, &truth.rep, &truth.down_head, &truth.rep, &truth.down_head).unwrap();
        prop_assert!(zero.abs() < 1e-12);
    }

    #[test]
    fn schur_complement_is_psd_and_vanishes_on_truth(seed in 0u64..10_000, d in 3usize..7) {
        let (truth, spec) = small_truth(d, 2, 4, seed);
        let sb = schur_complement_bound(&truth.rep, &truth.rep, &spec, 400, 3.0, 2, &mut stream(seed, &[5], Purpose::Complexity)).unwrap();
        prop_assert!(sb.bound.abs() < 1e-8);
        let (other, _) = small_truth(d, 2, 4, seed + 1);
        let sb = schur_complement_bound(&other.rep, &truth.rep, &spec, 400, 3.0, 2, &mut stream(seed, &[6], Purpose::Complexity)).unwrap();
        let eig = sym_spectral(&sb.lambda_sc).unwrap();
        prop_assert!(eig.values.iter().all(|&l| l >= -1e-9));
        prop_assert!(sb.bound >= 0.0);
    }

    #[test]
    fn bound_decreases_in_both_sample_sizes(n in 100usize..100_000, m in 10usize..10_000, nu in 0.05f64..5.0) {
        let base = BoundParams { n, m, nu_tilde: nu, ..BoundParams::default() };
        let profile = ConstantsProfile::default();
        for kind in [RepKind::Subspace, RepKind::Mlp] {
            let b0 = evaluate_risk_bound(kind, &base, &profile).unwrap().total;
            let more_n = evaluate_risk_bound(kind, &BoundParams { n: 2 * n, ..base.clone() }, &profile).unwrap().total;
            let more_m = evaluate_risk_bound(kind, &BoundParams { m: 2 * m, ..base.clone() }, &profile).unwrap().total;
            let more_nu = evaluate_risk_bound(kind, &BoundParams { nu_tilde: 2.0 * nu, ..base.clone() }, &profile).unwrap().total;
            prop_assert!(more_n <= b0 && more_m <= b0 && more_nu <= b0);
        }
    }

    #[test]
    fn power_law_recovers_exact_exponents(slope in -2.0f64..2.0, scale in 0.01f64..100.0, len in 3usize..10) {
        let pts: Vec<(f64, f64)> = (0..len).map(|i| {
            let x = 1.5f64.powi(i as i32 + 1);
            (x, scale * x.powf(slope))
        }).collect();
        let fit = fit_power_law(&pts).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!((fit.intercept - scale.ln()).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&fit.r_squared));
    }
}
