//! Quantities the transfer-learning theory is stated in: the diversity proxy
//! ν̃, Monte Carlo Gaussian and Rademacher complexities, excess risks in KL
//! form, representation differences, the Schur-complement bound on the
//! downstream difference, a finite-class check of the chain-rule complexity
//! decomposition, and evaluators for the two risk bounds.
//!
//! Every stochastic quantity carries a standard error equal to the sample
//! standard deviation over `sqrt(draws)`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{sample_covariates, CovariateSpec, GroundTruth};
use crate::error::{Error, Result};
use crate::linalg::{pinv_psd, spectral_norm, sym_spectral, DenseMatrix, DEFAULT_PINV_TOL};
use crate::model::{LinearHead, RepKind, Representation};
use crate::rng::Rng;
use crate::softmax::{kl_unchecked, softmax_head_into};
use crate::train::{fit_head_on_embeddings, OptimConfig};

/// `σ_r(ααᵀ)` for an `r x (K-1)` head matrix.
pub fn nu_tilde(alpha: &DenseMatrix) -> Result<f64> {
    if alpha.rows() == 0 {
        return Err(Error::contract("empty head matrix"));
    }
    let eig = sym_spectral(&alpha.gram_rows())?;
    Ok(eig.values[alpha.rows() - 1].max(0.0))
}

/// ν̃ of a head: least eigenvalue of `ααᵀ`.
pub fn diversity_parameter(head: &LinearHead) -> Result<f64> {
    nu_tilde(head.alpha())
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Rademacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplexityScope {
    Empirical,
    WorstCase,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityEstimate {
    pub value: f64,
    pub draws: usize,
    pub std_error: f64,
    pub kind: NoiseKind,
    pub scope: ComplexityScope,
}

fn noise_matrix(rows: usize, cols: usize, kind: NoiseKind, rng: &mut Rng) -> DenseMatrix {
    match kind {
        NoiseKind::Gaussian => DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)),
        NoiseKind::Rademacher => {
            DenseMatrix::from_fn(rows, cols, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        }
    }
}

/// Empirical Gaussian complexity of the column-capped linear class
/// `{z ↦ αᵀz : ||α_s|| <= c}` with `K_c - 1` outputs on embeddings `z`.
///
/// The supremum is attained column by column, giving
/// `(c/n) Σ_s ||Σ_i g_is z_i||` for every noise draw.
pub fn empirical_gaussian_complexity_linear(
    z: &DenseMatrix,
    cap: f64,
    classes: usize,
    draws: usize,
    rng: &mut Rng,
) -> Result<ComplexityEstimate> {
    let n = z.rows();
    if n == 0 || draws == 0 {
        return Err(Error::contract("need at least one sample and one draw"));
    }
    if classes < 2 || !(cap >= 0.0) {
        return Err(Error::contract("need classes >= 2 and a nonnegative cap"));
    }
    let outputs = classes - 1;
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let g = noise_matrix(n, outputs, NoiseKind::Gaussian, rng);
        let zg = z.t_matmul(&g)?;
        let sum: f64 = zg.column_norms().iter().sum();
        values.push(sum / n as f64);
    }
    let (mean, se) = mean_and_se(&values);
    Ok(ComplexityEstimate {
        value: cap * mean,
        draws,
        std_error: cap * se,
        kind: NoiseKind::Gaussian,
        scope: ComplexityScope::Empirical,
    })
}

/// Monte Carlo complexity of a finite class given its outputs on the sample:
/// one `n x r` matrix per candidate. The supremum is exact.
///
/// Noise draws come in antithetic pairs `(g, -g)`; each of the `draws`
/// samples is the mean of the two suprema.
pub fn mc_complexity_finite(
    outputs: &[DenseMatrix],
    draws: usize,
    kind: NoiseKind,
    rng: &mut Rng,
) -> Result<ComplexityEstimate> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::contract("candidate list must be nonempty"))?;
    let shape = first.shape();
    if outputs.iter().any(|q| q.shape() != shape) {
        return Err(Error::contract("all candidates must have the same output shape"));
    }
    if draws == 0 || shape.0 == 0 {
        return Err(Error::contract("need at least one sample and one draw"));
    }
    let n = shape.0 as f64;
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let g = noise_matrix(shape.0, shape.1, kind, rng);
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for q in outputs {
            let v = g.inner(q);
            hi = hi.max(v);
            lo = lo.min(v);
        }
        // sup over -g is -min over g.
        values.push(0.5 * (hi - lo) / n);
    }
    let (mean, se) = mean_and_se(&values);
    Ok(ComplexityEstimate {
        value: mean,
        draws,
        std_error: se,
        kind,
        scope: ComplexityScope::Empirical,
    })
}

/// Worst-case complexity of the column-capped linear class over embeddings
/// of norm at most `max_norm`: `c (K-1) max_norm / √n`.
pub fn worst_case_complexity_linear(cap: f64, classes: usize, max_norm: f64, n: usize) -> ComplexityEstimate {
    ComplexityEstimate {
        value: cap * (classes.saturating_sub(1)) as f64 * max_norm / (n as f64).sqrt(),
        draws: 0,
        std_error: 0.0,
        kind: NoiseKind::Gaussian,
        scope: ComplexityScope::WorstCase,
    }
}

/// Per-sample KL between the softmax laws of two logit matrices.
pub fn kl_per_row(eta_true: &DenseMatrix, eta_model: &DenseMatrix) -> Result<Vec<f64>> {
    if eta_true.shape() != eta_model.shape() {
        return Err(Error::contract(format!(
            "logit shapes {:?} and {:?}",
            eta_true.shape(),
            eta_model.shape()
        )));
    }
    Ok((0..eta_true.rows())
        .map(|i| kl_unchecked(eta_true.row(i), eta_model.row(i)))
        .collect())
}

/// Excess risk `E_x KL(P_truth(·|x) || P_model(·|x))` estimated on the
/// covariates `x`, with its standard error.
pub fn excess_risk_on(
    x: &DenseMatrix,
    truth_rep: &Representation,
    truth_head: &LinearHead,
    rep: &Representation,
    head: &LinearHead,
) -> Result<(f64, f64)> {
    if truth_head.classes() != head.classes() {
        return Err(Error::contract("truth and model disagree on the class count"));
    }
    let eta_t = truth_head.logits(&truth_rep.embed(x)?)?;
    let eta_m = head.logits(&rep.embed(x)?)?;
    Ok(mean_and_se(&kl_per_row(&eta_t, &eta_m)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskReport {
    pub excess_transfer_risk: f64,
    pub std_error: f64,
    pub excess_pretrain_risk: Option<f64>,
    pub pretrain_std_error: Option<f64>,
    pub mc_samples: usize,
}

/// Excess downstream risk of `(rep_hat, head_hat)` against the truth.
pub fn transfer_risk(
    rep_hat: &Representation,
    head_hat: &LinearHead,
    truth: &GroundTruth,
    spec: &CovariateSpec,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<RiskReport> {
    risk_report(rep_hat, None, head_hat, truth, spec, n_mc, rng)
}

/// Transfer risk and, when a pre-training head is given, the excess
/// pre-training risk, both on the same fresh covariates.
pub fn risk_report(
    rep_hat: &Representation,
    pre_head_hat: Option<&LinearHead>,
    down_head_hat: &LinearHead,
    truth: &GroundTruth,
    spec: &CovariateSpec,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<RiskReport> {
    let x = sample_covariates(spec, n_mc, rng)?;
    let (transfer, se) = excess_risk_on(&x, &truth.rep, &truth.down_head, rep_hat, down_head_hat)?;
    let pre = pre_head_hat
        .map(|h| excess_risk_on(&x, &truth.rep, &truth.pre_head, rep_hat, h))
        .transpose()?;
    Ok(RiskReport {
        excess_transfer_risk: transfer,
        std_error: se,
        excess_pretrain_risk: pre.map(|p| p.0),
        pretrain_std_error: pre.map(|p| p.1),
        mc_samples: n_mc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepDifference {
    pub value: f64,
    pub std_error: f64,
}

/// `inf_{f'} E_x KL(truth_head(h(x)) || f'(ĥ(x)))` over heads with column
/// cap `cap`, on `n_mc` fresh covariates. The infimum is a convex head fit
/// against the truth's class probabilities as soft targets.
#[allow(clippy::too_many_arguments)]
pub fn rep_difference(
    rep_hat: &Representation,
    truth_rep: &Representation,
    truth_head: &LinearHead,
    spec: &CovariateSpec,
    n_mc: usize,
    cap: f64,
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<RepDifference> {
    let x = sample_covariates(spec, n_mc, rng)?;
    let eta_t = truth_head.logits(&truth_rep.embed(&x)?)?;
    let mut soft = DenseMatrix::zeros(eta_t.rows(), eta_t.cols());
    for i in 0..eta_t.rows() {
        softmax_head_into(eta_t.row(i), soft.row_mut(i));
    }
    let z = rep_hat.embed(&x)?;
    let (head, _) = fit_head_on_embeddings(&z, &soft, cap, None, cfg)?;
    let eta_m = head.logits(&z)?;
    let (value, std_error) = mean_and_se(&kl_per_row(&eta_t, &eta_m)?);
    Ok(RepDifference { value, std_error })
}

/// Pre-training representation difference of `rep_hat` against the truth.
pub fn pretrain_rep_difference(
    rep_hat: &Representation,
    truth: &GroundTruth,
    spec: &CovariateSpec,
    n_mc: usize,
    cap: f64,
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<RepDifference> {
    rep_difference(rep_hat, &truth.rep, &truth.pre_head, spec, n_mc, cap, cfg, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchurBound {
    /// `F_hh - F_hĥ F_ĥĥ⁺ F_ĥh`.
    pub lambda_sc: DenseMatrix,
    pub sigma1: f64,
    /// `(k'-1) c₀² / 2 · σ₁(Λ_sc)`.
    pub bound: f64,
}

/// Schur complement of the true embedding against the learned one from Monte
/// Carlo second moments, and the resulting bound on the worst-case
/// downstream representation difference.
pub fn schur_complement_bound(
    rep_hat: &Representation,
    truth_rep: &Representation,
    spec: &CovariateSpec,
    n_mc: usize,
    down_cap: f64,
    k_prime: usize,
    rng: &mut Rng,
) -> Result<SchurBound> {
    let r = truth_rep.output_dim();
    let r_hat = rep_hat.output_dim();
    if n_mc < 10 * r.max(r_hat) {
        return Err(Error::contract(format!(
            "n_mc = {n_mc} too small for {}-dimensional embeddings",
            r.max(r_hat)
        )));
    }
    if k_prime < 2 {
        return Err(Error::contract("k' must be at least 2"));
    }
    let x = sample_covariates(spec, n_mc, rng)?;
    let h = truth_rep.embed(&x)?;
    let hh = rep_hat.embed(&x)?;
    let inv_n = 1.0 / n_mc as f64;
    let f_hh = h.gram_cols().scale(inv_n);
    let f_hat = hh.gram_cols().scale(inv_n);
    let f_cross = hh.t_matmul(&h)?.scale(inv_n);
    let pinv = pinv_psd(&f_hat, DEFAULT_PINV_TOL)?;
    let explained = f_cross.t_matmul(&pinv.matmul(&f_cross)?)?;
    let lambda_sc = f_hh.sub(&explained)?.symmetrize();
    let sigma1 = sym_spectral(&lambda_sc)?.values[0].max(0.0);
    let bound = (k_prime - 1) as f64 * down_cap * down_cap / 2.0 * sigma1;
    Ok(SchurBound {
        lambda_sc,
        sigma1,
        bound,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainRuleReport {
    /// `Ĝ_n(F∘H)`.
    pub composite: ComplexityEstimate,
    /// `Ĝ_n(H)`.
    pub rep_complexity: ComplexityEstimate,
    /// `max_h Ĝ_n(F | h∘x)`.
    pub head_worst_case: ComplexityEstimate,
    /// Largest spectral norm over the head candidates.
    pub lipschitz: f64,
    /// Largest output norm `||f(h(x_i))||` over candidates and samples.
    pub diameter: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Checks `Ĝ_n(F∘H) <= 8√(k-1) D / n² + 512 (L(F) Ĝ_n(H) + Ḡ_n(F)) log n`
/// on finite classes. `reps` holds each candidate representation's outputs
/// on the sample (`n x r`); `heads` are linear heads (`r x (k-1)`).
pub fn chain_rule_check(
    reps: &[DenseMatrix],
    heads: &[DenseMatrix],
    draws: usize,
    rng: &mut Rng,
) -> Result<ChainRuleReport> {
    if reps.is_empty() || heads.is_empty() {
        return Err(Error::contract("candidate sets must be nonempty"));
    }
    if reps.len() > 100 || heads.len() > 100 {
        return Err(Error::contract("candidate sets are limited to 100 members"));
    }
    let n = reps[0].rows();
    let r = reps[0].cols();
    if heads.iter().any(|a| a.rows() != r) {
        return Err(Error::contract("head input dimension does not match representation output"));
    }
    let km1 = heads[0].cols();

    let mut composite = Vec::with_capacity(reps.len() * heads.len());
    for h in reps {
        for a in heads {
            composite.push(h.matmul(a)?);
        }
    }
    let diameter = composite
        .iter()
        .flat_map(|q| (0..q.rows()).map(move |i| crate::linalg::norm2(q.row(i))))
        .fold(0.0, f64::max);
    let lipschitz = heads.iter().map(spectral_norm).fold(0.0, f64::max);

    let lhs = mc_complexity_finite(&composite, draws, NoiseKind::Gaussian, rng)?;
    let rep_c = mc_complexity_finite(reps, draws, NoiseKind::Gaussian, rng)?;
    let mut worst: Option<ComplexityEstimate> = None;
    for h in reps {
        let outs: Vec<DenseMatrix> = heads.iter().map(|a| h.matmul(a)).collect::<Result<_>>()?;
        let est = mc_complexity_finite(&outs, draws, NoiseKind::Gaussian, rng)?;
        if worst.is_none_or(|w| est.value > w.value) {
            worst = Some(est);
        }
    }
    let mut head_worst = worst.expect("nonempty");
    head_worst.scope = ComplexityScope::WorstCase;

    let nf = n as f64;
    let rhs = 8.0 * (km1 as f64).sqrt() * diameter / (nf * nf)
        + 512.0 * (lipschitz * rep_c.value + head_worst.value) * nf.ln();
    let se = (lhs.std_error.powi(2)
        + (512.0 * nf.ln()).powi(2)
            * ((lipschitz * rep_c.std_error).powi(2) + head_worst.std_error.powi(2)))
    .sqrt();
    Ok(ChainRuleReport {
        pass: lhs.value <= rhs + 3.0 * se,
        composite: lhs,
        rep_complexity: rep_c,
        head_worst_case: head_worst,
        lipschitz,
        diameter,
        rhs,
    })
}

/// Multipliers for the hidden constants of the two risk bounds, one per
/// additive term. All ones by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsProfile {
    /// Subspace bound: representation complexity, `k/n²`, pre-training
    /// confidence, downstream complexity, downstream confidence.
    pub subspace: [f64; 5],
    /// Network bound: representation complexity, head complexity, downstream.
    pub mlp: [f64; 3],
}

impl Default for ConstantsProfile {
    fn default() -> Self {
        Self {
            subspace: [1.0; 5],
            mlp: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundParams {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub k_prime: usize,
    pub r: usize,
    pub d: usize,
    pub nu_tilde: f64,
    /// Covariate norm cap `D`.
    pub norm_cap: f64,
    pub delta: f64,
    /// Network layer caps `M(1), ..., M(K)`; the depth is their count.
    pub layer_caps: Vec<f64>,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            n: 8000,
            m: 200,
            k: 30,
            k_prime: 2,
            r: 3,
            d: 20,
            nu_tilde: 1.0,
            norm_cap: 3.0 * 20f64.sqrt(),
            delta: 0.05,
            layer_caps: vec![2.0, 2.0],
        }
    }
}

/// Value of a risk bound split into its pre-training part (everything scaled
/// by `1/ν̃`) and its downstream part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundValue {
    pub pretrain: f64,
    pub downstream: f64,
    pub total: f64,
}

impl BoundValue {
    fn infinite() -> Self {
        Self {
            pretrain: f64::INFINITY,
            downstream: f64::INFINITY,
            total: f64::INFINITY,
        }
    }
}

/// Evaluates the transfer-risk upper bound for a hypothesis class with the
/// hidden constants taken from `profile`. Returns an infinite bound when
/// `ν̃ = 0`.
pub fn evaluate_risk_bound(kind: RepKind, p: &BoundParams, profile: &ConstantsProfile) -> Result<BoundValue> {
    if p.n == 0 || p.m == 0 || p.k == 0 || p.k_prime == 0 || p.r == 0 || p.d == 0 {
        return Err(Error::contract("bound parameters must be positive"));
    }
    if !(p.delta > 0.0 && p.delta < 1.0) || !(p.norm_cap > 0.0) || !(p.nu_tilde >= 0.0) {
        return Err(Error::contract("need 0 < delta < 1, D > 0 and nu_tilde >= 0"));
    }
    if p.nu_tilde == 0.0 {
        return Ok(BoundValue::infinite());
    }
    let n = p.n as f64;
    let m = p.m as f64;
    let k = p.k as f64;
    let kp = p.k_prime as f64;
    let r = p.r as f64;
    let d = p.d as f64;
    let conf = (1.0 / p.delta).ln();
    let (pretrain, downstream) = match kind {
        RepKind::Subspace => {
            let c = &profile.subspace;
            let bracket = c[0] * k.sqrt() * n.ln() * ((k * d * r * r / n).sqrt() + k * (r / n).sqrt())
                + c[1] * k / (n * n)
                + c[2] * (conf / n).sqrt();
            let down = c[3] * kp.powf(1.5) * (r / m).sqrt() + c[4] * kp * (conf / m).sqrt();
            (bracket / p.nu_tilde, down)
        }
        RepKind::Mlp => {
            if p.layer_caps.is_empty() || p.layer_caps.iter().any(|&c| !(c > 0.0)) {
                return Err(Error::contract("network bound needs positive layer caps"));
            }
            let c = &profile.mlp;
            let depth = p.layer_caps.len() as f64;
            let mk = *p.layer_caps.last().expect("nonempty");
            let inner: f64 = p.layer_caps[..p.layer_caps.len() - 1].iter().product();
            let mk3 = mk.powi(3);
            let pre = c[0] * k * r * mk3 * p.norm_cap * depth.sqrt() * inner / (p.nu_tilde * n.sqrt())
                + c[1] * k.powf(1.5) * mk3 / (p.nu_tilde * n.sqrt());
            let down = c[2] * kp.powf(1.5) * mk3 / m.sqrt();
            (pre, down)
        }
    };
    Ok(BoundValue {
        pretrain,
        downstream,
        total: pretrain + downstream,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_ground_truth, sample_labels, TruthConfig};
    use crate::linalg::orthonormalize;
    use crate::model::SubspaceRep;
    use crate::rng::{from_seed, Rng};
    use crate::softmax::{cross_entropy, OneHotLabel};
    use proptest::prelude::*;

    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

    fn gauss(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn nu_tilde_cases() {
        let mut alpha = DenseMatrix::zeros(2, 4);
        alpha[(0, 0)] = 1.0;
        alpha[(1, 1)] = 1.0;
        assert!((nu_tilde(&alpha).unwrap() - 1.0).abs() < 1e-12);
        alpha[(1, 1)] = 2.0;
        assert!((nu_tilde(&alpha).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nu_tilde_matches_rayleigh_sampling() {
        let mut rng = from_seed(1);
        let alpha = gauss(3, 6, &mut rng);
        let gram = alpha.gram_rows();
        let mut best = f64::INFINITY;
        for _ in 0..10_000 {
            let u: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let nu = crate::linalg::norm2(&u);
            let u: Vec<f64> = u.iter().map(|v| v / nu).collect();
            let q = crate::linalg::dot(&u, &gram.matvec(&u).unwrap());
            best = best.min(q);
        }
        let exact = nu_tilde(&alpha).unwrap();
        assert!((best - exact).abs() <= 0.02 * exact, "{best} vs {exact}");
    }

    #[test]
    fn linear_complexity_cases() {
        let z = DenseMatrix::zeros(5, 3);
        let est = empirical_gaussian_complexity_linear(&z, 1.0, 4, 100, &mut from_seed(1)).unwrap();
        assert_eq!(est.value, 0.0);

        let z = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let est = empirical_gaussian_complexity_linear(&z, 1.0, 2, 10_000, &mut from_seed(2)).unwrap();
        let expected = SQRT_2_OVER_PI * 5.0;
        assert!((est.value - expected).abs() <= 3.0 * est.std_error, "{est:?}");

        let z = gauss(10, 3, &mut from_seed(3));
        let a = empirical_gaussian_complexity_linear(&z, 1.0, 5, 200, &mut from_seed(4)).unwrap();
        let b = empirical_gaussian_complexity_linear(&z, 2.0, 5, 200, &mut from_seed(4)).unwrap();
        assert_eq!(b.value, 2.0 * a.value);
    }

    #[test]
    fn finite_complexity_cases() {
        let zero = vec![DenseMatrix::zeros(4, 2)];
        let est = mc_complexity_finite(&zero, 50, NoiseKind::Gaussian, &mut from_seed(1)).unwrap();
        assert_eq!(est.value, 0.0);

        let z = 1.7;
        let pair = vec![
            DenseMatrix::from_rows(&[vec![z]]).unwrap(),
            DenseMatrix::from_rows(&[vec![-z]]).unwrap(),
        ];
        let est = mc_complexity_finite(&pair, 10_000, NoiseKind::Gaussian, &mut from_seed(2)).unwrap();
        assert!((est.value - SQRT_2_OVER_PI * z).abs() <= 3.0 * est.std_error);
        let rad = mc_complexity_finite(&pair, 1000, NoiseKind::Rademacher, &mut from_seed(3)).unwrap();
        assert!((rad.value - z).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn finite_complexity_monotone_in_candidates(seed in 0u64..1000, extra in 1usize..4) {
            let mut rng = from_seed(seed);
            let base: Vec<DenseMatrix> = (0..3).map(|_| gauss(6, 2, &mut rng)).collect();
            let mut bigger = base.clone();
            for _ in 0..extra {
                bigger.push(gauss(6, 2, &mut rng));
            }
            let a = mc_complexity_finite(&base, 64, NoiseKind::Gaussian, &mut from_seed(seed + 1)).unwrap();
            let b = mc_complexity_finite(&bigger, 64, NoiseKind::Gaussian, &mut from_seed(seed + 1)).unwrap();
            prop_assert!(b.value >= a.value);
        }

        #[test]
        fn nu_tilde_invariant_under_orthogonal_mixing(seed in 0u64..1000) {
            let mut rng = from_seed(seed);
            let alpha = gauss(3, 7, &mut rng);
            let q = orthonormalize(&gauss(7, 7, &mut rng)).unwrap();
            let mixed = alpha.matmul(&q).unwrap();
            let a = nu_tilde(&alpha).unwrap();
            let b = nu_tilde(&mixed).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    fn small_truth(seed: u64) -> (GroundTruth, CovariateSpec) {
        let cfg = TruthConfig {
            d: 6,
            r: 2,
            k: 4,
            k_prime: 3,
            ..TruthConfig::default()
        };
        (
            make_ground_truth(&cfg, &mut from_seed(seed)).unwrap(),
            CovariateSpec::isotropic(6).unwrap(),
        )
    }

    #[test]
    fn transfer_risk_zero_at_truth() {
        let (truth, spec) = small_truth(1);
        let report = transfer_risk(&truth.rep, &truth.down_head, &truth, &spec, 2000, &mut from_seed(2)).unwrap();
        assert_eq!(report.excess_transfer_risk, 0.0);
        assert_eq!(report.std_error, 0.0);

        let zero = LinearHead::zeros(2, 3, 1.0).unwrap();
        let zero_truth = GroundTruth::new(truth.rep.clone(), truth.pre_head.clone(), zero.clone()).unwrap();
        let report = transfer_risk(&truth.rep, &zero, &zero_truth, &spec, 500, &mut from_seed(3)).unwrap();
        assert_eq!(report.excess_transfer_risk, 0.0);
    }

    #[test]
    fn transfer_risk_matches_naive_estimator() {
        let (truth, spec) = small_truth(4);
        let mut alpha = truth.down_head.alpha().clone();
        alpha[(0, 0)] += 0.8;
        alpha[(1, 1)] -= 0.5;
        let fitted = LinearHead::new(alpha, 3.0, None).unwrap();
        let n = 200_000;
        let kl = transfer_risk(&truth.rep, &fitted, &truth, &spec, n, &mut from_seed(5)).unwrap();

        // Sampled labels, loss difference of the fitted model against the truth.
        let x = sample_covariates(&spec, n, &mut from_seed(6)).unwrap();
        let labels: Vec<OneHotLabel> = sample_labels(&truth.rep, &truth.down_head, &x, &mut from_seed(7)).unwrap();
        let z = truth.rep.embed(&x).unwrap();
        let eta_t = truth.down_head.logits(&z).unwrap();
        let eta_f = fitted.logits(&z).unwrap();
        let diffs: Vec<f64> = (0..n)
            .map(|i| cross_entropy(eta_f.row(i), &labels[i]).unwrap() - cross_entropy(eta_t.row(i), &labels[i]).unwrap())
            .collect();
        let (naive, naive_se) = mean_and_se(&diffs);
        let combined = (kl.std_error.powi(2) + naive_se.powi(2)).sqrt();
        assert!(kl.excess_transfer_risk > 0.0);
        assert!((kl.excess_transfer_risk - naive).abs() <= 3.0 * combined, "{} vs {naive}", kl.excess_transfer_risk);
        assert!(kl.std_error < naive_se);
    }

    #[test]
    fn rep_difference_cases() {
        let (truth, spec) = small_truth(8);
        let cfg = OptimConfig::default();
        let at_truth = pretrain_rep_difference(&truth.rep, &truth, &spec, 4000, 1.0, &cfg, &mut from_seed(9)).unwrap();
        assert!(at_truth.value.abs() < 1e-8, "{at_truth:?}");

        // Orthogonal complement of the true span.
        let b = truth.rep.as_subspace().unwrap().basis();
        let mut full = b.clone();
        let extra = gauss(6, 4, &mut from_seed(10));
        let mut cols: Vec<Vec<f64>> = (0..2).map(|j| full.column(j)).collect();
        cols.extend((0..4).map(|j| extra.column(j)));
        full = DenseMatrix::from_fn(6, 6, |i, j| cols[j][i]);
        let q = orthonormalize(&full).unwrap();
        let perp = DenseMatrix::from_fn(6, 2, |i, j| q[(i, j + 2)]);
        let perp = Representation::Subspace(SubspaceRep::new(perp).unwrap());
        let far = pretrain_rep_difference(&perp, &truth, &spec, 4000, 1.0, &cfg, &mut from_seed(11)).unwrap();
        assert!(far.value > 10.0 * far.std_error, "{far:?}");

        let again = pretrain_rep_difference(&perp, &truth, &spec, 4000, 1.0, &cfg, &mut from_seed(12)).unwrap();
        let combined = (far.std_error.powi(2) + again.std_error.powi(2)).sqrt();
        assert!((far.value - again.value).abs() <= 3.0 * combined);
    }

    #[test]
    fn schur_complement_cases() {
        let (truth, _) = small_truth(13);
        let spec = CovariateSpec::isotropic(6).unwrap();
        let same = schur_complement_bound(&truth.rep, &truth.rep, &spec, 100_000, 3.0, 3, &mut from_seed(1)).unwrap();
        assert!(same.lambda_sc.frobenius_norm() <= 1e-6);

        // An orthogonal subspace explains nothing: Λ_sc ≈ E[h hᵀ], which is
        // the truncated-Gaussian covariance of the projected covariates.
        let b = truth.rep.as_subspace().unwrap().basis();
        let mut p = DenseMatrix::identity(6).sub(&b.matmul_t(b).unwrap()).unwrap();
        p = orthonormalize(&DenseMatrix::from_fn(6, 2, |i, j| p[(i, j + 2)] + p[(i, j)])).unwrap();
        let perp = Representation::Subspace(SubspaceRep::new(p).unwrap());
        let n_mc = 100_000;
        let sb = schur_complement_bound(&perp, &truth.rep, &spec, n_mc, 3.0, 3, &mut from_seed(2)).unwrap();
        let x = sample_covariates(&spec, n_mc, &mut from_seed(2)).unwrap();
        let h = truth.rep.embed(&x).unwrap();
        let fhh = h.gram_cols().scale(1.0 / n_mc as f64);
        // Population moments of a 2-d projection of a 6-d isotropic Gaussian.
        let diff = sb.lambda_sc.sub(&DenseMatrix::identity(2)).unwrap();
        assert!(diff.max_abs() < 0.05, "{:?}", sb.lambda_sc);
        assert!(sb.lambda_sc.sub(&fhh).unwrap().max_abs() < 0.02);
        for v in sym_spectral(&sb.lambda_sc).unwrap().values {
            assert!(v >= -1e-8);
        }
        assert!((sb.bound - 2.0 * 9.0 / 2.0 * sb.sigma1).abs() < 1e-12);
    }

    #[test]
    fn schur_bound_dominates_measured_difference() {
        let (truth, spec) = small_truth(14);
        let cfg = OptimConfig::default();
        let mut rng = from_seed(15);
        let b = truth.rep.as_subspace().unwrap().basis();
        let tilted = orthonormalize(&b.add(&gauss(6, 2, &mut rng).scale(0.4)).unwrap()).unwrap();
        let rep_hat = Representation::Subspace(SubspaceRep::new(tilted).unwrap());
        let sb = schur_complement_bound(&rep_hat, &truth.rep, &spec, 50_000, 3.0, 3, &mut from_seed(16)).unwrap();
        let measured = rep_difference(&rep_hat, &truth.rep, &truth.down_head, &spec, 20_000, 3.0, &cfg, &mut from_seed(17)).unwrap();
        assert!(measured.value > 0.0);
        assert!(sb.bound + 3.0 * measured.std_error >= measured.value);
    }

    #[test]
    fn chain_rule_cases() {
        let x = gauss(50, 4, &mut from_seed(1));
        // Singleton classes have zero complexity on both sides.
        let h = vec![x.matmul(&gauss(4, 2, &mut from_seed(2))).unwrap()];
        let f = vec![gauss(2, 2, &mut from_seed(3))];
        let rep = chain_rule_check(&h, &f, 200, &mut from_seed(4)).unwrap();
        assert_eq!(rep.composite.value, 0.0);
        assert!(rep.rhs >= 0.0 && rep.pass);

        let mut rng = from_seed(5);
        let reps: Vec<DenseMatrix> = (0..8)
            .map(|_| x.matmul(&orthonormalize(&gauss(4, 2, &mut rng)).unwrap()).unwrap())
            .collect();
        let heads: Vec<DenseMatrix> = (0..8).map(|_| gauss(2, 2, &mut rng)).collect();
        let base = chain_rule_check(&reps, &heads, 300, &mut from_seed(6)).unwrap();
        assert!(base.pass);
        let doubled: Vec<DenseMatrix> = heads.iter().map(|a| a.scale(2.0)).collect();
        let scaled = chain_rule_check(&reps, &doubled, 300, &mut from_seed(6)).unwrap();
        assert!(scaled.pass);
        assert!((scaled.composite.value - 2.0 * base.composite.value).abs() < 1e-12);
        assert!((scaled.head_worst_case.value - 2.0 * base.head_worst_case.value).abs() < 1e-12);
        assert!((scaled.lipschitz - 2.0 * base.lipschitz).abs() < 1e-9);
    }

    #[test]
    fn bound_scaling_identities() {
        let profile = ConstantsProfile::default();
        let p = BoundParams::default();
        let base = evaluate_risk_bound(RepKind::Subspace, &p, &profile).unwrap();
        assert!(base.total.is_finite() && base.total > 0.0);
        let doubled = evaluate_risk_bound(RepKind::Subspace, &BoundParams { nu_tilde: 2.0, ..p.clone() }, &profile).unwrap();
        assert!((doubled.pretrain - base.pretrain / 2.0).abs() < 1e-12 * base.pretrain);
        assert_eq!(doubled.downstream, base.downstream);

        // Only the representation term: n -> 4n halves √(kdr²/n).
        let only = ConstantsProfile {
            subspace: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..profile.clone()
        };
        let p1 = BoundParams { k: 1, ..p.clone() };
        let at = |n: usize| {
            evaluate_risk_bound(RepKind::Subspace, &BoundParams { n, ..p1.clone() }, &only)
                .unwrap()
                .pretrain
                / (n as f64).ln()
        };
        // With k = 1 the two square-root terms share the 1/√n factor.
        assert!((at(8000) / at(32000) - 2.0).abs() < 1e-12);

        let zero = evaluate_risk_bound(RepKind::Subspace, &BoundParams { nu_tilde: 0.0, ..p }, &profile).unwrap();
        assert!(zero.total.is_infinite());
    }

    #[test]
    fn bound_monotonicities() {
        let profile = ConstantsProfile::default();
        for kind in [RepKind::Subspace, RepKind::Mlp] {
            let p = BoundParams::default();
            let v = |q: BoundParams| evaluate_risk_bound(kind, &q, &profile).unwrap().total;
            let base = v(p.clone());
            assert!(v(BoundParams { n: 16000, ..p.clone() }) < base);
            assert!(v(BoundParams { m: 400, ..p.clone() }) < base);
            assert!(v(BoundParams { nu_tilde: 2.0, ..p.clone() }) < base);
            assert!(v(BoundParams { k: 60, ..p.clone() }) > base);
            assert!(v(BoundParams { r: 4, ..p.clone() }) >= base);
            assert!(v(BoundParams { d: 40, ..p.clone() }) >= base);
        }
        let p = BoundParams::default();
        let s = |q: BoundParams| evaluate_risk_bound(RepKind::Subspace, &q, &profile).unwrap().total;
        assert!(s(BoundParams { d: 40, ..p.clone() }) > s(p.clone()));
        assert!(s(BoundParams { r: 4, ..p.clone() }) > s(p));
    }
}
