//! Randomized property suites for the softmax geometry, the gradients and
//! the complexity estimators.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diagnostics::{chain_rule_check, empirical_gaussian_complexity_linear, mc_complexity_finite, NoiseKind};
use crate::error::Result;
use crate::linalg::{norm2, orthonormalize, sym_spectral, DenseMatrix};
use crate::model::{LinearHead, MlpRep, Representation, SubspaceRep};
use crate::rng::{stream, Purpose, Rng};
use crate::softmax::{
    cross_entropy, cross_entropy_grad, directional_derivatives, hessian_log_partition, kl_quadratic_bounds,
    OneHotLabel, SELF_CONCORDANCE_R,
};
use crate::train::{logdet_regularizer, loss_and_grad, risk_and_residual, RepGradient};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Suite-specific worst statistic, described by `detail`.
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

/// Case counts per suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSizes {
    pub self_concordance: usize,
    pub hessian: usize,
    pub kl_sandwich: usize,
    pub gradients: usize,
    pub complexity_draws: usize,
    pub chain_rule: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            self_concordance: 10_000,
            hessian: 1_000,
            kl_sandwich: 1_000,
            gradients: 100,
            complexity_draws: 10_000,
            chain_rule: 20,
        }
    }
}

fn gaussian_vec(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform direction scaled to a uniform radius in `[0, max_norm]`.
pub fn random_in_ball(len: usize, max_norm: f64, rng: &mut Rng) -> Vec<f64> {
    let mut v = gaussian_vec(len, rng);
    let n = norm2(&v).max(f64::MIN_POSITIVE);
    let radius = max_norm * rng.gen::<f64>();
    v.iter_mut().for_each(|x| *x *= radius / n);
    v
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `|g'''(t)| <= R ||v|| g''(t)` at random `(eta, v, t)` with `K ∈ {2, 5, 50}`
/// and `||eta||, ||v|| <= 5`; a case fails when the slack drops below `-1e-9`.
pub fn self_concordance_suite(cases: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    for i in 0..cases {
        let k = [2, 5, 50][i % 3];
        let eta = random_in_ball(k - 1, 5.0, rng);
        let mut v = random_in_ball(k - 1, 5.0, rng);
        if norm2(&v) == 0.0 {
            v[0] = 1.0;
        }
        let t: f64 = rng.gen_range(-1.0..=1.0);
        let point: Vec<f64> = eta.iter().zip(&v).map(|(e, d)| e + t * d).collect();
        let dd = directional_derivatives(&point, &v)?;
        let slack = SELF_CONCORDANCE_R * norm2(&v) * dd.second - dd.third.abs();
        worst = worst.min(slack);
        if slack < -1e-9 {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "self-concordance",
        cases,
        failures,
        worst,
        detail: format!("min slack {worst:.3e}"),
    })
}

/// `0 <= λ(∇²Φ(eta)) <= 1` up to `1e-10` for random `eta` with `K <= 100`.
pub fn hessian_suite(cases: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let mut failures = 0;
    let mut max_eig = f64::NEG_INFINITY;
    let mut min_eig = f64::INFINITY;
    for _ in 0..cases {
        let k = rng.gen_range(2..=100);
        let scale = [0.1, 1.0, 5.0, 20.0][rng.gen_range(0..4)];
        let eta: Vec<f64> = gaussian_vec(k - 1, rng).iter().map(|x| scale * x).collect();
        let eig = sym_spectral(&hessian_log_partition(&eta))?;
        let hi = eig.values[0];
        let lo = *eig.values.last().expect("nonempty");
        max_eig = max_eig.max(hi);
        min_eig = min_eig.min(lo);
        if hi > 1.0 + 1e-10 || lo < -1e-10 {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "hessian-spectrum",
        cases,
        failures,
        worst: max_eig,
        detail: format!("eigenvalues within [{min_eig:.3e}, {max_eig:.6}]"),
    })
}

/// Quadratic lower and upper bounds on the KL divergence for random pairs
/// with `||eta|| <= 3`.
pub fn kl_sandwich_suite(cases: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let mut failures = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..cases {
        let k = rng.gen_range(2..=20);
        let a = random_in_ball(k - 1, 3.0, rng);
        let b = random_in_ball(k - 1, 3.0, rng);
        let s = kl_quadratic_bounds(&a, &b)?;
        worst = worst.min((s.kl - s.lower).min(s.upper - s.kl));
        if !s.holds() {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "kl-sandwich",
        cases,
        failures,
        worst,
        detail: format!("min margin {worst:.3e}"),
    })
}

const FD_STEP: f64 = 1e-5;
const GRAD_RTOL: f64 = 1e-4;

fn central_difference(len: usize, mut f: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..len)
        .map(|j| (f(j, FD_STEP) - f(j, -FD_STEP)) / (2.0 * FD_STEP))
        .collect()
}

/// `||analytic - numeric|| / max(||numeric||, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm2(numeric).max(1e-8)
}

fn perturbed(m: &DenseMatrix, j: usize, h: f64) -> DenseMatrix {
    let mut out = m.clone();
    out.as_mut_slice()[j] += h;
    out
}

/// Rows are the first `K-1` entries of random probability vectors.
fn soft_targets(n: usize, km1: usize, rng: &mut Rng) -> DenseMatrix {
    let mut y = DenseMatrix::zeros(n, km1);
    for i in 0..n {
        let w: Vec<f64> = (0..=km1).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
        let total: f64 = w.iter().sum();
        for (ys, ws) in y.row_mut(i).iter_mut().zip(&w) {
            *ys = ws / total;
        }
    }
    y
}

/// Worst relative error of one random instance of each gradient: per-sample
/// cross-entropy, empirical risk in the head, in the basis `B` (differenced off the Stiefel manifold),
/// in every network layer, and the log-determinant regularizer.
fn gradient_case(rng: &mut Rng) -> Result<[f64; 5]> {
    let k = rng.gen_range(2..=6);
    let km1 = k - 1;
    let d = rng.gen_range(2..=6);
    let r = rng.gen_range(1..=d.min(km1 + 1));
    let n = rng.gen_range(3..=12);

    let eta = gaussian_vec(km1, rng);
    let y = OneHotLabel::from_class(rng.gen_range(0..k), k)?;
    let g = cross_entropy_grad(&eta, &y)?;
    let fd = central_difference(km1, |j, h| {
        let mut e = eta.clone();
        e[j] += h;
        cross_entropy(&e, &y).expect("valid")
    });
    let ce = relative_error(&g, &fd);

    let x = gaussian_matrix(n, d, 1.0, rng);
    let targets = soft_targets(n, km1, rng);
    let b = orthonormalize(&gaussian_matrix(d, r, 1.0, rng))?;
    let alpha = gaussian_matrix(r, km1, 0.7, rng);
    let risk_of = |b: &DenseMatrix, a: &DenseMatrix| -> f64 {
        let eta = x.matmul(b).and_then(|z| z.matmul(a)).expect("shapes");
        risk_and_residual(&eta, &targets).expect("shapes").0
    };
    let sub = Representation::Subspace(SubspaceRep::new(b.clone())?);
    let lg = loss_and_grad(&sub, &LinearHead::new(alpha.clone(), 1e6, None)?, &x, &targets)?;
    let head_grad = lg.head;
    let b_grad = match lg.rep {
        RepGradient::Subspace(g) => g,
        RepGradient::Mlp(_) => unreachable!("subspace gradient"),
    };
    let fd_head = central_difference(alpha.as_slice().len(), |j, h| risk_of(&b, &perturbed(&alpha, j, h)));
    let fd_b = central_difference(b.as_slice().len(), |j, h| risk_of(&perturbed(&b, j, h), &alpha));
    let head = relative_error(head_grad.as_slice(), &fd_head);
    let basis = relative_error(b_grad.as_slice(), &fd_b);

    let hidden = rng.gen_range(2..=5);
    let layers = vec![gaussian_matrix(hidden, d, 0.5, rng), gaussian_matrix(r, hidden, 0.5, rng)];
    let caps = vec![1e6, 1e6];
    let net_head = LinearHead::new(alpha.clone(), 1e6, None)?;
    let net = Representation::Mlp(MlpRep::new(layers.clone(), caps.clone())?);
    let lg = loss_and_grad(&net, &net_head, &x, &targets)?;
    let grads = match lg.rep {
        RepGradient::Mlp(g) => g,
        RepGradient::Subspace(_) => unreachable!("network gradient"),
    };
    let mut mlp = 0.0f64;
    for (p, gp) in grads.iter().enumerate() {
        let fd = central_difference(layers[p].as_slice().len(), |j, h| {
            let mut ls = layers.clone();
            ls[p] = perturbed(&layers[p], j, h);
            let rep = Representation::Mlp(MlpRep::new(ls, caps.clone()).expect("caps"));
            loss_and_grad(&rep, &net_head, &x, &targets).expect("shapes").risk
        });
        mlp = mlp.max(relative_error(gp.as_slice(), &fd));
    }

    let a = gaussian_matrix(r.min(km1), km1, 1.0, rng);
    let mu = 1e-3;
    let (_, lg) = logdet_regularizer(&a, mu)?;
    let fd = central_difference(a.as_slice().len(), |j, h| {
        logdet_regularizer(&perturbed(&a, j, h), mu).expect("spd").0
    });
    let logdet = relative_error(lg.as_slice(), &fd);
    Ok([ce, head, basis, mlp, logdet])
}

/// Analytic gradients against central finite differences on small random
/// instances; a case fails when any relative error exceeds `1e-4`.
pub fn gradient_suite(cases: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let mut failures = 0;
    let mut worst = [0.0f64; 5];
    for _ in 0..cases {
        let errs = gradient_case(rng)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
        if errs.iter().any(|&e| !(e <= GRAD_RTOL)) {
            failures += 1;
        }
    }
    let overall = worst.iter().copied().fold(0.0, f64::max);
    Ok(SuiteReport {
        name: "gradients",
        cases,
        failures,
        worst: overall,
        detail: format!(
            "max rel err: cross-entropy {:.2e}, head {:.2e}, basis {:.2e}, network {:.2e}, log-det {:.2e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    })
}

/// Closed-form scalar complexities within three standard errors, then the
/// chain-rule decomposition on random finite classes.
pub fn complexity_suite(draws: usize, chain_cases: usize, rng: &mut Rng) -> Result<SuiteReport> {
    let root = (2.0 / std::f64::consts::PI).sqrt();
    let mut failures = 0;
    let mut cases = 0;
    let mut worst = 0.0f64;
    let mut check = |est: f64, se: f64, expected: f64| {
        cases += 1;
        let z = (est - expected).abs() / se.max(1e-300);
        if (est - expected).abs() > 3.0 * se + 1e-12 {
            failures += 1;
        }
        if se > 0.0 {
            worst = worst.max(z);
        }
    };

    // One-dimensional class {z ↦ a z : |a| <= c} on z = (1, 2): c ||z|| √(2/π) / n.
    let z = DenseMatrix::from_vec(2, 1, vec![1.0, 2.0])?;
    let est = empirical_gaussian_complexity_linear(&z, 1.5, 2, draws, rng)?;
    check(est.value, est.std_error, 1.5 * 5f64.sqrt() * root / 2.0);

    // Two candidates ±u: ||u|| √(2/π) / n with Gaussian noise.
    let u = DenseMatrix::from_vec(3, 1, vec![1.0, -2.0, 2.0])?;
    let pair = [u.clone(), u.scale(-1.0)];
    let est = mc_complexity_finite(&pair, draws, NoiseKind::Gaussian, rng)?;
    check(est.value, est.std_error, 3.0 * root / 3.0);

    // Scalar ±1 under Rademacher noise is exactly 1.
    let unit = DenseMatrix::from_vec(1, 1, vec![1.0])?;
    let est = mc_complexity_finite(&[unit.clone(), unit.scale(-1.0)], draws, NoiseKind::Rademacher, rng)?;
    check(est.value, est.std_error, 1.0);

    let mut chain_failures = 0;
    for _ in 0..chain_cases {
        let n = rng.gen_range(5..=30);
        let r = rng.gen_range(1..=4);
        let km1 = rng.gen_range(1..=4);
        let reps: Vec<DenseMatrix> = (0..rng.gen_range(1..=6)).map(|_| gaussian_matrix(n, r, 1.0, rng)).collect();
        let heads: Vec<DenseMatrix> =
            (0..rng.gen_range(1..=6)).map(|_| gaussian_matrix(r, km1, 1.0, rng)).collect();
        let rep = chain_rule_check(&reps, &heads, draws.min(2_000), rng)?;
        if !rep.pass {
            chain_failures += 1;
        }
    }
    cases += chain_cases;
    failures += chain_failures;
    Ok(SuiteReport {
        name: "complexity",
        cases,
        failures,
        worst,
        detail: format!("max |z| of closed-form cases {worst:.2}, chain-rule failures {chain_failures}/{chain_cases}"),
    })
}

/// Runs every suite, each on its own stream of `seed`.
pub fn run_all(sizes: &SuiteSizes, seed: u64) -> Result<Vec<SuiteReport>> {
    let rng = |i: u64| stream(seed, &[i], Purpose::Evaluation);
    Ok(vec![
        self_concordance_suite(sizes.self_concordance, &mut rng(0))?,
        hessian_suite(sizes.hessian, &mut rng(1))?,
        kl_sandwich_suite(sizes.kl_sandwich, &mut rng(2))?,
        gradient_suite(sizes.gradients, &mut rng(3))?,
        complexity_suite(sizes.complexity_draws, sizes.chain_rule, &mut rng(4))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn small_suites_pass() {
        let sizes = SuiteSizes {
            self_concordance: 300,
            hessian: 30,
            kl_sandwich: 100,
            gradients: 10,
            complexity_draws: 2_000,
            chain_rule: 3,
        };
        for report in run_all(&sizes, 9).unwrap() {
            assert!(report.pass(), "{} failed: {}", report.name, report.detail);
        }
    }

    #[test]
    fn relative_error_scales() {
        assert_eq!(relative_error(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
        assert!((relative_error(&[1.1], &[1.0]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ball_samples_respect_radius() {
        let mut rng = from_seed(1);
        for _ in 0..100 {
            assert!(norm2(&random_in_ball(7, 3.0, &mut rng)) <= 3.0 + 1e-12);
        }
    }
}
