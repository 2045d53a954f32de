//! Log-partition geometry of the multinomial logistic model.
//!
//! Natural parameters `eta` have length `K - 1`; class `K` carries the
//! implicit logit 0. Every log-sum-exp is max-shifted.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::linalg::{norm2, sym_spectral, DenseMatrix};

/// Self-concordance constant for the log-partition function.
pub const SELF_CONCORDANCE_R: f64 = 5.0;

/// Natural-parameter vector (logits of classes `1..K-1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalParams(Vec<f64>);

impl NaturalParams {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::contract("natural parameters need length >= 1"));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("natural parameters must be finite"));
        }
        Ok(Self(eta))
    }

    /// Number of classes `K`.
    pub fn classes(&self) -> usize {
        self.0.len() + 1
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for NaturalParams {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One-hot label in `{0,1}^{K-1}`; the all-zero vector encodes class `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHotLabel {
    len: usize,
    hot: Option<usize>,
}

impl OneHotLabel {
    /// Label for zero-based class index `class` in `0..K`.
    pub fn from_class(class: usize, classes: usize) -> Result<Self> {
        if classes < 2 || class >= classes {
            return Err(Error::contract(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            len: classes - 1,
            hot: (class + 1 < classes).then_some(class),
        })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::contract("empty one-hot label"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::contract("one-hot entries must be 0 or 1"));
        }
        let ones: Vec<usize> = (0..bits.len()).filter(|&i| bits[i] == 1).collect();
        if ones.len() > 1 {
            return Err(Error::contract("one-hot label has more than one active entry"));
        }
        Ok(Self {
            len: bits.len(),
            hot: ones.first().copied(),
        })
    }

    /// Zero-based class index; `K - 1` for the all-zero label.
    pub fn class_index(&self) -> usize {
        self.hot.unwrap_or(self.len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        if let Some(h) = self.hot {
            v[h] = 1.0;
        }
        v
    }
}

/// `log(1 + Σ_s e^{eta_s})`.
pub fn log_partition(eta: &[f64]) -> f64 {
    let m = eta.iter().copied().fold(0.0f64, f64::max);
    let s: f64 = (-m).exp() + eta.iter().map(|&e| (e - m).exp()).sum::<f64>();
    m + s.ln()
}

/// Writes the first `K - 1` softmax probabilities into `out` and returns the
/// log-partition value. `out.len()` must equal `eta.len()`.
#[inline]
pub(crate) fn softmax_head_into(eta: &[f64], out: &mut [f64]) -> f64 {
    let m = eta.iter().copied().fold(0.0f64, f64::max);
    let base = (-m).exp();
    let mut s = base;
    for (o, &e) in out.iter_mut().zip(eta) {
        let v = (e - m).exp();
        *o = v;
        s += v;
    }
    let inv = 1.0 / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
    m + s.ln()
}

/// Full probability vector of length `K`; the last entry is class `K`.
pub fn softmax_prob(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(0.0f64, f64::max);
    let mut p: Vec<f64> = eta.iter().map(|&e| (e - m).exp()).collect();
    p.push((-m).exp());
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Cross-entropy `-y^T eta + Φ(eta)`.
pub fn cross_entropy(eta: &[f64], y: &OneHotLabel) -> Result<f64> {
    if eta.len() != y.len() {
        return Err(Error::contract(format!(
            "cross_entropy: eta has length {}, label {}",
            eta.len(),
            y.len()
        )));
    }
    let linear = y.hot.map_or(0.0, |h| eta[h]);
    Ok(log_partition(eta) - linear)
}

/// Gradient of cross-entropy with respect to `eta`: `σ(eta) - y`.
pub fn cross_entropy_grad(eta: &[f64], y: &OneHotLabel) -> Result<Vec<f64>> {
    if eta.len() != y.len() {
        return Err(Error::contract("cross_entropy_grad: length mismatch"));
    }
    let mut g = grad_log_partition(eta);
    if let Some(h) = y.hot {
        g[h] -= 1.0;
    }
    Ok(g)
}

/// `∇Φ(eta)`, the first `K - 1` softmax probabilities.
pub fn grad_log_partition(eta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; eta.len()];
    softmax_head_into(eta, &mut g);
    g
}

/// `∇²Φ(eta) = diag(σ) - σσ^T`.
pub fn hessian_log_partition(eta: &[f64]) -> DenseMatrix {
    let s = grad_log_partition(eta);
    let n = s.len();
    DenseMatrix::from_fn(n, n, |i, j| {
        let d = if i == j { s[i] } else { 0.0 };
        d - s[i] * s[j]
    })
}

/// KL divergence `KL[P(·|eta_true) || P(·|eta_model)]` in natural-parameter
/// form: `Φ(eta_model) - Φ(eta_true) - ∇Φ(eta_true)^T (eta_model - eta_true)`.
pub fn kl_divergence(eta_true: &[f64], eta_model: &[f64]) -> Result<f64> {
    if eta_true.len() != eta_model.len() {
        return Err(Error::contract(format!(
            "kl_divergence: lengths {} and {}",
            eta_true.len(),
            eta_model.len()
        )));
    }
    Ok(kl_unchecked(eta_true, eta_model))
}

#[inline]
pub(crate) fn kl_unchecked(eta_true: &[f64], eta_model: &[f64]) -> f64 {
    if eta_true == eta_model {
        return 0.0;
    }
    let mut p = vec![0.0; eta_true.len()];
    let phi_true = softmax_head_into(eta_true, &mut p);
    let phi_model = log_partition(eta_model);
    let lin: f64 = p
        .iter()
        .zip(eta_model.iter().zip(eta_true))
        .map(|(pi, (m, t))| pi * (m - t))
        .sum();
    (phi_model - phi_true - lin).max(0.0)
}

/// Derivatives at `t = 0` of `g(t) = Φ(eta + t v)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionalDerivatives {
    pub first: f64,
    pub second: f64,
    pub third: f64,
}

/// `g'(0)`, `g''(0)`, `g'''(0)` for `g(t) = Φ(eta + t v)`.
///
/// With `π` the full `K`-class softmax and `v_K = 0`, the closed forms are
/// the first three cumulants of `v` under `π`:
/// `g' = E v`, `g'' = E (v - g')²`, `g''' = E (v - g')³`.
pub fn directional_derivatives(eta: &[f64], v: &[f64]) -> Result<DirectionalDerivatives> {
    if eta.len() != v.len() {
        return Err(Error::contract("directional_derivatives: length mismatch"));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::contract("directional_derivatives: zero direction"));
    }
    let pi = softmax_prob(eta);
    let k1 = v.len();
    let dir = |s: usize| if s < k1 { v[s] } else { 0.0 };
    let mean: f64 = pi.iter().enumerate().map(|(s, p)| p * dir(s)).sum();
    let mut second = 0.0;
    let mut third = 0.0;
    for (s, p) in pi.iter().enumerate() {
        let c = dir(s) - mean;
        second += p * c * c;
        third += p * c * c * c;
    }
    Ok(DirectionalDerivatives {
        first: mean,
        second,
        third,
    })
}

/// Outcome of checking `|g'''(t)| <= R ||v|| g''(t)` over a grid of `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfConcordanceReport {
    /// Largest `|g'''| / (||v|| g'')` over evaluated points.
    pub max_ratio: f64,
    pub evaluated: usize,
    /// Points skipped because `g''` underflowed.
    pub skipped: usize,
    pub pass: bool,
}

pub fn check_self_concordance(eta: &[f64], v: &[f64], t_grid: &[f64]) -> Result<SelfConcordanceReport> {
    if eta.len() != v.len() {
        return Err(Error::contract("check_self_concordance: length mismatch"));
    }
    let vnorm = norm2(v);
    if vnorm == 0.0 {
        return Err(Error::contract("check_self_concordance: zero direction"));
    }
    let mut max_ratio = 0.0f64;
    let mut evaluated = 0;
    let mut skipped = 0;
    let mut point = vec![0.0; eta.len()];
    for &t in t_grid {
        for ((p, &e), &d) in point.iter_mut().zip(eta).zip(v) {
            *p = e + t * d;
        }
        let dd = directional_derivatives(&point, v)?;
        if !(dd.second > 1e-300) {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        max_ratio = max_ratio.max(dd.third.abs() / (vnorm * dd.second));
    }
    Ok(SelfConcordanceReport {
        max_ratio,
        evaluated,
        skipped,
        pass: max_ratio <= SELF_CONCORDANCE_R + 1e-9,
    })
}

/// Quadratic sandwich around the KL divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSandwich {
    pub lower: f64,
    pub kl: f64,
    pub upper: f64,
}

impl KlSandwich {
    pub fn holds(&self) -> bool {
        self.lower <= self.kl && self.kl <= self.upper
    }
}

/// `c₀ e^{-10 q₀} ||v||² <= KL <= ||v||² / 2` with `v = eta_model - eta_true`,
/// `c₀ = λ_min(∇²Φ(eta_true)) / 2` and `q₀ = max(||eta_model||, ||eta_true||)`.
pub fn kl_quadratic_bounds(eta_true: &[f64], eta_model: &[f64]) -> Result<KlSandwich> {
    let kl = kl_divergence(eta_true, eta_model)?;
    let diff: Vec<f64> = eta_model.iter().zip(eta_true).map(|(m, t)| m - t).collect();
    let sq = diff.iter().map(|d| d * d).sum::<f64>();
    let lambda_min = sym_spectral(&hessian_log_partition(eta_true))?
        .values
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0);
    let c0 = 0.5 * lambda_min;
    let q0 = norm2(eta_model).max(norm2(eta_true));
    Ok(KlSandwich {
        lower: c0 * (-10.0 * q0).exp() * sq,
        kl,
        upper: 0.5 * sq,
    })
}

/// Exponential-form bounds on `Φ(w + v)` implied by modified self-concordance
/// with constant `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorSandwich {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

pub fn taylor_sandwich(w: &[f64], v: &[f64], r: f64) -> Result<TaylorSandwich> {
    if w.len() != v.len() {
        return Err(Error::contract("taylor_sandwich: length mismatch"));
    }
    let base = log_partition(w);
    let grad = grad_log_partition(w);
    let lin: f64 = grad.iter().zip(v).map(|(g, x)| g * x).sum();
    let hess = hessian_log_partition(w);
    let hv = hess.matvec(v)?;
    let quad: f64 = hv.iter().zip(v).map(|(a, b)| a * b).sum();
    let vn = norm2(v);
    let shifted: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + b).collect();
    let value = log_partition(&shifted);
    if vn == 0.0 {
        return Ok(TaylorSandwich {
            lower: base,
            value,
            upper: base,
        });
    }
    let a = r * vn;
    let scale = quad / (a * a);
    // e^{-a} + a - 1 and e^{a} - a - 1, with series for small a.
    let (lo_factor, hi_factor) = if a < 1e-3 {
        let a2 = a * a;
        (
            a2 / 2.0 - a2 * a / 6.0 + a2 * a2 / 24.0,
            a2 / 2.0 + a2 * a / 6.0 + a2 * a2 / 24.0,
        )
    } else {
        ((-a).exp_m1() + a, a.exp_m1() - a)
    };
    Ok(TaylorSandwich {
        lower: base + lin + scale * lo_factor,
        value,
        upper: base + lin + scale * hi_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn label(class: usize, k: usize) -> OneHotLabel {
        OneHotLabel::from_class(class, k).unwrap()
    }

    // Σ_c p_c log(p_c / q_c) over all K classes.
    fn kl_direct(eta_true: &[f64], eta_model: &[f64]) -> f64 {
        let p = softmax_prob(eta_true);
        let q = softmax_prob(eta_model);
        p.iter()
            .zip(&q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi).ln())
            .sum()
    }

    fn fd_log_partition_grad(eta: &[f64], h: f64) -> Vec<f64> {
        (0..eta.len())
            .map(|i| {
                let mut a = eta.to_vec();
                let mut b = eta.to_vec();
                a[i] += h;
                b[i] -= h;
                (log_partition(&a) - log_partition(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn log_partition_values() {
        assert_relative_eq!(log_partition(&[0.0]), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(log_partition(&[0.0, 0.0]), 3f64.ln(), epsilon = 1e-15);
        // 1000 + log(1 + e^{-1000}) is exactly 1000 in double precision.
        assert_eq!(log_partition(&[1000.0]), 1000.0);
        assert!(log_partition(&[-3.0, 2.0]) >= 2.0);
    }

    #[test]
    fn softmax_values() {
        let p = softmax_prob(&[0.0]);
        assert_relative_eq!(p[0], 0.5);
        assert_relative_eq!(p[1], 0.5);
        let p = softmax_prob(&[0.0, 0.0]);
        for v in p {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax_prob(&[2f64.ln()]);
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        let ce = cross_entropy(&[0.0, 0.0], &label(0, 3)).unwrap();
        assert_relative_eq!(ce, 3f64.ln(), epsilon = 1e-15);
        let ce = cross_entropy(&[0.0, 0.0], &label(2, 3)).unwrap();
        assert_relative_eq!(ce, 3f64.ln(), epsilon = 1e-15);
        // -2 + ln(1 + e^2 + e^-1), evaluated term by term.
        let oracle = -2.0 + (1.0 + 2f64.exp() + (-1f64).exp()).ln();
        let ce = cross_entropy(&[2.0, -1.0], &label(0, 3)).unwrap();
        assert_relative_eq!(ce, oracle, epsilon = 1e-14);
        assert_relative_eq!(ce, 0.169_84, epsilon = 1e-5);
        assert!(cross_entropy(&[0.0], &label(0, 3)).is_err());
    }

    #[test]
    fn cross_entropy_is_negative_log_prob() {
        let eta = [0.3, -1.2, 2.5, 0.0];
        for class in 0..5 {
            let ce = cross_entropy(&eta, &label(class, 5)).unwrap();
            let p = softmax_prob(&eta)[class];
            assert_relative_eq!(ce, -p.ln(), epsilon = 1e-13);
        }
    }

    #[test]
    fn gradient_values() {
        let g = grad_log_partition(&[0.0, 0.0]);
        assert_relative_eq!(g[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(g[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(grad_log_partition(&[0.0])[0], 0.5);
        let eta = [0.4, -1.1, 2.0, 0.7];
        let fd = fd_log_partition_grad(&eta, 1e-5);
        for (a, b) in grad_log_partition(&eta).iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_values() {
        let h = hessian_log_partition(&[0.0]);
        assert_relative_eq!(h[(0, 0)], 0.25);
        let h = hessian_log_partition(&[0.0, 0.0]);
        assert_relative_eq!(h[(0, 0)], 2.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(h[(0, 1)], -1.0 / 9.0, epsilon = 1e-15);
        let eta = [0.2, -0.5, 1.3, -2.0, 0.9];
        let h = hessian_log_partition(&eta);
        let step = 1e-5;
        for j in 0..eta.len() {
            let mut a = eta.to_vec();
            let mut b = eta.to_vec();
            a[j] += step;
            b[j] -= step;
            let ga = grad_log_partition(&a);
            let gb = grad_log_partition(&b);
            for i in 0..eta.len() {
                let fd = (ga[i] - gb[i]) / (2.0 * step);
                assert!((fd - h[(i, j)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_divergence(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        let kl = kl_divergence(&[0.0], &[3f64.ln()]).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert_relative_eq!(kl, oracle, epsilon = 1e-12);
        assert_relative_eq!(kl, 0.1438, epsilon = 1e-4);
        let kl = kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(kl > 0.0);
        assert!((kl - kl_direct(&[1.0, 0.0], &[0.0, 1.0])).abs() < 1e-10);
        assert!(kl_divergence(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn directional_derivative_values() {
        let dd = directional_derivatives(&[0.0], &[1.0]).unwrap();
        assert_relative_eq!(dd.first, 0.5);
        assert_relative_eq!(dd.second, 0.25);
        assert_eq!(dd.third, 0.0);
        assert!(directional_derivatives(&[0.0], &[0.0]).is_err());
    }

    // Raw P-polynomial form of g''' as a cross-check on the central-moment form.
    fn third_from_polynomials(eta: &[f64], v: &[f64]) -> f64 {
        let r: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let p0 = 1.0 + r.iter().sum::<f64>();
        let pj = |j: i32| -> f64 { r.iter().zip(v).map(|(ri, vi)| vi.powi(j) * ri).sum() };
        let (p1, p2, p3) = (pj(1), pj(2), pj(3));
        (p3 * p0 * p0 - 3.0 * p2 * p1 * p0 + 2.0 * p1.powi(3)) / p0.powi(3)
    }

    #[test]
    fn directional_derivatives_match_finite_differences() {
        // g(t) = log(1 + e^{1 + t}); five-point stencils.
        let g = |t: f64| log_partition(&[1.0 + t]);
        let h = 1e-3;
        let d1 = (-g(2.0 * h) + 8.0 * g(h) - 8.0 * g(-h) + g(-2.0 * h)) / (12.0 * h);
        let d2 = (-g(2.0 * h) + 16.0 * g(h) - 30.0 * g(0.0) + 16.0 * g(-h) - g(-2.0 * h))
            / (12.0 * h * h);
        let h3 = 1e-2;
        let d3 = (g(2.0 * h3) - 2.0 * g(h3) + 2.0 * g(-h3) - g(-2.0 * h3)) / (2.0 * h3.powi(3));
        let dd = directional_derivatives(&[1.0], &[1.0]).unwrap();
        assert!((dd.first - d1).abs() < 1e-5);
        assert!((dd.second - d2).abs() < 1e-5);
        assert!((dd.third - d3).abs() < 1e-4);

        let eta = [0.3, -0.7, 1.1, 0.0, -1.5, 0.8, 0.2];
        let v = [0.5, 1.0, -0.3, 0.9, -1.2, 0.4, 0.1];
        let dd = directional_derivatives(&eta, &v).unwrap();
        assert!(dd.second >= 0.0);
        assert!((dd.third - third_from_polynomials(&eta, &v)).abs() < 1e-12);
        let gv = |t: f64| {
            let p: Vec<f64> = eta.iter().zip(&v).map(|(e, d)| e + t * d).collect();
            log_partition(&p)
        };
        let fd2 = (-gv(2.0 * h) + 16.0 * gv(h) - 30.0 * gv(0.0) + 16.0 * gv(-h) - gv(-2.0 * h))
            / (12.0 * h * h);
        assert!((dd.second - fd2).abs() < 1e-5);
    }

    #[test]
    fn self_concordance_scalar_logistic() {
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.1).collect();
        let rep = check_self_concordance(&[0.0], &[1.0], &grid).unwrap();
        assert!(rep.pass);
        assert!(rep.max_ratio <= 1.0);
        let scaled = check_self_concordance(&[0.0], &[10.0], &grid).unwrap();
        assert!(scaled.pass);
    }

    #[test]
    fn self_concordance_skips_underflow() {
        let rep = check_self_concordance(&[-800.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.evaluated, 0);
        assert!(rep.pass);
    }

    #[test]
    fn kl_sandwich_values() {
        let s = kl_quadratic_bounds(&[0.4, -0.2], &[0.4, -0.2]).unwrap();
        assert_eq!((s.lower, s.kl, s.upper), (0.0, 0.0, 0.0));
        let s = kl_quadratic_bounds(&[0.0], &[0.1]).unwrap();
        assert_relative_eq!(s.upper, 0.005, epsilon = 1e-15);
        assert_relative_eq!(s.kl, 0.00125, epsilon = 1e-5);
        assert_relative_eq!(s.lower, 0.125 * (-1f64).exp() * 0.01, epsilon = 1e-15);
        assert!(s.holds());
    }

    #[test]
    fn one_hot_validation() {
        assert!(OneHotLabel::from_bits(&[0, 1, 1]).is_err());
        assert!(OneHotLabel::from_bits(&[0, 2]).is_err());
        assert_eq!(OneHotLabel::from_bits(&[0, 0]).unwrap().class_index(), 2);
        assert_eq!(OneHotLabel::from_bits(&[0, 1]).unwrap().class_index(), 1);
        assert!(OneHotLabel::from_class(3, 3).is_err());
        assert!(NaturalParams::new(vec![]).is_err());
        assert!(NaturalParams::new(vec![f64::NAN]).is_err());
    }

    fn eta_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 1..max_len)
    }

    proptest! {
        #[test]
        fn hessian_spectrum_in_unit_interval(eta in eta_strategy(30)) {
            let eig = sym_spectral(&hessian_log_partition(&eta)).unwrap();
            prop_assert!(eig.values[0] <= 1.0 + 1e-10);
            prop_assert!(*eig.values.last().unwrap() >= -1e-10);
        }

        #[test]
        fn kl_nonnegative_and_matches_direct(
            pair in (1usize..12).prop_flat_map(|k| (
                prop::collection::vec(-3.0f64..3.0, k),
                prop::collection::vec(-3.0f64..3.0, k),
            ))
        ) {
            let (a, b) = pair;
            let kl = kl_divergence(&a, &b).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!((kl - kl_direct(&a, &b)).abs() < 1e-10);
        }

        #[test]
        fn cross_entropy_gradient_is_lipschitz_bounded(eta in eta_strategy(40), class in 0usize..64) {
            let k = eta.len() + 1;
            let y = label(class % k, k);
            let g = cross_entropy_grad(&eta, &y).unwrap();
            prop_assert!(norm2(&g) <= ((k - 1) as f64).sqrt() + 1e-10);
        }

        #[test]
        fn probabilities_sum_to_one(eta in eta_strategy(50)) {
            let s: f64 = softmax_prob(&eta).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn taylor_sandwich_holds(
            pair in (1usize..10).prop_flat_map(|k| (
                prop::collection::vec(-3.0f64..3.0, k),
                prop::collection::vec(-2.0f64..2.0, k),
            ))
        ) {
            let (w, v) = pair;
            let s = taylor_sandwich(&w, &v, SELF_CONCORDANCE_R).unwrap();
            let slack = 1e-12 * (1.0 + s.value.abs());
            prop_assert!(s.lower <= s.value + slack);
            prop_assert!(s.value <= s.upper + slack);
        }
    }
}
