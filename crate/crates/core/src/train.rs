//! Two-stage ERM: joint pre-training of representation and head (optionally
//! with a log-determinant diversity regularizer), frozen-representation head
//! fitting, and a full-dimensional baseline.
//!
//! All solvers are full-batch gradient methods with monotone Armijo
//! backtracking. The first trial step of every search is the Barzilai-Borwein
//! step from the previous iteration, clamped to `[min_step, max_step]`.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::nu_tilde;
use crate::error::{Error, Result};
use crate::linalg::{dot, logdet_psd, orthonormalize, spd_inverse, DenseMatrix};
use crate::model::{
    stiefel_retract, tangent_project, LinearHead, MlpRep, RepKind, Representation, SubspaceRep,
};
use crate::rng::Rng;
use crate::softmax::softmax_head_into;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Stop once the projected-gradient norm is at most this.
    pub grad_tol: f64,
    /// Trial step of the very first line search.
    pub initial_step: f64,
    pub shrink: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub min_step: f64,
    pub max_step: f64,
    /// Ridge added to `ααᵀ` inside the log-determinant.
    pub mu: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-6,
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            min_step: 1e-14,
            max_step: 1e6,
            mu: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config("grad_tol must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config("shrink must lie in (0, 1)".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config("armijo constant must lie in (0, 1)".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config("mu must be nonnegative".into()));
        }
        if !(self.min_step > 0.0 && self.initial_step > 0.0 && self.max_step >= self.initial_step) {
            return Err(Error::Config("need 0 < min_step, 0 < initial_step <= max_step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub risk: f64,
    /// `ln det(ααᵀ + μI)`; zero when the regularizer is off.
    pub regularizer: f64,
    /// Minimized objective: `risk - λ · regularizer`.
    pub objective: f64,
    /// Projected-gradient norm at the start of the iteration.
    pub grad_norm: f64,
    pub step: f64,
    pub nu_tilde: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    /// Set when backtracking reached `min_step` without sufficient decrease.
    pub stall: Option<String>,
}

impl TrainTrace {
    pub fn stalled(&self) -> bool {
        self.stall.is_some()
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }

    /// True when no accepted step increased the objective.
    pub fn is_monotone(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[1].objective <= w[0].objective)
    }

    /// CSV with columns `iter,risk,regularizer,grad_norm,step,nu_tilde`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "iter,risk,regularizer,grad_norm,step,nu_tilde")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.iter, r.risk, r.regularizer, r.grad_norm, r.step, r.nu_tilde
            )?;
        }
        Ok(())
    }
}

/// `(ln det(ααᵀ + μI), 2 (ααᵀ + μI)⁻¹ α)`.
pub fn logdet_regularizer(alpha: &DenseMatrix, mu: f64) -> Result<(f64, DenseMatrix)> {
    if !(mu >= 0.0) {
        return Err(Error::contract("ridge mu must be nonnegative"));
    }
    let gram = alpha.gram_rows().add_identity(mu);
    let value = logdet_psd(&gram)?;
    let grad = spd_inverse(&gram)?.matmul(alpha)?.scale(2.0);
    Ok((value, grad))
}

/// Mean cross-entropy of logits `eta` against (possibly soft) targets `y`,
/// and the logit residual `(σ(η) - y) / n`.
pub fn risk_and_residual(eta: &DenseMatrix, y: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if eta.shape() != y.shape() {
        return Err(Error::contract(format!(
            "logits {:?} vs targets {:?}",
            eta.shape(),
            y.shape()
        )));
    }
    let (n, km1) = eta.shape();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv_n = 1.0 / n as f64;
    let mut g = DenseMatrix::zeros(n, km1);
    let mut total = 0.0;
    for i in 0..n {
        let e = eta.row(i);
        let yi = y.row(i);
        let gi = g.row_mut(i);
        let phi = softmax_head_into(e, gi);
        total += phi - dot(yi, e);
        for (gs, ys) in gi.iter_mut().zip(yi) {
            *gs = (*gs - ys) * inv_n;
        }
    }
    Ok((total * inv_n, g))
}

/// Gradient with respect to the representation's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum RepGradient {
    /// Euclidean gradient with respect to `B` (`d x r`).
    Subspace(DenseMatrix),
    /// One gradient per layer.
    Mlp(Vec<DenseMatrix>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub risk: f64,
    pub head: DenseMatrix,
    pub rep: RepGradient,
}

/// Empirical risk `(1/n) Σ ℓ(head(rep(x_i)), y_i)` and its gradients.
/// `y` is `n x (K-1)`, one-hot or soft.
pub fn loss_and_grad(
    rep: &Representation,
    head: &LinearHead,
    x: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<LossGrad> {
    if head.embed_dim() != rep.output_dim() {
        return Err(Error::contract("head input does not match representation output"));
    }
    if y.cols() != head.alpha().cols() || y.rows() != x.rows() {
        return Err(Error::contract(format!(
            "targets {:?} do not match {} rows and {} classes",
            y.shape(),
            x.rows(),
            head.classes()
        )));
    }
    match rep {
        Representation::Subspace(_) => {
            let z = rep.embed(x)?;
            let (risk, g) = risk_and_residual(&head.logits(&z)?, y)?;
            let head_grad = z.t_matmul(&g)?;
            let dz = g.matmul_t(head.alpha())?;
            Ok(LossGrad {
                risk,
                head: head_grad,
                rep: RepGradient::Subspace(x.t_matmul(&dz)?),
            })
        }
        Representation::Mlp(m) => {
            if x.cols() != m.input_dim() {
                return Err(Error::contract("covariate dimension does not match network input"));
            }
            let (z, hidden) = m.forward(x)?;
            let (risk, g) = risk_and_residual(&head.logits(&z)?, y)?;
            let head_grad = z.t_matmul(&g)?;
            let dz = g.matmul_t(head.alpha())?;
            Ok(LossGrad {
                risk,
                head: head_grad,
                rep: RepGradient::Mlp(m.backward(x, &hidden, &dz)?),
            })
        }
    }
}

/// Hypothesis class used for pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesisConfig {
    pub kind: RepKind,
    pub r: usize,
    /// Column cap of the pre-training head.
    pub head_cap: f64,
    /// Hidden width of the tanh network.
    pub hidden: usize,
    pub layer_caps: Vec<f64>,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            kind: RepKind::Subspace,
            r: 3,
            head_cap: 1.0,
            hidden: 8,
            layer_caps: vec![2.0, 2.0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub rep: Representation,
    pub head: LinearHead,
    pub trace: TrainTrace,
    /// `ln det(ααᵀ)` of the returned head without the ridge, when finite.
    pub logdet_unridged: Option<f64>,
}

fn bb_step(s: &[f64], y: &[f64], fallback: f64, cfg: &OptimConfig) -> f64 {
    let sy = dot(s, y).abs();
    let ss = dot(s, s);
    let t = if sy > 0.0 && ss > 0.0 { ss / sy } else { fallback };
    t.clamp(cfg.min_step, cfg.max_step)
}

enum Search<T> {
    Accepted { state: T, step: f64 },
    Stalled,
}

/// Backtracks from `t0` until `trial(t)` reports an objective below
/// `f0 + armijo * decrease(t)`. `trial` returns `None` for an infeasible
/// trial point, which is treated as a failed test.
fn backtrack<T>(
    f0: f64,
    t0: f64,
    cfg: &OptimConfig,
    mut trial: impl FnMut(f64) -> Result<Option<(T, f64, f64)>>,
) -> Result<Search<T>> {
    let mut t = t0;
    while t >= cfg.min_step {
        if let Some((state, f, decrease)) = trial(t)? {
            if f.is_finite() && f <= f0 + cfg.armijo * decrease {
                return Ok(Search::Accepted { state, step: t });
            }
        }
        t *= cfg.shrink;
    }
    Ok(Search::Stalled)
}

/// Objective pieces at one iterate of joint training.
#[derive(Clone)]
struct Point {
    z: DenseMatrix,
    hidden: Vec<DenseMatrix>,
    residual: DenseMatrix,
    risk: f64,
    reg: f64,
    reg_grad: Option<DenseMatrix>,
    objective: f64,
}

struct Problem<'a> {
    x: &'a DenseMatrix,
    y: DenseMatrix,
    lambda: f64,
    mu: f64,
    head_cap: f64,
}

impl Problem<'_> {
    fn evaluate(&self, z: DenseMatrix, hidden: Vec<DenseMatrix>, alpha: &DenseMatrix) -> Result<Option<Point>> {
        let eta = z.matmul(alpha)?;
        let (risk, residual) = risk_and_residual(&eta, &self.y)?;
        let (reg, reg_grad) = if self.lambda > 0.0 {
            match logdet_regularizer(alpha, self.mu) {
                Ok((v, g)) => (v, Some(g)),
                Err(Error::Singular { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        } else {
            (0.0, None)
        };
        Ok(Some(Point {
            z,
            hidden,
            residual,
            risk,
            reg,
            reg_grad,
            objective: risk - self.lambda * reg,
        }))
    }

    fn head_gradient(&self, p: &Point) -> Result<DenseMatrix> {
        let g = p.z.t_matmul(&p.residual)?;
        match &p.reg_grad {
            Some(rg) => g.add_scaled(-self.lambda, rg),
            None => Ok(g),
        }
    }

    fn project(&self, alpha: DenseMatrix) -> DenseMatrix {
        cap_columns(alpha, self.head_cap)
    }

    /// `α - P(α - ∇)`.
    fn head_pg(&self, alpha: &DenseMatrix, grad: &DenseMatrix) -> Result<DenseMatrix> {
        alpha.sub(&self.project(alpha.sub(grad)?))
    }
}

fn cap_columns(mut alpha: DenseMatrix, cap: f64) -> DenseMatrix {
    let norms = alpha.column_norms();
    for i in 0..alpha.rows() {
        let row = alpha.row_mut(i);
        for (v, &n) in row.iter_mut().zip(&norms) {
            if n > cap {
                *v *= cap / n;
            }
        }
    }
    alpha
}

enum RepState {
    Subspace(DenseMatrix),
    Mlp(MlpRep),
}

impl RepState {
    fn embed(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
        match self {
            RepState::Subspace(b) => Ok((x.matmul(b)?, Vec::new())),
            RepState::Mlp(m) => m.forward(x),
        }
    }

    fn flat(&self) -> Vec<f64> {
        match self {
            RepState::Subspace(b) => b.as_slice().to_vec(),
            RepState::Mlp(m) => m.layers().iter().flat_map(|w| w.as_slice().to_vec()).collect(),
        }
    }
}

/// Direction of steepest descent for the representation block, flattened:
/// the Riemannian gradient on the Stiefel manifold or the per-layer gradient.
fn rep_gradient(
    state: &RepState,
    problem: &Problem<'_>,
    p: &Point,
    alpha: &DenseMatrix,
) -> Result<Vec<DenseMatrix>> {
    let dz = p.residual.matmul_t(alpha)?;
    match state {
        RepState::Subspace(b) => {
            let g = problem.x.t_matmul(&dz)?;
            Ok(vec![tangent_project(b, &g)?])
        }
        RepState::Mlp(m) => m.backward(problem.x, &p.hidden, &dz),
    }
}

fn flatten(ms: &[DenseMatrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

fn init_rep(cfg: &HypothesisConfig, d: usize, rng: &mut Rng) -> Result<RepState> {
    let gauss = |rows: usize, cols: usize, rng: &mut Rng| {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    match cfg.kind {
        RepKind::Subspace => Ok(RepState::Subspace(orthonormalize(&gauss(d, cfg.r, rng))?)),
        RepKind::Mlp => {
            if cfg.layer_caps.len() != 2 || cfg.hidden == 0 {
                return Err(Error::Config("network needs a hidden width and two layer caps".into()));
            }
            let w1 = gauss(cfg.hidden, d, rng).scale(1.0 / (d as f64).sqrt());
            let w2 = gauss(cfg.r, cfg.hidden, rng).scale(1.0 / (cfg.hidden as f64).sqrt());
            Ok(RepState::Mlp(MlpRep::new_capped(vec![w1, w2], cfg.layer_caps.clone())?))
        }
    }
}

fn finish_rep(state: RepState) -> Result<Representation> {
    Ok(match state {
        RepState::Subspace(b) => Representation::Subspace(SubspaceRep::new(b)?),
        RepState::Mlp(m) => Representation::Mlp(m),
    })
}

fn nu_tilde_of(alpha: &DenseMatrix) -> f64 {
    nu_tilde(alpha).unwrap_or(f64::NAN)
}

/// Joint pre-training with alternating head and representation steps.
///
/// The head is initialized at zero and the representation at a random frame
/// (or small random weights for the network) drawn from `rng`. The minimized
/// objective is `risk - λ ln det(ααᵀ + μI)`.
pub fn pretrain(
    data: &crate::data::LabeledDataset,
    hyp: &HypothesisConfig,
    lambda: f64,
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let km1 = data.classes() - 1;
    if hyp.r == 0 || hyp.r > data.dim() {
        return Err(Error::Config(format!("rank {} invalid for dimension {}", hyp.r, data.dim())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config("lambda must be nonnegative".into()));
    }
    if lambda > 0.0 {
        if hyp.r > km1 {
            return Err(Error::Infeasible(format!(
                "diversity regularizer needs r <= K-1, got r={} K-1={km1}",
                hyp.r
            )));
        }
        if cfg.mu <= 0.0 {
            return Err(Error::Config("diversity regularizer needs mu > 0 at a zero head".into()));
        }
    }
    if !(hyp.head_cap > 0.0) {
        return Err(Error::Config("head cap must be positive".into()));
    }

    let problem = Problem {
        x: data.x(),
        y: data.one_hot(),
        lambda,
        mu: cfg.mu,
        head_cap: hyp.head_cap,
    };
    let mut rep = init_rep(hyp, data.dim(), rng)?;
    let mut alpha = DenseMatrix::zeros(hyp.r, km1);
    let (z, hidden) = rep.embed(problem.x)?;
    let mut point = problem
        .evaluate(z, hidden, &alpha)?
        .ok_or_else(|| Error::Degenerate("initial point has a singular regularizer".into()))?;

    let mut trace = TrainTrace::default();
    let mut head_step = cfg.initial_step;
    let mut rep_step = cfg.initial_step;
    let mut prev_head: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut prev_rep: Option<(Vec<f64>, Vec<f64>)> = None;

    for iter in 0..cfg.max_iters {
        let head_grad = problem.head_gradient(&point)?;
        let head_pg = problem.head_pg(&alpha, &head_grad)?.frobenius_norm();
        let rep_grad = rep_gradient(&rep, &problem, &point, &alpha)?;
        let rep_pg = rep_pg_norm(&rep, &rep_grad)?;
        let grad_norm = head_pg.hypot(rep_pg);
        if grad_norm <= cfg.grad_tol {
            trace.converged = true;
            break;
        }

        // Head block.
        if head_pg > 0.5 * cfg.grad_tol {
            let flat_a = alpha.as_slice().to_vec();
            let flat_g = head_grad.as_slice().to_vec();
            if let Some((pa, pg)) = &prev_head {
                let s: Vec<f64> = flat_a.iter().zip(pa).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = flat_g.iter().zip(pg).map(|(a, b)| a - b).collect();
                head_step = bb_step(&s, &y, head_step, cfg);
            }
            let search = backtrack(point.objective, head_step, cfg, |t| {
                let cand = problem.project(alpha.add_scaled(-t, &head_grad)?);
                let dir = head_grad.inner(&cand.sub(&alpha)?);
                Ok(problem
                    .evaluate(point.z.clone(), point.hidden.clone(), &cand)?
                    .map(|p| {
                        let f = p.objective;
                        ((cand, p), f, dir)
                    }))
            })?;
            match search {
                Search::Accepted { state: (a, p), step } => {
                    prev_head = Some((flat_a, flat_g));
                    alpha = a;
                    point = p;
                    head_step = step;
                }
                Search::Stalled => {
                    trace.stall = Some(format!("head line search failed at iteration {iter}"));
                    break;
                }
            }
        }

        // Representation block.
        let rep_grad = rep_gradient(&rep, &problem, &point, &alpha)?;
        let rep_pg = rep_pg_norm(&rep, &rep_grad)?;
        if rep_pg > 0.5 * cfg.grad_tol {
            let flat_r = rep.flat();
            let flat_g = flatten(&rep_grad);
            if let Some((pr, pg)) = &prev_rep {
                let s: Vec<f64> = flat_r.iter().zip(pr).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = flat_g.iter().zip(pg).map(|(a, b)| a - b).collect();
                rep_step = bb_step(&s, &y, rep_step, cfg);
            }
            let search = backtrack(point.objective, rep_step, cfg, |t| {
                let Some((cand, dir)) = rep_trial(&rep, &rep_grad, t)? else {
                    return Ok(None);
                };
                let (z, hidden) = cand.embed(problem.x)?;
                Ok(problem.evaluate(z, hidden, &alpha)?.map(|p| {
                    let f = p.objective;
                    ((cand, p), f, dir)
                }))
            })?;
            match search {
                Search::Accepted { state: (r, p), step } => {
                    prev_rep = Some((flat_r, flat_g));
                    rep = r;
                    point = p;
                    rep_step = step;
                }
                Search::Stalled => {
                    trace.stall = Some(format!("representation line search failed at iteration {iter}"));
                    break;
                }
            }
        }

        trace.records.push(TraceRecord {
            iter,
            risk: point.risk,
            regularizer: point.reg,
            objective: point.objective,
            grad_norm,
            step: rep_step,
            nu_tilde: nu_tilde_of(&alpha),
        });
    }

    let logdet_unridged = logdet_psd(&alpha.gram_rows()).ok();
    let head = LinearHead::new(alpha, hyp.head_cap, None)?;
    Ok(PretrainResult {
        rep: finish_rep(rep)?,
        head,
        trace,
        logdet_unridged,
    })
}

fn rep_pg_norm(state: &RepState, grad: &[DenseMatrix]) -> Result<f64> {
    match state {
        RepState::Subspace(_) => Ok(grad[0].frobenius_norm()),
        RepState::Mlp(m) => {
            let stepped: Vec<DenseMatrix> = m
                .layers()
                .iter()
                .zip(grad)
                .map(|(w, g)| w.sub(g))
                .collect::<Result<_>>()?;
            let projected = m.with_layers(stepped)?;
            let sq: f64 = m
                .layers()
                .iter()
                .zip(projected.layers())
                .map(|(a, b)| a.sub(b).map(|d| d.frobenius_norm().powi(2)))
                .sum::<Result<f64>>()?;
            Ok(sq.sqrt())
        }
    }
}

/// Candidate representation after a step of size `t`, with the Armijo
/// directional term. `None` when the retraction degenerates.
fn rep_trial(state: &RepState, grad: &[DenseMatrix], t: f64) -> Result<Option<(RepState, f64)>> {
    match state {
        RepState::Subspace(b) => {
            let moved = b.add_scaled(-t, &grad[0])?;
            match stiefel_retract(&moved) {
                Ok(s) => {
                    let dir = -t * grad[0].frobenius_norm().powi(2);
                    Ok(Some((RepState::Subspace(s.basis().clone()), dir)))
                }
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        }
        RepState::Mlp(m) => {
            let stepped: Vec<DenseMatrix> = m
                .layers()
                .iter()
                .zip(grad)
                .map(|(w, g)| w.add_scaled(-t, g))
                .collect::<Result<_>>()?;
            let cand = m.with_layers(stepped)?;
            let mut dir = 0.0;
            for ((w_new, w_old), g) in cand.layers().iter().zip(m.layers()).zip(grad) {
                dir += g.inner(&w_new.sub(w_old)?);
            }
            Ok(Some((RepState::Mlp(cand), dir)))
        }
    }
}

/// Projected gradient descent for a column-capped linear head on fixed
/// embeddings `z` (`n x r`) against targets `y` (`n x (K-1)`).
pub fn fit_head_on_embeddings(
    z: &DenseMatrix,
    y: &DenseMatrix,
    cap: f64,
    init: Option<&DenseMatrix>,
    cfg: &OptimConfig,
) -> Result<(LinearHead, TrainTrace)> {
    cfg.validate()?;
    if z.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if z.rows() != y.rows() {
        return Err(Error::contract("embeddings and targets disagree on sample count"));
    }
    if !(cap > 0.0) {
        return Err(Error::Config("head cap must be positive".into()));
    }
    let mut alpha = match init {
        Some(a) if a.shape() == (z.cols(), y.cols()) => cap_columns(a.clone(), cap),
        Some(a) => {
            return Err(Error::contract(format!(
                "initial head {:?}, expected {:?}",
                a.shape(),
                (z.cols(), y.cols())
            )))
        }
        None => DenseMatrix::zeros(z.cols(), y.cols()),
    };
    let eval = |a: &DenseMatrix| -> Result<(f64, DenseMatrix)> {
        let (risk, g) = risk_and_residual(&z.matmul(a)?, y)?;
        Ok((risk, z.t_matmul(&g)?))
    };
    let (mut risk, mut grad) = eval(&alpha)?;
    let mut trace = TrainTrace::default();
    let mut step = cfg.initial_step;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for iter in 0..cfg.max_iters {
        let pg = alpha.sub(&cap_columns(alpha.sub(&grad)?, cap))?.frobenius_norm();
        if pg <= cfg.grad_tol {
            trace.converged = true;
            break;
        }
        if let Some((pa, pgr)) = &prev {
            let s: Vec<f64> = alpha.as_slice().iter().zip(pa).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = grad.as_slice().iter().zip(pgr).map(|(a, b)| a - b).collect();
            step = bb_step(&s, &yv, step, cfg);
        }
        let search = backtrack(risk, step, cfg, |t| {
            let cand = cap_columns(alpha.add_scaled(-t, &grad)?, cap);
            let dir = grad.inner(&cand.sub(&alpha)?);
            let (r, g) = eval(&cand)?;
            Ok(Some(((cand, g, r), r, dir)))
        })?;
        match search {
            Search::Accepted { state: (a, g, r), step: t } => {
                prev = Some((alpha.as_slice().to_vec(), grad.as_slice().to_vec()));
                alpha = a;
                grad = g;
                risk = r;
                step = t;
            }
            Search::Stalled => {
                trace.stall = Some(format!("head line search failed at iteration {iter}"));
                break;
            }
        }
        trace.records.push(TraceRecord {
            iter,
            risk,
            regularizer: 0.0,
            objective: risk,
            grad_norm: pg,
            step,
            nu_tilde: nu_tilde_of(&alpha),
        });
    }
    Ok((LinearHead::new(alpha, cap, None)?, trace))
}

/// Fits a downstream head on top of a frozen representation.
pub fn fit_downstream_head(
    rep: &Representation,
    data: &crate::data::LabeledDataset,
    cap: f64,
    cfg: &OptimConfig,
) -> Result<(LinearHead, TrainTrace)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let z = rep.embed(data.x())?;
    fit_head_on_embeddings(&z, &data.one_hot(), cap, None, cfg)
}

/// Multinomial logistic regression directly on the covariates, with column
/// cap `cap`. The returned head has embedding dimension `d`.
pub fn train_baseline(
    data: &crate::data::LabeledDataset,
    cap: f64,
    cfg: &OptimConfig,
) -> Result<(LinearHead, TrainTrace)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fit_head_on_embeddings(data.x(), &data.one_hot(), cap, None, cfg)
}
