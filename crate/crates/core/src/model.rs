//! Hypothesis spaces: orthonormal-subspace and tanh-network representations,
//! and column-capped linear heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, orthonormalize, singular_values, spectral_norm, DenseMatrix};

const ORTHONORMAL_TOL: f64 = 1e-8;
/// Widths up to this size get the exact `∞→2` norm by vertex enumeration.
const EXACT_INF_TO_TWO_MAX_COLS: usize = 16;

/// `h(x) = B^T x` with `B` a `d x r` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceRep {
    basis: DenseMatrix,
}

impl SubspaceRep {
    pub fn new(basis: DenseMatrix) -> Result<Self> {
        let (d, r) = basis.shape();
        if r == 0 || d < r {
            return Err(Error::contract(format!(
                "subspace basis must be d x r with d >= r >= 1, got {d}x{r}"
            )));
        }
        let err = orthonormality_error(&basis);
        if err > ORTHONORMAL_TOL {
            return Err(Error::contract(format!(
                "basis columns not orthonormal (||B^T B - I||_F = {err:.3e})"
            )));
        }
        Ok(Self { basis })
    }

    pub fn basis(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }
}

/// `||B^T B - I||_F`.
pub fn orthonormality_error(b: &DenseMatrix) -> f64 {
    b.gram_cols()
        .sub(&DenseMatrix::identity(b.cols()))
        .map(|m| m.frobenius_norm())
        .unwrap_or(f64::INFINITY)
}

/// `h(x) = W_K tanh(W_{K-1} tanh(... tanh(W_1 x)))`.
///
/// Layer `p` maps `in_p -> out_p` and is stored as an `out_p x in_p` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpRep {
    layers: Vec<DenseMatrix>,
    caps: Vec<f64>,
}

impl MlpRep {
    /// Validates chaining of layer shapes and the per-layer norm caps.
    pub fn new(layers: Vec<DenseMatrix>, caps: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        if caps.len() != layers.len() {
            return Err(Error::contract("one norm cap per layer required"));
        }
        if caps.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::contract("norm caps must be positive"));
        }
        for w in layers.windows(2) {
            if w[1].cols() != w[0].rows() {
                return Err(Error::contract(format!(
                    "layer shapes do not chain: {:?} then {:?}",
                    w[0].shape(),
                    w[1].shape()
                )));
            }
        }
        let rep = Self { layers, caps };
        rep.check_caps(1e-9)?;
        Ok(rep)
    }

    /// Builds the network after rescaling each layer into its cap.
    pub fn new_capped(layers: Vec<DenseMatrix>, caps: Vec<f64>) -> Result<Self> {
        let rescaled = layers
            .into_iter()
            .enumerate()
            .map(|(p, w)| cap_layer(w, caps.get(p).copied().unwrap_or(1.0), p + 1 == caps.len()))
            .collect();
        Self::new(rescaled, caps)
    }

    fn check_caps(&self, tol: f64) -> Result<()> {
        let last = self.layers.len() - 1;
        for (p, (w, &cap)) in self.layers.iter().zip(&self.caps).enumerate() {
            let norm = if p == last {
                inf_to_two_norm(w)
            } else {
                max_abs_row_sum(w)
            };
            if norm > cap * (1.0 + tol) {
                return Err(Error::ConstraintViolation(format!(
                    "layer {} norm {norm:.6} exceeds cap {cap:.6}",
                    p + 1
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseMatrix] {
        &self.layers
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// Batch forward pass. Returns the embeddings (`n x r`) and the hidden
    /// activations after each tanh layer (`n x out_p` for `p < K`).
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = x.clone();
        for (p, w) in self.layers.iter().enumerate() {
            let mut next = cur.matmul_t(w)?;
            if p + 1 < self.layers.len() {
                for v in next.as_mut_slice() {
                    *v = v.tanh();
                }
                hidden.push(next.clone());
            }
            cur = next;
        }
        Ok((cur, hidden))
    }

    /// Gradients of `Σ_i <dz_i, h(x_i)>` with respect to every layer.
    pub fn backward(
        &self,
        x: &DenseMatrix,
        hidden: &[DenseMatrix],
        dz: &DenseMatrix,
    ) -> Result<Vec<DenseMatrix>> {
        let depth = self.layers.len();
        let mut grads = vec![DenseMatrix::zeros(0, 0); depth];
        let mut delta = dz.clone();
        for p in (0..depth).rev() {
            let input = if p == 0 { x } else { &hidden[p - 1] };
            grads[p] = delta.t_matmul(input)?;
            if p > 0 {
                let mut back = delta.matmul(&self.layers[p])?;
                for (b, a) in back.as_mut_slice().iter_mut().zip(hidden[p - 1].as_slice()) {
                    *b *= 1.0 - a * a;
                }
                delta = back;
            }
        }
        Ok(grads)
    }

    /// Same architecture and caps with new weights, rescaled into the caps.
    pub fn with_layers(&self, layers: Vec<DenseMatrix>) -> Result<Self> {
        Self::new_capped(layers, self.caps.clone())
    }
}

/// `max_q Σ_p |W_qp|`.
pub fn max_abs_row_sum(w: &DenseMatrix) -> f64 {
    (0..w.rows())
        .map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `max_{||u||_∞ <= 1} ||W u||_2`.
///
/// Exact by enumerating the cube's vertices when `W` has at most 16 columns;
/// otherwise returns the upper bound `min(Σ_j ||w_j||, √cols · σ₁(W))`, so
/// rescaling by it still enforces the cap.
pub fn inf_to_two_norm(w: &DenseMatrix) -> f64 {
    let cols = w.cols();
    if cols == 0 {
        return 0.0;
    }
    if cols <= EXACT_INF_TO_TWO_MAX_COLS {
        let g = w.gram_cols();
        let mut best = 0.0f64;
        // u_0 = +1 by symmetry.
        for mask in 0u32..(1u32 << (cols - 1)) {
            let sign = |j: usize| {
                if j == 0 || mask & (1 << (j - 1)) == 0 {
                    1.0
                } else {
                    -1.0
                }
            };
            let mut q = 0.0;
            for i in 0..cols {
                let si = sign(i);
                for j in 0..cols {
                    q += si * sign(j) * g[(i, j)];
                }
            }
            best = best.max(q);
        }
        best.max(0.0).sqrt()
    } else {
        let col_sum: f64 = w.column_norms().iter().sum();
        col_sum.min((cols as f64).sqrt() * spectral_norm(w))
    }
}

fn cap_layer(mut w: DenseMatrix, cap: f64, last: bool) -> DenseMatrix {
    if last {
        let norm = inf_to_two_norm(&w);
        if norm > cap {
            w = w.scale(cap / norm);
        }
    } else {
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > cap {
                let f = cap / s;
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
    }
    w
}

/// A representation from either hypothesis class.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    Subspace(SubspaceRep),
    Mlp(MlpRep),
}

/// Hypothesis-class selector used in configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    Subspace,
    Mlp,
}

impl Representation {
    pub fn kind(&self) -> RepKind {
        match self {
            Representation::Subspace(_) => RepKind::Subspace,
            Representation::Mlp(_) => RepKind::Mlp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Representation::Subspace(s) => s.ambient_dim(),
            Representation::Mlp(m) => m.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Representation::Subspace(s) => s.rank(),
            Representation::Mlp(m) => m.output_dim(),
        }
    }

    pub fn as_subspace(&self) -> Option<&SubspaceRep> {
        match self {
            Representation::Subspace(s) => Some(s),
            Representation::Mlp(_) => None,
        }
    }

    /// Embeds every row of `x` (`n x d`), giving `n x r`.
    pub fn embed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "covariates have dimension {}, representation expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        match self {
            Representation::Subspace(s) => x.matmul(s.basis()),
            Representation::Mlp(m) => Ok(m.forward(x)?.0),
        }
    }
}

/// `h(x)` for a single covariate vector.
pub fn apply_representation(rep: &Representation, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != rep.input_dim() {
        return Err(Error::contract(format!(
            "covariate has dimension {}, representation expects {}",
            x.len(),
            rep.input_dim()
        )));
    }
    let row = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(rep.embed(&row)?.into_vec())
}

/// Linear head `f(z) = α^T z` with per-column norm cap and an optional cap on
/// `||α^T z||`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    alpha: DenseMatrix,
    column_cap: f64,
    output_cap: Option<f64>,
}

impl LinearHead {
    pub fn new(alpha: DenseMatrix, column_cap: f64, output_cap: Option<f64>) -> Result<Self> {
        if !(column_cap > 0.0) {
            return Err(Error::contract("column cap must be positive"));
        }
        if output_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("output cap must be positive"));
        }
        if alpha.rows() == 0 || alpha.cols() == 0 {
            return Err(Error::contract("head needs at least one row and column"));
        }
        let worst = alpha.column_norms().into_iter().fold(0.0, f64::max);
        if worst > column_cap * (1.0 + 1e-10) {
            return Err(Error::ConstraintViolation(format!(
                "column norm {worst:.6} exceeds cap {column_cap:.6}"
            )));
        }
        Ok(Self {
            alpha,
            column_cap,
            output_cap,
        })
    }

    pub fn zeros(embed_dim: usize, classes: usize, column_cap: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract("a head needs at least two classes"));
        }
        Self::new(DenseMatrix::zeros(embed_dim, classes - 1), column_cap, None)
    }

    pub fn alpha(&self) -> &DenseMatrix {
        &self.alpha
    }

    pub fn column_cap(&self) -> f64 {
        self.column_cap
    }

    pub fn output_cap(&self) -> Option<f64> {
        self.output_cap
    }

    pub fn with_output_cap(mut self, cap: Option<f64>) -> Self {
        self.output_cap = cap;
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.alpha.rows()
    }

    /// Number of classes `K`.
    pub fn classes(&self) -> usize {
        self.alpha.cols() + 1
    }

    /// Replaces the weights, projecting columns back into the cap.
    pub fn with_alpha(&self, alpha: DenseMatrix) -> Self {
        Self {
            alpha: project_columns(alpha, self.column_cap),
            column_cap: self.column_cap,
            output_cap: self.output_cap,
        }
    }

    /// Natural parameters for every row of `z` (`n x r` -> `n x (K-1)`).
    pub fn logits(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        z.matmul(&self.alpha)
    }
}

/// `α^T z`; an output cap, when set, is checked rather than enforced.
pub fn apply_head(head: &LinearHead, z: &[f64]) -> Result<Vec<f64>> {
    let eta = head.alpha.t_matvec(z)?;
    if let Some(cap) = head.output_cap {
        let n = norm2(&eta);
        if n > cap {
            return Err(Error::ConstraintViolation(format!(
                "head output norm {n:.6} exceeds cap {cap:.6}"
            )));
        }
    }
    Ok(eta)
}

fn project_columns(mut alpha: DenseMatrix, cap: f64) -> DenseMatrix {
    let norms = alpha.column_norms();
    let cols = alpha.cols();
    for i in 0..alpha.rows() {
        let row = alpha.row_mut(i);
        for j in 0..cols {
            if norms[j] > cap * (1.0 + 8.0 * f64::EPSILON) {
                row[j] *= cap / norms[j];
            }
        }
    }
    alpha
}

/// Rescales every column whose norm exceeds `cap` onto the cap sphere.
pub fn project_head(head: &LinearHead, cap: f64) -> Result<LinearHead> {
    if !(cap > 0.0) {
        return Err(Error::contract("cap must be positive"));
    }
    Ok(LinearHead {
        alpha: project_columns(head.alpha.clone(), cap),
        column_cap: cap,
        output_cap: head.output_cap,
    })
}

/// Retraction onto the Stiefel manifold by orthonormalization.
pub fn stiefel_retract(b_plus_step: &DenseMatrix) -> Result<SubspaceRep> {
    let q = orthonormalize(b_plus_step).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("retraction step: {msg}")),
        other => other,
    })?;
    SubspaceRep::new(q)
}

/// Projection of an ambient direction onto the tangent space at `B`:
/// `G - B sym(B^T G)`.
pub fn tangent_project(b: &DenseMatrix, g: &DenseMatrix) -> Result<DenseMatrix> {
    let btg = b.t_matmul(g)?.symmetrize();
    g.sub(&b.matmul(&btg)?)
}

/// Principal angles between two subspaces, ascending, in radians.
pub fn principal_angles(b1: &SubspaceRep, b2: &SubspaceRep) -> Result<Vec<f64>> {
    if b1.basis.shape() != b2.basis.shape() {
        return Err(Error::contract(format!(
            "principal_angles: shapes {:?} and {:?}",
            b1.basis.shape(),
            b2.basis.shape()
        )));
    }
    let m = b1.basis.t_matmul(&b2.basis)?;
    Ok(singular_values(&m)
        .into_iter()
        .map(|s| s.clamp(0.0, 1.0).acos())
        .collect())
}

/// `||α^T z||` bound from the column norms: `√(K-1) · max_s ||α_s|| · ||z||`.
pub fn head_output_bound(head: &LinearHead, z: &[f64]) -> f64 {
    let max_col = head.alpha.column_norms().into_iter().fold(0.0, f64::max);
    ((head.alpha.cols()) as f64).sqrt() * max_col * norm2(z)
}

/// Cosine of the angle between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm2(a) * norm2(b))
}
