//! Ground-truth construction and synthetic data under a multinomial logistic
//! label model with truncated-Gaussian covariates.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{norm2, orthonormalize, sym_spectral, DenseMatrix};
use crate::model::{LinearHead, MlpRep, RepKind, Representation, SubspaceRep};
use crate::rng::Rng;
use crate::softmax::{softmax_head_into, OneHotLabel};

const PROBE_BATCH: usize = 1000;
const MIN_ACCEPTANCE: f64 = 0.01;

/// Covariate law: `N(0, Σ)` conditioned on `||x|| <= D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCovariateSpec")]
pub struct CovariateSpec {
    d: usize,
    sigma: DenseMatrix,
    sigma_min: f64,
    sigma_max: f64,
    norm_cap: f64,
    #[serde(skip)]
    factor: DenseMatrix,
}

#[derive(Deserialize)]
struct RawCovariateSpec {
    d: usize,
    sigma: DenseMatrix,
    sigma_min: f64,
    sigma_max: f64,
    norm_cap: f64,
}

impl TryFrom<RawCovariateSpec> for CovariateSpec {
    type Error = Error;

    fn try_from(raw: RawCovariateSpec) -> Result<Self> {
        let spec = CovariateSpec::new(raw.sigma, raw.sigma_min, raw.sigma_max, raw.norm_cap)?;
        if spec.d != raw.d {
            return Err(Error::contract("covariate spec dimension disagrees with sigma"));
        }
        Ok(spec)
    }
}

impl CovariateSpec {
    pub fn new(sigma: DenseMatrix, sigma_min: f64, sigma_max: f64, norm_cap: f64) -> Result<Self> {
        let (d, c) = sigma.shape();
        if d != c || d == 0 {
            return Err(Error::contract("covariance must be square and nonempty"));
        }
        if !(norm_cap > 0.0) {
            return Err(Error::contract("norm cap D must be positive"));
        }
        if !(sigma_min > 0.0) || sigma_min > sigma_max {
            return Err(Error::contract("need 0 < sigma_min <= sigma_max"));
        }
        let eig = sym_spectral(&sigma)?;
        let lo = eig.values[d - 1];
        let hi = eig.values[0];
        let tol = 1e-10 * hi.abs().max(1.0);
        if lo < sigma_min - tol || hi > sigma_max + tol {
            return Err(Error::contract(format!(
                "covariance spectrum [{lo:.6}, {hi:.6}] outside [{sigma_min}, {sigma_max}]"
            )));
        }
        let factor = eig.reconstruct_with(f64::sqrt);
        Ok(Self {
            d,
            sigma,
            sigma_min,
            sigma_max,
            norm_cap,
            factor,
        })
    }

    /// `Σ = I_d` with the default cap `D = 3√d`.
    pub fn isotropic(d: usize) -> Result<Self> {
        Self::new(DenseMatrix::identity(d), 1.0, 1.0, 3.0 * (d as f64).sqrt())
    }

    /// Diagonal `Σ` whose eigenvalues interpolate geometrically from 1 down to
    /// `1 / condition`, with the default cap `D = 3√tr Σ`.
    pub fn diagonal_geometric(d: usize, condition: f64) -> Result<Self> {
        if !(condition >= 1.0) {
            return Err(Error::contract("covariate condition number must be >= 1"));
        }
        let diag: Vec<f64> = (0..d)
            .map(|i| {
                if d == 1 {
                    1.0
                } else {
                    condition.powf(-(i as f64) / (d - 1) as f64)
                }
            })
            .collect();
        let trace: f64 = diag.iter().sum();
        Self::new(DenseMatrix::from_diag(&diag), 1.0 / condition, 1.0, 3.0 * trace.sqrt())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sigma(&self) -> &DenseMatrix {
        &self.sigma
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn norm_cap(&self) -> f64 {
        self.norm_cap
    }

    pub fn with_norm_cap(&self, norm_cap: f64) -> Result<Self> {
        Self::new(self.sigma.clone(), self.sigma_min, self.sigma_max, norm_cap)
    }

    /// Short content hash recorded in dataset headers.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.d.to_le_bytes());
        for v in self.sigma.as_slice() {
            hasher.update(v.to_le_bytes());
        }
        for v in [self.sigma_min, self.sigma_max, self.norm_cap] {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Draws `n` rows from the truncated Gaussian of `spec`.
///
/// The first [`PROBE_BATCH`] proposals double as a feasibility probe: if fewer
/// than 1% of them land inside the norm ball the spec is rejected.
pub fn sample_covariates(spec: &CovariateSpec, n: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    if n == 0 {
        return Err(Error::contract("sample_covariates needs n >= 1"));
    }
    let d = spec.d;
    let mut out = Vec::with_capacity(n * d);
    let mut g = vec![0.0; d];
    let mut proposals = 0usize;
    let mut accepted = 0usize;
    while accepted < n {
        for v in g.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = spec.factor.matvec(&g)?;
        proposals += 1;
        if norm2(&x) <= spec.norm_cap {
            out.extend_from_slice(&x);
            accepted += 1;
        }
        if proposals == PROBE_BATCH && (accepted as f64) < MIN_ACCEPTANCE * PROBE_BATCH as f64 {
            return Err(Error::Infeasible(format!(
                "norm cap {} accepts {accepted} of {PROBE_BATCH} probe draws",
                spec.norm_cap
            )));
        }
    }
    DenseMatrix::from_vec(n, d, out)
}

/// Covariates plus class labels. Class `K` is the all-zero one-hot row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    x: DenseMatrix,
    labels: Vec<OneHotLabel>,
    classes: usize,
    seed: u64,
}

impl LabeledDataset {
    pub fn new(x: DenseMatrix, labels: Vec<OneHotLabel>, classes: usize, seed: u64) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} covariate rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::contract("dataset needs at least two classes"));
        }
        if labels.iter().any(|y| y.len() != classes - 1) {
            return Err(Error::contract("label length does not match class count"));
        }
        Ok(Self {
            x,
            labels,
            classes,
            seed,
        })
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn labels(&self) -> &[OneHotLabel] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// `n x (K-1)` one-hot matrix.
    pub fn one_hot(&self) -> DenseMatrix {
        let mut y = DenseMatrix::zeros(self.len(), self.classes - 1);
        for (i, l) in self.labels.iter().enumerate() {
            let c = l.class_index();
            if c + 1 < self.classes {
                y[(i, c)] = 1.0;
            }
        }
        y
    }

    /// First `n` rows.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::contract(format!(
                "prefix of {n} rows from a dataset of {}",
                self.len()
            )));
        }
        let d = self.dim();
        let x = DenseMatrix::from_vec(n, d, self.x.as_slice()[..n * d].to_vec())?;
        Self::new(x, self.labels[..n].to_vec(), self.classes, self.seed)
    }

    /// Empirical class frequencies over `0..K`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for l in &self.labels {
            counts[l.class_index()] += 1;
        }
        counts
    }
}

/// Labels drawn from the softmax of `head(rep(x))` for every row of `x`.
pub fn sample_labels(
    rep: &Representation,
    head: &LinearHead,
    x: &DenseMatrix,
    rng: &mut Rng,
) -> Result<Vec<OneHotLabel>> {
    let z = rep.embed(x)?;
    if z.cols() != head.embed_dim() {
        return Err(Error::contract(format!(
            "representation output {} does not match head input {}",
            z.cols(),
            head.embed_dim()
        )));
    }
    let eta = head.logits(&z)?;
    let classes = head.classes();
    let mut probs = vec![0.0; classes - 1];
    let mut labels = Vec::with_capacity(x.rows());
    for i in 0..eta.rows() {
        softmax_head_into(eta.row(i), &mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = classes - 1;
        for (s, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class = s;
                break;
            }
        }
        labels.push(OneHotLabel::from_class(class, classes)?);
    }
    Ok(labels)
}

/// Shapes and scales of a ground-truth model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub d: usize,
    pub r: usize,
    /// Pre-training class count `k`.
    pub k: usize,
    /// Downstream class count `k'`.
    pub k_prime: usize,
    /// Target `σ₁ / σ_r` of `α^p α^pᵀ`.
    pub condition_number: f64,
    /// `σ₁(α^p α^pᵀ)`.
    pub head_scale: f64,
    /// Column norm of the downstream truth head.
    pub down_norm: f64,
    /// Column cap `c₁` of the pre-training head class.
    pub pre_cap: f64,
    /// Column cap `c₀` of the downstream head class.
    pub down_cap: f64,
    pub kind: RepKind,
    /// Hidden width of the tanh network (network truths only).
    pub hidden: usize,
    /// Norm caps `M(1), M(2)` of the tanh network.
    pub layer_caps: Vec<f64>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            d: 20,
            r: 3,
            k: 30,
            k_prime: 2,
            condition_number: 1.0,
            head_scale: 1.0,
            down_norm: 1.0,
            pre_cap: 1.0,
            down_cap: 3.0,
            kind: RepKind::Subspace,
            hidden: 8,
            layer_caps: vec![2.0, 2.0],
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r > self.d {
            return Err(Error::Config(format!("need 1 <= r <= d, got r={} d={}", self.r, self.d)));
        }
        if self.k < 2 || self.k_prime < 2 {
            return Err(Error::Config("class counts must be at least 2".into()));
        }
        if self.k - 1 < self.r {
            return Err(Error::Infeasible(format!(
                "k-1 = {} < r = {}: the pre-training head cannot have full row rank",
                self.k - 1,
                self.r
            )));
        }
        if !(self.condition_number >= 1.0) {
            return Err(Error::Config("condition_number must be >= 1".into()));
        }
        for (name, v) in [
            ("head_scale", self.head_scale),
            ("down_norm", self.down_norm),
            ("pre_cap", self.pre_cap),
            ("down_cap", self.down_cap),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kind == RepKind::Mlp && (self.hidden == 0 || self.layer_caps.len() != 2) {
            return Err(Error::Config("network truth needs hidden >= 1 and two layer caps".into()));
        }
        Ok(())
    }
}

/// True representation and the two true heads sharing it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub rep: Representation,
    pub pre_head: LinearHead,
    pub down_head: LinearHead,
}

impl GroundTruth {
    pub fn new(rep: Representation, pre_head: LinearHead, down_head: LinearHead) -> Result<Self> {
        let r = rep.output_dim();
        if pre_head.embed_dim() != r || down_head.embed_dim() != r {
            return Err(Error::contract("truth heads must consume the representation output"));
        }
        Ok(Self {
            rep,
            pre_head,
            down_head,
        })
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_frame(rows: usize, cols: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    orthonormalize(&gaussian_matrix(rows, cols, rng))
}

/// Random truth whose pre-training head has `σ₁(ααᵀ) = head_scale` and
/// `σ₁ / σ_r = condition_number`, singular values interpolated geometrically.
pub fn make_ground_truth(cfg: &TruthConfig, rng: &mut Rng) -> Result<GroundTruth> {
    cfg.validate()?;
    let (d, r) = (cfg.d, cfg.r);
    let rep = match cfg.kind {
        RepKind::Subspace => Representation::Subspace(SubspaceRep::new(random_frame(d, r, rng)?)?),
        RepKind::Mlp => {
            let w1 = gaussian_matrix(cfg.hidden, d, rng);
            let w2 = gaussian_matrix(r, cfg.hidden, rng);
            let mut layers = vec![w1, w2];
            // Put every layer on its cap so the class norms are attained.
            for (w, &cap) in layers.iter_mut().zip(&cfg.layer_caps).take(1) {
                for i in 0..w.rows() {
                    let row = w.row_mut(i);
                    let s: f64 = row.iter().map(|v| v.abs()).sum();
                    row.iter_mut().for_each(|v| *v *= cap / s);
                }
            }
            let norm = crate::model::inf_to_two_norm(&layers[1]);
            layers[1] = layers[1].scale(cfg.layer_caps[1] / norm);
            Representation::Mlp(MlpRep::new_capped(layers, cfg.layer_caps.clone())?)
        }
    };

    let u = random_frame(r, r, rng)?;
    let v = random_frame(cfg.k - 1, r, rng)?;
    let svals: Vec<f64> = (0..r)
        .map(|i| {
            let frac = if r == 1 { 0.0 } else { i as f64 / (r - 1) as f64 };
            (cfg.head_scale * cfg.condition_number.powf(-frac)).sqrt()
        })
        .collect();
    let alpha_p = u.matmul(&DenseMatrix::from_diag(&svals))?.matmul_t(&v)?;
    let pre_head = LinearHead::new(alpha_p, cfg.pre_cap, None)?;

    let mut alpha_d = gaussian_matrix(r, cfg.k_prime - 1, rng);
    let norms = alpha_d.column_norms();
    for i in 0..r {
        let row = alpha_d.row_mut(i);
        for (j, n) in norms.iter().enumerate() {
            row[j] *= cfg.down_norm / n;
        }
    }
    let down_head = LinearHead::new(alpha_d, cfg.down_cap, None)?;
    GroundTruth::new(rep, pre_head, down_head)
}

/// Header line fields of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub d: usize,
    pub classes: usize,
    pub n: usize,
    pub seed: u64,
    pub spec_hash: String,
}

const DATASET_MAGIC: &str = "# mctl-dataset";

/// Writes `ds` as CSV: a `# mctl-dataset d= K= n= seed= spec_hash=` line, a
/// column header, then `x1..xd,label` rows with labels in `1..=K`.
pub fn write_dataset(path: &Path, ds: &LabeledDataset, spec_hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "{DATASET_MAGIC} d={} K={} n={} seed={} spec_hash={}",
        ds.dim(),
        ds.classes,
        ds.len(),
        ds.seed,
        spec_hash
    )?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    csv.write_record(&header)?;
    let mut record = Vec::with_capacity(ds.dim() + 1);
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.x.row(i).iter().map(|v| format!("{v:.16e}")));
        record.push((ds.labels[i].class_index() + 1).to_string());
        csv.write_record(&record)?;
    }
    csv.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let rest = line
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| Error::Parse(format!("missing '{DATASET_MAGIC}' header")))?;
    let mut d = None;
    let mut classes = None;
    let mut n = None;
    let mut seed = None;
    let mut spec_hash = String::new();
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field '{field}'")))?;
        let num = || {
            value
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad value for '{key}': '{value}'")))
        };
        match key {
            "d" => d = Some(num()? as usize),
            "K" => classes = Some(num()? as usize),
            "n" => n = Some(num()? as usize),
            "seed" => seed = Some(num()?),
            "spec_hash" => spec_hash = value.to_string(),
            _ => return Err(Error::Parse(format!("unknown header field '{key}'"))),
        }
    }
    let missing = |k: &str| Error::Parse(format!("header is missing '{k}'"));
    Ok(DatasetHeader {
        d: d.ok_or_else(|| missing("d"))?,
        classes: classes.ok_or_else(|| missing("K"))?,
        n: n.ok_or_else(|| missing("n"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        spec_hash,
    })
}

pub fn read_dataset(path: &Path) -> Result<(LabeledDataset, DatasetHeader)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header = parse_header(first.trim_end())?;
    let mut csv = csv::Reader::from_reader(reader);
    let cols = csv.headers()?.len();
    if cols != header.d + 1 {
        return Err(Error::Parse(format!(
            "expected {} columns, found {cols}",
            header.d + 1
        )));
    }
    let mut x = Vec::with_capacity(header.n * header.d);
    let mut labels = Vec::with_capacity(header.n);
    for (row, rec) in csv.records().enumerate() {
        let rec = rec?;
        for j in 0..header.d {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad number '{}'", row + 1, &rec[j])))?;
            x.push(v);
        }
        let label: usize = rec[header.d]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: bad label '{}'", row + 1, &rec[header.d])))?;
        if label == 0 || label > header.classes {
            return Err(Error::Parse(format!(
                "row {}: label {label} outside 1..={}",
                row + 1,
                header.classes
            )));
        }
        labels.push(OneHotLabel::from_class(label - 1, header.classes)?);
    }
    if labels.len() != header.n {
        return Err(Error::Parse(format!(
            "header promises {} rows, found {}",
            header.n,
            labels.len()
        )));
    }
    let x = DenseMatrix::from_vec(labels.len(), header.d, x)?;
    let ds = LabeledDataset::new(x, labels, header.classes, header.seed)?;
    Ok((ds, header))
}
