//! Config-driven sweeps over problem sizes, diversity and regularization,
//! with per-trial records, power-law fits and figure-ready report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    make_ground_truth, sample_covariates, sample_labels, CovariateSpec, GroundTruth, LabeledDataset,
    TruthConfig,
};
use crate::diagnostics::{
    evaluate_risk_bound, excess_risk_on, nu_tilde, rep_difference, schur_complement_bound,
    BoundParams, ConstantsProfile,
};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::DenseMatrix;
use crate::model::{principal_angles, Representation, SubspaceRep};
use crate::rng::{derive_seed, stream, Purpose};
use crate::train::{fit_downstream_head, pretrain, train_baseline, HypothesisConfig, OptimConfig};

/// Values swept; the sweep is their cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub k: Vec<usize>,
    pub k_prime: Vec<usize>,
    pub r: Vec<usize>,
    pub d: Vec<usize>,
    pub condition_number: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n: vec![500, 1000, 2000, 4000, 8000],
            m: vec![200],
            k: vec![30],
            k_prime: vec![2],
            r: vec![3],
            d: vec![20],
            condition_number: vec![1.0],
            lambda: vec![0.0],
        }
    }
}

/// Covariate law shared by both stages: diagonal `Σ` with geometrically
/// spaced eigenvalues from 1 down to `1/condition`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateConfig {
    pub condition: f64,
    /// Norm cap `D`; defaults to `3√tr Σ`.
    pub norm_cap: Option<f64>,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            condition: 1.0,
            norm_cap: None,
        }
    }
}

impl CovariateConfig {
    pub fn spec(&self, d: usize) -> Result<CovariateSpec> {
        let spec = CovariateSpec::diagonal_geometric(d, self.condition)?;
        match self.norm_cap {
            Some(c) => spec.with_norm_cap(c),
            None => Ok(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Fresh covariates for excess-risk estimates.
    pub n_mc: usize,
    /// Covariates for the pre-training representation difference; 0 skips it.
    pub rep_difference_mc: usize,
    /// Covariates for the Schur-complement bound; 0 skips it.
    pub schur_mc: usize,
    /// Fit the full-dimensional baseline on the downstream data.
    pub baseline: bool,
    /// Failure probability used in the bound evaluator.
    pub delta: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            n_mc: 20_000,
            rep_difference_mc: 0,
            schur_mc: 0,
            baseline: true,
            delta: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: u64,
    pub trials: usize,
    pub grid: Grid,
    /// Truth scales and caps; its shape fields are overridden by the grid.
    pub truth: TruthConfig,
    pub covariates: CovariateConfig,
    /// Fitted hypothesis class; `r` is overridden by the grid.
    pub hypothesis: HypothesisConfig,
    pub optim: OptimConfig,
    pub diagnostics: DiagnosticsConfig,
    pub profile: ConstantsProfile,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            trials: 10,
            grid: Grid::default(),
            truth: TruthConfig::default(),
            covariates: CovariateConfig::default(),
            hypothesis: HypothesisConfig::default(),
            optim: OptimConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            profile: ConstantsProfile::default(),
            threads: 0,
        }
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        let g = &self.grid;
        let lists: [(&str, &[usize]); 6] = [
            ("n", &g.n),
            ("m", &g.m),
            ("k", &g.k),
            ("k_prime", &g.k_prime),
            ("r", &g.r),
            ("d", &g.d),
        ];
        for (name, values) in lists {
            if values.is_empty() || values.contains(&0) {
                return Err(Error::Config(format!("grid.{name} must be a nonempty list of positive integers")));
            }
        }
        if g.condition_number.is_empty() || g.condition_number.iter().any(|&c| !(c >= 1.0)) {
            return Err(Error::Config("grid.condition_number values must be >= 1".into()));
        }
        if g.lambda.is_empty() || g.lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("grid.lambda values must be >= 0".into()));
        }
        if self.diagnostics.n_mc == 0 {
            return Err(Error::Config("diagnostics.n_mc must be positive".into()));
        }
        if !(self.diagnostics.delta > 0.0 && self.diagnostics.delta < 1.0) {
            return Err(Error::Config("diagnostics.delta must lie in (0, 1)".into()));
        }
        if !(self.covariates.condition >= 1.0) {
            return Err(Error::Config("covariates.condition must be >= 1".into()));
        }
        self.optim.validate()
    }

    /// Pre-training jobs: every grid point except `m` and `k'`, times trials.
    fn jobs(&self) -> Vec<Job> {
        let g = &self.grid;
        let mut jobs = Vec::new();
        for &k in &g.k {
            for &r in &g.r {
                for &d in &g.d {
                    for &cond in &g.condition_number {
                        for &lambda in &g.lambda {
                            for &n in &g.n {
                                for trial in 0..self.trials {
                                    jobs.push(Job { n, k, r, d, cond, lambda, trial });
                                }
                            }
                        }
                    }
                }
            }
        }
        jobs
    }
}

#[derive(Clone, Copy, Debug)]
struct Job {
    n: usize,
    k: usize,
    r: usize,
    d: usize,
    cond: f64,
    lambda: f64,
    trial: usize,
}

/// Grid point of one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub k_prime: usize,
    pub r: usize,
    pub d: usize,
    pub condition_number: f64,
    pub lambda: f64,
}

impl Cell {
    fn sort_key(&self) -> (usize, usize, usize, usize, u64, u64, usize, usize) {
        (
            self.k,
            self.k_prime,
            self.r,
            self.d,
            self.condition_number.to_bits(),
            // Both are nonnegative, so bit patterns order like the values.
            self.lambda.to_bits(),
            self.n,
            self.m,
        )
    }
}

/// One `(cell, trial)` outcome. Failed rows carry `error` and NaN metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub cell: Cell,
    pub trial: usize,
    /// Seed of the trial's random streams.
    pub seed: u64,
    pub error: Option<String>,
    pub excess_transfer_risk: f64,
    pub transfer_se: f64,
    pub excess_pretrain_risk: f64,
    pub pretrain_se: f64,
    pub nu_tilde_hat: f64,
    pub nu_tilde_true: f64,
    /// Ascending; empty for network representations.
    pub principal_angles: Vec<f64>,
    pub baseline_risk: Option<f64>,
    pub baseline_se: Option<f64>,
    pub bound: f64,
    pub pretrain_iters: usize,
    pub pretrain_converged: bool,
    pub pretrain_stalled: bool,
    pub downstream_stalled: bool,
    pub rep_difference: Option<f64>,
    pub rep_difference_se: Option<f64>,
    pub schur_bound: Option<f64>,
    pub n_mc: usize,
    /// Seconds; kept out of `records.csv` so that file is reproducible.
    pub wall_time: f64,
}

impl ExperimentRecord {
    fn failed(cell: Cell, trial: usize, seed: u64, reason: String, wall_time: f64) -> Self {
        Self {
            cell,
            trial,
            seed,
            error: Some(reason),
            excess_transfer_risk: f64::NAN,
            transfer_se: f64::NAN,
            excess_pretrain_risk: f64::NAN,
            pretrain_se: f64::NAN,
            nu_tilde_hat: f64::NAN,
            nu_tilde_true: f64::NAN,
            principal_angles: Vec::new(),
            baseline_risk: None,
            baseline_se: None,
            bound: f64::NAN,
            pretrain_iters: 0,
            pretrain_converged: false,
            pretrain_stalled: false,
            downstream_stalled: false,
            rep_difference: None,
            rep_difference_se: None,
            schur_bound: None,
            n_mc: 0,
            wall_time,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn max_angle(&self) -> Option<f64> {
        self.principal_angles.last().copied()
    }
}

fn truth_config(cfg: &SweepConfig, job: &Job, k_prime: usize) -> TruthConfig {
    TruthConfig {
        d: job.d,
        r: job.r,
        k: job.k,
        k_prime,
        condition_number: job.cond,
        ..cfg.truth.clone()
    }
}

struct Pretrained {
    rep: Representation,
    pre_head: crate::model::LinearHead,
    iters: usize,
    converged: bool,
    stalled: bool,
}

fn run_job(cfg: &SweepConfig, job: &Job) -> Vec<ExperimentRecord> {
    let start = Instant::now();
    let trial_seed = derive_seed(cfg.seed, &[job.trial as u64]);
    let cells: Vec<Cell> = cfg
        .grid
        .k_prime
        .iter()
        .flat_map(|&k_prime| {
            cfg.grid.m.iter().map(move |&m| Cell {
                n: job.n,
                m,
                k: job.k,
                k_prime,
                r: job.r,
                d: job.d,
                condition_number: job.cond,
                lambda: job.lambda,
            })
        })
        .collect();

    let shared = (|| -> Result<(Pretrained, CovariateSpec, DenseMatrix)> {
        let spec = cfg.covariates.spec(job.d)?;
        let path = [job.trial as u64, job.d as u64, job.r as u64, job.k as u64];
        let tcfg = truth_config(cfg, job, cfg.grid.k_prime[0]);
        let truth = make_ground_truth(&tcfg, &mut stream(cfg.seed, &path, Purpose::Truth))?;
        let x = sample_covariates(
            &spec,
            job.n,
            &mut stream(cfg.seed, &[job.trial as u64, job.d as u64], Purpose::PretrainCovariates),
        )?;
        let labels = sample_labels(
            &truth.rep,
            &truth.pre_head,
            &x,
            &mut stream(cfg.seed, &path, Purpose::PretrainLabels),
        )?;
        let data = LabeledDataset::new(x, labels, job.k, trial_seed)?;
        let hyp = HypothesisConfig {
            r: job.r,
            ..cfg.hypothesis.clone()
        };
        let out = pretrain(&data, &hyp, job.lambda, &cfg.optim, &mut stream(cfg.seed, &path, Purpose::Init))?;
        let x_eval = sample_covariates(
            &spec,
            cfg.diagnostics.n_mc,
            &mut stream(cfg.seed, &[job.trial as u64, job.d as u64], Purpose::Evaluation),
        )?;
        Ok((
            Pretrained {
                rep: out.rep,
                pre_head: out.head,
                iters: out.trace.iterations(),
                converged: out.trace.converged,
                stalled: out.trace.stalled(),
            },
            spec,
            x_eval,
        ))
    })();

    let (pre, spec, x_eval) = match shared {
        Ok(v) => v,
        Err(e) => {
            let wall = start.elapsed().as_secs_f64().max(1e-9);
            return cells
                .into_iter()
                .map(|c| ExperimentRecord::failed(c, job.trial, trial_seed, e.to_string(), wall))
                .collect();
        }
    };

    let mut records = Vec::with_capacity(cells.len());
    for &k_prime in &cfg.grid.k_prime {
        let downstream = downstream_data(cfg, job, k_prime, &spec);
        for &m in &cfg.grid.m {
            let cell = Cell {
                n: job.n,
                m,
                k: job.k,
                k_prime,
                r: job.r,
                d: job.d,
                condition_number: job.cond,
                lambda: job.lambda,
            };
            let t0 = Instant::now();
            let result = downstream.as_ref().map_err(|e| Error::Config(e.to_string())).and_then(|(truth, full)| {
                evaluate_cell(cfg, job, cell, &pre, truth, full, &spec, &x_eval, trial_seed)
            });
            // Pre-training time is charged to every record of the job.
            let wall = (t0.elapsed() + start.elapsed()).as_secs_f64().max(1e-9);
            records.push(match result {
                Ok(mut r) => {
                    r.wall_time = wall;
                    r
                }
                Err(e) => ExperimentRecord::failed(cell, job.trial, trial_seed, e.to_string(), wall),
            });
        }
    }
    records
}

fn downstream_data(
    cfg: &SweepConfig,
    job: &Job,
    k_prime: usize,
    spec: &CovariateSpec,
) -> Result<(GroundTruth, LabeledDataset)> {
    let path = [job.trial as u64, job.d as u64, job.r as u64, job.k as u64];
    let truth = make_ground_truth(&truth_config(cfg, job, k_prime), &mut stream(cfg.seed, &path, Purpose::Truth))?;
    let m_max = *cfg.grid.m.iter().max().expect("validated");
    let x = sample_covariates(
        spec,
        m_max,
        &mut stream(cfg.seed, &[job.trial as u64, job.d as u64], Purpose::DownstreamCovariates),
    )?;
    let label_path = [job.trial as u64, job.d as u64, job.r as u64, job.k as u64, k_prime as u64];
    let labels = sample_labels(
        &truth.rep,
        &truth.down_head,
        &x,
        &mut stream(cfg.seed, &label_path, Purpose::DownstreamLabels),
    )?;
    let seed = derive_seed(cfg.seed, &[job.trial as u64]);
    Ok((truth, LabeledDataset::new(x, labels, k_prime, seed)?))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    cfg: &SweepConfig,
    job: &Job,
    cell: Cell,
    pre: &Pretrained,
    truth: &GroundTruth,
    full: &LabeledDataset,
    spec: &CovariateSpec,
    x_eval: &DenseMatrix,
    trial_seed: u64,
) -> Result<ExperimentRecord> {
    let data = full.prefix(cell.m)?;
    let down_cap = cfg.truth.down_cap;
    let (head, trace) = fit_downstream_head(&pre.rep, &data, down_cap, &cfg.optim)?;
    let (transfer, transfer_se) = excess_risk_on(x_eval, &truth.rep, &truth.down_head, &pre.rep, &head)?;
    let (pre_risk, pre_se) = excess_risk_on(x_eval, &truth.rep, &truth.pre_head, &pre.rep, &pre.pre_head)?;

    let (baseline_risk, baseline_se) = if cfg.diagnostics.baseline {
        let (bhead, _) = train_baseline(&data, down_cap, &cfg.optim)?;
        let identity = Representation::Subspace(SubspaceRep::new(DenseMatrix::identity(cell.d))?);
        let (b, se) = excess_risk_on(x_eval, &truth.rep, &truth.down_head, &identity, &bhead)?;
        (Some(b), Some(se))
    } else {
        (None, None)
    };

    let principal = match (pre.rep.as_subspace(), truth.rep.as_subspace()) {
        (Some(a), Some(b)) => principal_angles(a, b)?,
        _ => Vec::new(),
    };
    let nu_true = nu_tilde(truth.pre_head.alpha())?;
    let params = BoundParams {
        n: cell.n,
        m: cell.m,
        k: cell.k,
        k_prime: cell.k_prime,
        r: cell.r,
        d: cell.d,
        nu_tilde: nu_true,
        norm_cap: spec.norm_cap(),
        delta: cfg.diagnostics.delta,
        layer_caps: cfg.truth.layer_caps.clone(),
    };
    let bound = evaluate_risk_bound(cfg.hypothesis.kind, &params, &cfg.profile)?.total;

    let path = [job.trial as u64, job.d as u64, job.r as u64, job.k as u64];
    let (rep_diff, rep_diff_se) = if cfg.diagnostics.rep_difference_mc > 0 {
        let rd = rep_difference(
            &pre.rep,
            &truth.rep,
            &truth.pre_head,
            spec,
            cfg.diagnostics.rep_difference_mc,
            cfg.hypothesis.head_cap,
            &cfg.optim,
            &mut stream(cfg.seed, &path, Purpose::Complexity),
        )?;
        (Some(rd.value), Some(rd.std_error))
    } else {
        (None, None)
    };
    let schur = if cfg.diagnostics.schur_mc > 0 {
        Some(
            schur_complement_bound(
                &pre.rep,
                &truth.rep,
                spec,
                cfg.diagnostics.schur_mc,
                down_cap,
                cell.k_prime,
                &mut stream(cfg.seed, &path, Purpose::Complexity),
            )?
            .bound,
        )
    } else {
        None
    };

    Ok(ExperimentRecord {
        cell,
        trial: job.trial,
        seed: trial_seed,
        error: None,
        excess_transfer_risk: transfer,
        transfer_se,
        excess_pretrain_risk: pre_risk,
        pretrain_se: pre_se,
        nu_tilde_hat: nu_tilde(pre.pre_head.alpha())?,
        nu_tilde_true: nu_true,
        principal_angles: principal,
        baseline_risk,
        baseline_se,
        bound,
        pretrain_iters: pre.iters,
        pretrain_converged: pre.converged,
        pretrain_stalled: pre.stalled,
        downstream_stalled: trace.stalled(),
        rep_difference: rep_diff,
        rep_difference_se: rep_diff_se,
        schur_bound: schur,
        n_mc: x_eval.rows(),
        wall_time: 0.0,
    })
}

/// Runs every `(cell, trial)` of the sweep. Records come back sorted by cell
/// and trial regardless of scheduling; failures become failed rows.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let jobs = cfg.jobs();
    let run = || -> Vec<Vec<ExperimentRecord>> { jobs.par_iter().map(|j| run_job(cfg, j)).collect() };
    let nested = if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    };
    let mut records: Vec<ExperimentRecord> = nested.into_iter().flatten().collect();
    records.sort_by(|a, b| {
        a.cell
            .sort_key()
            .cmp(&b.cell.sort_key())
            .then(a.trial.cmp(&b.trial))
    });
    Ok(records)
}

/// Column schema of `records.csv`.
pub const RECORD_COLUMNS: [&str; 30] = [
    "n",
    "m",
    "k",
    "k_prime",
    "r",
    "d",
    "condition_number",
    "lambda",
    "trial",
    "seed",
    "status",
    "error",
    "excess_transfer_risk",
    "transfer_se",
    "excess_pretrain_risk",
    "pretrain_se",
    "nu_tilde_hat",
    "nu_tilde_true",
    "max_principal_angle",
    "principal_angles",
    "baseline_risk",
    "baseline_se",
    "bound",
    "pretrain_iters",
    "pretrain_converged",
    "pretrain_stalled",
    "downstream_stalled",
    "rep_difference",
    "rep_difference_se",
    "schur_bound",
];

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        fmt_f64(v)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

fn record_row(r: &ExperimentRecord) -> Vec<String> {
    let c = &r.cell;
    vec![
        c.n.to_string(),
        c.m.to_string(),
        c.k.to_string(),
        c.k_prime.to_string(),
        c.r.to_string(),
        c.d.to_string(),
        fmt_f64(c.condition_number),
        fmt_f64(c.lambda),
        r.trial.to_string(),
        r.seed.to_string(),
        if r.is_ok() { "ok" } else { "failed" }.to_string(),
        r.error.clone().unwrap_or_default(),
        num(r.excess_transfer_risk),
        num(r.transfer_se),
        num(r.excess_pretrain_risk),
        num(r.pretrain_se),
        num(r.nu_tilde_hat),
        num(r.nu_tilde_true),
        opt(r.max_angle()),
        r.principal_angles.iter().map(|&a| fmt_f64(a)).collect::<Vec<_>>().join(";"),
        opt(r.baseline_risk),
        opt(r.baseline_se),
        num(r.bound),
        r.pretrain_iters.to_string(),
        r.pretrain_converged.to_string(),
        r.pretrain_stalled.to_string(),
        r.downstream_stalled.to_string(),
        opt(r.rep_difference),
        opt(r.rep_difference_se),
        opt(r.schur_bound),
    ]
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// `trial,n,m,k,k_prime,r,d,condition_number,lambda,wall_time_s`.
pub fn write_timing(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "m", "k", "k_prime", "r", "d", "condition_number", "lambda", "trial", "wall_time_s"])?;
    for r in records {
        let c = &r.cell;
        w.write_record([
            c.n.to_string(),
            c.m.to_string(),
            c.k.to_string(),
            c.k_prime.to_string(),
            c.r.to_string(),
            c.d.to_string(),
            fmt_f64(c.condition_number),
            fmt_f64(c.lambda),
            r.trial.to_string(),
            format!("{:.6}", r.wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<T> {
    rec.get(idx)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("records row {row}: bad '{}'", RECORD_COLUMNS[idx])))
}

fn parse_opt(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<Option<f64>> {
    match rec.get(idx).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => parse_field(rec, idx, row).map(Some),
    }
}

fn parse_num(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<f64> {
    Ok(parse_opt(rec, idx, row)?.unwrap_or(f64::NAN))
}

/// Reads `records.csv`. Wall times are not part of that file and come back NaN.
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(Error::Parse("records.csv header does not match the record schema".into()));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let cell = Cell {
            n: parse_field(&rec, 0, row)?,
            m: parse_field(&rec, 1, row)?,
            k: parse_field(&rec, 2, row)?,
            k_prime: parse_field(&rec, 3, row)?,
            r: parse_field(&rec, 4, row)?,
            d: parse_field(&rec, 5, row)?,
            condition_number: parse_field(&rec, 6, row)?,
            lambda: parse_field(&rec, 7, row)?,
        };
        let error = match &rec[10] {
            "ok" => None,
            _ => Some(rec[11].to_string()),
        };
        let angles = rec[19]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| Error::Parse(format!("records row {row}: bad angle '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(ExperimentRecord {
            cell,
            trial: parse_field(&rec, 8, row)?,
            seed: parse_field(&rec, 9, row)?,
            error,
            excess_transfer_risk: parse_num(&rec, 12, row)?,
            transfer_se: parse_num(&rec, 13, row)?,
            excess_pretrain_risk: parse_num(&rec, 14, row)?,
            pretrain_se: parse_num(&rec, 15, row)?,
            nu_tilde_hat: parse_num(&rec, 16, row)?,
            nu_tilde_true: parse_num(&rec, 17, row)?,
            principal_angles: angles,
            baseline_risk: parse_opt(&rec, 20, row)?,
            baseline_se: parse_opt(&rec, 21, row)?,
            bound: parse_num(&rec, 22, row)?,
            pretrain_iters: parse_field(&rec, 23, row)?,
            pretrain_converged: parse_field(&rec, 24, row)?,
            pretrain_stalled: parse_field(&rec, 25, row)?,
            downstream_stalled: parse_field(&rec, 26, row)?,
            rep_difference: parse_opt(&rec, 27, row)?,
            rep_difference_se: parse_opt(&rec, 28, row)?,
            schur_bound: parse_opt(&rec, 29, row)?,
            n_mc: 0,
            wall_time: f64::NAN,
        });
    }
    Ok(out)
}

/// Runs the sweep and writes `records.csv` and `config.json` into `out_dir`.
/// Wall times are left to [`write_timing`] so these two files stay reproducible.
pub fn run_sweep_to_dir(cfg: &SweepConfig, out_dir: &Path) -> Result<Vec<ExperimentRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let records = run_sweep(cfg)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json() + "\n")?;
    write_records(&out_dir.join("records.csv"), &records)?;
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLaw {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `ln y` on `ln x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLaw> {
    if points.len() < 3 {
        return Err(Error::contract("power-law fit needs at least 3 points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(Error::contract("power-law fit needs positive x and y"));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("power-law fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(PowerLaw {
        slope,
        intercept,
        r_squared,
    })
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of the finite values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Median and interquartile range of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub trials: usize,
    pub failed: usize,
    pub risk_median: f64,
    pub risk_q25: f64,
    pub risk_q75: f64,
    pub pretrain_risk_median: f64,
    pub baseline_median: f64,
    pub nu_tilde_hat_median: f64,
    pub nu_tilde_true_median: f64,
    pub max_angle_median: f64,
    pub bound_median: f64,
    pub schur_bound_median: f64,
    pub rep_difference_median: f64,
    pub stalls: usize,
}

fn cell_key(c: &Cell) -> (usize, usize, usize, usize, usize, usize, u64, u64) {
    (c.k, c.k_prime, c.r, c.d, c.n, c.m, c.condition_number.to_bits(), c.lambda.to_bits())
}

pub fn summarize_cells(records: &[ExperimentRecord]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<_, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(cell_key(&r.cell)).or_default().push(r);
    }
    let mut out: Vec<CellSummary> = groups
        .into_values()
        .map(|rs| {
            let ok: Vec<&&ExperimentRecord> = rs.iter().filter(|r| r.is_ok()).collect();
            let col = |f: &dyn Fn(&ExperimentRecord) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|r| f(r)).collect()
            };
            let risk = col(&|r| Some(r.excess_transfer_risk));
            CellSummary {
                cell: rs[0].cell,
                trials: rs.len(),
                failed: rs.len() - ok.len(),
                risk_median: median(&risk),
                risk_q25: quantile(&risk, 0.25),
                risk_q75: quantile(&risk, 0.75),
                pretrain_risk_median: median(&col(&|r| Some(r.excess_pretrain_risk))),
                baseline_median: median(&col(&|r| r.baseline_risk)),
                nu_tilde_hat_median: median(&col(&|r| Some(r.nu_tilde_hat))),
                nu_tilde_true_median: median(&col(&|r| Some(r.nu_tilde_true))),
                max_angle_median: median(&col(&|r| r.max_angle())),
                bound_median: median(&col(&|r| Some(r.bound))),
                schur_bound_median: median(&col(&|r| r.schur_bound)),
                rep_difference_median: median(&col(&|r| r.rep_difference)),
                stalls: ok.iter().filter(|r| r.pretrain_stalled || r.downstream_stalled).count(),
            }
        })
        .collect();
    out.sort_by_key(|c| c.cell.sort_key());
    out
}

/// Which cell parameter a figure puts on its x axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    M,
    ConditionNumber,
    Lambda,
}

impl Axis {
    fn value(self, c: &Cell) -> f64 {
        match self {
            Axis::N => c.n as f64,
            Axis::M => c.m as f64,
            Axis::ConditionNumber => c.condition_number,
            Axis::Lambda => c.lambda,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::N => "n",
            Axis::M => "m",
            Axis::ConditionNumber => "condition_number",
            Axis::Lambda => "lambda",
        }
    }

    /// Every cell parameter except this axis, as an orderable key.
    fn rest_key(self, c: &Cell) -> Vec<u64> {
        let all = [
            (Axis::N, c.n as u64),
            (Axis::M, c.m as u64),
            (Axis::ConditionNumber, c.condition_number.to_bits()),
            (Axis::Lambda, c.lambda.to_bits()),
        ];
        let mut key = vec![c.k as u64, c.k_prime as u64, c.r as u64, c.d as u64];
        key.extend(all.iter().filter(|(a, _)| *a != self).map(|(_, v)| *v));
        key
    }
}

/// A series along one axis with every other parameter fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub axis: Axis,
    pub fixed: Cell,
    pub points: Vec<CellSummary>,
}

impl Series {
    pub fn xy(&self, y: impl Fn(&CellSummary) -> f64) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (self.axis.value(&p.cell), y(p))).collect()
    }

    pub fn power_law(&self) -> Option<PowerLaw> {
        fit_power_law(&self.xy(|p| p.risk_median)).ok()
    }
}

/// Groups cell summaries into series along `axis`, each sorted ascending.
pub fn series_along(summaries: &[CellSummary], axis: Axis) -> Vec<Series> {
    let mut groups: BTreeMap<Vec<u64>, Vec<CellSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(axis.rest_key(&s.cell)).or_default().push(s.clone());
    }
    groups
        .into_values()
        .map(|mut pts| {
            pts.sort_by(|a, b| axis.value(&a.cell).total_cmp(&axis.value(&b.cell)));
            Series {
                axis,
                fixed: pts[0].cell,
                points: pts,
            }
        })
        .collect()
}

const SLOPE_RANGE: (f64, f64) = (-0.75, -0.25);
const MIN_R_SQUARED: f64 = 0.8;

fn figure_csv(series: &[Series], columns: &[&str], row: impl Fn(&Series, &CellSummary) -> Vec<String>) -> String {
    let mut out = columns.join(",");
    out.push('\n');
    for s in series {
        for p in &s.points {
            out.push_str(&row(s, p).join(","));
            out.push('\n');
        }
    }
    out
}

fn cell_columns(c: &Cell) -> Vec<String> {
    vec![
        c.n.to_string(),
        c.m.to_string(),
        c.k.to_string(),
        c.k_prime.to_string(),
        c.r.to_string(),
        c.d.to_string(),
        fmt_f64(c.condition_number),
        fmt_f64(c.lambda),
    ]
}

const CELL_COLUMNS: [&str; 8] = ["n", "m", "k", "k_prime", "r", "d", "condition_number", "lambda"];

fn with_cells(extra: &[&'static str]) -> Vec<&'static str> {
    CELL_COLUMNS.iter().copied().chain(extra.iter().copied()).collect()
}

/// Report text and the figure tables, keyed by file name.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub summary: String,
    pub figures: Vec<(String, String)>,
}

/// Aggregates records into per-figure CSV tables and a summary with fitted
/// slopes and verdicts against the acceptance thresholds.
pub fn build_report(records: &[ExperimentRecord], profile: &ConstantsProfile) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cells = summarize_cells(records);
    let mut figures = Vec::new();
    let mut summary = String::new();
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    let _ = writeln!(summary, "records: {} ({} failed)", records.len(), failed);
    let _ = writeln!(summary, "cells: {}", cells.len());
    let _ = writeln!(summary, "constants profile: subspace={:?} mlp={:?}", profile.subspace, profile.mlp);
    let _ = writeln!(
        summary,
        "note: the worst-case downstream representation difference is reported through its Schur-complement upper bound, not estimated directly"
    );

    let risk_cols = with_cells(&["trials", "failed", "median_excess_risk", "q25", "q75", "median_baseline_risk"]);
    for (axis, file, label) in [
        (Axis::N, "risk_vs_n.csv", "slope_n"),
        (Axis::M, "risk_vs_m.csv", "slope_m"),
    ] {
        let series = series_along(&cells, axis);
        figures.push((
            file.to_string(),
            figure_csv(&series, &risk_cols, |_, p| {
                let mut row = cell_columns(&p.cell);
                row.extend([
                    p.trials.to_string(),
                    p.failed.to_string(),
                    num(p.risk_median),
                    num(p.risk_q25),
                    num(p.risk_q75),
                    num(p.baseline_median),
                ]);
                row
            }),
        ));
        for s in series.iter().filter(|s| s.points.len() >= 3) {
            match s.power_law() {
                Some(fit) => {
                    let pass = fit.slope >= SLOPE_RANGE.0 && fit.slope <= SLOPE_RANGE.1 && fit.r_squared >= MIN_R_SQUARED;
                    let _ = writeln!(
                        summary,
                        "{label} [{}]: slope={} r2={} verdict={}",
                        fixed_desc(&s.fixed, axis),
                        fit.slope,
                        fit.r_squared,
                        if pass { "PASS" } else { "FAIL" }
                    );
                }
                None => {
                    let _ = writeln!(summary, "{label} [{}]: not fittable", fixed_desc(&s.fixed, axis));
                }
            }
        }
        if axis == Axis::N {
            for s in series.iter().filter(|s| s.points.len() >= 2) {
                let angles: Vec<f64> = s.points.iter().map(|p| p.max_angle_median).collect();
                if angles.iter().all(|a| a.is_finite()) {
                    let dec = angles.windows(2).all(|w| w[1] < w[0]);
                    let _ = writeln!(
                        summary,
                        "angle_monotone [{}]: {}",
                        fixed_desc(&s.fixed, axis),
                        if dec { "PASS" } else { "FAIL" }
                    );
                }
            }
        }
    }

    let nu_series = series_along(&cells, Axis::ConditionNumber);
    figures.push((
        "risk_vs_nu.csv".to_string(),
        figure_csv(
            &nu_series,
            &with_cells(&["median_nu_tilde_true", "median_excess_risk", "q25", "q75"]),
            |_, p| {
                let mut row = cell_columns(&p.cell);
                row.extend([num(p.nu_tilde_true_median), num(p.risk_median), num(p.risk_q25), num(p.risk_q75)]);
                row
            },
        ),
    ));
    for s in nu_series.iter().filter(|s| s.points.len() >= 2) {
        let risks: Vec<f64> = s.points.iter().map(|p| p.risk_median).collect();
        let ok = risks.windows(2).all(|w| w[1] >= w[0]);
        let _ = writeln!(
            summary,
            "diversity_monotone [{}]: {}",
            fixed_desc(&s.fixed, Axis::ConditionNumber),
            if ok { "PASS" } else { "FAIL" }
        );
    }

    let lambda_series = series_along(&cells, Axis::Lambda);
    figures.push((
        "regularizer.csv".to_string(),
        figure_csv(
            &lambda_series,
            &with_cells(&["median_nu_tilde_hat", "median_excess_risk", "median_pretrain_risk", "stalls"]),
            |_, p| {
                let mut row = cell_columns(&p.cell);
                row.extend([
                    num(p.nu_tilde_hat_median),
                    num(p.risk_median),
                    num(p.pretrain_risk_median),
                    p.stalls.to_string(),
                ]);
                row
            },
        ),
    ));
    for s in lambda_series.iter().filter(|s| s.points.len() >= 2) {
        let nus: Vec<f64> = s.points.iter().map(|p| p.nu_tilde_hat_median).collect();
        let raised = nus.windows(2).all(|w| w[1] > w[0]);
        let stalls: usize = s.points.iter().map(|p| p.stalls).sum();
        let _ = writeln!(
            summary,
            "regularizer [{}]: nu_tilde_hat medians {:?}, stalls={stalls}, verdict={}",
            fixed_desc(&s.fixed, Axis::Lambda),
            nus.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            if raised && stalls == 0 { "PASS" } else { "FAIL" }
        );
    }

    let all = vec![Series {
        axis: Axis::N,
        fixed: cells[0].cell,
        points: cells.clone(),
    }];
    figures.push((
        "bound_vs_measured.csv".to_string(),
        figure_csv(
            &all,
            &with_cells(&["median_bound", "median_excess_risk", "ratio", "median_schur_bound", "median_rep_difference"]),
            |_, p| {
                let mut row = cell_columns(&p.cell);
                row.extend([
                    num(p.bound_median),
                    num(p.risk_median),
                    num(p.bound_median / p.risk_median),
                    num(p.schur_bound_median),
                    num(p.rep_difference_median),
                ]);
                row
            },
        ),
    ));
    Ok(Report { summary, figures })
}

fn fixed_desc(c: &Cell, axis: Axis) -> String {
    let mut parts = vec![
        format!("k={}", c.k),
        format!("k'={}", c.k_prime),
        format!("r={}", c.r),
        format!("d={}", c.d),
    ];
    if axis != Axis::N {
        parts.push(format!("n={}", c.n));
    }
    if axis != Axis::M {
        parts.push(format!("m={}", c.m));
    }
    if axis != Axis::ConditionNumber {
        parts.push(format!("cond={}", c.condition_number));
    }
    if axis != Axis::Lambda {
        parts.push(format!("lambda={}", c.lambda));
    }
    parts.join(" ")
}

/// Writes `summary.txt` and the figure CSVs into `out_dir`.
pub fn write_report(records: &[ExperimentRecord], profile: &ConstantsProfile, out_dir: &Path) -> Result<Report> {
    let report = build_report(records, profile)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("summary.txt"), &report.summary)?;
    for (name, body) in &report.figures {
        std::fs::write(out_dir.join(name), body)?;
    }
    Ok(report)
}
