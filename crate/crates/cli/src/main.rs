#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mctl_core::data::{make_ground_truth, read_dataset, sample_covariates, sample_labels, write_dataset};
use mctl_core::diagnostics::{excess_risk_on, nu_tilde, pretrain_rep_difference, schur_complement_bound};
use mctl_core::harness::{read_records, run_sweep_to_dir, write_report, write_timing, CovariateConfig};
use mctl_core::model::principal_angles;
use mctl_core::rng::{stream, Purpose};
use mctl_core::train::{fit_downstream_head, pretrain};
use mctl_core::verify::{run_all, SuiteSizes};
use mctl_core::{
    Error, HypothesisConfig, LabeledDataset, ModelBundle, OptimConfig, SweepConfig, TruthConfig,
};

#[derive(Parser)]
#[command(name = "mctl", version, about = "Two-stage multiclass transfer learning on synthetic softmax data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a ground truth plus pre-training and downstream datasets.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory: pretrain.csv, downstream.csv, truth.model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit representation and head jointly on a pre-training dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
        /// JSON with `seed`, `hypothesis` and `optim` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the representation rank of the config.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit a downstream head on the frozen representation of a model.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Column norm cap of the downstream head.
        #[arg(long, default_value_t = 3.0)]
        cap: f64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Excess risks, diversity and subspace diagnostics against a truth model.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        n_mc: usize,
        /// Covariates for the pre-training representation difference; 0 skips it.
        #[arg(long, default_value_t = 0)]
        rep_mc: usize,
        /// Covariates for the Schur-complement bound; 0 skips it.
        #[arg(long, default_value_t = 0)]
        schur_mc: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the randomized property suites.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Ten times fewer cases per suite.
        #[arg(long)]
        quick: bool,
    },
    /// Run a full experiment sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-record wall times to timing.csv.
        #[arg(long)]
        timing: bool,
    },
    /// Aggregate sweep records into figure tables and a summary.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a config document with every default filled in.
    PrintDefaultConfig {
        #[arg(long, value_enum, default_value_t = ConfigKind::Sweep)]
        kind: ConfigKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Sweep,
    Gen,
    Pretrain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    seed: u64,
    /// Pre-training sample size.
    n: usize,
    /// Downstream sample size.
    m: usize,
    truth: TruthConfig,
    covariates: CovariateConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n: 2000,
            m: 200,
            truth: TruthConfig::default(),
            covariates: CovariateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainConfig {
    seed: u64,
    hypothesis: HypothesisConfig,
    optim: OptimConfig,
}

enum Failure {
    Usage(String),
    Property,
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn at(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg: GenConfig = load_json(config)?;
    cfg.truth.validate()?;
    if cfg.n == 0 || cfg.m == 0 {
        return Err(Failure::Usage("n and m must be positive".into()));
    }
    let t = &cfg.truth;
    let spec = cfg.covariates.spec(t.d)?;
    let path = [0, t.d as u64, t.r as u64, t.k as u64];
    let truth = make_ground_truth(t, &mut stream(cfg.seed, &path, Purpose::Truth))?;

    let x = sample_covariates(&spec, cfg.n, &mut stream(cfg.seed, &path[..2], Purpose::PretrainCovariates))?;
    let y = sample_labels(&truth.rep, &truth.pre_head, &x, &mut stream(cfg.seed, &path, Purpose::PretrainLabels))?;
    let pre = LabeledDataset::new(x, y, t.k, cfg.seed)?;

    let x = sample_covariates(&spec, cfg.m, &mut stream(cfg.seed, &path[..2], Purpose::DownstreamCovariates))?;
    let y = sample_labels(&truth.rep, &truth.down_head, &x, &mut stream(cfg.seed, &path, Purpose::DownstreamLabels))?;
    let down = LabeledDataset::new(x, y, t.k_prime, cfg.seed)?;

    std::fs::create_dir_all(out)?;
    write_dataset(&out.join("pretrain.csv"), &pre, &spec.hash())?;
    write_dataset(&out.join("downstream.csv"), &down, &spec.hash())?;
    ModelBundle::from_truth(&truth, &spec).write(&out.join("truth.model"))?;
    println!(
        "wrote {} pre-training and {} downstream samples (d={}, K={}, K'={}) to {}",
        cfg.n,
        cfg.m,
        t.d,
        t.k,
        t.k_prime,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    data: &Path,
    lambda: f64,
    out: &Path,
    config: Option<&Path>,
    rank: Option<usize>,
    trace: Option<&Path>,
) -> CmdResult {
    let mut cfg: PretrainConfig = load_json(config)?;
    if let Some(r) = rank {
        cfg.hypothesis.r = r;
    }
    if !(lambda >= 0.0) {
        return Err(Failure::Usage("lambda must be nonnegative".into()));
    }
    let (ds, header) = read_dataset(data).map_err(at(data))?;
    let fit = pretrain(
        &ds,
        &cfg.hypothesis,
        lambda,
        &cfg.optim,
        &mut stream(cfg.seed, &[header.seed], Purpose::Init),
    )?;
    if let Some(p) = trace {
        fit.trace.write_csv(p)?;
    }
    ModelBundle::new(fit.rep).with_head("pre", fit.head.clone()).write(out)?;
    let status = match (&fit.trace.stall, fit.trace.converged) {
        (Some(reason), _) => format!("stalled: {reason}"),
        (None, true) => "converged".to_string(),
        (None, false) => "iteration budget exhausted".to_string(),
    };
    println!(
        "pretrain: {} iterations, {status}, objective {:.6}, nu_tilde {:.6}",
        fit.trace.iterations(),
        fit.trace.final_objective().unwrap_or(f64::NAN),
        nu_tilde(fit.head.alpha())?
    );
    Ok(())
}

fn cmd_probe(model: &Path, data: &Path, out: &Path, cap: f64, trace: Option<&Path>) -> CmdResult {
    if !(cap > 0.0) {
        return Err(Failure::Usage("cap must be positive".into()));
    }
    let bundle = ModelBundle::read(model).map_err(at(model))?;
    let (ds, _) = read_dataset(data).map_err(at(data))?;
    let (head, tr) = fit_downstream_head(&bundle.rep, &ds, cap, &OptimConfig::default())?;
    if let Some(p) = trace {
        tr.write_csv(p)?;
    }
    println!(
        "probe: {} iterations, final risk {:.6}",
        tr.iterations(),
        tr.records.last().map_or(f64::NAN, |r| r.risk)
    );
    bundle.with_head("down", head).write(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    model: &Path,
    truth: &Path,
    out: &Path,
    n_mc: usize,
    rep_mc: usize,
    schur_mc: usize,
    seed: u64,
) -> CmdResult {
    if n_mc == 0 {
        return Err(Failure::Usage("n-mc must be positive".into()));
    }
    let bundle = ModelBundle::read(model).map_err(at(model))?;
    let (truth, spec) = ModelBundle::read(truth).and_then(ModelBundle::into_truth).map_err(at(truth))?;
    let x = sample_covariates(&spec, n_mc, &mut stream(seed, &[], Purpose::Evaluation))?;
    let mut rows: Vec<(String, f64, Option<f64>)> = Vec::new();

    if let Some(head) = bundle.head("pre") {
        let (v, se) = excess_risk_on(&x, &truth.rep, &truth.pre_head, &bundle.rep, head)?;
        rows.push(("excess_pretrain_risk".into(), v, Some(se)));
        rows.push(("nu_tilde_learned".into(), nu_tilde(head.alpha())?, None));
    }
    if let Some(head) = bundle.head("down") {
        let (v, se) = excess_risk_on(&x, &truth.rep, &truth.down_head, &bundle.rep, head)?;
        rows.push(("excess_transfer_risk".into(), v, Some(se)));
    }
    rows.push(("nu_tilde_true".into(), nu_tilde(truth.pre_head.alpha())?, None));
    if let (Some(a), Some(b)) = (bundle.rep.as_subspace(), truth.rep.as_subspace()) {
        for (i, angle) in principal_angles(a, b)?.into_iter().enumerate() {
            rows.push((format!("principal_angle_{}", i + 1), angle, None));
        }
    }
    if rep_mc > 0 {
        let cap = bundle.head("pre").map_or(1.0, |h| h.column_cap());
        let rd = pretrain_rep_difference(
            &bundle.rep,
            &truth,
            &spec,
            rep_mc,
            cap,
            &OptimConfig::default(),
            &mut stream(seed, &[1], Purpose::Complexity),
        )?;
        rows.push(("pretrain_rep_difference".into(), rd.value, Some(rd.std_error)));
    }
    if schur_mc > 0 {
        let sb = schur_complement_bound(
            &bundle.rep,
            &truth.rep,
            &spec,
            schur_mc,
            truth.down_head.column_cap(),
            truth.down_head.classes(),
            &mut stream(seed, &[2], Purpose::Complexity),
        )?;
        rows.push(("schur_sigma1".into(), sb.sigma1, None));
        rows.push(("downstream_rep_difference_bound".into(), sb.bound, None));
    }

    let mut text = String::from("metric,value,std_error\n");
    for (name, v, se) in &rows {
        let se = se.map_or(String::new(), |s| format!("{s:.16e}"));
        text.push_str(&format!("{name},{v:.16e},{se}\n"));
        println!("{name:<34} {v:.6}");
    }
    std::fs::write(out, text)?;
    Ok(())
}

fn cmd_verify(seed: u64, quick: bool) -> CmdResult {
    let mut sizes = SuiteSizes::default();
    if quick {
        sizes = SuiteSizes {
            self_concordance: sizes.self_concordance / 10,
            hessian: sizes.hessian / 10,
            kl_sandwich: sizes.kl_sandwich / 10,
            gradients: sizes.gradients / 10,
            complexity_draws: sizes.complexity_draws / 10,
            chain_rule: sizes.chain_rule / 4,
        };
    }
    let mut all = true;
    for r in run_all(&sizes, seed)? {
        let verdict = if r.pass() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<18} {} cases, {} failures; {}", r.name, r.cases, r.failures, r.detail);
        all &= r.pass();
    }
    if all {
        Ok(())
    } else {
        Err(Failure::Property)
    }
}

fn cmd_sweep(config: &Path, out: &Path, timing: bool) -> CmdResult {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", config.display())))?;
    let cfg = SweepConfig::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    let records = run_sweep_to_dir(&cfg, out)?;
    if timing {
        write_timing(&out.join("timing.csv"), &records)?;
    }
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    println!("sweep: {} records ({failed} failed) in {}", records.len(), out.display());
    Ok(())
}

fn cmd_report(input: &Path, out: &Path) -> CmdResult {
    let records_path = input.join("records.csv");
    let records = read_records(&records_path).map_err(at(&records_path))?;
    let cfg_path = input.join("config.json");
    let profile = if cfg_path.exists() {
        SweepConfig::from_json(&std::fs::read_to_string(&cfg_path)?)?.profile
    } else {
        Default::default()
    };
    let report = write_report(&records, &profile, out)?;
    print!("{}", report.summary);
    Ok(())
}

fn cmd_print_default(kind: ConfigKind) -> CmdResult {
    let text = match kind {
        ConfigKind::Sweep => SweepConfig::default().to_json(),
        ConfigKind::Gen => serde_json::to_string_pretty(&GenConfig::default()).expect("serializes"),
        ConfigKind::Pretrain => serde_json::to_string_pretty(&PretrainConfig::default()).expect("serializes"),
    };
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen { config, out } => cmd_gen(config.as_deref(), &out),
        Command::Pretrain {
            data,
            lambda,
            out,
            config,
            rank,
            trace,
        } => cmd_pretrain(&data, lambda, &out, config.as_deref(), rank, trace.as_deref()),
        Command::Probe {
            model,
            data,
            out,
            cap,
            trace,
        } => cmd_probe(&model, &data, &out, cap, trace.as_deref()),
        Command::Diagnose {
            model,
            truth,
            out,
            n_mc,
            rep_mc,
            schur_mc,
            seed,
        } => cmd_diagnose(&model, &truth, &out, n_mc, rep_mc, schur_mc, seed),
        Command::Verify { seed, quick } => cmd_verify(seed, quick),
        Command::Sweep { config, out, timing } => cmd_sweep(&config, &out, timing),
        Command::Report { input, out } => cmd_report(&input, &out),
        Command::PrintDefaultConfig { kind } => cmd_print_default(kind),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Property) => {
            eprintln!("property suites failed");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
