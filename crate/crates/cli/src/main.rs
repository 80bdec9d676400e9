#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pidp_core::composition::GpVariant;
use pidp_core::pipeline::{
    account_traces, compose_traces, general_bound_at_checkpoint, records_from_runs, BaselineKind,
    ComposeTraceOptions, TraceDirection,
};
use pidp_core::simulator::{multi_run, synth_dataset, Checkpoint, Dataset, Point, RunTrace};
use pidp_core::trace_io::{
    read_document, read_records, read_trace, write_csv, write_document, write_records, write_report,
    write_trace, ReportFormat, ReportRow,
};
use pidp_core::unlearning::{simulate_request_stream, CoefficientVariant, OrderMenu, UnlearningLedger};
use pidp_core::{rdp_to_dp, Error, ErrorKind, Result};

use config::{PSetting, SessionConfig};

#[derive(Parser, Debug)]
#[command(name = "pidp", version, about = "Per-instance privacy accounting for DP-SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train R runs on X (and on X' when there is a target) and write traces.
    Simulate(SimulateArgs),
    /// Per-step bounds and baseline ratios for every tracked point.
    Account(AccountArgs),
    /// Composed bounds with per-step contributions.
    Compose(ComposeArgs),
    /// Mean-rule Monte Carlo bounds at saved checkpoints.
    GeneralBound(GeneralBoundArgs),
    /// Replay a deletion-request stream through the unlearning ledger.
    Unlearn(UnlearnArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Session config (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rényi order α (integer, at least 2).
    #[arg(long)]
    alpha: Option<u32>,
    /// Output file, or directory for `simulate`.
    #[arg(long)]
    out: PathBuf,
    /// Report format: csv or structured.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset document; synthesized from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Runs per dataset (R).
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed; run r on X uses seed + 1 + r.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AccountArgs {
    #[command(flatten)]
    common: Common,
    /// Per-step trace records (JSON lines).
    #[arg(long)]
    traces: PathBuf,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[command(flatten)]
    common: Common,
    /// Traces of runs on X.
    #[arg(long)]
    traces: PathBuf,
    /// Traces of runs on X'.
    #[arg(long)]
    traces_xprime: Option<PathBuf>,
    /// Hölder constant: auto or a number above 1.
    #[arg(long)]
    p: Option<String>,
    /// forward, reverse or max.
    #[arg(long)]
    direction: Option<String>,
    /// proof or statement.
    #[arg(long)]
    gp_variant: Option<String>,
    /// order-matched or classical.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args, Debug)]
struct GeneralBoundArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint records written by `simulate`.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Dataset document the points are removed from.
    #[arg(long)]
    dataset: PathBuf,
    /// Point to remove; repeatable; defaults to the dataset target.
    #[arg(long = "point")]
    points: Vec<String>,
    /// Checkpoint step; defaults to the last step of each run.
    #[arg(long)]
    step: Option<usize>,
    /// Outer and inner sample counts.
    #[arg(long)]
    draws: Option<usize>,
    /// Seed of the Monte Carlo draws.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct UnlearnArgs {
    #[command(flatten)]
    common: Common,
    /// Request stream: one record per request with its (order, divergence) pairs.
    #[arg(long)]
    stream: PathBuf,
    /// Divergence budget β.
    #[arg(long)]
    beta: f64,
    /// proof or text.
    #[arg(long)]
    coefficient: Option<String>,
}

fn load_config(path: Option<&Path>) -> Result<SessionConfig> {
    match path {
        Some(p) => SessionConfig::load(p),
        None => Ok(SessionConfig::default()),
    }
}

fn format_of(common: &Common, cfg: &SessionConfig) -> Result<ReportFormat> {
    match &common.format {
        Some(f) => f.parse(),
        None => Ok(cfg.output.format),
    }
}

fn alpha_of(common: &Common, cfg: &SessionConfig) -> Result<u32> {
    let a = common.alpha.unwrap_or(cfg.accounting.alpha);
    if a < 2 {
        return Err(Error::Domain(format!("--alpha {a} must be at least 2")));
    }
    Ok(a)
}

fn parse_gp_variant(s: &str) -> Result<GpVariant> {
    match s {
        "proof" => Ok(GpVariant::Proof),
        "statement" => Ok(GpVariant::Statement),
        other => Err(Error::Domain(format!("unknown g_p variant {other:?}"))),
    }
}

fn parse_baseline(s: &str) -> Result<BaselineKind> {
    match s {
        "order-matched" => Ok(BaselineKind::OrderMatched),
        "classical" => Ok(BaselineKind::Classical),
        other => Err(Error::Domain(format!("unknown baseline {other:?}"))),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

/// Target plus `extra` other points chosen deterministically from `seed`.
fn tracked_points(data: &Dataset, extra: usize, seed: u64) -> Vec<Point> {
    let mut out: Vec<Point> = data.target().cloned().into_iter().collect();
    let others: Vec<&Point> = data
        .points
        .iter()
        .filter(|p| Some(&p.id) != data.target_point_id.as_ref())
        .collect();
    if extra > 0 && !others.is_empty() {
        // Evenly spaced picks from a seed-dependent offset.
        let n = others.len();
        let k = extra.min(n);
        let offset = (seed as usize) % n;
        for i in 0..k {
            out.push(others[(offset + i * n / k) % n].clone());
        }
    }
    out
}

fn collect_runs(results: Vec<Result<RunTrace>>, label: &str) -> (Vec<RunTrace>, usize) {
    let mut ok = Vec::new();
    let mut failed = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(t) => ok.push(t),
            Err(e) => {
                eprintln!("{label} run {r} failed: {e}");
                failed += 1;
            }
        }
    }
    (ok, failed)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(args.common.config.as_deref())?;
    if let Some(r) = args.runs {
        cfg.accounting.runs = r;
    }
    cfg.trainer.seed = args.seed;
    cfg.validate()?;
    let full = match &args.dataset {
        Some(p) => {
            let d: Dataset = read_document(p)?;
            d.validate()?;
            d
        }
        None => synth_dataset(&cfg.dataset, args.seed)?,
    };
    let out = &args.common.out;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_document(&full, out.join("dataset.json"))?;

    let tracked = tracked_points(&full, cfg.tracked_extra, args.seed);
    let runs = cfg.accounting.runs;
    let base = args.seed.wrapping_add(1);
    let x = full.without_target();
    let (x_runs, mut failed) = collect_runs(multi_run(&x, &cfg.trainer, &tracked, runs, base, "x-"), "X");
    write_trace(
        &records_from_runs(&x_runs, &cfg.trainer),
        out.join("traces_x.jsonl"),
    )?;
    let mut checkpoints: Vec<Checkpoint> = x_runs.iter().flat_map(|r| r.checkpoints.clone()).collect();
    if full.target_point_id.is_some() {
        let xp = multi_run(
            &full,
            &cfg.trainer,
            &tracked,
            runs,
            base.wrapping_add(runs as u64),
            "xp-",
        );
        let (xp_runs, f) = collect_runs(xp, "X'");
        failed += f;
        write_trace(
            &records_from_runs(&xp_runs, &cfg.trainer),
            out.join("traces_xprime.jsonl"),
        )?;
        checkpoints.extend(xp_runs.iter().flat_map(|r| r.checkpoints.clone()));
    }
    write_records(&checkpoints, out.join("checkpoints.jsonl"))?;
    let text = toml::to_string(&cfg).map_err(|e| Error::InvalidData(e.to_string()))?;
    std::fs::write(out.join("session.toml"), text).map_err(|e| io_err(out, e))?;
    println!(
        "simulated {} runs on X{} with {} tracked points into {}",
        x_runs.len(),
        if full.target_point_id.is_some() {
            " and X'"
        } else {
            ""
        },
        tracked.len(),
        out.display()
    );
    if failed > 0 {
        return Err(Error::NonFinite(format!("{failed} runs diverged")));
    }
    Ok(())
}

fn cmd_account(args: &AccountArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let alpha = alpha_of(&args.common, &cfg)?;
    let records = read_trace(&args.traces)?;
    let rows = account_traces(&records, alpha)?;
    write_report(&rows, &args.common.out, format_of(&args.common, &cfg)?)?;
    println!("wrote {} rows to {}", rows.len(), args.common.out.display());
    Ok(())
}

fn cmd_compose(args: &ComposeArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let p = match &args.p {
        Some(s) => s.parse::<PSetting>()?,
        None => cfg.accounting.p,
    };
    let opts = ComposeTraceOptions {
        alpha: alpha_of(&args.common, &cfg)?,
        p: p.value(),
        direction: match &args.direction {
            Some(d) => d.parse()?,
            None => cfg.accounting.direction,
        },
        variant: match &args.gp_variant {
            Some(v) => parse_gp_variant(v)?,
            None => cfg.accounting.gp_variant,
        },
        baseline: match &args.baseline {
            Some(b) => parse_baseline(b)?,
            None => cfg.accounting.baseline,
        },
        ..ComposeTraceOptions::default()
    };
    let fwd = read_trace(&args.traces)?;
    let rev = args.traces_xprime.as_ref().map(read_trace).transpose()?;
    let points = compose_traces(&fwd, rev.as_deref(), &opts)?;
    let rows: Vec<ReportRow> = points.iter().flat_map(|p| p.rows()).collect();
    write_report(&rows, &args.common.out, format_of(&args.common, &cfg)?)?;
    for p in &points {
        let dp = rdp_to_dp(opts.alpha as f64, p.ours.total_epsilon, cfg.accounting.delta)?;
        println!(
            "{} ({:?}, p = {}): rdp {:.6} baseline {:.6} -> ({:.6}, {:e})-DP",
            p.point_id, p.direction, p.plan.p, p.ours.total_epsilon, p.baseline_total, dp.epsilon, dp.delta
        );
    }
    if opts.direction == TraceDirection::Forward && rev.is_some() {
        eprintln!("note: --traces-xprime is ignored in the forward direction");
    }
    Ok(())
}

fn cmd_general_bound(args: &GeneralBoundArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let alpha = alpha_of(&args.common, &cfg)?;
    let draws = args.draws.unwrap_or(cfg.accounting.draws);
    let data: Dataset = read_document(&args.dataset)?;
    data.validate()?;
    let all: Vec<Checkpoint> = read_records(&args.checkpoints)?;
    let mut chosen: Vec<&Checkpoint> = Vec::new();
    let mut runs: Vec<&str> = all.iter().map(|c| c.run_id.as_str()).collect();
    runs.dedup();
    for run in runs {
        let mut of_run = all.iter().filter(|c| c.run_id == run);
        let pick = match args.step {
            Some(s) => of_run.rfind(|c| c.step == s),
            None => of_run.max_by_key(|c| c.step),
        };
        chosen.extend(pick);
    }
    if chosen.is_empty() {
        return Err(Error::MissingSamples(
            "no checkpoint matches the requested step".into(),
        ));
    }
    let points: Vec<String> = if args.points.is_empty() {
        vec![data
            .target_point_id
            .clone()
            .ok_or_else(|| Error::Domain("dataset has no target; pass --point".into()))?]
    } else {
        args.points.clone()
    };
    let mut rows = Vec::new();
    for (k, ck) in chosen.iter().enumerate() {
        if ck.parameters.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "checkpoint {} step {} has non-finite parameters",
                ck.run_id, ck.step
            )));
        }
        for (j, id) in points.iter().enumerate() {
            let seed = args.seed.wrapping_add((k * points.len() + j) as u64);
            let b = general_bound_at_checkpoint(
                &ck.parameters,
                ck.step,
                &data,
                id,
                &cfg.trainer,
                alpha,
                draws,
                draws,
                seed,
            )?;
            rows.push(b.row());
        }
    }
    write_report(&rows, &args.common.out, format_of(&args.common, &cfg)?)?;
    println!("wrote {} rows to {}", rows.len(), args.common.out.display());
    Ok(())
}

fn cmd_unlearn(args: &UnlearnArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let alpha = alpha_of(&args.common, &cfg)?;
    let variant = match args.coefficient.as_deref() {
        None | Some("proof") => CoefficientVariant::Proof,
        Some("text") => CoefficientVariant::Text,
        Some(other) => return Err(Error::Domain(format!("unknown coefficient {other:?}"))),
    };
    let menus: Vec<OrderMenu> = read_records(&args.stream)?;
    for m in &menus {
        m.validate()?;
    }
    let ids: Vec<String> = menus.iter().map(|m| m.request_id.clone()).collect();
    let mut ledger = UnlearningLedger::with_variant(args.beta, alpha, variant)?;
    let log = simulate_request_stream(&mut ledger, &menus, &ids)?;
    match format_of(&args.common, &cfg)? {
        ReportFormat::Csv => write_csv(&log, &args.common.out)?,
        ReportFormat::Structured => write_records(&log, &args.common.out)?,
    }
    let retrains = log
        .iter()
        .filter(|e| e.decision == pidp_core::unlearning::Decision::Retrain)
        .count();
    println!("{} requests, {} retrains", log.len(), retrains);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Account(a) => cmd_account(a),
        Command::Compose(a) => cmd_compose(a),
        Command::GeneralBound(a) => cmd_general_bound(a),
        Command::Unlearn(a) => cmd_unlearn(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
