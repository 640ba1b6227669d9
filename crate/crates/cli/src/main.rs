use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use exbayes::blr::{read_trajectory, write_trajectory, TrajectorySidecar, TRAJECTORY_FORMAT_VERSION};
use exbayes::harness::{build_model, run_experiment, train_ext, write_report_files, Experiment, ExperimentConfig, ModelSpec};
use exbayes::inference::{
    ar_bootstrap, context_hash, credible_interval, posterior_gap, write_draws, DrawsSidecar, Statistic,
    DRAWS_FORMAT_VERSION,
};
use exbayes::linattn::{optimal_gamma, write_gamma, GammaFile, GammaProvenance};
use exbayes::neural::{grad_check, load_checkpoint, save_checkpoint, write_loss_curve, ExtModel};
use exbayes::{OraclePosteriorState, RngStream};

/// Consulted when neither `--out` nor the config names an output directory.
const OUT_ENV: &str = "EXBAYES_OUT";
const GEN_STREAM: u64 = 0x6e6e;
const CONTEXT_STREAM: u64 = 0xc7c7;
const BOOT_STREAM: u64 = 0xb007;
const GRAD_STREAM: u64 = 0x62ad;

#[derive(Parser)]
#[command(name = "exbayes", version, about = "Exchangeable sequence models as Bayesian predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's out_dir, then $EXBAYES_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also emit an SVG plot of the report.
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories from the configured environment.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Pairs per trajectory; defaults to the largest grid point.
        #[arg(long)]
        length: Option<usize>,
        /// Number of trajectories; defaults to eval.n_traj.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write the pre-training optimum Γ* for every grid length.
    GammaStar(Common),
    /// Train every inline transformer in the config and save checkpoints.
    Train(Common),
    /// Predictive KL against the oracle across context lengths.
    Lengthgen(Common),
    /// Posterior gap of bootstrap draws against the oracle posterior.
    Posteriorgap(Common),
    /// Bootstrap draws for one context, per model.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        /// Context trajectory CSV; sampled from the environment when absent.
        #[arg(long)]
        context: Option<PathBuf>,
    },
    /// Compare tape gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    svg: bool,
}

impl Ctx {
    fn load(c: &Common) -> anyhow::Result<Self> {
        let mut cfg = ExperimentConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        let out = c
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("exbayes-out"));
        Ok(Self { cfg, out, svg: c.svg })
    }
}

fn paths(files: &[PathBuf]) -> Vec<String> {
    files.iter().map(|p| p.display().to_string()).collect()
}

fn gen(ctx: &Ctx, length: Option<usize>, count: Option<usize>) -> anyhow::Result<Value> {
    let env = ctx.cfg.env()?;
    let length = length.unwrap_or(*ctx.cfg.eval.t_grid.last().expect("validated"));
    let count = count.unwrap_or(ctx.cfg.eval.n_traj);
    let base = RngStream::new(ctx.cfg.seed, GEN_STREAM);
    let mut files = Vec::with_capacity(count);
    for j in 0..count as u64 {
        let mut rng = base.substream(j);
        let stream = rng.stream_id();
        let traj = env.sample_trajectory(length, &mut rng)?;
        let path = ctx.out.join(format!("traj_{j:04}.csv"));
        let side = TrajectorySidecar {
            format_version: TRAJECTORY_FORMAT_VERSION,
            seed: ctx.cfg.seed,
            stream,
            env: env.params(),
            w: traj.w.clone(),
        };
        write_trajectory(&path, &traj, &side)?;
        files.push(path);
    }
    Ok(json!({ "command": "gen", "files": paths(&files) }))
}

fn gamma_star(ctx: &Ctx) -> anyhow::Result<Value> {
    let env = ctx.cfg.env()?;
    let mut files = Vec::new();
    let mut values = Vec::new();
    for &t_pt in &ctx.cfg.eval.t_grid {
        let model = optimal_gamma(&env, t_pt)?;
        let file = GammaFile::new(&model, GammaProvenance { source: "optimal".into(), env: env.params(), t_pt: Some(t_pt) });
        let path = ctx.out.join(format!("gamma_star_{t_pt}.json"));
        write_gamma(&path, &file)?;
        values.push(json!({ "t_pt": t_pt, "gamma": file.gamma }));
        files.push(path);
    }
    Ok(json!({ "command": "gamma-star", "gamma_star": values, "files": paths(&files) }))
}

fn train_all(ctx: &Ctx) -> anyhow::Result<Value> {
    let env = ctx.cfg.env()?;
    let length = ctx.cfg.eval.t_grid[0];
    let mut trained = Vec::new();
    for spec in &ctx.cfg.models {
        if !matches!(spec, ModelSpec::Ext { checkpoint: None, .. }) {
            continue;
        }
        let (tc, outcome) = train_ext(spec, &env, length, ctx.cfg.seed)?;
        let dir = ctx.out.join(spec.id());
        let ckpt = dir.join("ckpt.json");
        save_checkpoint(&ckpt, &outcome.model, tc.seed, tc.steps)?;
        let curve = dir.join("loss.csv");
        write_loss_curve(&curve, &outcome.curve)?;
        let last = outcome.curve.last().map(|r| r.total);
        trained.push(json!({
            "model": spec.id(),
            "seq_len": tc.seq_len,
            "steps": tc.steps,
            "final_loss": last,
            "files": paths(&[ckpt, curve]),
        }));
    }
    if trained.is_empty() {
        bail!(exbayes::Error::Config("no inline ext models to train".into()));
    }
    Ok(json!({ "command": "train", "models": trained }))
}

fn experiment(ctx: &mut Ctx, which: Experiment) -> anyhow::Result<Value> {
    ctx.cfg.experiment = which;
    let report = run_experiment(&ctx.cfg)?;
    let files = write_report_files(&report, &ctx.out, which.name(), ctx.svg)?;
    Ok(json!({ "command": which.name(), "rows": report.rows.len(), "files": paths(&files) }))
}

fn bootstrap(ctx: &Ctx, context: Option<&Path>) -> anyhow::Result<Value> {
    let env = ctx.cfg.env()?;
    let e = &ctx.cfg.eval;
    let ctx_traj = match context {
        Some(p) => read_trajectory(p)?.0,
        None => env.sample_trajectory(e.s, &mut RngStream::new(ctx.cfg.seed, CONTEXT_STREAM))?,
    };
    let hash = context_hash(&ctx_traj);
    let posterior = OraclePosteriorState::from_pairs(&env, ctx_traj.pairs())?.posterior()?;
    let mut out = Vec::new();
    for spec in &ctx.cfg.models {
        let model = build_model(spec, &env, e.t_grid[0], ctx.cfg.seed)?;
        let rng = RngStream::new(ctx.cfg.seed, BOOT_STREAM);
        let draws = ar_bootstrap(model.as_ref(), &env, &ctx_traj, e.horizon, e.b, e.stat, &rng)?;
        let path = ctx.out.join(format!("{}_draws.csv", spec.id()));
        let side = DrawsSidecar {
            format_version: DRAWS_FORMAT_VERSION,
            context_hash: hash.clone(),
            model: spec.id(),
            config: draws.config.clone(),
        };
        write_draws(&path, &draws, &side)?;
        let intervals = if draws.values.len() >= 20 { Some(credible_interval(&draws, e.alpha)?) } else { None };
        let gap = match e.stat {
            Statistic::Ols => Some(posterior_gap(&draws, &posterior)?),
            Statistic::EmpiricalMean => None,
        };
        out.push(json!({
            "model": spec.id(),
            "interval": intervals,
            "alpha": e.alpha,
            "kl_posterior": gap,
            "file": path.display().to_string(),
        }));
    }
    Ok(json!({ "command": "bootstrap", "context_hash": hash, "context_len": ctx_traj.len(), "models": out }))
}

fn grad_check_all(ctx: &Ctx, eps: f64, tol: f64) -> anyhow::Result<Value> {
    let env = ctx.cfg.env()?;
    let t = ctx.cfg.eval.t_grid[0].max(2);
    let mut rng = RngStream::new(ctx.cfg.seed, GRAD_STREAM);
    let batch = (0..4).map(|_| env.sample_trajectory(t, &mut rng)).collect::<exbayes::Result<Vec<_>>>()?;
    let mut results = Vec::new();
    let mut worst: f64 = 0.0;
    for spec in &ctx.cfg.models {
        let model = match spec {
            ModelSpec::Ext { checkpoint: Some(p), .. } => load_checkpoint(p)?.0,
            ModelSpec::Ext { model_seed, .. } => ExtModel::new(spec.ext_config(env.d()).expect("ext spec"), *model_seed)?,
            _ => continue,
        };
        let err = grad_check(&model, &batch, eps, &mut rng)?;
        worst = worst.max(err);
        results.push(json!({ "model": spec.id(), "max_rel_err": err }));
    }
    if results.is_empty() {
        bail!(exbayes::Error::Config("no ext models to check".into()));
    }
    if worst > tol {
        bail!(exbayes::Error::Contract(format!("gradient check failed: max relative error {worst:e} > {tol:e}")));
    }
    Ok(json!({ "command": "grad-check", "eps": eps, "tol": tol, "models": results }))
}

fn run(cli: Cli) -> anyhow::Result<Value> {
    match cli.command {
        Command::Gen { common, length, count } => gen(&Ctx::load(&common)?, length, count),
        Command::GammaStar(c) => gamma_star(&Ctx::load(&c)?),
        Command::Train(c) => train_all(&Ctx::load(&c)?),
        Command::Lengthgen(c) => experiment(&mut Ctx::load(&c)?, Experiment::Lengthgen),
        Command::Posteriorgap(c) => experiment(&mut Ctx::load(&c)?, Experiment::Posteriorgap),
        Command::Bootstrap { common, context } => bootstrap(&Ctx::load(&common)?, context.as_deref()),
        Command::GradCheck { common, eps, tol } => grad_check_all(&Ctx::load(&common)?, eps, tol),
    }
}

fn error_record(err: &anyhow::Error) -> Value {
    let kind = err.downcast_ref::<exbayes::Error>().map_or("other", exbayes::Error::kind);
    json!({ "error": { "kind": kind, "message": format!("{err:#}") } })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("exbayes failed") {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}
