//! `rsr`: run the full real-sim-real loop or its individual stages from the
//! command line.
//!
//! Subcommands mirror the loop's stages: `run` executes the whole loop,
//! `tune` fits simulator parameters to a recorded dataset, `train` trains a
//! policy in the simulator under a frozen gap context, `collect` gathers
//! proxy data (by policy rollout or by the random/grid baselines), and
//! `report` turns a finished run directory into plot-ready CSV tables.
//!
//! Exit codes: 0 on success, 2 for configuration/input errors, 3 for
//! failures inside a component or while writing outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rsr_core::dataset::{wrap_angle, Dataset, StateCoord, Transition};
use rsr_core::diffsim::{PushModel, RealProxyConfig, SimGeometry, SimParams};
use rsr_core::harness::{
    baseline_sample, rng_stream, rsr_run, HarnessError, RsrConfig, SampleStrategy,
    STREAM_BASELINE, STREAM_COLLECT, STREAM_EVAL, STREAM_TRAIN,
};
use rsr_core::infogap::GapContext;
use rsr_core::policy::{
    train_policy, EnvDynamics, EpisodeConfig, PolicyCheckpoint, PolicyNet, PpoConfig, PushEnv,
    ValueNet,
};
use rsr_core::tuner::{tune, TunerConfig};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    /// Bad invocation, unreadable/invalid configuration or input files.
    Config(String),
    /// A pipeline component failed, or outputs could not be written.
    Component(String),
}

type CliResult = Result<(), CliError>;

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn comp_err(e: impl std::fmt::Display) -> CliError {
    CliError::Component(e.to_string())
}

/// Classify a full-run failure: configuration problems keep the config exit
/// code even when they surface from inside the loop.
fn classify_run(e: HarnessError) -> CliError {
    fn is_config(e: &HarnessError) -> bool {
        match e {
            HarnessError::BadConfig(_) | HarnessError::ConfigFormat(_) => true,
            HarnessError::AtIteration { source, .. } => is_config(source),
            _ => false,
        }
    }
    if is_config(&e) {
        CliError::Config(e.to_string())
    } else {
        CliError::Component(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "rsr",
    version,
    about = "Desk-scale real-sim-real loop for planar pushing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute the full loop and write a self-contained run directory.
    Run {
        /// Run configuration (TOML; missing keys take defaults).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for all artifacts (overrides the config value).
        #[arg(long)]
        out: PathBuf,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force single-threaded deterministic mode.
        #[arg(long)]
        deterministic: bool,
    },
    /// Fit simulator parameters to a recorded dataset (tuning stage alone).
    Tune {
        /// Tuning spec (TOML): [geometry], [theta0], [tuner]; missing keys
        /// take defaults.
        #[arg(long)]
        params: PathBuf,
        /// Transition dataset (JSONL) to fit against.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy in the simulator under a frozen gap context (training
    /// stage alone).
    Train {
        /// Training spec (TOML): [geometry], [params], [episode], [ppo],
        /// seed, optional warm_start checkpoint path.
        #[arg(long)]
        params: PathBuf,
        /// Gap context spec (TOML): gap_coeff, lambda_sr, beta, coordinates,
        /// dataset (JSONL path, relative to this file).
        #[arg(long)]
        gap: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect a transition dataset from the proxy (deployment stage alone,
    /// or the random/grid baseline samplers).
    Collect {
        /// Policy checkpoint (JSON); required for the trajectory strategy.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Collection spec (TOML): [geometry], [proxy], [episode], seed,
        /// iteration.
        #[arg(long)]
        proxy: PathBuf,
        /// Number of transitions to record.
        #[arg(short = 'M', long = "transitions")]
        transitions: usize,
        /// Output dataset path (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// How to probe the proxy.
        #[arg(long, value_enum, default_value_t = StrategyArg::Trajectory)]
        strategy: StrategyArg,
    },
    /// Summarize a finished run directory into plot-ready CSV tables.
    Report {
        /// A directory previously written by `rsr run`.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Random,
    Grid,
    Trajectory,
}

impl From<StrategyArg> for SampleStrategy {
    fn from(s: StrategyArg) -> SampleStrategy {
        match s {
            StrategyArg::Random => SampleStrategy::Random,
            StrategyArg::Grid => SampleStrategy::Grid,
            StrategyArg::Trajectory => SampleStrategy::Trajectory,
        }
    }
}

// ---------------------------------------------------------------------------
// Stage spec files
// ---------------------------------------------------------------------------

/// `tune` input: world description, starting parameters, descent knobs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct TuneSpec {
    geometry: SimGeometry,
    theta0: SimParams,
    tuner: TunerConfig,
}

/// `train` input: world description, simulator parameters to train under,
/// episode/PPO settings, seed, optional warm-start checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainSpec {
    geometry: SimGeometry,
    params: SimParams,
    episode: EpisodeConfig,
    ppo: PpoConfig,
    seed: u64,
    warm_start: Option<PathBuf>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            geometry: SimGeometry::default(),
            params: SimParams::default(),
            episode: EpisodeConfig::cube(),
            ppo: PpoConfig::default(),
            seed: 0,
            warm_start: None,
        }
    }
}

/// `train` input: the frozen gap context the intrinsic reward is computed
/// from. `dataset` points at the simulator replay the informativeness
/// baseline is built over; a relative path is resolved against this file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GapSpec {
    gap_coeff: f64,
    lambda_sr: f64,
    beta: f64,
    coordinates: Vec<StateCoord>,
    dataset: PathBuf,
}

impl Default for GapSpec {
    fn default() -> Self {
        GapSpec {
            gap_coeff: 0.0,
            lambda_sr: 1e6,
            beta: 1.0,
            coordinates: vec![StateCoord::BlockX, StateCoord::BlockY],
            dataset: PathBuf::new(),
        }
    }
}

/// `collect` input: world description, hidden-parameter proxy, episode
/// layout, seed, and the iteration tag stamped on the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CollectSpec {
    geometry: SimGeometry,
    proxy: RealProxyConfig,
    episode: EpisodeConfig,
    seed: u64,
    iteration: u32,
}

impl Default for CollectSpec {
    fn default() -> Self {
        CollectSpec {
            geometry: SimGeometry::default(),
            proxy: RealProxyConfig::default(),
            episode: EpisodeConfig::cube(),
            seed: 0,
            iteration: 1,
        }
    }
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_snapshot<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult {
    let text = toml::to_string_pretty(value).map_err(comp_err)?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::Component(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Component(format!("{}: {e}", dir.display())))
}

fn write_csv_file(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Component(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Component(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    w.flush()
        .map_err(|e| CliError::Component(format!("{}: {e}", path.display())))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, deterministic: bool) -> CliResult {
    let mut cfg = RsrConfig::load(config).map_err(cfg_err)?;
    cfg.out_dir = out.to_path_buf();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    let outcome = rsr_run(&cfg).map_err(classify_run)?;

    let coord_names: Vec<&str> = outcome
        .state
        .coordinates
        .iter()
        .map(|c| c.name())
        .collect();
    for r in &outcome.reports {
        let mut kls = String::new();
        for (name, v) in coord_names.iter().zip(&r.kl_before) {
            let _ = write!(kls, " {name}={v:.3e}");
        }
        println!(
            "iteration {}: gap {:.3e} |{} | tune {} iters{} | eval {}/{} success",
            r.iteration,
            r.gap_coeff,
            kls,
            r.tune_iterations,
            if r.tune_converged { " (converged)" } else { "" },
            r.eval_successes,
            cfg.eval_episodes,
        );
    }
    let t = outcome.state.theta;
    println!(
        "final parameters: mu_table={} mu_contact={} block_mass={} contact_stiffness={}",
        t.mu_table, t.mu_contact, t.block_mass, t.contact_stiffness
    );
    println!("artifacts: {}", cfg.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

fn cmd_tune(params: &Path, data: &Path, out: &Path) -> CliResult {
    let spec: TuneSpec = load_toml(params)?;
    spec.geometry.validate().map_err(cfg_err)?;
    spec.theta0.validate().map_err(cfg_err)?;
    let dataset = Dataset::load_jsonl(data)
        .map_err(|e| CliError::Config(format!("{}: {e}", data.display())))?;

    ensure_dir(out)?;
    write_snapshot(out, "params.snapshot.toml", &spec)?;

    let model = PushModel::new(spec.geometry.clone()).map_err(cfg_err)?;
    let report = tune(&model, &spec.theta0, &dataset, &spec.tuner).map_err(comp_err)?;

    let tuned = TuneSpec {
        theta0: report.final_params,
        ..spec
    };
    write_snapshot(out, "tuned_params.toml", &tuned)?;
    let rows: Vec<Vec<String>> = report
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), fmt_f64(*l)])
        .collect();
    write_csv_file(&out.join("loss_history.csv"), &["iteration", "loss"], &rows)?;

    let p = report.final_params;
    println!(
        "tuned parameters: mu_table={} mu_contact={} block_mass={} contact_stiffness={}",
        p.mu_table, p.mu_contact, p.block_mass, p.contact_stiffness
    );
    println!(
        "final loss {:.6e} after {} iterations{}",
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        report.iterations_used,
        if report.converged { " (converged)" } else { "" },
    );
    println!("artifacts: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn resolve_sibling(base_file: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn cmd_train(params: &Path, gap: &Path, out: &Path) -> CliResult {
    let spec: TrainSpec = load_toml(params)?;
    let gap_spec: GapSpec = load_toml(gap)?;
    spec.geometry.validate().map_err(cfg_err)?;
    spec.params.validate().map_err(cfg_err)?;
    spec.episode.validate().map_err(cfg_err)?;
    spec.ppo.validate().map_err(cfg_err)?;
    if gap_spec.dataset.as_os_str().is_empty() {
        return Err(CliError::Config(
            "gap spec must name the baseline dataset file".to_string(),
        ));
    }
    let dataset_path = resolve_sibling(gap, &gap_spec.dataset);
    let baseline = Dataset::load_jsonl(&dataset_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", dataset_path.display())))?;
    let context = GapContext::with_gap(
        gap_spec.gap_coeff,
        &baseline,
        &gap_spec.coordinates,
        gap_spec.lambda_sr,
        gap_spec.beta,
    )
    .map_err(cfg_err)?;

    let warm = match &spec.warm_start {
        Some(p) => {
            let path = resolve_sibling(params, p);
            let ckpt = PolicyCheckpoint::load(&path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if ckpt.task != spec.episode.task {
                return Err(CliError::Config(format!(
                    "warm-start checkpoint is for task {:?}, spec asks for {:?}",
                    ckpt.task, spec.episode.task
                )));
            }
            Some(ckpt)
        }
        None => None,
    };

    ensure_dir(out)?;
    write_snapshot(out, "params.snapshot.toml", &spec)?;
    write_snapshot(out, "gap.snapshot.toml", &gap_spec)?;

    let model = PushModel::new(spec.geometry.clone()).map_err(cfg_err)?;
    let mut rng = rng_stream(spec.seed, STREAM_TRAIN, 0);
    let warm_ref: Option<(&PolicyNet, &ValueNet)> =
        warm.as_ref().map(|c| (&c.policy, &c.value));
    let (policy, value, log) = train_policy(
        &model,
        &spec.params,
        &context,
        warm_ref,
        &spec.ppo,
        &spec.episode,
        &mut rng,
    )
    .map_err(comp_err)?;

    let ckpt_path = out.join("policy.json");
    PolicyCheckpoint::new(spec.episode.task, policy, value)
        .save(&ckpt_path)
        .map_err(comp_err)?;
    let rows: Vec<Vec<String>> = log
        .updates
        .iter()
        .enumerate()
        .map(|(i, u)| {
            vec![
                i.to_string(),
                u.env_steps.to_string(),
                u.episodes.to_string(),
                fmt_f64(u.mean_episode_return),
                fmt_f64(u.intrinsic_share),
            ]
        })
        .collect();
    write_csv_file(
        &out.join("train_log.csv"),
        &[
            "update",
            "env_steps",
            "episodes",
            "mean_episode_return",
            "intrinsic_share",
        ],
        &rows,
    )?;

    println!(
        "trained {} updates: first return {:.4}, final return {:.4}, mean intrinsic share {:.4}",
        log.updates.len(),
        log.updates
            .iter()
            .find(|u| u.episodes > 0)
            .map_or(0.0, |u| u.mean_episode_return),
        log.final_mean_return(),
        log.mean_intrinsic_share(),
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

fn cmd_collect(
    policy: Option<&Path>,
    proxy: &Path,
    transitions: usize,
    out: &Path,
    strategy: StrategyArg,
) -> CliResult {
    let spec: CollectSpec = load_toml(proxy)?;
    spec.geometry.validate().map_err(cfg_err)?;
    spec.proxy.params.validate().map_err(cfg_err)?;
    spec.episode.validate().map_err(cfg_err)?;
    if transitions == 0 {
        return Err(CliError::Config("-M must be >= 1".to_string()));
    }
    let ckpt = match policy {
        Some(p) => Some(
            PolicyCheckpoint::load(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    if strategy == StrategyArg::Trajectory && ckpt.is_none() {
        return Err(CliError::Config(
            "the trajectory strategy needs --policy".to_string(),
        ));
    }

    let model = PushModel::new(spec.geometry.clone()).map_err(cfg_err)?;
    // Trajectory collection uses the same stream as in-loop deployment, so a
    // matching seed and iteration reproduce an in-run dataset; the synthetic
    // baselines draw from their own stream.
    let purpose = if strategy == StrategyArg::Trajectory {
        STREAM_COLLECT
    } else {
        STREAM_BASELINE
    };
    let mut rng = rng_stream(spec.seed, purpose, spec.iteration);
    let dataset = baseline_sample(
        strategy.into(),
        ckpt.as_ref().map(|c| &c.policy),
        &model,
        &spec.proxy,
        &spec.episode,
        transitions,
        spec.iteration,
        &mut rng,
    )
    .map_err(comp_err)?;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    dataset
        .save_jsonl(out)
        .map_err(|e| CliError::Component(format!("{}: {e}", out.display())))?;
    let snapshot_name = format!(
        "{}.snapshot.toml",
        out.file_name().unwrap_or_default().to_string_lossy()
    );
    write_snapshot(
        out.parent().unwrap_or(Path::new(".")),
        &snapshot_name,
        &spec,
    )?;
    println!(
        "wrote {} transitions ({:?}) to {}",
        dataset.transitions.len(),
        strategy,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Read a CSV produced by this tool back into header + string rows.
fn read_csv_file(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header.iter().position(|h| h == name).ok_or_else(|| {
        CliError::Config(format!("{}: missing column {name}", path.display()))
    })
}

/// Roll `episodes` deterministic (mean-action) episodes in the proxy and
/// record every step's full state for trajectory plots.
fn trace_policy(
    role: &str,
    ckpt: &PolicyCheckpoint,
    cfg: &RsrConfig,
    model: &PushModel,
    episodes: usize,
    rows: &mut Vec<Vec<String>>,
) -> CliResult {
    let mut env = PushEnv::new(
        EnvDynamics::Proxy {
            model,
            proxy: cfg.proxy.clone(),
        },
        cfg.episode.clone(),
    )
    .map_err(cfg_err)?;
    // A fresh stream per policy gives both policies the same episode layouts,
    // so their traces are directly comparable.
    let mut rng = rng_stream(cfg.seed, STREAM_EVAL, 0);
    let a_max = model.geometry.a_max;
    for ep in 0..episodes {
        let mut obs = env.reset(&mut rng);
        let target = env.target();
        let mut push_row = |step: usize, s: &rsr_core::dataset::EnvState| {
            rows.push(vec![
                role.to_string(),
                ep.to_string(),
                step.to_string(),
                fmt_f64(s.block_x),
                fmt_f64(s.block_y),
                fmt_f64(s.block_yaw),
                fmt_f64(s.effector_x),
                fmt_f64(s.effector_y),
                fmt_f64(target[0]),
                fmt_f64(target[1]),
                fmt_f64(target[2]),
            ]);
        };
        push_row(0, env.state());
        for step in 1.. {
            let (mean, _) = ckpt.policy.forward(&obs).map_err(comp_err)?;
            let action = rsr_core::dataset::EnvAction {
                dx: mean[0],
                dy: mean[1],
            }
            .clamped(a_max);
            let res = env.step(action, &mut rng);
            obs = res.obs;
            push_row(step, env.state());
            if res.terminated || res.truncated {
                break;
            }
        }
    }
    Ok(())
}

fn cmd_report(run: &Path) -> CliResult {
    let cfg = RsrConfig::load(&run.join("config.snapshot.toml")).map_err(cfg_err)?;
    let (metrics_header, metrics_rows) = read_csv_file(&run.join("metrics.csv"))?;
    let iterations = metrics_rows.len();
    if iterations == 0 {
        return Err(CliError::Config(format!(
            "{}: metrics.csv has no completed iterations",
            run.display()
        )));
    }

    // The divergence table, printed as-is.
    let report_path = run.join("report.csv");
    let (kl_header, kl_rows) = read_csv_file(&report_path)?;
    println!("divergence per iteration (real vs. untuned replay):");
    println!("  {}", kl_header.join("  "));
    for row in &kl_rows {
        println!("  {}", row.join("  "));
    }

    let report_dir = run.join("report");
    ensure_dir(&report_dir)?;

    // Yaw-error curve: one row per iteration.
    let yaw_col = column(&metrics_header, "eval_mean_yaw_error", &run.join("metrics.csv"))?;
    let iter_col = column(&metrics_header, "iteration", &run.join("metrics.csv"))?;
    let yaw_rows: Vec<Vec<String>> = metrics_rows
        .iter()
        .map(|r| vec![r[iter_col].clone(), r[yaw_col].clone()])
        .collect();
    write_csv_file(
        &report_dir.join("yaw_curve.csv"),
        &["iteration", "eval_mean_yaw_error"],
        &yaw_rows,
    )?;

    // Per-axis error curves: successor-state error of each replay against
    // the real data, per transition, before and after tuning.
    let mut axis_rows = Vec::new();
    for k in 1..=iterations {
        let load = |name: String| -> Result<Dataset, CliError> {
            let p = run.join("datasets").join(name);
            Dataset::load_jsonl(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        };
        let real = load(format!("d_real_{k}.jsonl"))?;
        let pre = load(format!("d_sim_{k}_pre.jsonl"))?;
        let post = load(format!("d_sim_{k}_post.jsonl"))?;
        let err = |a: &Transition, b: &Transition| {
            [
                (a.next_state.block_x - b.next_state.block_x).abs(),
                (a.next_state.block_y - b.next_state.block_y).abs(),
                wrap_angle(a.next_state.block_yaw - b.next_state.block_yaw).abs(),
            ]
        };
        for (i, r) in real.transitions.iter().enumerate() {
            let eu = err(r, &pre.transitions[i]);
            let et = err(r, &post.transitions[i]);
            axis_rows.push(vec![
                k.to_string(),
                i.to_string(),
                fmt_f64(eu[0]),
                fmt_f64(eu[1]),
                fmt_f64(eu[2]),
                fmt_f64(et[0]),
                fmt_f64(et[1]),
                fmt_f64(et[2]),
            ]);
        }
    }
    write_csv_file(
        &report_dir.join("axis_errors.csv"),
        &[
            "iteration",
            "index",
            "err_x_untuned",
            "err_y_untuned",
            "err_yaw_untuned",
            "err_x_tuned",
            "err_y_tuned",
            "err_yaw_tuned",
        ],
        &axis_rows,
    )?;

    // Trajectory traces of the first and final policies on identical
    // episode layouts.
    let model = PushModel::new(cfg.geometry.clone()).map_err(cfg_err)?;
    let load_ckpt = |k: usize| -> Result<PolicyCheckpoint, CliError> {
        let p = run.join("checkpoints").join(format!("policy_{k}.json"));
        PolicyCheckpoint::load(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    };
    let mut trace_rows = Vec::new();
    if iterations > 1 {
        trace_policy("first", &load_ckpt(1)?, &cfg, &model, 3, &mut trace_rows)?;
    }
    trace_policy(
        "final",
        &load_ckpt(iterations)?,
        &cfg,
        &model,
        3,
        &mut trace_rows,
    )?;
    write_csv_file(
        &report_dir.join("traces.csv"),
        &[
            "policy",
            "episode",
            "step",
            "block_x",
            "block_y",
            "block_yaw",
            "effector_x",
            "effector_y",
            "target_x",
            "target_y",
            "target_yaw",
        ],
        &trace_rows,
    )?;

    println!("plot-ready tables: {}", report_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry
// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::Run {
            config,
            out,
            seed,
            deterministic,
        } => cmd_run(&config, &out, seed, deterministic),
        Cmd::Tune { params, data, out } => cmd_tune(&params, &data, &out),
        Cmd::Train { params, gap, out } => cmd_train(&params, &gap, &out),
        Cmd::Collect {
            policy,
            proxy,
            transitions,
            out,
            strategy,
        } => cmd_collect(policy.as_deref(), &proxy, transitions, &out, strategy),
        Cmd::Report { run } => cmd_report(&run),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Component(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
