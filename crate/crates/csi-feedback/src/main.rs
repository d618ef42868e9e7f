//! Command-line front end: training, evaluation, CSIT baselines, and
//! tradeoff sweeps with CSV artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use csi_feedback::config::Config;
use csi_feedback::error::{Error, Result};
use csi_feedback::trainer::{
    baseline_sum_rate, evaluate, load_checkpoint, save_checkpoint, train, BaselineMethod,
    EvalMetrics, StepMetrics, TrainedModel,
};

/// Environment variable overriding every `--out` directory.
const OUT_DIR_ENV: &str = "CSIFB_OUT_DIR";

const DEFAULT_LAMBDAS: &str = "0.5,2,8";
const DEFAULT_GAMMAS: &str = "1,4,16";
const DEFAULT_TEST_CHANNELS: usize = 10_000;

#[derive(Parser)]
#[command(
    name = "csifb",
    about = "End-to-end learned CSI feedback: train, evaluate, baseline, sweep",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a seeded test set.
    Eval(EvalArgs),
    /// Evaluate a perfect-CSI baseline precoder on a seeded test set.
    Baseline(BaselineArgs),
    /// Train/evaluate a grid of tradeoff weights and export plot data.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the rate weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the distortion weight γ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Override both system and training RNG seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint and metrics log.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    testset_seed: u64,
    /// Test-set size in channel realizations.
    #[arg(long, default_value_t = DEFAULT_TEST_CHANNELS)]
    channels: usize,
    /// Output directory for the CSV row (also printed to stdout).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    config: PathBuf,
    /// One of mrt, zf, random.
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 1000)]
    testset_seed: u64,
    #[arg(long, default_value_t = DEFAULT_TEST_CHANNELS)]
    channels: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated λ grid (precoding-oriented points, γ = 0).
    #[arg(long, default_value = DEFAULT_LAMBDAS)]
    lambdas: String,
    /// Comma-separated γ grid (reconstruction-oriented points, λ = 0).
    #[arg(long, default_value = DEFAULT_GAMMAS)]
    gammas: String,
    #[arg(long, default_value_t = 1000)]
    testset_seed: u64,
    #[arg(long, default_value_t = DEFAULT_TEST_CHANNELS)]
    channels: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success exits
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Apply the output-directory environment override and create the directory.
fn resolve_out_dir(cli_out: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os(OUT_DIR_ENV) {
        Some(v) => PathBuf::from(v),
        None => cli_out.to_path_buf(),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Output-directory-independent checkpoint identifier, so reruns into
/// different directories stay byte-identical.
fn checkpoint_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// 17-significant-digit float, or the not-applicable marker.
fn fmt_f64(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.16e}"),
        None => "NA".to_string(),
    }
}

const RESULT_HEADER: &str =
    "mode,lambda,gamma,est_bits_per_user,real_bits_per_user,sum_rate,relaxed_sum_rate,mse,mrt_on_estimate_rate,zf_on_estimate_rate,seed,checkpoint,error";

struct ResultRow {
    mode: String,
    lambda: Option<f64>,
    gamma: Option<f64>,
    metrics: Option<EvalMetrics>,
    baseline_rate: Option<f64>,
    seed: Option<u64>,
    checkpoint: Option<String>,
    error: Option<String>,
}

impl ResultRow {
    fn to_csv(&self) -> String {
        let m = self.metrics.as_ref();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            fmt_f64(self.lambda),
            fmt_f64(self.gamma),
            fmt_f64(m.map(|m| m.estimated_bits_per_user)),
            fmt_f64(m.map(|m| m.realized_bits_per_user)),
            fmt_f64(m.map(|m| m.sum_rate).or(self.baseline_rate)),
            fmt_f64(m.map(|m| m.relaxed_sum_rate)),
            fmt_f64(m.and_then(|m| m.mse)),
            fmt_f64(m.and_then(|m| m.mrt_on_estimate_rate)),
            fmt_f64(m.and_then(|m| m.zf_on_estimate_rate)),
            self.seed.map(|s| s.to_string()).unwrap_or_else(|| "NA".into()),
            self.checkpoint.as_deref().unwrap_or("NA"),
            self.error.as_deref().unwrap_or(""),
        );
        s
    }
}

fn load_config_with_overrides(
    path: &Path,
    lambda: Option<f64>,
    gamma: Option<f64>,
    seed: Option<u64>,
) -> Result<Config> {
    let mut config = Config::load(path)?;
    if let Some(l) = lambda {
        config.training.lambda = l;
    }
    if let Some(g) = gamma {
        config.training.gamma = g;
    }
    if let Some(s) = seed {
        config.system.rng_seed = s;
        config.training.rng_seed = s;
    }
    config.training.validate()?;
    Ok(config)
}

fn train_to_dir(config: &Config, dir: &Path, tag: &str) -> Result<(TrainedModel, PathBuf)> {
    let log_path = dir.join(format!("metrics_{tag}.csv"));
    let mut log = String::from("step,overhead,rate,distortion,total,grad_norm\n");
    let mut on_metrics = |m: &StepMetrics| {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{}",
            m.step,
            fmt_f64(Some(m.loss.overhead)),
            fmt_f64(Some(m.loss.rate)),
            fmt_f64(Some(m.loss.distortion)),
            fmt_f64(Some(m.loss.total)),
            fmt_f64(Some(m.grad_norm)),
        );
    };
    let tm = train(config, Some(&mut on_metrics))?;
    std::fs::write(&log_path, log)?;
    let ckpt_path = match &config.training.checkpoint_path {
        Some(p) => PathBuf::from(p),
        None => dir.join(format!("model_{tag}.ckpt")),
    };
    save_checkpoint(&tm, &ckpt_path)?;
    Ok((tm, ckpt_path))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = load_config_with_overrides(&a.config, a.lambda, a.gamma, a.seed)?;
    let dir = resolve_out_dir(&a.out)?;
    let tag = format!(
        "lambda{}_gamma{}_seed{}",
        config.training.lambda, config.training.gamma, config.training.rng_seed
    );
    let (_, ckpt_path) = train_to_dir(&config, &dir, &tag)?;
    println!("checkpoint written to {}", ckpt_path.display());
    println!("metrics log written to {}", dir.join(format!("metrics_{tag}.csv")).display());
    Ok(())
}

fn eval_checkpoint(
    checkpoint: &Path,
    testset_seed: u64,
    channels: usize,
) -> Result<(ResultRow, Config)> {
    let mut tm = load_checkpoint(checkpoint)?;
    let recon = tm.config.training.gamma > 0.0;
    let metrics = evaluate(&mut tm.model, testset_seed, channels, recon)?;
    let mode = if recon { "reconstruction" } else { "precoding" };
    let row = ResultRow {
        mode: mode.into(),
        lambda: Some(tm.config.training.lambda),
        gamma: Some(tm.config.training.gamma),
        metrics: Some(metrics),
        baseline_rate: None,
        seed: Some(tm.config.training.rng_seed),
        checkpoint: Some(checkpoint_id(checkpoint)),
        error: None,
    };
    Ok((row, tm.config))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let dir = resolve_out_dir(&a.out)?;
    let (row, _) = eval_checkpoint(&a.checkpoint, a.testset_seed, a.channels)?;
    let text = format!("{RESULT_HEADER}\n{}\n", row.to_csv());
    print!("{text}");
    std::fs::write(dir.join("eval.csv"), text)?;
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let config = Config::load(&a.config)?;
    let method: BaselineMethod = a.method.parse()?;
    let rate = baseline_sum_rate(&config.system, method, a.testset_seed, a.channels)?;
    let row = ResultRow {
        mode: format!("csit-{}", a.method),
        lambda: None,
        gamma: None,
        metrics: None,
        baseline_rate: Some(rate),
        seed: Some(a.testset_seed),
        checkpoint: None,
        error: None,
    };
    println!("{RESULT_HEADER}");
    println!("{}", row.to_csv());
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad grid value {v:?}")))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::Usage("sweep grid must be non-empty".into()));
    }
    if vals.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Usage("grid values must be finite and >= 0".into()));
    }
    Ok(vals)
}

/// (bits, rate) points not dominated by any other: no point with bits ≤ and
/// rate ≥ (one strictly).
fn pareto_filter(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .iter()
        .filter(|&&(b, r)| {
            !points.iter().any(|&(ob, or)| {
                (ob <= b && or >= r) && (ob < b || or > r)
            })
        })
        .copied()
        .collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = Config::load(&a.config)?;
    let lambdas = parse_grid(&a.lambdas)?;
    let gammas = parse_grid(&a.gammas)?;
    let dir = resolve_out_dir(&a.out)?;

    let mut rows: Vec<ResultRow> = Vec::new();
    let point = |lambda: f64, gamma: f64, idx: usize| -> ResultRow {
        let mode = if gamma > 0.0 { "reconstruction" } else { "precoding" };
        let mut config = base.clone();
        config.training.lambda = lambda;
        config.training.gamma = gamma;
        // independent but reproducible streams per sweep point
        config.training.rng_seed = base.training.rng_seed.wrapping_add(idx as u64);
        config.system.rng_seed = base.system.rng_seed.wrapping_add(idx as u64);
        config.training.checkpoint_path = None;
        let tag = format!("{mode}_l{lambda}_g{gamma}");
        let trained = train_to_dir(&config, &dir, &tag);
        let outcome = trained.and_then(|(mut tm, ckpt)| {
            let metrics = evaluate(
                &mut tm.model,
                a.testset_seed,
                a.channels,
                gamma > 0.0,
            )?;
            Ok((metrics, ckpt))
        });
        match outcome {
            Ok((metrics, ckpt)) => ResultRow {
                mode: mode.into(),
                lambda: Some(lambda),
                gamma: Some(gamma),
                metrics: Some(metrics),
                baseline_rate: None,
                seed: Some(config.training.rng_seed),
                checkpoint: Some(checkpoint_id(&ckpt)),
                error: None,
            },
            Err(e) => ResultRow {
                mode: mode.into(),
                lambda: Some(lambda),
                gamma: Some(gamma),
                metrics: None,
                baseline_rate: None,
                seed: Some(config.training.rng_seed),
                checkpoint: None,
                error: Some(e.to_string().replace(',', ";")),
            },
        }
    };
    let mut idx = 0usize;
    for &lambda in &lambdas {
        eprintln!("sweep point {idx}: precoding, lambda = {lambda}");
        rows.push(point(lambda, 0.0, idx));
        idx += 1;
    }
    for &gamma in &gammas {
        eprintln!("sweep point {idx}: reconstruction, gamma = {gamma}");
        rows.push(point(0.0, gamma, idx));
        idx += 1;
    }

    // CSIT reference rows on the same test set
    for method in ["mrt", "zf", "random"] {
        let parsed: BaselineMethod = method.parse()?;
        let row = match baseline_sum_rate(&base.system, parsed, a.testset_seed, a.channels) {
            Ok(rate) => ResultRow {
                mode: format!("csit-{method}"),
                lambda: None,
                gamma: None,
                metrics: None,
                baseline_rate: Some(rate),
                seed: Some(a.testset_seed),
                checkpoint: None,
                error: None,
            },
            Err(e) => ResultRow {
                mode: format!("csit-{method}"),
                lambda: None,
                gamma: None,
                metrics: None,
                baseline_rate: None,
                seed: Some(a.testset_seed),
                checkpoint: None,
                error: Some(e.to_string().replace(',', ";")),
            },
        };
        rows.push(row);
    }

    let mut sweep_csv = String::from(RESULT_HEADER);
    sweep_csv.push('\n');
    for row in &rows {
        sweep_csv.push_str(&row.to_csv());
        sweep_csv.push('\n');
    }
    std::fs::write(dir.join("sweep.csv"), &sweep_csv)?;

    // plot data: x = realized bits/user, y = sum rate, Pareto-filtered per
    // series; CSIT rows carry no overhead coordinate
    let mut plot = String::from("series,bits_per_user,sum_rate\n");
    let series = |name: &str, pts: Vec<(f64, f64)>, out: &mut String| {
        let mut keep = pareto_filter(&pts);
        keep.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (b, r) in keep {
            let _ = writeln!(out, "{name},{},{}", fmt_f64(Some(b)), fmt_f64(Some(r)));
        }
    };
    let collect = |f: &dyn Fn(&ResultRow, &EvalMetrics) -> Option<(f64, f64)>| {
        rows.iter()
            .filter_map(|r| r.metrics.as_ref().and_then(|m| f(r, m)))
            .collect::<Vec<_>>()
    };
    series(
        "precoding",
        collect(&|r, m| {
            (r.mode == "precoding").then(|| (m.realized_bits_per_user, m.sum_rate))
        }),
        &mut plot,
    );
    series(
        "reconstruction+mrt",
        collect(&|r, m| {
            m.mrt_on_estimate_rate
                .filter(|_| r.mode == "reconstruction")
                .map(|rate| (m.realized_bits_per_user, rate))
        }),
        &mut plot,
    );
    series(
        "reconstruction+zf",
        collect(&|r, m| {
            m.zf_on_estimate_rate
                .filter(|_| r.mode == "reconstruction")
                .map(|rate| (m.realized_bits_per_user, rate))
        }),
        &mut plot,
    );
    for row in &rows {
        if let (true, Some(rate)) = (row.mode.starts_with("csit-"), row.baseline_rate) {
            let _ = writeln!(plot, "{},NA,{}", row.mode, fmt_f64(Some(rate)));
        }
    }
    std::fs::write(dir.join("plot_data.csv"), &plot)?;

    println!("sweep results written to {}", dir.join("sweep.csv").display());
    println!("plot data written to {}", dir.join("plot_data.csv").display());
    Ok(())
}
