//! `hitlseg` command line. [`run`] parses arguments, resolves the layered
//! configuration and dispatches to a subcommand; it returns the process exit
//! code (0 success, 1 usage or validation error, 2 runtime failure).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hitlseg::data::{generate_dataset, load_dataset, write_dataset, Dataset};
use hitlseg::eval::{
    ablation_run, global_features, linear_probe, mean_dice, predict_dataset, stratified_report, ProbeOptions, Variant,
};
use hitlseg::gradcheck::{model_check, op_suite};
use hitlseg::model::{load_checkpoint, save_checkpoint, ModelParams};
use hitlseg::train::train;
use hitlseg::Error;
use serde_json::json;

mod config;

pub use config::{echo, flatten, unflatten, AblateConfig, DataConfig, EvalConfig, GradcheckConfig, Resolver, RunConfig, ServeConfig};

/// Gradient-check tolerances reported by `gradcheck`.
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "hitlseg", version, about = "Uncertainty-weighted, click-refinable segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test corpus.
    Datagen {
        #[command(flatten)]
        shared: Shared,
        /// Output directory (receives train/, test/ and config.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes logs, per-epoch checkpoints and model.bcvl.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split with stratified reports.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Oracle corrective clicks per sample (eval.clicks) [default: 0]
        #[arg(long)]
        clicks: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train baseline, +weighting, +hitl and full over several seeds.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated training seeds (ablate.seeds) [default: 1,2,3]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck {
        #[command(flatten)]
        shared: Shared,
        /// Optional directory for config.json and gradcheck.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the predict/refine HTTP API over a frozen checkpoint.
    Serve {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bind address (serve.host) [default: 127.0.0.1]
        #[arg(long)]
        host: Option<String>,
        /// Port (serve.port) [default: 8765]
        #[arg(long)]
        port: Option<u16>,
        /// Directory of static UI files served from / (serve.static_dir)
        #[arg(long)]
        static_dir: Option<String>,
    },
}

#[derive(Debug, Args)]
struct Shared {
    /// JSON config file with flat dotted keys (see README)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed: data.seed for datagen and ablate, train.seed otherwise [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Square image side (data.size) [default: 64]
    #[arg(long)]
    size: Option<usize>,
    /// Training epochs (train.epochs) [default: 15]
    #[arg(long)]
    epochs: Option<usize>,
    /// Semantic share of the joint uncertainty (train.uncertainty.beta_vl) [default: 0.5]
    #[arg(long)]
    beta_vl: Option<f64>,
    /// Sample-weight temperature (train.uncertainty.lambda_u) [default: 1.0]
    #[arg(long)]
    lambda_u: Option<f64>,
    /// Hard-set ratio (train.r) [default: 0.3]
    #[arg(long)]
    r: Option<f64>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Directory written by `datagen`; generated in memory from data.* when absent
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

enum Failure {
    Usage(String),
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

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Entry point shared by the binary and the tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", msg.lines().next().unwrap_or_default());
            2
        }
    }
}

enum SeedTarget {
    Data,
    Train,
}

fn resolve(shared: &Shared, seed_target: SeedTarget, extra: &[(&str, serde_json::Value)]) -> Outcome<RunConfig> {
    let mut r = Resolver::new();
    let usage = Failure::Usage;
    if let Some(path) = &shared.config {
        r.merge_file(path).map_err(usage)?;
    }
    for pair in &shared.set {
        r.set_pair(pair).map_err(usage)?;
    }
    let seed_key = match seed_target {
        SeedTarget::Data => "data.seed",
        SeedTarget::Train => "train.seed",
    };
    let flags = [
        (seed_key, shared.seed.map(|v| json!(v))),
        ("data.size", shared.size.map(|v| json!(v))),
        ("train.epochs", shared.epochs.map(|v| json!(v))),
        ("train.uncertainty.beta_vl", shared.beta_vl.map(|v| json!(v))),
        ("train.uncertainty.lambda_u", shared.lambda_u.map(|v| json!(v))),
        ("train.r", shared.r.map(|v| json!(v))),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            r.set(k, v).map_err(usage)?;
        }
    }
    for (k, v) in extra {
        r.set(k, v.clone()).map_err(usage)?;
    }
    r.resolve().map_err(usage)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Outcome {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(out.join("config.json"), echo(cfg))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn datasets(arg: &DataArg, cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let (mut train, mut test) = match &arg.data {
        Some(dir) => (load_dataset(&dir.join("train/manifest.json"))?, load_dataset(&dir.join("test/manifest.json"))?),
        None => generate_dataset(&cfg.data.profile(), cfg.data.seed, cfg.data.test_per_concept)?,
    };
    train.regroup(cfg.data.thresholds());
    test.regroup(cfg.data.thresholds());
    Ok((train, test))
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Datagen { shared, out } => {
            let cfg = resolve(&shared, SeedTarget::Data, &[])?;
            let (train, test) = generate_dataset(&cfg.data.profile(), cfg.data.seed, cfg.data.test_per_concept)?;
            prepare_out(&out, &cfg)?;
            write_dataset(&train, &out.join("train"))?;
            write_dataset(&test, &out.join("test"))?;
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
            Ok(())
        }
        Command::Train { shared, data, out } => {
            let cfg = resolve(&shared, SeedTarget::Train, &[])?;
            let (train_set, test) = datasets(&data, &cfg)?;
            prepare_out(&out, &cfg)?;
            let mut eval = |p: &ModelParams<f32>| -> hitlseg::Result<f64> {
                let d = mean_dice(&predict_dataset(p, &test, 0, cfg.train.seed)?);
                eprintln!("epoch done: test dice {d:.4}");
                Ok(d)
            };
            let eval_fn: Option<&mut dyn FnMut(&ModelParams<f32>) -> hitlseg::Result<f64>> =
                if test.is_empty() { None } else { Some(&mut eval) };
            let outcome = train::<f32>(&cfg.train, &train_set, Some(&out), eval_fn)?;
            save_checkpoint(&outcome.params, &out.join("model.bcvl"))?;
            for e in &outcome.log.epochs {
                let dice = e.eval_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into());
                println!("epoch {:>3}  loss {:.4}  aur {:.4}  hitl {:.4}  vlm {:.4}  test_dice {dice}", e.epoch, e.mean_loss, e.mean_l_aur, e.mean_l_hitl, e.mean_l_vlm);
            }
            println!("checkpoint {}", out.join("model.bcvl").display());
            Ok(())
        }
        Command::Eval { shared, data, checkpoint, clicks, out } => {
            let extra: Vec<(&str, serde_json::Value)> = clicks.map(|c| ("eval.clicks", json!(c))).into_iter().collect();
            let cfg = resolve(&shared, SeedTarget::Train, &extra)?;
            let params: ModelParams<f32> = load_checkpoint(&checkpoint)?;
            let (train_set, test) = datasets(&data, &cfg)?;
            let groups = test.group_map(cfg.data.thresholds());
            let preds = predict_dataset(&params, &test, cfg.eval.clicks, cfg.train.seed)?;
            let report = stratified_report(&preds, &test, &groups)?;
            prepare_out(&out, &cfg)?;
            write_json(&out.join("report.json"), &report)?;
            std::fs::write(out.join("report.csv"), report.to_csv())?;
            let mut lines = String::new();
            for p in &preds {
                let _ = writeln!(lines, "{}", serde_json::to_string(p).map_err(|e| Failure::Runtime(e.to_string()))?);
            }
            std::fs::write(out.join("predictions.jsonl"), lines)?;
            let train_x = global_features(&params, &train_set)?;
            let test_x = global_features(&params, &test)?;
            let labels = |d: &Dataset| d.samples.iter().map(|s| s.concept_id).collect::<Vec<_>>();
            match linear_probe(&train_x, &labels(&train_set), &test_x, &labels(&test), &groups, ProbeOptions { seed: cfg.train.seed, ..Default::default() }) {
                Ok(probe) => write_json(&out.join("probe.json"), &probe)?,
                Err(e) => eprintln!("linear probe skipped: {e}"),
            }
            println!("overall dice {:.4} iou {:.4} (n={})", report.overall.dice, report.overall.iou, report.overall.n);
            for (g, c) in &report.by_group {
                println!("  {g:<7} dice {:.4} iou {:.4} (n={})", c.dice, c.iou, c.n);
            }
            println!("gaps: group {:.4} modality {:.4} attribute {:.4}", report.gaps.group, report.gaps.modality, report.gaps.attribute);
            Ok(())
        }
        Command::Ablate { shared, data, seeds, out } => {
            let extra: Vec<(&str, serde_json::Value)> = seeds.map(|s| ("ablate.seeds", json!(s))).into_iter().collect();
            let cfg = resolve(&shared, SeedTarget::Data, &extra)?;
            if cfg.ablate.seeds.len() < 2 {
                return Err(Failure::Usage(format!("ablation needs at least 2 seeds, got {}", cfg.ablate.seeds.len())));
            }
            let (train_set, test) = datasets(&data, &cfg)?;
            let groups = test.group_map(cfg.data.thresholds());
            prepare_out(&out, &cfg)?;
            let table = ablation_run(&cfg.train, &train_set, &test, &groups, &cfg.ablate.seeds, |v, s| {
                eprintln!("training {} seed {s}", v.name());
            })?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            write_json(&out.join("ablation.json"), &table)?;
            for v in Variant::ALL {
                if let Some(row) = table.row(v) {
                    match &row.error {
                        Some(e) => println!("{:<11} failed: {e}", v.name()),
                        None => println!(
                            "{:<11} dice {:.4}  head-tail gap {:.4}  modality gap {:.4}  attribute gap {:.4}",
                            v.name(),
                            row.overall_dice,
                            row.head_tail_gap,
                            row.modality_gap,
                            row.attribute_gap
                        ),
                    }
                }
            }
            Ok(())
        }
        Command::Gradcheck { shared, out } => {
            let cfg = resolve(&shared, SeedTarget::Train, &[])?;
            if let Some(out) = &out {
                prepare_out(out, &cfg)?;
            }
            let g = &cfg.gradcheck;
            let ops = op_suite(g.seeds, g.step)?;
            let mut worst_model = 0.0f64;
            for seed in 0..g.seeds {
                worst_model = worst_model.max(model_check(seed, g.model_entries)?);
            }
            let mut failed = Vec::new();
            for op in &ops {
                let ok = op.max_rel_error < OP_TOLERANCE;
                println!("{:<20} {:.3e} {}", op.name, op.max_rel_error, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(op.name.clone());
                }
            }
            let model_ok = worst_model < MODEL_TOLERANCE;
            println!("{:<20} {:.3e} {}", "full_model", worst_model, if model_ok { "ok" } else { "FAIL" });
            if !model_ok {
                failed.push("full_model".into());
            }
            if let Some(out) = &out {
                let ops_json: serde_json::Map<String, serde_json::Value> =
                    ops.iter().map(|o| (o.name.clone(), json!(o.max_rel_error))).collect();
                write_json(&out.join("gradcheck.json"), &json!({ "seeds": g.seeds, "ops": ops_json, "full_model": worst_model }))?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Serve { shared, data, checkpoint, host, port, static_dir } => {
            let mut extra = Vec::new();
            if let Some(h) = host {
                extra.push(("serve.host", json!(h)));
            }
            if let Some(p) = port {
                extra.push(("serve.port", json!(p)));
            }
            if let Some(d) = static_dir {
                extra.push(("serve.static_dir", json!(d)));
            }
            let cfg = resolve(&shared, SeedTarget::Train, &extra)?;
            let params: ModelParams<f32> = load_checkpoint(&checkpoint)?;
            let (_, test) = datasets(&data, &cfg)?;
            serve(params, test, &cfg.serve)
        }
    }
}

fn serve(params: ModelParams<f32>, test: Dataset, cfg: &ServeConfig) -> Outcome {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
    let options = hitlseg_server::ServerOptions {
        session_ttl: Duration::from_secs(cfg.session_ttl_secs),
        static_dir: cfg.static_dir.as_ref().map(PathBuf::from),
    };
    let state = Arc::new(hitlseg_server::AppState::new(params, test, options));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port))
            .await
            .map_err(|e| Failure::Runtime(format!("cannot bind {}:{}: {e}", cfg.host, cfg.port)))?;
        println!("listening on http://{}", listener.local_addr()?);
        hitlseg_server::serve(state, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
