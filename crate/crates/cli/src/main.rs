use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use maf::synthetic::{read_datasets, write_dataset, GenConfig, ShiftRange};
use maf::train::ablation::ABLATION_JSON;
use maf::train::eval::write_sweep_csv;
use maf::train::run::{LOSSES_CSV, MODEL_CKPT};
use maf::train::{ablation_grid, default_thresholds, evaluate_map, iou_sweep, train, RunConfig, Variant};
use maf::verify::gradient_suite;

mod plot;

pub const RUN_JSON: &str = "run.json";
pub const EVAL_JSON: &str = "eval.json";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<maf::Error> for Failure {
    fn from(e: maf::Error) -> Self {
        match e {
            maf::Error::Io { .. } | maf::Error::Format { .. } => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "maf", version, about = "Multi-adversarial domain-adaptive detection on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source, foggy target and target-validation splits.
    GenData(GenArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Per-class AP and mAP of a trained run.
    Eval(EvalArgs),
    /// mAP over IoU thresholds 0.50..0.95.
    SweepIou(EvalArgs),
    /// Train and evaluate ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
    /// Render losses.csv or sweep.csv as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_source: usize,
    #[arg(long, default_value_t = 200)]
    n_target: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed fog strength instead of the default range.
    #[arg(long)]
    fog_alpha: Option<f64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file, or a previous run.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the state in `--out` if there is one.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Val,
    Source,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `maf train`.
    #[arg(long)]
    run: PathBuf,
    /// Output directory; defaults to `<run>/eval` or `<run>/sweep`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "source-only,pf,df,maf-star,full,no-wgrl,no-aggregate")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write gradcheck.json and run.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Columns to draw; defaults to every column after the first.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long)]
    title: Option<String>,
}

/// What every command leaves next to its outputs.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    tool: String,
    version: String,
    command: String,
    args: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn write_run(dir: &Path, command: &str, args: serde_json::Value, config: Option<&RunConfig>) -> Outcome {
    let record = RunRecord {
        tool: "maf".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        args,
        config: config.cloned(),
        config_hash: config.map(RunConfig::hash),
    };
    write_json(&dir.join(RUN_JSON), &record)
}

fn read_run(path: &Path) -> Outcome<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn resolve_config(args: &ConfigArgs) -> Outcome<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) if p.extension().is_some_and(|e| e == "json") => read_run(p)?
            .config
            .ok_or_else(|| Failure::Usage(format!("{}: no config recorded", p.display())))?,
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.variant {
        cfg = v.apply(&cfg);
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenArgs) -> Outcome {
    let mut cfg = GenConfig {
        seed: a.seed,
        n_source: a.n_source,
        n_target: a.n_target,
        n_val: a.n_val,
        ..GenConfig::default()
    };
    if let Some(alpha) = a.fog_alpha {
        cfg.shift = ShiftRange::with_fog_alpha(alpha);
    }
    let manifest = write_dataset(&a.out, &cfg)?;
    let args = serde_json::json!({
        "out": a.out,
        "n_source": a.n_source,
        "n_target": a.n_target,
        "n_val": a.n_val,
        "seed": a.seed,
        "fog_alpha": a.fog_alpha,
    });
    write_run(&a.out, "gen-data", args, None)?;
    println!(
        "wrote {} source, {} target, {} validation images to {}",
        a.n_source,
        a.n_target,
        a.n_val,
        a.out.display()
    );
    println!("images sha256 {}", manifest.images_sha256);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = read_datasets(&a.data)?;
    create_dir(&a.out)?;
    let args = serde_json::json!({
        "data": a.data,
        "out": a.out,
        "config": a.cfg.config,
        "variant": a.cfg.variant,
        "set": a.cfg.overrides,
        "seed": a.seed,
        "resume": a.resume,
    });
    write_run(&a.out, "train", args, Some(&cfg))?;
    let (_, summary) = train::<f64>(&cfg, &data.source, &data.target, &a.out, a.resume)?;
    let l = summary.last;
    println!(
        "{} iterations: l_det {:.4} l_t {:.4} l_maf {:.4}",
        summary.iters, l.l_det, l.l_t, l.l_maf
    );
    println!("checkpoint {}", a.out.join(MODEL_CKPT).display());
    println!("losses {}", a.out.join(LOSSES_CSV).display());
    Ok(())
}

fn load_run(run: &Path) -> Outcome<(RunConfig, maf::Model)> {
    let cfg = read_run(&run.join(RUN_JSON))?
        .config
        .ok_or_else(|| Failure::Usage(format!("{}: not a training run", run.display())))?;
    let model = maf::Model::load(&cfg, &run.join(MODEL_CKPT))?;
    Ok((cfg, model))
}

fn eval_samples(data: &Path, split: Split) -> Outcome<Vec<maf::synthetic::Sample>> {
    let d = read_datasets(data)?;
    Ok(match split {
        Split::Val => d.val,
        Split::Source => d.source,
    })
}

fn eval_args_json(a: &EvalArgs, out: &Path) -> serde_json::Value {
    serde_json::json!({
        "data": a.data,
        "run": a.run,
        "out": out,
        "split": a.split,
        "iou": a.iou,
    })
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let (cfg, model) = load_run(&a.run)?;
    let samples = eval_samples(&a.data, a.split)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval"));
    create_dir(&out)?;
    write_run(&out, "eval", eval_args_json(&a, &out), Some(&cfg))?;
    let r = evaluate_map(&model, &samples, a.iou, cfg.score_thr)?;
    for c in &r.per_class {
        match c.ap {
            Some(ap) => println!("class {} AP {:.4} ({} gt, {} det)", c.class, ap, c.n_gt, c.n_det),
            None => println!("class {} AP n/a (no ground truth)", c.class),
        }
    }
    println!("mAP@{} {:.4}", a.iou, r.map);
    write_json(&out.join(EVAL_JSON), &r)
}

fn sweep_cmd(a: EvalArgs) -> Outcome {
    let (cfg, model) = load_run(&a.run)?;
    let samples = eval_samples(&a.data, a.split)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("sweep"));
    create_dir(&out)?;
    write_run(&out, "sweep-iou", eval_args_json(&a, &out), Some(&cfg))?;
    let rows = iou_sweep(&model, &samples, &default_thresholds(), cfg.score_thr)?;
    for (t, m) in &rows {
        println!("{t:.2} {m:.4}");
    }
    write_sweep_csv(&out.join(SWEEP_CSV), &rows)?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let base = resolve_config(&a.cfg)?;
    let data = read_datasets(&a.data)?;
    create_dir(&a.out)?;
    let args = serde_json::json!({
        "data": a.data,
        "out": a.out,
        "config": a.cfg.config,
        "variant": a.cfg.variant,
        "set": a.cfg.overrides,
        "variants": a.variants,
        "seeds": a.seeds,
    });
    write_run(&a.out, "ablate", args, Some(&base))?;
    let report = ablation_grid(&base, &data, &a.variants, &a.seeds, &a.out)?;
    for v in &a.variants {
        if let Some(e) = report.get(v.name()) {
            let seeds: Vec<String> = e.per_seed.iter().map(|m| format!("{m:.4}")).collect();
            println!("{:<14} mAP@0.5 {:.4}  [{}]", v.name(), e.map50, seeds.join(", "));
        }
    }
    println!("report {}", a.out.join(ABLATION_JSON).display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let suite = gradient_suite(a.seed)?;
    let mut failed = Vec::new();
    for e in &suite {
        let verdict = if e.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<22} max rel err {:.3e} (tolerance {:.0e}, {} elements)",
            e.name, e.max_rel_error, e.tolerance, e.checked
        );
        if !e.passed() {
            failed.push(e.name);
        }
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_run(out, "gradcheck", serde_json::json!({ "seed": a.seed, "out": out }), None)?;
        let rows: Vec<_> = suite
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "max_rel_error": e.max_rel_error,
                    "tolerance": e.tolerance,
                    "checked": e.checked,
                    "passed": e.passed(),
                })
            })
            .collect();
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn plot_cmd(a: PlotArgs) -> Outcome {
    let table = plot::read_table(&a.input)?;
    let title = a
        .title
        .unwrap_or_else(|| a.input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    let svg = plot::render(&table, &a.columns, &title)?;
    fs::write(&a.out, svg).map_err(|e| Failure::Io(format!("{}: {e}", a.out.display())))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::SweepIou(a) => sweep_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
