//! `mmtrack`: synthetic data generation, missing-modality schedules, training,
//! evaluation, ablation tables and routing plots.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmtrack::experiments::{
    ablation_config, ablation_csv, evaluation_videos, expert_ablation, masking_ablation, routing_report, split_seed, training_videos,
    AblationRow, ExpertChoice,
};
use mmtrack::eval::{evaluate, video_name};
use mmtrack::masking::MaskStrategy;
use mmtrack::missing::{MissingKind, ScheduleSpec};
use mmtrack::routing::{analyze_routing, routing_csv, routing_svg};
use mmtrack::synth::{make_dataset, read_manifest, SceneSpec};
use mmtrack::train::{load_run, save_run, train, LogRow, TrainConfig};

#[derive(Parser)]
#[command(name = "mmtrack", version, about = "Two-modality tracking with heterogeneous expert fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with `train/` and `eval/` splits.
    GenData(GenDataArgs),
    /// Write per-video missing-modality schedules for a dataset.
    MakeMissing(MakeMissingArgs),
    /// Train a model and save the run directory.
    Train(TrainArgs),
    /// Evaluate a saved run under a missing-modality schedule.
    Eval(EvalArgs),
    /// Train one model per masking strategy and tabulate full and missing metrics.
    AblateMasking(AblateArgs),
    /// Train one model per expert bank and tabulate full and missing metrics.
    AblateExperts(AblateArgs),
    /// Plot expert selection against missing rate.
    RouteViz(RouteVizArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Scene spec JSON; the default scene when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    videos: usize,
    #[arg(long, default_value_t = 50)]
    eval_videos: usize,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "random")]
    missing: MissingKind,
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
}

#[derive(Args)]
struct MakeMissingArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of a configuration file or the built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Training configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory from `gen-data`; generated in memory when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    strategy: Option<MaskStrategy>,
    /// `hetero` or `homo:WIDTH`.
    #[arg(long)]
    experts: Option<ExpertChoice>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset to evaluate on; the run's own evaluation data when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Schedule seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RouteVizArgs {
    /// Run directory written by `train`; a model is trained when absent.
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "random")]
    missing: MissingKind,
    /// Ascending missing rates to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5")]
    rates: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'a str,
    args: Vec<String>,
    config_hash: Option<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn prepare_out(out: &Path, config: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(c) = config {
        c.write_json(&out.join("config.json"))?;
    }
    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        args: std::env::args().skip(1).collect(),
        config_hash: config.map(TrainConfig::hash),
    };
    write_json(&out.join("meta.json"), &meta)
}

fn resolve_config(args: &ConfigArgs, default: impl FnOnce(u64) -> TrainConfig) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::read_json(path)?,
        None => default(args.seed.unwrap_or(0)),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(d) = &args.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(e) = args.experts {
        e.apply(&mut config.model);
    }
    config.validate()?;
    Ok(config)
}

fn progress(label: &str, total: usize) -> impl FnMut(&LogRow) + '_ {
    let every = (total / 10).max(1);
    move |r: &LogRow| {
        if (r.step + 1) % every == 0 || r.step + 1 == total {
            eprintln!("[{label}] step {}/{total} loss {:.4}", r.step + 1, r.loss.total);
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SceneSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneSpec::default(),
    };
    spec.validate()?;
    prepare_out(&a.out, None)?;
    write_json(&a.out.join("scene.json"), &spec)?;
    make_dataset(&a.out.join("train"), &spec, a.videos, split_seed(a.seed, "train"))?;
    make_dataset(&a.out.join("eval"), &spec, a.eval_videos, split_seed(a.seed, "eval"))?;
    println!("wrote {} train and {} eval videos to {}", a.videos, a.eval_videos, a.out.display());
    Ok(())
}

fn make_missing(a: &MakeMissingArgs) -> Result<()> {
    let root = if a.dataset.join("eval/manifest.json").is_file() {
        a.dataset.join("eval")
    } else {
        a.dataset.clone()
    };
    let manifest = read_manifest(&root)?;
    let spec = ScheduleSpec {
        kind: a.schedule.missing,
        rate: a.schedule.rate,
        seed: a.seed,
    };
    prepare_out(&a.out, None)?;
    write_json(&a.out.join("schedule_spec.json"), &spec)?;
    let mut affected = 0;
    for (i, v) in manifest.videos.iter().enumerate() {
        let s = spec.for_video(i, v.length)?;
        affected += s.affected();
        s.write_json(&a.out.join(format!("{}.json", video_name(i))))?;
    }
    println!("wrote {} schedules ({affected} affected frames) to {}", manifest.videos.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(&a.config, |seed| TrainConfig {
        seed,
        ..TrainConfig::default()
    })?;
    let videos = training_videos(&config)?;
    prepare_out(&a.out, Some(&config))?;
    let outcome = train(&config, &videos, progress("train", config.total_steps()))?;
    save_run(&a.out, &config, &outcome)?;
    println!(
        "trained {} steps in {:.1}s, final loss {:.4}",
        outcome.log.rows.len(),
        outcome.log.wall_clock_s,
        outcome.log.rows.last().map_or(f64::NAN, |r| r.loss.total)
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (mut config, model, store) = load_run(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    let videos = match &a.dataset {
        Some(d) => {
            config.dataset = Some(d.clone());
            evaluation_videos(&config)?
        }
        None => evaluation_videos(&config)?,
    };
    let spec = ScheduleSpec {
        kind: a.schedule.missing,
        rate: a.schedule.rate,
        seed: a.seed,
    };
    prepare_out(&a.out, Some(&config))?;
    let (report, telemetry) = evaluate(&model, &store, &videos, &config.crop(), &spec)?;
    report.write_json(&a.out.join("metrics.json"))?;
    report.write_csv(&a.out.join("metrics.csv"))?;
    write_text(&a.out.join("routing_eval.csv"), &routing_csv(&telemetry))?;
    let table = analyze_routing(&telemetry, &model.fuse_layers()[0].widths())?;
    write_text(&a.out.join("routing_table.csv"), &table.to_csv())?;
    println!(
        "{} r={}: precision {:.4} auc {:.4} over {} frames",
        spec.kind, spec.rate, report.precision_at_20, report.success_auc, report.frames
    );
    Ok(())
}

fn print_rows(rows: &[AblationRow]) {
    for r in rows {
        println!("{:<12} {:<8} P={:.4} AUC={:.4}", r.variant, r.setting, r.precision, r.auc);
    }
}

fn ablate(a: &AblateArgs, experts: bool) -> Result<()> {
    let config = resolve_config(&a.config, ablation_config)?;
    if a.schedule.rate == 0.0 {
        bail!("--rate must be positive for the missing column");
    }
    let missing = ScheduleSpec {
        kind: a.schedule.missing,
        rate: a.schedule.rate,
        seed: config.seed,
    };
    let train_v = training_videos(&config)?;
    let eval_v = evaluation_videos(&config)?;
    prepare_out(&a.out, Some(&config))?;
    let total = config.total_steps();
    let report = |name: &str, r: &LogRow| {
        if (r.step + 1) % (total / 4).max(1) == 0 {
            eprintln!("[{name}] step {}/{total} loss {:.4}", r.step + 1, r.loss.total);
        }
    };
    let (rows, stem) = if experts {
        let choices: Vec<ExpertChoice> = match a.config.experts {
            Some(e) => vec![e],
            None => ExpertChoice::ABLATION.to_vec(),
        };
        (expert_ablation(&config, &choices, &train_v, &eval_v, missing, report)?, "ablate_experts")
    } else {
        (masking_ablation(&config, &train_v, &eval_v, missing, report)?, "ablate_masking")
    };
    write_text(&a.out.join(format!("{stem}.csv")), &ablation_csv(&rows))?;
    write_json(&a.out.join(format!("{stem}.json")), &rows)?;
    print_rows(&rows);
    Ok(())
}

fn route_viz(a: &RouteVizArgs) -> Result<()> {
    let (config, model, store) = match &a.run {
        Some(dir) => {
            let (mut config, model, store) = load_run(dir).with_context(|| format!("loading run {}", dir.display()))?;
            if let Some(d) = &a.config.dataset {
                config.dataset = Some(d.clone());
            }
            (config, model, store)
        }
        None => {
            let config = resolve_config(&a.config, ablation_config)?;
            let videos = training_videos(&config)?;
            let outcome = train(&config, &videos, progress("train", config.total_steps()))?;
            (config, outcome.model, outcome.store)
        }
    };
    let videos = evaluation_videos(&config)?;
    prepare_out(&a.out, Some(&config))?;
    let report = routing_report(&model, &store, &config, &videos, a.missing, &a.rates, config.seed)?;
    write_text(&a.out.join("routing.csv"), &report.table.to_csv())?;
    write_text(&a.out.join("routing.svg"), &routing_svg(&report.table))?;
    write_text(&a.out.join("routing_by_rate.csv"), &report.by_rate_csv())?;
    write_text(&a.out.join("routing_telemetry.csv"), &routing_csv(&report.telemetry))?;
    write_json(&a.out.join("routing_report.json"), &report)?;
    for r in &report.by_rate {
        println!("{} r={}: mean selected width {:.2} (P={:.4})", report.kind, r.rate, r.mean_width, r.precision);
    }
    println!("width increases with missing rate: {}", report.width_increases);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::MakeMissing(a) => make_missing(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AblateMasking(a) => ablate(a, false),
        Command::AblateExperts(a) => ablate(a, true),
        Command::RouteViz(a) => route_viz(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
