//! Command-line front end: `gen-data`, `train`, `eval`, `report`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport, Noise, PgdConfig, DEFAULT_BOX_RATIO};
use crate::model::{HeadKind, ProtoNet};
use crate::synthdata::{generate, Dataset, GeneratorConfig};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "partproto", version, about = "Part-prototype networks with consistency and stability metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic part-annotated dataset.
    GenData(GenDataArgs),
    /// Train a model; writes per-epoch checkpoints, a CSV log and run.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint into a metrics report.
    Eval(EvalArgs),
    /// Average metrics reports per method into a benchmark table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub parts: usize,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 30)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub occlusion: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Sa,
    Fc,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Gauss,
    Pgd,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = HeadArg::Sa)]
    pub head: HeadArg,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub sdfa: Switch,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    /// Warm-up epochs (capped at `--epochs`).
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Last-layer fine-tuning steps after training (fully connected head only).
    #[arg(long, default_value_t = 0)]
    pub finetune_steps: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the JSON report here instead of printing text to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the input perturbations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate only this noise kind (default: both).
    #[arg(long, value_enum)]
    pub noise: Option<NoiseArg>,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.8)]
    pub mu: f64,
    #[arg(long, default_value_t = DEFAULT_BOX_RATIO)]
    pub box_ratio: f64,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics report JSON files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Write the CSV table here (the text table still goes to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Written next to the checkpoints by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub dataset: PathBuf,
    pub train: TrainConfig,
    pub finetune_steps: usize,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
    pub final_test_accuracy: Option<f64>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::AttributeSpace { .. } => EXIT_CONFIG,
        Error::Data { .. } | Error::Io { .. } | Error::Json(_) | Error::Image(_) | Error::Checkpoint(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::Shape(_) | Error::NonScalarLoss(_) | Error::MissingGrad(_) => EXIT_NUMERIC,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Run a parsed command and return what it prints on stdout.
pub fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<String> {
    let cfg = GeneratorConfig {
        classes: a.classes,
        parts: a.parts,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        image_size: a.image_size,
        seed: a.seed,
        occlusion_prob: a.occlusion,
    };
    let data = generate(&cfg)?;
    let manifest = data.write(&a.out)?;
    let n: usize = manifest.splits.iter().map(|s| s.items.len()).sum();
    Ok(format!("wrote {n} images to {}\n", a.out.display()))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let dataset = Dataset::load(&manifest_path(&a.dataset))?;
    let head = match a.head {
        HeadArg::Sa => HeadKind::Sa,
        HeadArg::Fc => HeadKind::Fc,
    };
    if a.finetune_steps > 0 && head != HeadKind::Fc {
        return Err(Error::InvalidConfig("--finetune-steps needs --head fc".into()));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        warmup_epochs: a.warmup.min(a.epochs),
        seed: a.seed,
        head,
        sdfa: a.sdfa == Switch::On,
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let outcome = trainer::train(&dataset, &cfg)?;
    let mut names = Vec::with_capacity(outcome.checkpoints.len());
    for (i, bytes) in outcome.checkpoints.iter().enumerate() {
        let name = format!("epoch_{:03}.ckpt", i + 1);
        write_file(&a.out.join(&name), bytes)?;
        names.push(name);
    }
    let mut model = outcome.model.clone();
    let mut accuracy = outcome.log.last().map(|r| r.test_acc);
    if a.finetune_steps > 0 {
        model = trainer::finetune_fc_last_layer(&model, &dataset, a.finetune_steps)?.model;
        model.provenance["finetune_steps"] = serde_json::json!(a.finetune_steps);
        accuracy = Some(trainer::accuracy(&model, dataset.test())?);
    }
    model.save(&a.out.join("model.ckpt"))?;
    trainer::write_log(&a.out.join("train_log.csv"), &outcome)?;
    let record = RunRecord {
        tool_version: crate::TOOL_VERSION.to_string(),
        dataset: a.dataset.clone(),
        train: cfg,
        finetune_steps: a.finetune_steps,
        checkpoints: names,
        final_checkpoint: "model.ckpt".into(),
        final_test_accuracy: accuracy,
    };
    write_file(&a.out.join("run.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(format!("{}wrote {}\n", outcome.log_csv(), a.out.display()))
}

pub fn eval_config(a: &EvalArgs) -> MetricsConfig {
    let gauss = Noise::Gauss { sigma: a.sigma };
    let pgd = Noise::Pgd(PgdConfig::with_eps(a.eps));
    MetricsConfig {
        mu: a.mu,
        box_ratio: a.box_ratio,
        noises: match a.noise {
            None => vec![gauss, pgd],
            Some(NoiseArg::Gauss) => vec![gauss],
            Some(NoiseArg::Pgd) => vec![pgd],
        },
        seed: a.seed,
        threads: a.threads,
        ..MetricsConfig::default()
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let dataset = Dataset::load(&manifest_path(&a.dataset))?;
    let model = ProtoNet::load(&a.checkpoint)?;
    let report = evaluate(&model, &dataset, &eval_config(a))?;
    match &a.out {
        Some(path) => {
            write_file(path, report.to_json()?.as_bytes())?;
            Ok(format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()))
        }
        None => Ok(report_text(&report)),
    }
}

fn report_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method            {}", r.method.as_deref().unwrap_or("?"));
    let _ = writeln!(s, "test images       {}", r.images);
    let _ = writeln!(s, "consistency       {:.4}", r.consistency.score);
    for st in &r.stability {
        let _ = writeln!(s, "stability ({:5})  {:.4}", st.noise.name(), st.score);
    }
    let _ = writeln!(s, "accuracy          {:.4}", r.accuracy);
    let _ = writeln!(s, "sdfa similarity   {:.4}", r.sdfa_similarity);
    let _ = writeln!(s, "cross-class sim.  {:.3}", r.cross_class.mean);
    if let Some(n) = r.negative_on_class_weights {
        let _ = writeln!(s, "neg. on-class w   {n}");
    }
    let _ = writeln!(s, "class  consistent  accuracy");
    for row in &r.per_class {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:>5}  {:>10}  {:>8}", row.class, f(row.consistent_ratio), f(row.accuracy));
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// One row of the benchmark table: means over the runs of a method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub consistency: f64,
    pub stability_gauss: Option<f64>,
    pub stability_pgd: Option<f64>,
    pub accuracy: f64,
}

pub const TABLE_HEADER: &str = "method,runs,seeds,consistency,stability_gauss,stability_pgd,accuracy,tool_version";

/// Group reports by method (first-seen order) and average each group.
pub fn benchmark_table(reports: &[MetricsReport]) -> Vec<TableRow> {
    let mut order: Vec<String> = Vec::new();
    for r in reports {
        let m = r.method.clone().unwrap_or_else(|| "unknown".into());
        if !order.contains(&m) {
            order.push(m);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let group: Vec<&MetricsReport> =
                reports.iter().filter(|r| r.method.as_deref().unwrap_or("unknown") == method).collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&MetricsReport) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean_opt = |kind: &str| {
                let v: Option<Vec<f64>> = group.iter().map(|r| r.stability_of(kind)).collect();
                v.map(|v| v.iter().sum::<f64>() / n)
            };
            TableRow {
                runs: group.len(),
                seeds: group.iter().filter_map(|r| r.train_seed).collect(),
                consistency: mean(&|r| r.consistency.score),
                stability_gauss: mean_opt("gauss"),
                stability_pgd: mean_opt("pgd"),
                accuracy: mean(&|r| r.accuracy),
                method,
            }
        })
        .collect()
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.runs,
            seeds.join(";"),
            r.consistency,
            opt(r.stability_gauss),
            opt(r.stability_pgd),
            r.accuracy,
            crate::TOOL_VERSION
        );
    }
    s
}

/// Percentages, aligned.
pub fn table_text(rows: &[TableRow]) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  runs  Con.   Sta.(gauss)  Sta.(pgd)  Acc.\n", "method");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>4}  {:>5}  {:>11}  {:>9}  {:>5}",
            r.method,
            r.runs,
            pct(Some(r.consistency)),
            pct(r.stability_gauss),
            pct(r.stability_pgd),
            pct(Some(r.accuracy))
        );
    }
    s
}

pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            MetricsReport::from_json(&text).map_err(|e| Error::data(p, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = benchmark_table(&reports);
    if let Some(path) = &a.out {
        write_file(path, table_csv(&rows).as_bytes())?;
    }
    Ok(table_text(&rows))
}
