use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rav_core::config::RavConfig;
use rav_core::error::RavError;
use rav_core::evalkit::{
    self, Answer, LabeledBox, TablePair, DEFAULT_CORRECTNESS_CUTOFF, DEFAULT_IOU_THRESHOLD,
};
use rav_core::ingest::{load_manifest, load_page_rasters};
use rav_core::model::ValidationTrace;
use rav_core::orchestrate::{derive_ablation_context, process_pages, AblationMode};
use rav_core::plugins::{
    serve_lines, CorruptionSpec, GroundTruth, MockBehavior, MockClient, PluginClient, PluginSet, Script,
    ScriptedExtractor,
};
use rav_core::synthetic::corruption_sweep;
use rav_core::walkthrough::{bundled_fixture_dir, replay};

const EXIT_OTHER: u8 = 1;
const EXIT_MANIFEST: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_EVAL_INPUT: u8 = 4;
const EXIT_REPLAY_MISMATCH: u8 = 5;

#[derive(Parser)]
#[command(name = "rav", version, about = "Reconstruction-as-validation for extracted document entities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate every region of a manifest and write records, traces and a summary.
    Validate(ValidateArgs),
    /// Compute one evaluation report from prepared inputs.
    Eval(EvalArgs),
    /// Replay the bundled walkthrough and check it against its expected table.
    ReplayWalkthrough {
        /// Directory holding manifest.json, config.toml and expected.json.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Score seeded random tables at random corruption levels; writes a reliability CSV.
    Sweep(SweepArgs),
    /// Serve a mock or scripted plugin over stdin/stdout.
    ServeMock(ServeArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker count; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    containment_threshold: Option<f64>,
    /// Context derivation mode. Stored traces are always the full ones.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    Full,
    GateOnly,
    NoRav,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AblationMode::Full,
            ModeArg::GateOnly => AblationMode::GateOnly,
            ModeArg::NoRav => AblationMode::NoRav,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Layout,
    Table,
    Reliability,
    Recovery,
    Ablation,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Layout => "layout",
            Task::Table => "table",
            Task::Reliability => "reliability",
            Task::Recovery => "recovery",
            Task::Ablation => "ablation",
        }
    }

    fn usage(self) -> &'static str {
        match self {
            Task::Layout => "layout needs <predicted.json> <ground_truth.json>",
            Task::Table => "table needs <pairs.json>",
            Task::Reliability => "reliability needs <samples.csv> with fidelity and cell_cer columns",
            Task::Recovery => "recovery needs <traces.jsonl>",
            Task::Ablation => "ablation needs <answers.json> keyed by mode",
        }
    }

    fn arity(self) -> usize {
        if self == Task::Layout {
            2
        } else {
            1
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(value_enum)]
    task: Task,
    inputs: Vec<PathBuf>,
    /// Report directory; the JSON report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_CORRECTNESS_CUTOFF)]
    correctness_cutoff: f64,
    #[arg(long, default_value = "unanswerable")]
    unanswerable_marker: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop the SSIM term, scoring structure and cell text only.
    #[arg(long)]
    skip_visual: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Ground truth for the seeded mock.
    #[arg(long, conflicts_with = "script", required_unless_present = "script")]
    truth: Option<PathBuf>,
    /// Scripted responses keyed by region id.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Act as a fallback that recovers ground truth with this quality.
    #[arg(long)]
    recovery_quality: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }

    fn from_rav(e: RavError) -> Self {
        let code = match e {
            RavError::Manifest(_) => EXIT_MANIFEST,
            RavError::Config(_) => EXIT_CONFIG,
            RavError::EvalInput(_) => EXIT_EVAL_INPUT,
            _ => EXIT_OTHER,
        };
        Failure::new(code, e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(args) => validate(args),
        Command::Eval(args) => eval(args),
        Command::ReplayWalkthrough { fixtures } => replay_walkthrough(fixtures),
        Command::Sweep(args) => sweep(args),
        Command::ServeMock(args) => serve_mock(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("rav: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RavConfig, Failure> {
    match path {
        Some(p) => RavConfig::load(p).map_err(|e| Failure::new(EXIT_CONFIG, e)),
        None => Ok(RavConfig::default()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("record serializes") + "\n")
        .collect()
}

fn validate(args: ValidateArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    if let Some(t) = args.containment_threshold {
        cfg.containment_threshold = t;
    }
    cfg.validate().map_err(|e| Failure::new(EXIT_CONFIG, e))?;

    let loaded = load_manifest(&args.manifest).map_err(|e| Failure::new(EXIT_MANIFEST, e))?;
    let rasters = load_page_rasters(&loaded).map_err(|e| Failure::new(EXIT_MANIFEST, e))?;
    let plugins = PluginSet::from_config(&cfg).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let run = process_pages(&loaded.manifest, &rasters, &plugins, &cfg, loaded.dropped_degenerate)
        .map_err(Failure::from_rav)?;

    create_dir(&args.out)?;
    write_file(&args.out.join("records.jsonl"), jsonl(&run.records))?;
    write_file(&args.out.join("traces.jsonl"), jsonl(&run.traces))?;
    write_file(&args.out.join("summary.json"), pretty(&run.summary))?;

    let mode = args.mode.map(AblationMode::from);
    match derive_ablation_context(&run.traces, mode.unwrap_or(AblationMode::Full)) {
        Ok(ctx) => {
            let name = format!("context_{}.json", mode.unwrap_or(AblationMode::Full));
            write_file(&args.out.join(name), pretty(&ctx))?;
        }
        Err(e) if mode.is_some() => return Err(Failure::from_rav(e)),
        Err(e) => log::info!("no context written: {e}"),
    }

    let s = &run.summary;
    println!(
        "{} regions validated ({} filtered), {} fallback calls, {} recovered, {} low confidence; wrote {}",
        s.regions_processed,
        s.regions_filtered.len(),
        s.fallback_calls,
        s.recovered,
        s.low_confidence,
        args.out.display()
    );
    Ok(())
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_EVAL_INPUT, format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(task: Task, path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_input(path)?)
        .map_err(|e| Failure::new(EXIT_EVAL_INPUT, format!("{}: {e} ({})", path.display(), task.usage())))
}

fn parse_traces(path: &Path) -> Result<Vec<ValidationTrace>, Failure> {
    read_input(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Failure::new(
                    EXIT_EVAL_INPUT,
                    format!("{} line {}: {e} ({})", path.display(), i + 1, Task::Recovery.usage()),
                )
            })
        })
        .collect()
}

struct Report {
    json: String,
    csv: Vec<(String, String)>,
    headline: String,
}

fn eval(args: EvalArgs) -> Outcome {
    let task = args.task;
    if args.inputs.len() != task.arity() {
        return Err(Failure::new(EXIT_EVAL_INPUT, task.usage()));
    }
    let input_err = |e: RavError| Failure::new(EXIT_EVAL_INPUT, e);
    let report = match task {
        Task::Layout => {
            let pred: Vec<LabeledBox> = parse_json(task, &args.inputs[0])?;
            let gt: Vec<LabeledBox> = parse_json(task, &args.inputs[1])?;
            let r = evalkit::layout_eval(&pred, &gt, args.iou_threshold);
            Report {
                headline: format!("micro F1 {:.3}, macro F1 {:.3}", r.micro_f1, r.macro_f1),
                csv: vec![("layout.csv".into(), r.to_csv())],
                json: pretty(&r),
            }
        }
        Task::Table => {
            let pairs: Vec<TablePair> = parse_json(task, &args.inputs[0])?;
            let r = evalkit::table_structure_report(&pairs).map_err(input_err)?;
            Report {
                headline: format!(
                    "{} tables, shape accuracy {:.3}, mean cell CER {:.3}",
                    r.n, r.shape_accuracy, r.mean_cell_cer
                ),
                csv: vec![("table.csv".into(), r.to_csv())],
                json: pretty(&r),
            }
        }
        Task::Reliability => {
            let samples = evalkit::read_reliability_csv(&read_input(&args.inputs[0])?)
                .map_err(|e| Failure::new(EXIT_EVAL_INPUT, format!("{e} ({})", task.usage())))?;
            let r = evalkit::fidelity_reliability(&samples, args.correctness_cutoff).map_err(input_err)?;
            Report {
                headline: format!(
                    "spearman {:.3}, pearson {:.3}, optimal tau {:.2} with F1 {:.3}",
                    r.spearman.rho, r.pearson, r.optimal_tau, r.f1_at_optimal
                ),
                csv: vec![
                    ("reliability.csv".into(), r.to_csv()),
                    ("pr_curve.csv".into(), r.pr_curve_csv()),
                ],
                json: pretty(&r),
            }
        }
        Task::Recovery => {
            let traces = parse_traces(&args.inputs[0])?;
            let r = evalkit::recovery_rate(&traces);
            let rate = r.overall.rate.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            Report {
                headline: format!("recovered {}/{} (rate {rate})", r.overall.recovered_n, r.overall.failed_n),
                csv: vec![("recovery.csv".into(), r.to_csv())],
                json: pretty(&r),
            }
        }
        Task::Ablation => {
            let answers: BTreeMap<AblationMode, Vec<Answer>> = parse_json(task, &args.inputs[0])?;
            let r = evalkit::ablation_report(&answers, &args.unanswerable_marker).map_err(input_err)?;
            let headline = r
                .per_mode
                .iter()
                .map(|(m, s)| format!("{m}: ANLS {:.3}", s.anls))
                .collect::<Vec<_>>()
                .join(", ");
            Report {
                headline,
                csv: vec![("ablation.csv".into(), r.to_csv())],
                json: pretty(&r),
            }
        }
    };

    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join(format!("{}.json", task.name())), &report.json)?;
            for (name, body) in &report.csv {
                write_file(&dir.join(name), body)?;
            }
            println!("{}: {}", task.name(), report.headline);
        }
        None => print!("{}", report.json),
    }
    Ok(())
}

fn replay_walkthrough(fixtures: Option<PathBuf>) -> Outcome {
    let dir = fixtures.unwrap_or_else(bundled_fixture_dir);
    let report = replay(&dir).map_err(Failure::from_rav)?;
    print!("{}", report.render_table());
    if report.passed() {
        println!("walkthrough matches expected table");
        Ok(())
    } else {
        for m in &report.mismatches {
            eprintln!("mismatch: {m}");
        }
        Err(Failure::new(
            EXIT_REPLAY_MISMATCH,
            format!("{} mismatch(es) against {}", report.mismatches.len(), dir.join("expected.json").display()),
        ))
    }
}

fn sweep(args: SweepArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.skip_visual {
        cfg.table_skip_visual = true;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    let samples = corruption_sweep(args.n, args.seed, &cfg).map_err(Failure::from_rav)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &samples {
        w.serialize(s).map_err(|e| Failure::new(EXIT_OTHER, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::new(EXIT_OTHER, e))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, bytes)?;
    println!("{} samples written to {}", samples.len(), args.out.display());
    Ok(())
}

fn serve_mock(args: ServeArgs) -> Outcome {
    let client: Box<dyn PluginClient> = match (&args.script, &args.truth) {
        (Some(path), _) => Box::new(ScriptedExtractor::new(Script::load(path).map_err(Failure::from_rav)?)),
        (None, Some(path)) => {
            let truth = GroundTruth::load(path).map_err(Failure::from_rav)?;
            let behavior = match args.recovery_quality {
                Some(q) => MockBehavior::Fallback { recovery_quality: q },
                None => {
                    let spec = CorruptionSpec {
                        epsilon: args.epsilon,
                        ..CorruptionSpec::default()
                    };
                    spec.validate().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
                    MockBehavior::Corrupt(spec)
                }
            };
            Box::new(MockClient::new(truth, behavior, args.seed))
        }
        (None, None) => unreachable!("clap requires --truth or --script"),
    };
    let stdin = io::stdin().lock();
    let mut stdout = io::stdout().lock();
    serve_lines(client.as_ref(), stdin, &mut stdout, Duration::from_millis(args.timeout_ms))
        .map_err(|e| Failure::new(EXIT_OTHER, e))?;
    stdout.flush().map_err(|e| Failure::new(EXIT_OTHER, e))
}
