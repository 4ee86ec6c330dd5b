//! The `babybear` command line: oracle labeling, training, calibration,
//! evaluation, reporting and serving.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 on runtime
//! failures (I/O, unreachable backends).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use babybear_core::accounting::{make_entity_report, make_report, CostModel, ReferenceKind, RunReport, TableRow, TABLE_HEADER};
use babybear_core::calibrate::{
    calibrate_with_table, curve_to_csv, final_stage_references, gold_references, uniform_grid, CalibrationResult,
    DEFAULT_CLASSIFICATION_FLOOR, DEFAULT_ENTITY_FLOOR, DEFAULT_GRID_STEPS,
};
use babybear_core::corpus::{parse_conll, parse_jsonl, Document, EntitySpan};
use babybear_core::entity::{calibrate_entity_pipeline, gold_entity_references, triage_documents, EntitySweeper};
use babybear_core::mock::{MockPredictor, MockSpec};
use babybear_core::model::{oracle_label, train_baby, Predictor, TaskKind, TrainConfig, TrainError};
use babybear_core::triage::{triage_batch_timed, PredictionTable, DEFAULT_BATCH_SIZE};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendDescriptor, HttpBackend};
use crate::config::{ActiveCascade, CascadeConfig, ConfigFileError, BIND_ENV, DEFAULT_BIND};
use crate::mock_server::mock_router;
use crate::serve::service_router;
use crate::server::serve_forever;

#[derive(Debug, Parser)]
#[command(name = "babybear", version, about = "Confidence-gated model cascades: label, train, calibrate, run and serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Jsonl,
    Conll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label texts with an expensive model's predictions.
    OracleLabel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: InputFormat,
        /// Mock backend spec (JSON) used in-process.
        #[arg(long, conflicts_with = "backend", required_unless_present = "backend")]
        mock: Option<PathBuf>,
        /// Backend descriptor (JSON) reached over HTTP.
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the built-in baby model on labeled JSONL.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Directory to write the model to.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "babybear")]
        id: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        ngram_min: Option<usize>,
        #[arg(long)]
        ngram_max: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Pick the smallest thresholds meeting an accuracy (or F1) floor.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        /// Defaults to 0.9 for classification and 0.99 for entity recognition.
        #[arg(long)]
        floor: Option<f64>,
        /// F1 floor for the distilled stage; defaults to `--floor`.
        #[arg(long)]
        distil_floor: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_GRID_STEPS)]
        grid_steps: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        curve: PathBuf,
        /// Also write the config with the calibrated thresholds.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    /// Triage a corpus and write outcomes plus an aggregate report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Overrides the first stage's threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        report_csv: Option<PathBuf>,
    },
    /// Render a run report as a summary table row, CSV or JSON.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
        #[arg(long, default_value = "run")]
        name: String,
        #[arg(long)]
        n_labels: Option<usize>,
        #[arg(long, default_value_t = 0)]
        train: usize,
        #[arg(long, default_value_t = 0)]
        validation: usize,
        /// Defaults to the report's document count.
        #[arg(long)]
        test: Option<usize>,
    },
    /// Serve a cascade over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = BIND_ENV, default_value = DEFAULT_BIND)]
        bind: String,
    },
    /// Serve a mock backend spec over HTTP.
    MockBackend {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, env = BIND_ENV, default_value = "127.0.0.1:8081")]
        bind: String,
    },
}

#[derive(Debug)]
pub enum Failure {
    /// Bad input, config or arguments: exit 1.
    Validation(String),
    /// I/O, backend or service failure: exit 2.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl From<ConfigFileError> for Failure {
    fn from(e: ConfigFileError) -> Self {
        if e.is_validation() {
            invalid(e)
        } else {
            runtime(e)
        }
    }
}

/// Parses `args` (program name first) and runs the command.
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
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("babybear: {f}");
            f.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::OracleLabel { input, format, mock, backend, batch_size, output } => {
            oracle_label_cmd(&input, format, mock.as_deref(), backend.as_deref(), batch_size, &output)
        }
        Command::Train { input, output, id, epochs, learning_rate, l2, seed, feature_dim, ngram_min, ngram_max, batch_size } => {
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                learning_rate: learning_rate.unwrap_or(d.learning_rate),
                l2: l2.unwrap_or(d.l2),
                seed: seed.unwrap_or(d.seed),
                feature_dim: feature_dim.unwrap_or(d.feature_dim),
                ngram_range: (ngram_min.unwrap_or(d.ngram_range.0), ngram_max.unwrap_or(d.ngram_range.1)),
                batch_size: batch_size.unwrap_or(d.batch_size),
            };
            train_cmd(&input, &output, &id, &cfg)
        }
        Command::Calibrate { config, validation, floor, distil_floor, grid_steps, output, curve, write_config } => {
            calibrate_cmd(&config, &validation, floor, distil_floor, grid_steps, &output, &curve, write_config.as_deref())
        }
        Command::Run { config, input, threshold, outcomes, report, report_csv } => {
            run_cmd(&config, &input, threshold, &outcomes, &report, report_csv.as_deref())
        }
        Command::Report { input, format, name, n_labels, train, validation, test } => {
            let text = read(&input)?;
            let report = RunReport::<f64>::from_json(&text).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
            let row = TableRow {
                name,
                n_labels,
                train,
                validation,
                test: test.unwrap_or(report.n_docs),
                threshold: report.thresholds.first().copied().unwrap_or(1.0),
                saving: report.savings_docs,
                accuracy: report.metric.headline(),
            };
            print!("{}", render_report(&report, &row, format));
            Ok(())
        }
        Command::Serve { config, bind } => {
            let cfg = CascadeConfig::load(&config)?;
            let router = service_router(cfg)?;
            serve_forever(router, &bind).map_err(runtime)
        }
        Command::MockBackend { spec, bind } => {
            let spec = load_mock(&spec)?;
            serve_forever(mock_router(spec), &bind).map_err(runtime)
        }
    }
}

pub fn render_report(report: &RunReport<f64>, row: &TableRow, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => {
            let sep: String = TABLE_HEADER.split('|').map(|c| if c.is_empty() { "" } else { "---" }).collect::<Vec<_>>().join("|");
            format!("{TABLE_HEADER}\n{sep}\n{}\n", row.render())
        }
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => format!("{}\n", report.to_json()),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_docs(path: &Path) -> Result<Vec<Document>, Failure> {
    let text = read(path)?;
    let docs = parse_jsonl(text.as_bytes()).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if docs.is_empty() {
        return Err(invalid(format!("{} holds no documents", path.display())));
    }
    Ok(docs)
}

fn load_mock(path: &Path) -> Result<MockSpec, Failure> {
    let spec: MockSpec = serde_json::from_str(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

/// A record of oracle-labeled JSONL: the document with `label` replaced
/// by the oracle's answer, plus the oracle's id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub id: String,
    pub text: String,
    pub label: String,
    pub oracle: String,
}

fn oracle_label_cmd(
    input: &Path,
    format: InputFormat,
    mock: Option<&Path>,
    backend: Option<&Path>,
    batch_size: usize,
    output: &Path,
) -> Result<(), Failure> {
    let docs = match format {
        InputFormat::Jsonl => read_docs(input)?,
        InputFormat::Conll => parse_conll(read(input)?.as_bytes())
            .map_err(|e| invalid(format!("{}: {e}", input.display())))?
            .into_iter()
            .enumerate()
            .map(|(i, s)| Document::new(format!("s{i:06}"), s.text))
            .collect(),
    };
    let predictor: Box<dyn Predictor<f64>> = match (mock, backend) {
        (Some(m), _) => Box::new(MockPredictor::<f64>::new(load_mock(m)?)),
        (None, Some(b)) => {
            let d: BackendDescriptor = serde_json::from_str(&read(b)?).map_err(|e| invalid(format!("{}: {e}", b.display())))?;
            Box::new(HttpBackend::new(d).map_err(invalid)?)
        }
        (None, None) => return Err(invalid("one of --mock or --backend is required")),
    };
    let labels = oracle_label(predictor.as_ref(), &docs, batch_size).map_err(runtime)?;
    let mut out = String::new();
    for (doc, (_, label)) in docs.iter().zip(labels) {
        let rec = OracleRecord { id: doc.id.clone(), text: doc.text.clone(), label, oracle: predictor.id().to_string() };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    write(output, &out)?;
    eprintln!("labeled {} texts with {}", docs.len(), predictor.id());
    Ok(())
}

fn train_cmd(input: &Path, output: &Path, id: &str, cfg: &TrainConfig) -> Result<(), Failure> {
    let docs = read_docs(input)?;
    let examples = docs
        .iter()
        .map(|d| match &d.gold_label {
            Some(l) => Ok((d.text.clone(), l.clone())),
            None => Err(invalid(format!("record {:?} has no label", d.id))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let trained_on = input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let model = train_baby::<f64>(&examples, cfg, &trained_on).map_err(|e| match e {
        TrainError::Config(_) | TrainError::TooFewExamples(_) | TrainError::SingleLabel(_) => invalid(e),
        other => runtime(other),
    })?;
    let model = model.with_id(id);
    model.save(output).map_err(runtime)?;
    eprintln!(
        "trained {id} on {} examples, labels {:?}, final loss {:.4}",
        examples.len(),
        model.labels(),
        model.loss_history().last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// What `calibrate` writes: one result per tunable stage (`null` where pinned).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub task: TaskKind,
    pub reference: ReferenceKind,
    pub thresholds: Vec<f64>,
    pub stages: Vec<Option<CalibrationResult<f64>>>,
}

fn check_floor(name: &str, f: f64) -> Result<f64, Failure> {
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(invalid(format!("{name} {f} outside (0, 1]")))
    }
}

fn curve_path(base: &Path, stage: usize) -> PathBuf {
    if stage == 0 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map_or_else(|| "curve".into(), |s| s.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}.stage{stage}.csv"))
}

#[allow(clippy::too_many_arguments)]
fn calibrate_cmd(
    config: &Path,
    validation: &Path,
    floor: Option<f64>,
    distil_floor: Option<f64>,
    grid_steps: usize,
    output: &Path,
    curve: &Path,
    write_config: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = CascadeConfig::load(config)?;
    let docs = read_docs(validation)?;
    if grid_steps == 0 {
        return Err(invalid("--grid-steps must be positive"));
    }
    let grid = uniform_grid::<f64>(grid_steps);
    let floor = check_floor(
        "--floor",
        floor.unwrap_or(match cfg.task {
            TaskKind::Classification => DEFAULT_CLASSIFICATION_FLOOR,
            TaskKind::EntityRecognition => DEFAULT_ENTITY_FLOOR,
        }),
    )?;
    let (file, thresholds) = match cfg.build()? {
        ActiveCascade::Classification(c) => {
            let table = PredictionTable::compute(&c, &docs).map_err(runtime)?;
            let (reference, kind) = match gold_references(&docs) {
                Some(r) => (r, ReferenceKind::Gold),
                None => (final_stage_references(&table), ReferenceKind::FinalStage),
            };
            let floors = vec![Some(floor); c.len() - 1];
            let cal = calibrate_with_table(&c, &table, &reference, &floors, &grid).map_err(invalid)?;
            let thresholds = cal.cascade.thresholds();
            (CalibrationFile { task: cfg.task, reference: kind, thresholds: thresholds.clone(), stages: cal.results }, thresholds)
        }
        ActiveCascade::Entity(p) => {
            let (reference, kind) = match gold_entity_references(&docs) {
                Some(r) => (r, ReferenceKind::Gold),
                None => {
                    let refs = EntitySweeper::new(&p, &docs).and_then(|mut s| s.final_stage_references()).map_err(runtime)?;
                    (refs, ReferenceKind::FinalStage)
                }
            };
            let distil_floor = match p.distil {
                Some(_) => Some(check_floor("--distil-floor", distil_floor.unwrap_or(floor))?),
                None => None,
            };
            let cal = calibrate_entity_pipeline(&p, &docs, &reference, kind, Some(floor), distil_floor, &grid).map_err(runtime)?;
            let thresholds = cal.pipeline.thresholds();
            let mut stages = vec![cal.entity];
            if p.distil.is_some() {
                stages.push(cal.distil);
            }
            (CalibrationFile { task: cfg.task, reference: kind, thresholds: thresholds.clone(), stages }, thresholds)
        }
    };
    for (i, r) in file.stages.iter().enumerate() {
        if let Some(r) = r {
            write(&curve_path(curve, i), &curve_to_csv(&r.curve))?;
            if r.shortfall {
                eprintln!("warning: stage {i} cannot reach floor {} on this data; threshold set to 1.0", r.floor);
            }
        }
    }
    write(output, &format!("{}\n", serde_json::to_string_pretty(&file).expect("calibration serializes")))?;
    if let Some(path) = write_config {
        let mut next = cfg.clone();
        let tunable: Vec<usize> = cfg
            .stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.threshold.is_some() || s.gate.is_some())
            .map(|(i, _)| i)
            .collect();
        for (&stage, &t) in tunable.iter().zip(&thresholds) {
            next = next.with_threshold(stage, t).map_err(invalid)?;
        }
        write(path, &format!("{}\n", next.to_json()))?;
    }
    eprintln!("calibrated thresholds {thresholds:?} (reference: {:?})", file.reference);
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("outcome serializes"));
        out.push('\n');
    }
    out
}

/// Triage of `docs` under `cfg` with its report, measured against gold
/// annotations when every document has them, else against the final stage.
pub fn run_config(cfg: &CascadeConfig, docs: &[Document]) -> Result<(String, RunReport<f64>), Failure> {
    match cfg.build()? {
        ActiveCascade::Classification(c) => {
            let thresholds = c.thresholds();
            let (outcomes, reference, kind, latencies) = match gold_references(docs) {
                Some(r) => {
                    let (outcomes, timings) = triage_batch_timed(&c, docs).map_err(runtime)?;
                    (outcomes, r, ReferenceKind::Gold, Some(timings))
                }
                None => {
                    let table = PredictionTable::compute(&c, docs).map_err(runtime)?;
                    (table.replay(&thresholds), final_stage_references(&table), ReferenceKind::FinalStage, None)
                }
            };
            let cost_model = CostModel { unit_costs: c.unit_costs(), latencies };
            let report = make_report(&outcomes, &reference, kind, &cost_model, &thresholds).map_err(invalid)?;
            Ok((jsonl(&outcomes), report))
        }
        ActiveCascade::Entity(p) => {
            let thresholds = p.thresholds();
            let (outcomes, reference, kind): (_, HashMap<String, Vec<EntitySpan>>, _) = match gold_entity_references(docs) {
                Some(r) => (triage_documents(&p, docs).map_err(runtime)?, r, ReferenceKind::Gold),
                None => {
                    let mut sweeper = EntitySweeper::new(&p, docs).map_err(runtime)?;
                    let refs = sweeper.final_stage_references().map_err(runtime)?;
                    let t_distil = thresholds.get(1).copied().unwrap_or(1.0);
                    (sweeper.outcomes(thresholds[0], t_distil).map_err(runtime)?, refs, ReferenceKind::FinalStage)
                }
            };
            let report = make_entity_report(&outcomes, &reference, kind, &thresholds).map_err(invalid)?;
            Ok((jsonl(&outcomes), report))
        }
    }
}

fn run_cmd(
    config: &Path,
    input: &Path,
    threshold: Option<f64>,
    outcomes: &Path,
    report: &Path,
    report_csv: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = CascadeConfig::load(config)?;
    if let Some(t) = threshold {
        cfg = cfg.with_threshold(0, t).map_err(invalid)?;
    }
    let docs = read_docs(input)?;
    let (lines, rep) = run_config(&cfg, &docs)?;
    write(outcomes, &lines)?;
    write(report, &format!("{}\n", rep.to_json()))?;
    if let Some(p) = report_csv {
        write(p, &rep.to_csv())?;
    }
    eprintln!(
        "{} documents: {} {:.4}, savings {:.4} ({:?})",
        rep.n_docs,
        rep.metric.label(),
        rep.metric.headline(),
        rep.savings_docs,
        rep.savings_basis
    );
    Ok(())
}
