//! The `collis` command-line tool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{build_dataset, RunConfig};
use crate::data::{read_cloud, write_cloud, PointCloud};
use crate::error::{Error, Result};
use crate::metrics::{iou_csv_rows, IouReport, IOU_CSV_HEADER};
use crate::students::{read_checkpoint, write_checkpoint, StudentModel};
use crate::trainer::{
    evaluate, evaluate_ensemble, export_distillation_set, EpochSummary, RunObserver, StepRecord, TrainMode, Trainer,
    WindowSummary,
};

#[derive(Debug, Parser)]
#[command(name = "collis", version, about = "Collaborative semi-supervised LiDAR segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the scene files and split manifest
    GenData(Common),
    /// Train the student roster and write checkpoints plus a metrics log
    Train(Common),
    /// Print per-student and ensemble mIoU for a checkpoint directory
    Eval(EvalArgs),
    /// Write labeled scenes plus ensemble-labeled unlabeled scenes
    ExportDistill(ExportArgs),
    /// Train every mode with shared seeds and print a comparison table
    Compare(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides data.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides output.dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// collis | naive | sup
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of student_<id>.ckpt files
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Directory of labeled .pcls scenes; defaults to the validation scenes
    #[arg(long)]
    pub scenes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoints: PathBuf,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::InvalidArgument(_) | Error::LengthMismatch { .. } => "invalid_argument",
        Error::Format(_) => "format",
        Error::NonFinite(_) => "non_finite",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Exit code for a failed command: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn error_line(err: &Error) -> String {
    serde_json::to_string(&ErrorLine {
        error: kind(err),
        message: err.to_string(),
    })
    .expect("error line serializes")
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("COLLIS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => cmd_gen_data(&load(&c)?),
        Command::Train(c) => cmd_train(&load(&c)?).map(|_| ()),
        Command::Eval(e) => cmd_eval(&load(&e.common)?, &e.checkpoints, e.scenes.as_deref()),
        Command::ExportDistill(e) => cmd_export_distill(&load(&e.common)?, &e.checkpoints).map(|_| ()),
        Command::Compare(c) => cmd_compare(&load(&c)?),
    }
}

/// Reads the config file (or defaults) and applies command-line overrides.
pub fn load(c: &Common) -> Result<RunConfig> {
    let mut config = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.data.seed = seed;
    }
    if let Some(out) = &c.out {
        config.output.dir = out.clone();
    }
    if let Some(mode) = &c.mode {
        config.training.mode = mode.parse()?;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    validation: Vec<String>,
}

fn write_set(dir: &Path, name: &str, scenes: &[PointCloud]) -> Result<Vec<String>> {
    fs::create_dir_all(dir.join(name))?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rel = format!("{name}/scene_{i:04}.pcls");
            write_cloud(s, dir.join(&rel))?;
            Ok(rel)
        })
        .collect()
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let split = build_dataset(&config.data)?;
    let dir = &config.output.dir;
    let manifest = Manifest {
        seed: config.data.seed,
        labeled: write_set(dir, "labeled", &split.labeled)?,
        unlabeled: write_set(dir, "unlabeled", &split.unlabeled)?,
        validation: write_set(dir, "validation", &split.validation)?,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} labeled, {} unlabeled, {} validation scenes to {}",
        manifest.labeled.len(),
        manifest.unlabeled.len(),
        manifest.validation.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Window(&'a WindowSummary),
    Epoch(&'a EpochSummary),
}

/// Streams the metrics log, IoU CSV and checkpoints into the output directory.
struct DiskObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    csv: BufWriter<File>,
    steps: bool,
    checkpoints: bool,
}

impl DiskObserver {
    fn create(config: &RunConfig) -> Result<Self> {
        let dir = config.output.dir.clone();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), config.to_json())?;
        let log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        let mut csv = BufWriter::new(File::create(dir.join("iou.csv"))?);
        writeln!(csv, "{IOU_CSV_HEADER}")?;
        Ok(Self {
            dir,
            log,
            csv,
            steps: config.output.step_records,
            checkpoints: config.output.checkpoints,
        })
    }

    fn line(&mut self, line: &LogLine<'_>) -> Result<()> {
        serde_json::to_writer(&mut self.log, line)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.log.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

impl RunObserver for DiskObserver {
    fn step(&mut self, record: &StepRecord) -> Result<()> {
        if self.steps {
            self.line(&LogLine::Step(record))?;
        }
        Ok(())
    }

    fn window(&mut self, summary: &WindowSummary) -> Result<()> {
        self.line(&LogLine::Window(summary))
    }

    fn epoch(&mut self, summary: &EpochSummary, students: &[StudentModel]) -> Result<()> {
        self.line(&LogLine::Epoch(summary))?;
        for (s, st) in summary.students.iter().enumerate() {
            let report = IouReport {
                per_class: st.val_iou.clone(),
                miou: st.val_miou,
            };
            self.csv.write_all(iou_csv_rows(summary.epoch, s, &report).as_bytes())?;
        }
        if self.checkpoints {
            let dir = self.dir.join("checkpoints").join(format!("epoch_{:03}", summary.epoch));
            fs::create_dir_all(&dir)?;
            for student in students {
                write_checkpoint(student, dir.join(format!("student_{}.ckpt", student.id)))?;
            }
        }
        Ok(())
    }
}

/// Trains one run; final checkpoints also land in `<out>/final`.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<EpochSummary>> {
    let split = build_dataset(&config.data)?;
    let mut trainer = Trainer::new(config.train_config(), config.num_classes())?;
    let mut observer = DiskObserver::create(config)?;
    let result = trainer.train(&split, &mut observer);
    observer.finish()?;
    let summaries = match result {
        Ok(s) => s,
        Err(Error::NonFinite(step)) => {
            fs::write(config.output.dir.join("failed_step.json"), &step)?;
            return Err(Error::NonFinite(step));
        }
        Err(e) => return Err(e),
    };
    let final_dir = config.output.dir.join("final");
    fs::create_dir_all(&final_dir)?;
    for student in trainer.students() {
        write_checkpoint(student, final_dir.join(format!("student_{}.ckpt", student.id)))?;
    }
    if let Some(last) = summaries.last() {
        let miou: Vec<String> = last.students.iter().map(|s| format!("{:.4}", s.val_miou)).collect();
        println!(
            "{}: {} epochs, final val mIoU [{}]",
            config.training.mode,
            summaries.len(),
            miou.join(", ")
        );
    }
    Ok(summaries)
}

/// Rebuilds the configured roster from `student_<id>.ckpt` files.
pub fn load_students(config: &RunConfig, dir: &Path) -> Result<Vec<StudentModel>> {
    config
        .representations
        .iter()
        .enumerate()
        .map(|(id, repr)| {
            let path = dir.join(format!("student_{id}.ckpt"));
            let (stored, params) = read_checkpoint(&path)?;
            if stored as usize != id {
                return Err(Error::Format(format!("{} holds student {stored}", path.display())));
            }
            let (_, _, k) = params.dims();
            if k != config.num_classes() {
                return Err(Error::Config(format!(
                    "checkpoint has {k} classes but the config has {}",
                    config.num_classes()
                )));
            }
            Ok(StudentModel::from_params(id as u32, *repr, params))
        })
        .collect()
}

fn read_scene_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "pcls"));
    paths.sort();
    paths.iter().map(read_cloud).collect()
}

fn iou_cells(report: &IouReport) -> String {
    report
        .per_class
        .iter()
        .map(|v| v.map_or("    -".to_string(), |v| format!("{v:.3}")))
        .collect::<Vec<_>>()
        .join("  ")
}

pub fn cmd_eval(config: &RunConfig, checkpoints: &Path, scenes: Option<&Path>) -> Result<()> {
    let students = load_students(config, checkpoints)?;
    let scenes = match scenes {
        Some(dir) => read_scene_dir(dir)?,
        None => crate::config::build_validation(&config.data)?,
    };
    let reports = evaluate(&students, &scenes)?;
    let ensemble = evaluate_ensemble(&students, &scenes)?;
    println!("{:<10} {:<6} {:>6}  per-class IoU ({})", "student", "repr", "mIoU", config.data.scene.classes.names.join(", "));
    for (s, r) in students.iter().zip(&reports) {
        println!("{:<10} {:<6} {:>6.4}  {}", s.id, s.repr.name(), r.miou, iou_cells(r));
    }
    println!("{:<10} {:<6} {:>6.4}  {}", "ensemble", "-", ensemble.miou, iou_cells(&ensemble));
    Ok(())
}

pub fn cmd_export_distill(config: &RunConfig, checkpoints: &Path) -> Result<Vec<PathBuf>> {
    let students = load_students(config, checkpoints)?;
    let split = build_dataset(&config.data)?;
    let paths = export_distillation_set(&students, &split.unlabeled, &split.labeled, &config.output.dir)?;
    println!("wrote {} scenes to {}", paths.len(), config.output.dir.display());
    Ok(paths)
}

#[derive(Serialize)]
struct CompareRow {
    mode: TrainMode,
    epoch: usize,
    val_miou: Vec<f64>,
    certainty_of_incorrect: Option<f64>,
}

pub fn cmd_compare(config: &RunConfig) -> Result<()> {
    let split = build_dataset(&config.data)?;
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    for mode in TrainMode::ALL {
        let mut c = config.clone();
        c.training.mode = mode;
        let mut trainer = Trainer::new(c.train_config(), c.num_classes())?;
        let summaries = trainer.train(&split, &mut ())?;
        for s in &summaries {
            rows.push(CompareRow {
                mode,
                epoch: s.epoch,
                val_miou: s.students.iter().map(|st| st.val_miou).collect(),
                certainty_of_incorrect: s.mean_certainty(),
            });
        }
        finals.push((mode, summaries.last().cloned()));
    }
    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join("compare.jsonl"))?);
    for row in &rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let names: Vec<&str> = config.representations.iter().map(|r| r.name()).collect();
    println!("{:<16} {:>24}  certainty", "mode", format!("val mIoU ({})", names.join("/")));
    for (mode, last) in &finals {
        let Some(last) = last else { continue };
        let miou: Vec<String> = last.students.iter().map(|s| format!("{:.4}", s.val_miou)).collect();
        let cert = last.mean_certainty().map_or("-".to_string(), |c| format!("{c:.4}"));
        println!("{:<16} {:>24}  {}", mode.name(), miou.join(" "), cert);
    }
    println!();
    println!("certainty of incorrect predictions by epoch");
    let stride = (config.training.epochs / 10).max(1);
    for epoch in (0..config.training.epochs).filter(|e| e % stride == stride - 1 || *e == 0) {
        let cells: Vec<String> = TrainMode::ALL
            .iter()
            .map(|m| {
                rows.iter()
                    .find(|r| r.mode == *m && r.epoch == epoch)
                    .and_then(|r| r.certainty_of_incorrect)
                    .map_or("-".to_string(), |c| format!("{}={c:.4}", m.name()))
            })
            .collect();
        println!("epoch {epoch:>3}  {}", cells.join("  "));
    }
    Ok(())
}
