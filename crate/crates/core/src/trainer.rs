//! The collaborative training loop, its two baselines, evaluation, ensemble
//! voting, and export of ensemble pseudo-labels for offline distillation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cda::{consensus_fraction, CdaConfig, CdaController};
use crate::data::{write_cloud, DatasetSplit, Label, Origin, PointCloud};
use crate::error::{Error, Result};
use crate::losses::{labeled_loss, regularization_loss, unlabeled_loss, LossValue, PseudoSource};
use crate::matrix::Matrix;
use crate::metrics::{
    sealed_incorrect_certainty, sealed_retention, CertaintyAccumulator, ConfusionMatrix, IouReport, RetentionStats,
    SealedTruth,
};
use crate::mixing::{maybe_mix, ElevationSpan, MixStrategy};
use crate::reliability::{absolute_reliability, filter_pseudo_labels, PseudoLabels, ReliabilityPolicy, ReliabilityState};
use crate::repr::ReprConfig;
use crate::rng::{SeedStreams, StreamRng};
use crate::students::{ForwardPass, Params, StudentModel, StudentOutput, DEFAULT_HIDDEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Collis,
    NaiveCodistill,
    SupervisedOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::SupervisedOnly, TrainMode::NaiveCodistill, TrainMode::Collis];

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Collis => "collis",
            TrainMode::NaiveCodistill => "naive_codistill",
            TrainMode::SupervisedOnly => "supervised_only",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collis" => Ok(TrainMode::Collis),
            "naive" | "naive_codistill" => Ok(TrainMode::NaiveCodistill),
            "sup" | "supervised_only" => Ok(TrainMode::SupervisedOnly),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lambda0: f64,
    pub delta0: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
    pub cda: CdaConfig,
    pub roster: Vec<ReprConfig>,
    /// Overrides every pseudo-label threshold when set.
    pub fixed_threshold: Option<f64>,
    /// Adds the regularization term in supervised-only mode.
    pub supervised_regularization: bool,
    /// Iterations per aggregated window line.
    pub log_window: usize,
    pub span: ElevationSpan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Collis,
            epochs: 60,
            lambda0: 0.5,
            delta0: 0.95,
            lambda_reg: 0.1,
            learning_rate: 0.05,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            cda: CdaConfig::default(),
            roster: vec![
                ReprConfig::default_range(),
                ReprConfig::default_polar(),
                ReprConfig::default_voxel(),
            ],
            fixed_threshold: None,
            supervised_regularization: false,
            log_window: 50,
            span: ElevationSpan {
                up_deg: 3.0,
                down_deg: -25.0,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("training.epochs must be at least 1".into());
        }
        if self.roster.is_empty() {
            return bad("representations must list at least one student".into());
        }
        if self.mode == TrainMode::NaiveCodistill && self.roster.len() < 2 {
            return bad("naive co-distillation needs at least two students".into());
        }
        for r in &self.roster {
            r.validate()?;
        }
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return bad(format!("training.lambda0 must be >= 0, got {}", self.lambda0));
        }
        if !(self.delta0 > 0.0 && self.delta0 <= 1.0) {
            return bad(format!("training.delta0 must be in (0, 1], got {}", self.delta0));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return bad(format!("training.lambda_reg must be >= 0, got {}", self.lambda_reg));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("training.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.hidden == 0 {
            return bad("training.hidden must be at least 1".into());
        }
        if let Some(d) = self.fixed_threshold {
            if !(0.0..=1.0).contains(&d) {
                return bad(format!("training.fixed_threshold must be in [0, 1], got {d}"));
            }
        }
        if self.log_window == 0 {
            return bad("training.log_window must be at least 1".into());
        }
        self.cda.validate()
    }

    /// A single student has no peers, so every mode reduces to supervised training.
    pub fn effective_mode(&self) -> TrainMode {
        if self.roster.len() < 2 {
            TrainMode::SupervisedOnly
        } else {
            self.mode
        }
    }
}

/// One student's share of a step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentStep {
    pub labeled_loss: f64,
    pub regularization_loss: f64,
    pub unlabeled_loss: f64,
    /// Pseudo-labels this student produced for its peers.
    pub retention: RetentionStats,
    pub certainty: CertaintyAccumulator,
}

impl StudentStep {
    pub fn total_loss(&self) -> f64 {
        self.labeled_loss + self.regularization_loss + self.unlabeled_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub labeled_scene: usize,
    pub unlabeled_scene: Option<usize>,
    pub q_m: f64,
    pub mixed: Option<MixStrategy>,
    pub consensus: Option<f64>,
    pub reliability: Option<ReliabilityState>,
    pub students: Vec<StudentStep>,
}

/// Aggregate of consecutive steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSummary {
    pub first_iteration: u64,
    pub last_iteration: u64,
    pub mean_q_m: f64,
    pub mean_consensus: Option<f64>,
    pub mixed_fraction: f64,
    pub students: Vec<StudentWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentWindow {
    pub mean_loss: f64,
    pub retention: RetentionStats,
    pub retention_rate: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub certainty: CertaintyAccumulator,
    pub certainty_of_incorrect: Option<f64>,
}

impl WindowSummary {
    pub fn from_records(records: &[StepRecord]) -> Option<Self> {
        let (first, last) = (records.first()?, records.last()?);
        let n = records.len() as f64;
        let consensus: Vec<f64> = records.iter().filter_map(|r| r.consensus).collect();
        let students = (0..first.students.len())
            .map(|s| {
                let mut retention = RetentionStats::default();
                let mut certainty = CertaintyAccumulator::default();
                let mut loss = 0.0;
                for r in records {
                    retention.merge(r.students[s].retention);
                    certainty.merge(r.students[s].certainty);
                    loss += r.students[s].total_loss();
                }
                StudentWindow {
                    mean_loss: loss / n,
                    retention,
                    retention_rate: retention.rate(),
                    pseudo_label_accuracy: retention.accuracy(),
                    certainty,
                    certainty_of_incorrect: certainty.value(),
                }
            })
            .collect();
        Some(Self {
            first_iteration: first.iteration,
            last_iteration: last.iteration,
            mean_q_m: records.iter().map(|r| r.q_m).sum::<f64>() / n,
            mean_consensus: (!consensus.is_empty()).then(|| consensus.iter().sum::<f64>() / consensus.len() as f64),
            mixed_fraction: records.iter().filter(|r| r.mixed.is_some()).count() as f64 / n,
            students,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentEpoch {
    pub val_miou: f64,
    pub val_iou: Vec<Option<f64>>,
    pub training: StudentWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub beta: f64,
    pub lambda_u: f64,
    pub q_m: f64,
    pub mean_consensus: Option<f64>,
    pub students: Vec<StudentEpoch>,
}

impl EpochSummary {
    /// Mean over students of the pooled certainty of incorrect predictions.
    pub fn mean_certainty(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .students
            .iter()
            .filter_map(|s| s.training.certainty_of_incorrect)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Receives the trainer's output as it is produced.
pub trait RunObserver {
    fn step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn window(&mut self, _summary: &WindowSummary) -> Result<()> {
        Ok(())
    }

    fn epoch(&mut self, _summary: &EpochSummary, _students: &[StudentModel]) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Collects everything in memory.
#[derive(Debug, Default)]
pub struct RecordingObserver {
    pub steps: Vec<StepRecord>,
    pub windows: Vec<WindowSummary>,
    pub epochs: Vec<EpochSummary>,
}

impl RunObserver for RecordingObserver {
    fn step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }

    fn window(&mut self, summary: &WindowSummary) -> Result<()> {
        self.windows.push(summary.clone());
        Ok(())
    }

    fn epoch(&mut self, summary: &EpochSummary, _students: &[StudentModel]) -> Result<()> {
        self.epochs.push(summary.clone());
        Ok(())
    }
}

/// Keeps epoch summaries only.
#[derive(Debug, Default)]
pub struct EpochObserver {
    pub epochs: Vec<EpochSummary>,
}

impl RunObserver for EpochObserver {
    fn epoch(&mut self, summary: &EpochSummary, _students: &[StudentModel]) -> Result<()> {
        self.epochs.push(summary.clone());
        Ok(())
    }
}

/// Enough context to replay a step that produced a non-finite value.
#[derive(Debug, Clone, Serialize)]
struct FailedStep<'a> {
    epoch: usize,
    iteration: u64,
    labeled_scene: usize,
    unlabeled_scene: Option<usize>,
    q_m: f64,
    mixed: Option<MixStrategy>,
    student: u32,
    reason: &'a str,
}

/// One cloud fed to every student during a step.
struct View {
    cloud: PointCloud,
    origin: Vec<Origin>,
    /// Ground truth on labeled-origin points, zero elsewhere.
    targets: Vec<Label>,
    truth: SealedTruth,
}

impl View {
    fn is_unlabeled(&self, i: usize) -> bool {
        self.origin[i] == Origin::B
    }

    fn has_unlabeled(&self) -> bool {
        self.origin.contains(&Origin::B)
    }
}

pub struct Trainer {
    config: TrainConfig,
    streams: SeedStreams,
    students: Vec<StudentModel>,
    controller: CdaController,
    mix_rng: StreamRng,
    iteration: u64,
    pending: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let streams = SeedStreams::new(config.seed);
        let students = config
            .roster
            .iter()
            .enumerate()
            .map(|(id, repr)| StudentModel::new(id as u32, *repr, config.hidden, classes, &streams))
            .collect::<Result<Vec<_>>>()?;
        let controller = CdaController::new(config.cda)?;
        let mix_rng = streams.stream("mixing", 0);
        Ok(Self {
            config,
            streams,
            students,
            controller,
            mix_rng,
            iteration: 0,
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn students(&self) -> &[StudentModel] {
        &self.students
    }

    pub fn into_students(self) -> Vec<StudentModel> {
        self.students
    }

    pub fn controller(&self) -> &CdaController {
        &self.controller
    }

    /// Mixing probability used on the next step.
    pub fn effective_q(&self) -> f64 {
        match self.config.effective_mode() {
            TrainMode::SupervisedOnly => 0.0,
            TrainMode::NaiveCodistill => self.config.cda.initial_q(),
            TrainMode::Collis => self.controller.q_m(),
        }
    }

    fn reliability_schedule(&self, epoch: usize) -> Result<(f64, f64)> {
        let (beta, lambda_u) = absolute_reliability(epoch, self.config.epochs, self.config.lambda0)?;
        match self.config.effective_mode() {
            TrainMode::NaiveCodistill => Ok((beta, self.config.lambda0)),
            _ => Ok((beta, lambda_u)),
        }
    }

    /// Runs every epoch, reporting to `observer`.
    pub fn train(&mut self, split: &DatasetSplit, observer: &mut dyn RunObserver) -> Result<Vec<EpochSummary>> {
        let mut summaries = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let records = self.run_epoch(split, epoch, observer)?;
            let summary = self.summarize_epoch(split, epoch, &records)?;
            observer.epoch(&summary, &self.students)?;
            summaries.push(summary);
        }
        Ok(summaries)
    }

    pub fn run_epoch(
        &mut self,
        split: &DatasetSplit,
        epoch: usize,
        observer: &mut dyn RunObserver,
    ) -> Result<Vec<StepRecord>> {
        if split.labeled.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one labeled scene".into()));
        }
        if self.config.effective_mode() == TrainMode::Collis {
            self.controller.start_epoch(epoch, self.config.epochs)?;
        }
        let (beta, lambda_u) = self.reliability_schedule(epoch)?;
        let order = |name: &str, n: usize| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut self.streams.stream(name, epoch as u64));
            idx
        };
        let labeled_order = order("labeled", split.labeled.len());
        let unlabeled_order = order("unlabeled", split.unlabeled.len());
        let iterations = split.labeled.len().max(split.unlabeled.len());

        let mut records = Vec::with_capacity(iterations);
        for i in 0..iterations {
            let l = labeled_order[i % labeled_order.len()];
            let u = (!unlabeled_order.is_empty()).then(|| unlabeled_order[i % unlabeled_order.len()]);
            let record = self.step(split, epoch, l, u, beta, lambda_u)?;
            observer.step(&record)?;
            self.pending.push(record.clone());
            if self.pending.len() == self.config.log_window {
                if let Some(w) = WindowSummary::from_records(&self.pending) {
                    observer.window(&w)?;
                }
                self.pending.clear();
            }
            records.push(record);
        }
        Ok(records)
    }

    fn build_views(&mut self, split: &DatasetSplit, l: usize, u: Option<usize>, q: f64) -> Result<(Vec<View>, Option<MixStrategy>)> {
        let labeled = &split.labeled[l];
        let gt = labeled
            .labels()
            .ok_or_else(|| Error::InvalidArgument(format!("labeled scene {l} has no labels")))?;
        let labeled_view = || View {
            cloud: labeled.clone(),
            origin: vec![Origin::A; labeled.len()],
            targets: gt.to_vec(),
            truth: SealedTruth::unknown(labeled.len()),
        };
        let Some(u) = u else {
            return Ok((vec![labeled_view()], None));
        };
        let unlabeled = &split.unlabeled[u];
        let mixed = if self.config.effective_mode() == TrainMode::SupervisedOnly {
            None
        } else {
            maybe_mix(labeled, unlabeled, q, self.config.span, &mut self.mix_rng)?
        };
        if let Some(m) = mixed {
            let origin = m.origin().to_vec();
            let targets = origin
                .iter()
                .zip(&m.source_index)
                .map(|(o, &i)| if *o == Origin::A { gt[i as usize] } else { 0 })
                .collect();
            let src: Vec<Option<u32>> = origin
                .iter()
                .zip(&m.source_index)
                .map(|(o, &i)| (*o == Origin::B).then_some(i))
                .collect();
            let view = View {
                truth: split.sealed.view(u, &src),
                cloud: m.cloud,
                origin,
                targets,
            };
            return Ok((vec![view], Some(m.strategy)));
        }
        let n = unlabeled.len();
        let all: Vec<Option<u32>> = (0..n as u32).map(Some).collect();
        let unlabeled_view = View {
            cloud: unlabeled.clone(),
            origin: vec![Origin::B; n],
            targets: vec![0; n],
            truth: split.sealed.view(u, &all),
        };
        Ok((vec![labeled_view(), unlabeled_view], None))
    }

    fn step(
        &mut self,
        split: &DatasetSplit,
        epoch: usize,
        l: usize,
        u: Option<usize>,
        beta: f64,
        lambda_u: f64,
    ) -> Result<StepRecord> {
        let mode = self.config.effective_mode();
        let q_m = self.effective_q();
        let (views, mixed) = self.build_views(split, l, u, q_m)?;
        let s_count = self.students.len();

        // forward: passes[student][view]
        let passes: Vec<Vec<ForwardPass>> = self
            .students
            .par_iter()
            .map(|s| views.iter().map(|v| s.forward(&v.cloud)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;

        let consensus = if s_count >= 2 {
            let preds: Vec<Vec<Label>> = passes
                .iter()
                .map(|p| p.iter().flat_map(|f| f.output.predictions.iter().copied()).collect())
                .collect();
            let refs: Vec<&[Label]> = preds.iter().map(Vec::as_slice).collect();
            Some(consensus_fraction(&refs)?)
        } else {
            None
        };

        // shared reliability over unlabeled-origin points of every view
        let has_unlabeled = views.iter().any(View::has_unlabeled);
        let reliability = if s_count >= 2 && has_unlabeled {
            let confidences: Vec<Vec<f64>> = passes
                .iter()
                .map(|p| {
                    views
                        .iter()
                        .zip(p)
                        .flat_map(|(v, f)| {
                            (0..v.cloud.len())
                                .filter(|&i| v.is_unlabeled(i))
                                .map(|i| f.output.confidence[i])
                        })
                        .collect()
                })
                .collect();
            let refs: Vec<&[f64]> = confidences.iter().map(Vec::as_slice).collect();
            let policy = match mode {
                TrainMode::NaiveCodistill => ReliabilityPolicy::Naive,
                _ => ReliabilityPolicy::Adaptive,
            };
            Some(ReliabilityState::compute(
                policy,
                beta,
                lambda_u,
                self.config.delta0,
                self.config.fixed_threshold,
                &refs,
            )?)
        } else {
            None
        };

        // pseudo[source][target][view]
        let mut pseudo: Vec<Vec<Vec<PseudoLabels>>> = Vec::new();
        let mut retention = vec![RetentionStats::default(); s_count];
        if let Some(rel) = &reliability {
            for (src, src_passes) in passes.iter().enumerate() {
                let eligible: Vec<Vec<bool>> = views
                    .iter()
                    .zip(src_passes)
                    .map(|(v, f)| (0..v.cloud.len()).map(|i| v.is_unlabeled(i) && f.mapping.in_bounds(i)).collect())
                    .collect();
                let mut per_target = Vec::with_capacity(s_count);
                for target in 0..s_count {
                    let mut per_view = Vec::with_capacity(views.len());
                    for (vi, (v, f)) in views.iter().zip(src_passes).enumerate() {
                        if target == src {
                            per_view.push(PseudoLabels {
                                labels: vec![0; v.cloud.len()],
                                mask: vec![false; v.cloud.len()],
                            });
                            continue;
                        }
                        let pl = filter_pseudo_labels(&f.output, rel.delta[src][target], &eligible[vi])?;
                        retention[src].merge(sealed_retention(&eligible[vi], &pl.mask, &pl.labels, &v.truth)?);
                        per_view.push(pl);
                    }
                    per_target.push(per_view);
                }
                pseudo.push(per_target);
            }
        }

        let certainty: Vec<CertaintyAccumulator> = passes
            .iter()
            .map(|p| {
                let mut acc = CertaintyAccumulator::default();
                for (v, f) in views.iter().zip(p) {
                    acc.merge(sealed_incorrect_certainty(&f.output.probs, &f.output.predictions, &v.truth)?);
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;

        let use_reg = match mode {
            TrainMode::Collis => true,
            TrainMode::NaiveCodistill => false,
            TrainMode::SupervisedOnly => self.config.supervised_regularization,
        };
        let use_unlabeled = mode != TrainMode::SupervisedOnly;
        let lambda_reg = self.config.lambda_reg;
        let lr = self.config.learning_rate;

        let ctx = StepContext {
            views: &views,
            reliability: reliability.as_ref().filter(|_| use_unlabeled),
            pseudo: &pseudo,
            use_reg,
            lambda_reg,
        };
        let outcomes: Vec<Result<(f64, f64, f64)>> = self
            .students
            .par_iter_mut()
            .zip(passes.par_iter())
            .enumerate()
            .map(|(t, (student, student_passes))| {
                let (grads, values) = ctx.student_gradients(student, t, student_passes)?;
                if let Some(g) = grads {
                    student.step(&g, lr)?;
                }
                Ok(values)
            })
            .collect();

        let mut students = Vec::with_capacity(s_count);
        for (t, outcome) in outcomes.into_iter().enumerate() {
            let failure = |reason: &str| {
                let dump = FailedStep {
                    epoch,
                    iteration: self.iteration,
                    labeled_scene: l,
                    unlabeled_scene: u,
                    q_m,
                    mixed,
                    student: t as u32,
                    reason,
                };
                Error::NonFinite(serde_json::to_string(&dump).unwrap_or_else(|_| reason.to_string()))
            };
            let (ll, lreg, lu) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => return Err(failure(&msg)),
                Err(e) => return Err(e),
            };
            if !(ll.is_finite() && lreg.is_finite() && lu.is_finite()) {
                return Err(failure("loss is not finite"));
            }
            students.push(StudentStep {
                labeled_loss: ll,
                regularization_loss: lreg,
                unlabeled_loss: lu,
                retention: retention[t],
                certainty: certainty[t],
            });
        }

        if mode == TrainMode::Collis {
            if let Some(a) = consensus {
                self.controller.observe(a, mixed.is_some());
            }
        }

        let record = StepRecord {
            epoch,
            iteration: self.iteration,
            labeled_scene: l,
            unlabeled_scene: u,
            q_m,
            mixed,
            consensus,
            reliability,
            students,
        };
        self.iteration += 1;
        Ok(record)
    }

    fn summarize_epoch(&self, split: &DatasetSplit, epoch: usize, records: &[StepRecord]) -> Result<EpochSummary> {
        let (beta, lambda_u) = self.reliability_schedule(epoch)?;
        let window = WindowSummary::from_records(records);
        let reports = if split.validation.is_empty() {
            None
        } else {
            Some(evaluate(&self.students, &split.validation)?)
        };
        let students = (0..self.students.len())
            .map(|s| {
                let (val_miou, val_iou) = reports
                    .as_ref()
                    .map_or((0.0, Vec::new()), |r| (r[s].miou, r[s].per_class.clone()));
                StudentEpoch {
                    val_miou,
                    val_iou,
                    training: window.as_ref().map(|w| w.students[s].clone()).unwrap_or(StudentWindow {
                        mean_loss: 0.0,
                        retention: RetentionStats::default(),
                        retention_rate: 0.0,
                        pseudo_label_accuracy: None,
                        certainty: CertaintyAccumulator::default(),
                        certainty_of_incorrect: None,
                    }),
                }
            })
            .collect();
        Ok(EpochSummary {
            epoch,
            beta,
            lambda_u,
            q_m: self.effective_q(),
            mean_consensus: window.and_then(|w| w.mean_consensus),
            students,
        })
    }
}

/// Read-only data shared by every student's loss computation in one step.
struct StepContext<'a> {
    views: &'a [View],
    reliability: Option<&'a ReliabilityState>,
    pseudo: &'a [Vec<Vec<PseudoLabels>>],
    use_reg: bool,
    lambda_reg: f64,
}

impl StepContext<'_> {
    /// Summed parameter gradients over views (None when nothing contributed)
    /// and the (labeled, regularization, unlabeled) loss values.
    fn student_gradients(
        &self,
        student: &StudentModel,
        target: usize,
        passes: &[ForwardPass],
    ) -> Result<(Option<Params>, (f64, f64, f64))> {
        let mut grads: Option<Params> = None;
        let mut values = (0.0, 0.0, 0.0);
        for (vi, (view, pass)) in self.views.iter().zip(passes).enumerate() {
            let n = view.cloud.len();
            let own: Vec<bool> = (0..n).map(|i| pass.mapping.in_bounds(i)).collect();
            let probs = &pass.output.probs;

            let labeled_mask: Vec<bool> = (0..n).map(|i| own[i] && !view.is_unlabeled(i)).collect();
            let ll = labeled_loss(probs, &view.targets, &labeled_mask)?;
            let reg = if self.use_reg {
                regularization_loss(probs, &own, self.lambda_reg)?
            } else {
                LossValue::zero(n, probs.cols())
            };
            let lu = match self.reliability {
                Some(rel) => {
                    let masks: Vec<(usize, f64, Vec<bool>)> = rel.omega[target]
                        .iter()
                        .map(|&(src, w)| {
                            let pl = &self.pseudo[src][target][vi];
                            (src, w, pl.mask.iter().zip(&own).map(|(&a, &b)| a && b).collect())
                        })
                        .collect();
                    let sources: Vec<PseudoSource<'_>> = masks
                        .iter()
                        .map(|(src, w, mask)| PseudoSource {
                            labels: &self.pseudo[*src][target][vi].labels,
                            mask,
                            weight: *w,
                        })
                        .collect();
                    unlabeled_loss(probs, &sources, rel.lambda_u)?
                }
                None => LossValue::zero(n, probs.cols()),
            };

            values.0 += ll.value;
            values.1 += reg.value;
            values.2 += lu.value;
            if ll.is_empty() && reg.is_empty() && lu.is_empty() {
                continue;
            }
            let mut dlogits: Matrix = ll.grad;
            if !reg.is_empty() {
                dlogits.add_assign(&reg.grad);
            }
            if !lu.is_empty() {
                dlogits.add_assign(&lu.grad);
            }
            let g = student.backward(pass, &dlogits)?;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        Ok((grads, values))
    }
}

/// Per-student IoU over a set of labeled scenes.
pub fn evaluate(students: &[StudentModel], scenes: &[PointCloud]) -> Result<Vec<IouReport>> {
    students
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(s.num_classes());
            for scene in scenes {
                let truth = scene
                    .labels()
                    .ok_or_else(|| Error::InvalidArgument("evaluation scenes must be labeled".into()))?;
                cm.accumulate(truth, &s.predict(scene)?.predictions, None)?;
            }
            Ok(cm.iou())
        })
        .collect()
}

/// Per point, the prediction of the most confident student; ties go to the
/// lowest student id.
pub fn ensemble_vote(outputs: &[StudentOutput]) -> Result<Vec<Label>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one student".into()))?;
    for o in outputs {
        Error::check_len("student outputs", first.len(), o.len())?;
    }
    Ok((0..first.len())
        .map(|i| {
            let mut best = first;
            for o in &outputs[1..] {
                if o.confidence[i] > best.confidence[i] {
                    best = o;
                }
            }
            best.predictions[i]
        })
        .collect())
}

pub fn ensemble_predict(students: &[StudentModel], cloud: &PointCloud) -> Result<Vec<Label>> {
    let outputs = students
        .par_iter()
        .map(|s| s.predict(cloud))
        .collect::<Result<Vec<_>>>()?;
    ensemble_vote(&outputs)
}

pub fn evaluate_ensemble(students: &[StudentModel], scenes: &[PointCloud]) -> Result<IouReport> {
    let classes = students
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one student".into()))?
        .num_classes();
    let mut cm = ConfusionMatrix::new(classes);
    for scene in scenes {
        let truth = scene
            .labels()
            .ok_or_else(|| Error::InvalidArgument("evaluation scenes must be labeled".into()))?;
        cm.accumulate(truth, &ensemble_predict(students, scene)?, None)?;
    }
    Ok(cm.iou())
}

/// Writes labeled scenes with ground truth (origin A) and unlabeled scenes
/// labeled by the ensemble (origin B). Returns the written paths in order.
pub fn export_distillation_set(
    students: &[StudentModel],
    unlabeled: &[PointCloud],
    labeled: &[PointCloud],
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(labeled.len() + unlabeled.len());
    for (i, scene) in labeled.iter().enumerate() {
        if scene.labels().is_none() {
            return Err(Error::InvalidArgument(format!("labeled scene {i} has no labels")));
        }
        let out = scene.clone().with_origin(vec![Origin::A; scene.len()])?;
        let path = dir.join(format!("labeled_{i:04}.pcls"));
        write_cloud(&out, &path)?;
        paths.push(path);
    }
    for (i, scene) in unlabeled.iter().enumerate() {
        let labels = ensemble_predict(students, scene)?;
        let out = scene
            .without_labels()
            .with_labels(labels)?
            .with_origin(vec![Origin::B; scene.len()])?;
        let path = dir.join(format!("pseudo_{i:04}.pcls"));
        write_cloud(&out, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
