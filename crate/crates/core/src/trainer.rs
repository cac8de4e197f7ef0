//! Training loop: supervised burn-in on the source domain, then either
//! dual-teacher zigzag learning, the single-teacher mean-teacher baseline, or
//! more supervised steps (source-only).
//!
//! Every random draw is keyed by `(seed, iteration, batch slot)`, and
//! per-sample gradients are reduced in batch order, so a run is bit-identical
//! regardless of the rayon thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    assign_targets, ArchConfig, CellTarget, DecodeConfig, DetectionSet, Detector, LabelSource, LossTerms,
    ParamVector,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::mt::{ema_update, filter_pool, PseudoLabelPolicy, TeacherBank};
use crate::rng::{self, Purpose};
use crate::schedule::{domain_at, lambda_at, teacher_to_update, Branch, LambdaSchedule, ZigzagConfig};
use crate::synthgen::{
    draw_flip, flip_objects, maybe_flip, strong_photometric, weak_photometric, AugmentConfig,
    GroundTruthObject, Image, SceneSample, UnlabeledScene,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Dual teachers, zigzag scheduling, lambda-weighted RGB pseudo-labels.
    D3t,
    /// One teacher, source and target loss in every step, EMA every step.
    MtBaseline,
    /// Supervised source training for the whole run.
    SourceOnly,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::D3t => "d3t",
            Regime::MtBaseline => "mt_baseline",
            Regime::SourceOnly => "source_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZigzagParams {
    pub z0_thr: u64,
    pub z0_rgb: u64,
    pub beta: u64,
    pub step_length: u64,
}

impl Default for ZigzagParams {
    fn default() -> Self {
        Self {
            z0_thr: 5,
            z0_rgb: 15,
            beta: 5,
            step_length: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub regime: Regime,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub burn_in_iterations: u64,
    pub zigzag: ZigzagParams,
    pub lambda: LambdaSchedule,
    pub ema_alpha: f64,
    /// Filter for pseudo-labels on source images (lambda-weighted term).
    pub rgb_policy: PseudoLabelPolicy,
    /// Filter for pseudo-labels on target images.
    pub thermal_policy: PseudoLabelPolicy,
    /// Candidate decoding for pseudo-labels.
    pub pseudo_decode: DecodeConfig,
    pub eval_decode: DecodeConfig,
    pub iou_threshold: f64,
    pub augment: AugmentConfig,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub arch: ArchConfig,
}

impl Default for TrainerConfig {
    /// Desk-scale profile. The learning rate is raised from the full-scale
    /// 0.005, at which the micro detector does not leave chance level within
    /// 4000 iterations.
    fn default() -> Self {
        Self {
            regime: Regime::D3t,
            seed: 0,
            learning_rate: 0.2,
            batch_size: 4,
            total_iterations: 4000,
            burn_in_iterations: 800,
            zigzag: ZigzagParams::default(),
            lambda: LambdaSchedule::Ramp {
                start_iter: 1000,
                ramp_iters: 1000,
            },
            ema_alpha: 0.99,
            rgb_policy: PseudoLabelPolicy::TopPercent { top_fraction: 0.01 },
            thermal_policy: PseudoLabelPolicy::ScoreThreshold { threshold: 0.7 },
            pseudo_decode: DecodeConfig::default(),
            eval_decode: DecodeConfig {
                score_threshold: 0.01,
                nms_iou: 0.5,
            },
            iou_threshold: 0.5,
            augment: AugmentConfig::default(),
            eval_interval: 500,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn zigzag_config(&self) -> ZigzagConfig {
        ZigzagConfig {
            z0_thr: self.zigzag.z0_thr,
            z0_rgb: self.zigzag.z0_rgb,
            beta: self.zigzag.beta,
            step_length: self.zigzag.step_length,
            total_iterations: self.total_iterations,
            burn_in_iterations: self.burn_in_iterations,
        }
    }

    /// Source-only either by request or because burn-in fills the run.
    pub fn effective_regime(&self) -> Regime {
        if self.burn_in_iterations >= self.total_iterations {
            Regime::SourceOnly
        } else {
            self.regime
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.burn_in_iterations > self.total_iterations {
            return Err(Error::config("burn_in_iterations exceeds total_iterations"));
        }
        if self.total_iterations == 0 {
            return Err(Error::config("total_iterations must be >= 1"));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(Error::config("ema_alpha must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::config("iou_threshold must lie in [0, 1]"));
        }
        match self.effective_regime() {
            Regime::D3t => self.zigzag_config().validate()?,
            Regime::MtBaseline if self.batch_size < 2 => {
                return Err(Error::config("mt_baseline needs batch_size >= 2"))
            }
            _ => {}
        }
        self.lambda.validate()?;
        self.rgb_policy.validate()?;
        self.thermal_policy.validate()?;
        self.pseudo_decode.validate()?;
        self.eval_decode.validate()?;
        self.augment.validate()?;
        self.arch.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BurnIn,
    Zigzag,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Teachers {
    Dual(TeacherBank),
    Single { teacher: ParamVector, ema_alpha: f64 },
}

/// One row of the per-iteration metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: u64,
    pub phase: Phase,
    /// `rgb`, `thermal`, or `mixed` for the baseline's paired batches.
    pub domain: String,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_unsup_rgb_teacher: f64,
    pub loss_unsup_thr_teacher: f64,
    pub n_pseudo_rgb: usize,
    pub n_pseudo_thr: usize,
}

/// Periodic evaluation of every live model on the target test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Iterations completed when the evaluation ran.
    pub iter: u64,
    pub models: BTreeMap<String, EvalReport>,
}

/// Epoch-wise shuffled index stream over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    seed: u64,
    purpose: Purpose,
    len: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(seed: u64, purpose: Purpose, len: usize) -> Self {
        let mut s = Self {
            seed,
            purpose,
            len,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng::stream(self.seed, self.purpose, self.epoch));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && self.len > 0 {
            if self.cursor == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub student: ParamVector,
    pub teachers: Option<Teachers>,
    pub iteration: u64,
    pub phase: Phase,
    pub source_sampler: Sampler,
    pub target_sampler: Sampler,
    pub metric_log: Vec<MetricRow>,
    pub eval_log: Vec<EvalRow>,
}

/// Training data as the trainer sees it: target scenes carry no labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub source: &'a [SceneSample],
    pub target: &'a [UnlabeledScene],
}

/// Loss of one sample, split by term. Unsupervised terms are unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub sup: LossTerms,
    pub unsup_rgb: LossTerms,
    pub unsup_thr: LossTerms,
    pub unsup_weight: f64,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.sup.total() + self.unsup_weight * (self.unsup_rgb.total() + self.unsup_thr.total())
    }
}

/// Per-sample objective: `sup(labels) + weight * (un(rgb) + un(thr))`.
/// Absent parts contribute nothing. Parts share one forward pass.
pub fn sample_loss(
    detector: &Detector,
    student: &ParamVector,
    strong_view: &Image,
    labels: Option<&[GroundTruthObject]>,
    pseudo_rgb: Option<&DetectionSet>,
    pseudo_thr: Option<&DetectionSet>,
    unsup_weight: f64,
) -> Result<(SampleLoss, ParamVector)> {
    let mut loss = SampleLoss {
        unsup_weight,
        ..SampleLoss::default()
    };
    if pseudo_rgb.is_none() && pseudo_thr.is_none() {
        let Some(labels) = labels else {
            return Ok((loss, student.zeros_like()));
        };
        let (terms, grad) = detector.supervised_loss(student, strong_view, labels)?;
        loss.sup = terms;
        return Ok((loss, grad));
    }
    let arch = detector.arch();
    let targets = |objects: &[GroundTruthObject]| assign_targets(arch, objects);
    let sup_t = labels.map(targets);
    let rgb_t = pseudo_rgb.map(|d| targets(&d.as_targets()));
    let thr_t = pseudo_thr.map(|d| targets(&d.as_targets()));
    let mut parts: Vec<(&[Option<CellTarget>], f64)> = Vec::with_capacity(3);
    for (t, w) in [(&sup_t, 1.0), (&rgb_t, unsup_weight), (&thr_t, unsup_weight)] {
        if let Some(t) = t {
            parts.push((t.as_slice(), w));
        }
    }
    let (terms, grad) = detector.combined_loss(student, strong_view, &parts)?;
    let mut terms = terms.into_iter();
    for (present, slot) in [
        (sup_t.is_some(), &mut loss.sup),
        (rgb_t.is_some(), &mut loss.unsup_rgb),
        (thr_t.is_some(), &mut loss.unsup_thr),
    ] {
        if present {
            *slot = terms.next().expect("one term per part");
        }
    }
    Ok((loss, grad))
}

/// One element of a training batch.
struct Item<'a> {
    image: &'a Image,
    labels: Option<&'a [GroundTruthObject]>,
    /// Position in the batch; keys the augmentation streams.
    slot: u64,
    /// Reduction weight (1 / group size).
    weight: f64,
    unsup: bool,
}

/// Teachers consulted for the unsupervised term. `Shared` feeds the same
/// pseudo-labels to the thermal-teacher slot and leaves the RGB slot empty.
#[derive(Clone, Copy)]
enum PseudoSources<'a> {
    Dual { rgb: &'a ParamVector, thermal: &'a ParamVector },
    Shared(&'a ParamVector),
}

struct BatchOutcome {
    grad: ParamVector,
    sup: f64,
    unsup_rgb: f64,
    unsup_thr: f64,
    total: f64,
    n_pseudo_rgb: usize,
    n_pseudo_thr: usize,
}

pub struct Trainer {
    cfg: TrainerConfig,
    detector: Detector,
    zigzag: ZigzagConfig,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            detector: Detector::new(cfg.arch)?,
            zigzag: cfg.zigzag_config(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn init_state(&self, data: &TrainingData) -> Result<TrainerState> {
        if data.source.is_empty() || data.target.is_empty() {
            return Err(Error::config("training needs at least one source and one target scene"));
        }
        Ok(TrainerState {
            student: self.detector.init_params(self.cfg.seed),
            teachers: None,
            iteration: 0,
            phase: Phase::BurnIn,
            source_sampler: Sampler::new(self.cfg.seed, Purpose::ShuffleSource, data.source.len()),
            target_sampler: Sampler::new(self.cfg.seed, Purpose::ShuffleTarget, data.target.len()),
            metric_log: Vec::new(),
            eval_log: Vec::new(),
        })
    }

    fn stream_index(iteration: u64, slot: u64) -> u64 {
        (iteration << 16) | slot
    }

    fn flip_for(&self, iteration: u64, slot: u64) -> bool {
        let mut r = rng::stream(self.cfg.seed, Purpose::Flip, Self::stream_index(iteration, slot));
        draw_flip(&self.cfg.augment, &mut r)
    }

    /// Weak view for the teachers; shares its flip with the strong view.
    fn weak_view(&self, image: &Image, iteration: u64, slot: u64) -> Image {
        let mut view = maybe_flip(image, self.flip_for(iteration, slot));
        let mut r = rng::stream(self.cfg.seed, Purpose::WeakPhotometric, Self::stream_index(iteration, slot));
        weak_photometric(&mut view, &self.cfg.augment, &mut r);
        view
    }

    fn strong_view(&self, image: &Image, iteration: u64, slot: u64) -> (Image, bool) {
        let flip = self.flip_for(iteration, slot);
        let mut view = maybe_flip(image, flip);
        let mut r = rng::stream(self.cfg.seed, Purpose::StrongPhotometric, Self::stream_index(iteration, slot));
        strong_photometric(&mut view, &self.cfg.augment, &mut r);
        (view, flip)
    }

    fn pseudo_labels(
        &self,
        teacher: &ParamVector,
        weak_views: &[Option<Image>],
        policy: &PseudoLabelPolicy,
        tag: LabelSource,
    ) -> Result<Vec<DetectionSet>> {
        let candidates = weak_views
            .par_iter()
            .map(|v| match v {
                Some(img) => self.detector.detect(teacher, img, &self.cfg.pseudo_decode),
                None => Ok(DetectionSet::default()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(filter_pool(&candidates, policy)
            .into_iter()
            .map(|s| s.tagged(tag))
            .collect())
    }

    fn compute_batch(
        &self,
        student: &ParamVector,
        iteration: u64,
        items: &[Item],
        pseudo: Option<(PseudoSources, PseudoLabelPolicy)>,
        unsup_weight: f64,
    ) -> Result<BatchOutcome> {
        let empty = DetectionSet::default();
        let (pseudo_rgb, pseudo_thr) = match pseudo {
            Some((sources, policy)) if items.iter().any(|it| it.unsup) => {
                let weak: Vec<Option<Image>> = items
                    .par_iter()
                    .map(|it| it.unsup.then(|| self.weak_view(it.image, iteration, it.slot)))
                    .collect();
                match sources {
                    PseudoSources::Dual { rgb, thermal } => (
                        self.pseudo_labels(rgb, &weak, &policy, LabelSource::RgbTeacher)?,
                        self.pseudo_labels(thermal, &weak, &policy, LabelSource::ThermalTeacher)?,
                    ),
                    PseudoSources::Shared(teacher) => (
                        vec![empty.clone(); items.len()],
                        self.pseudo_labels(teacher, &weak, &policy, LabelSource::ThermalTeacher)?,
                    ),
                }
            }
            _ => (Vec::new(), Vec::new()),
        };
        let single_teacher = matches!(pseudo, Some((PseudoSources::Shared(_), _)));

        let per_sample = items
            .par_iter()
            .enumerate()
            .map(|(k, it)| {
                let (view, flip) = self.strong_view(it.image, iteration, it.slot);
                let flipped;
                let labels = match it.labels {
                    Some(l) if flip => {
                        flipped = flip_objects(l, it.image.width);
                        Some(flipped.as_slice())
                    }
                    other => other,
                };
                let has_pseudo = it.unsup && !pseudo_thr.is_empty();
                let from_rgb = (has_pseudo && !single_teacher).then(|| &pseudo_rgb[k]);
                let from_thr = has_pseudo.then(|| &pseudo_thr[k]);
                sample_loss(&self.detector, student, &view, labels, from_rgb, from_thr, unsup_weight)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut out = BatchOutcome {
            grad: student.zeros_like(),
            sup: 0.0,
            unsup_rgb: 0.0,
            unsup_thr: 0.0,
            total: 0.0,
            n_pseudo_rgb: pseudo_rgb.iter().map(DetectionSet::len).sum(),
            n_pseudo_thr: pseudo_thr.iter().map(DetectionSet::len).sum(),
        };
        for (it, (loss, grad)) in items.iter().zip(&per_sample) {
            out.grad.add_scaled(grad, it.weight)?;
            out.sup += it.weight * loss.sup.total();
            out.unsup_rgb += it.weight * loss.unsup_rgb.total();
            out.unsup_thr += it.weight * loss.unsup_thr.total();
            out.total += it.weight * loss.total();
        }
        if !out.total.is_finite() || !out.grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "iteration {iteration}: loss {} (sup {}, unsup rgb {}, unsup thr {})",
                out.total, out.sup, out.unsup_rgb, out.unsup_thr
            )));
        }
        Ok(out)
    }

    fn sgd(&self, state: &mut TrainerState, grad: &ParamVector) -> Result<()> {
        state.student.add_scaled(grad, -self.cfg.learning_rate)?;
        if !state.student.is_finite() {
            return Err(Error::NonFinite(format!(
                "student weights after iteration {}",
                state.iteration
            )));
        }
        Ok(())
    }

    fn labeled_items<'a>(batch: &'a [SceneSample], first_slot: u64) -> Vec<Item<'a>> {
        let w = 1.0 / batch.len() as f64;
        batch
            .iter()
            .enumerate()
            .map(|(k, s)| Item {
                image: &s.image,
                labels: Some(s.objects.as_slice()),
                slot: first_slot + k as u64,
                weight: w,
                unsup: false,
            })
            .collect()
    }

    fn unlabeled_items<'a>(batch: &'a [UnlabeledScene], first_slot: u64) -> Vec<Item<'a>> {
        let w = 1.0 / batch.len() as f64;
        batch
            .iter()
            .enumerate()
            .map(|(k, s)| Item {
                image: &s.image,
                labels: None,
                slot: first_slot + k as u64,
                weight: w,
                unsup: true,
            })
            .collect()
    }

    fn push_row(state: &mut TrainerState, domain: &str, lambda: f64, o: &BatchOutcome) {
        state.metric_log.push(MetricRow {
            iter: state.iteration,
            phase: state.phase,
            domain: domain.to_string(),
            lambda,
            loss_total: o.total,
            loss_sup: o.sup,
            loss_unsup_rgb_teacher: o.unsup_rgb,
            loss_unsup_thr_teacher: o.unsup_thr,
            n_pseudo_rgb: o.n_pseudo_rgb,
            n_pseudo_thr: o.n_pseudo_thr,
        });
    }

    fn check_batch<T>(batch: &[T]) -> Result<()> {
        if batch.is_empty() {
            Err(Error::contract("empty batch"))
        } else {
            Ok(())
        }
    }

    /// Plain SGD on the mean supervised loss of strongly augmented views.
    /// Touches neither the teachers nor the iteration counter.
    pub fn supervised_update(&self, state: &mut TrainerState, batch: &[SceneSample]) -> Result<(f64, f64)> {
        Self::check_batch(batch)?;
        let items = Self::labeled_items(batch, 0);
        let o = self.compute_batch(&state.student, state.iteration, &items, None, 0.0)?;
        self.sgd(state, &o.grad)?;
        Ok((o.total, o.sup))
    }

    pub fn burn_in_step(&self, state: &mut TrainerState, batch: &[SceneSample]) -> Result<()> {
        if state.phase != Phase::BurnIn {
            return Err(Error::contract("burn_in_step outside burn-in"));
        }
        Self::check_batch(batch)?;
        let items = Self::labeled_items(batch, 0);
        let o = self.compute_batch(&state.student, state.iteration, &items, None, 0.0)?;
        self.sgd(state, &o.grad)?;
        Self::push_row(state, "rgb", 0.0, &o);
        state.iteration += 1;
        Ok(())
    }

    /// Creates the teachers as exact copies of the student.
    pub fn transition_to_zigzag(&self, state: &mut TrainerState) -> Result<()> {
        if state.phase != Phase::BurnIn || state.teachers.is_some() {
            return Err(Error::contract("transition_to_zigzag called twice"));
        }
        if state.iteration != self.cfg.burn_in_iterations {
            return Err(Error::contract(format!(
                "transition at iteration {} but burn-in is {}",
                state.iteration, self.cfg.burn_in_iterations
            )));
        }
        state.teachers = Some(match self.cfg.effective_regime() {
            Regime::D3t => Teachers::Dual(TeacherBank::from_student(&state.student, self.cfg.ema_alpha)?),
            Regime::MtBaseline => Teachers::Single {
                teacher: state.student.clone(),
                ema_alpha: self.cfg.ema_alpha,
            },
            Regime::SourceOnly => return Err(Error::contract("source-only runs have no teachers")),
        });
        state.phase = Phase::Zigzag;
        Ok(())
    }

    fn bank(state: &TrainerState) -> Result<&TeacherBank> {
        match state.teachers.as_ref() {
            Some(Teachers::Dual(bank)) => Ok(bank),
            _ => Err(Error::contract("dual-teacher step without a teacher bank")),
        }
    }

    fn bank_mut(state: &mut TrainerState) -> Result<&mut TeacherBank> {
        match state.teachers.as_mut() {
            Some(Teachers::Dual(bank)) => Ok(bank),
            _ => Err(Error::contract("dual-teacher step without a teacher bank")),
        }
    }

    fn expect_branch(&self, state: &TrainerState, branch: Branch) -> Result<()> {
        if state.phase != Phase::Zigzag {
            return Err(Error::contract("zigzag step during burn-in"));
        }
        let scheduled = domain_at(&self.zigzag, state.iteration)?;
        if scheduled != branch {
            return Err(Error::contract(format!(
                "iteration {} is scheduled for {:?}, not {:?}",
                state.iteration, scheduled, branch
            )));
        }
        Ok(())
    }

    /// Unlabeled target step: both teachers label the weak views, the student
    /// learns from the strong views, and only the thermal teacher is updated.
    pub fn thermal_step(&self, state: &mut TrainerState, batch: &[UnlabeledScene]) -> Result<()> {
        self.expect_branch(state, Branch::Thermal)?;
        Self::check_batch(batch)?;
        let items = Self::unlabeled_items(batch, 0);
        let o = {
            let bank = Self::bank(state)?;
            let sources = PseudoSources::Dual {
                rgb: &bank.rgb_teacher,
                thermal: &bank.thermal_teacher,
            };
            self.compute_batch(&state.student, state.iteration, &items, Some((sources, self.cfg.thermal_policy)), 1.0)?
        };
        self.sgd(state, &o.grad)?;
        let student = state.student.clone();
        Self::bank_mut(state)?.update(teacher_to_update(Branch::Thermal), &student)?;
        Self::push_row(state, "thermal", 1.0, &o);
        state.iteration += 1;
        Ok(())
    }

    /// Labeled source step: supervised loss plus `lambda` times both
    /// teachers' unsupervised terms; only the RGB teacher is updated.
    pub fn rgb_step(&self, state: &mut TrainerState, batch: &[SceneSample]) -> Result<()> {
        self.expect_branch(state, Branch::Rgb)?;
        Self::check_batch(batch)?;
        let lambda = lambda_at(&self.cfg.lambda, state.iteration);
        let mut items = Self::labeled_items(batch, 0);
        let o = if lambda == 0.0 {
            self.compute_batch(&state.student, state.iteration, &items, None, 0.0)?
        } else {
            for it in &mut items {
                it.unsup = true;
            }
            let bank = Self::bank(state)?;
            let sources = PseudoSources::Dual {
                rgb: &bank.rgb_teacher,
                thermal: &bank.thermal_teacher,
            };
            self.compute_batch(&state.student, state.iteration, &items, Some((sources, self.cfg.rgb_policy)), lambda)?
        };
        self.sgd(state, &o.grad)?;
        let student = state.student.clone();
        Self::bank_mut(state)?.update(teacher_to_update(Branch::Rgb), &student)?;
        Self::push_row(state, "rgb", lambda, &o);
        state.iteration += 1;
        Ok(())
    }

    /// Single-teacher step: mean supervised loss on the source half plus mean
    /// unsupervised loss on the target half, EMA into the one teacher.
    pub fn baseline_step(
        &self,
        state: &mut TrainerState,
        source: &[SceneSample],
        target: &[UnlabeledScene],
    ) -> Result<()> {
        if state.phase != Phase::Zigzag {
            return Err(Error::contract("baseline step during burn-in"));
        }
        if source.is_empty() && target.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut items = Self::labeled_items(source, 0);
        items.extend(Self::unlabeled_items(target, source.len() as u64));
        let (teacher, alpha) = match state.teachers.as_ref() {
            Some(Teachers::Single { teacher, ema_alpha }) => (teacher.clone(), *ema_alpha),
            _ => return Err(Error::contract("baseline step without a single teacher")),
        };
        let o = self.compute_batch(
            &state.student,
            state.iteration,
            &items,
            Some((PseudoSources::Shared(&teacher), self.cfg.thermal_policy)),
            1.0,
        )?;
        self.sgd(state, &o.grad)?;
        let next = ema_update(&teacher, &state.student, alpha)?;
        state.teachers = Some(Teachers::Single {
            teacher: next,
            ema_alpha: alpha,
        });
        Self::push_row(state, "mixed", 1.0, &o);
        state.iteration += 1;
        Ok(())
    }

    fn source_batch(&self, state: &mut TrainerState, data: &TrainingData, n: usize) -> Vec<SceneSample> {
        state
            .source_sampler
            .next_batch(n)
            .into_iter()
            .map(|i| data.source[i].clone())
            .collect()
    }

    fn target_batch(&self, state: &mut TrainerState, data: &TrainingData, n: usize) -> Vec<UnlabeledScene> {
        state
            .target_sampler
            .next_batch(n)
            .into_iter()
            .map(|i| data.target[i].clone())
            .collect()
    }

    /// Runs one iteration, sampling its batch and dispatching on the schedule.
    pub fn step(&self, state: &mut TrainerState, data: &TrainingData) -> Result<()> {
        if state.iteration >= self.cfg.total_iterations {
            return Err(Error::contract("run already complete"));
        }
        let regime = self.cfg.effective_regime();
        if regime == Regime::SourceOnly || state.iteration < self.cfg.burn_in_iterations {
            let batch = self.source_batch(state, data, self.cfg.batch_size);
            return self.burn_in_step(state, &batch);
        }
        if state.phase == Phase::BurnIn {
            self.transition_to_zigzag(state)?;
        }
        match regime {
            Regime::D3t => match domain_at(&self.zigzag, state.iteration)? {
                Branch::Thermal => {
                    let batch = self.target_batch(state, data, self.cfg.batch_size);
                    self.thermal_step(state, &batch)
                }
                Branch::Rgb => {
                    let batch = self.source_batch(state, data, self.cfg.batch_size);
                    self.rgb_step(state, &batch)
                }
            },
            Regime::MtBaseline => {
                let n_src = self.cfg.batch_size / 2;
                let src = self.source_batch(state, data, n_src);
                let tgt = self.target_batch(state, data, self.cfg.batch_size - n_src);
                self.baseline_step(state, &src, &tgt)
            }
            Regime::SourceOnly => unreachable!("handled above"),
        }
    }

    /// The model a run ships: thermal teacher, single teacher, or student.
    pub fn deployed<'s>(&self, state: &'s TrainerState) -> (&'static str, &'s ParamVector) {
        match &state.teachers {
            Some(Teachers::Dual(bank)) => ("teacher_thr", &bank.thermal_teacher),
            Some(Teachers::Single { teacher, .. }) => ("teacher", teacher),
            None => ("student", &state.student),
        }
    }

    /// Every live model, keyed by its checkpoint suffix.
    pub fn models<'s>(&self, state: &'s TrainerState) -> Vec<(&'static str, &'s ParamVector)> {
        let mut out = vec![("student", &state.student)];
        match &state.teachers {
            Some(Teachers::Dual(bank)) => {
                out.push(("teacher_rgb", &bank.rgb_teacher));
                out.push(("teacher_thr", &bank.thermal_teacher));
            }
            Some(Teachers::Single { teacher, .. }) => out.push(("teacher", teacher)),
            None => {}
        }
        out
    }

    pub fn evaluate_models(&self, state: &TrainerState, test_set: &[SceneSample]) -> Result<EvalRow> {
        let models = self
            .models(state)
            .into_iter()
            .map(|(name, p)| {
                let report = evaluate(&self.detector, p, test_set, &self.cfg.eval_decode, self.cfg.iou_threshold)?;
                Ok((name.to_string(), report))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(EvalRow {
            iter: state.iteration,
            models,
        })
    }

    /// Full run. With a test set, evaluation rows are logged every
    /// `eval_interval` iterations and always after the last one.
    pub fn run(&self, data: &TrainingData, test_set: Option<&[SceneSample]>) -> Result<RunOutcome> {
        let mut state = self.init_state(data)?;
        while state.iteration < self.cfg.total_iterations {
            self.step(&mut state, data)?;
            if let Some(test) = test_set {
                let done = state.iteration == self.cfg.total_iterations;
                let periodic = self.cfg.eval_interval > 0 && state.iteration % self.cfg.eval_interval == 0;
                if done || periodic {
                    let row = self.evaluate_models(&state, test)?;
                    state.eval_log.push(row);
                }
            }
        }
        let final_report = match test_set {
            Some(_) => {
                let (name, _) = self.deployed(&state);
                state.eval_log.last().and_then(|r| r.models.get(name)).cloned()
            }
            None => None,
        };
        Ok(RunOutcome { state, final_report })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainerState,
    /// Report for the deployed model at the end of the run.
    pub final_report: Option<EvalReport>,
}
