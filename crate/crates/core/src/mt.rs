//! Mean-teacher machinery: EMA weight averaging, the dual teacher bank and
//! pseudo-label generation.

use serde::{Deserialize, Serialize};

use crate::detector::{
    detection_order, DecodeConfig, Detection, DetectionSet, Detector, LabelSource, LossTerms,
    ParamVector,
};
use crate::error::{Error, Result};
use crate::synthgen::Image;

/// Returns `alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("EMA coefficient {alpha} outside (0, 1)")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Layout("teacher and student layouts differ".into()));
    }
    let values = teacher
        .values
        .iter()
        .zip(&student.values)
        .map(|(&t, &s)| alpha * t + (1.0 - alpha) * s)
        .collect();
    Ok(ParamVector {
        values,
        layout: teacher.layout.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSlot {
    RgbTeacher,
    ThermalTeacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBank {
    pub rgb_teacher: ParamVector,
    pub thermal_teacher: ParamVector,
    pub ema_alpha: f64,
}

impl TeacherBank {
    /// Both teachers start as exact copies of the student.
    pub fn from_student(student: &ParamVector, ema_alpha: f64) -> Result<Self> {
        if !(ema_alpha > 0.0 && ema_alpha < 1.0) {
            return Err(Error::config(format!("EMA coefficient {ema_alpha} outside (0, 1)")));
        }
        Ok(Self {
            rgb_teacher: student.clone(),
            thermal_teacher: student.clone(),
            ema_alpha,
        })
    }

    pub fn get(&self, slot: TeacherSlot) -> &ParamVector {
        match slot {
            TeacherSlot::RgbTeacher => &self.rgb_teacher,
            TeacherSlot::ThermalTeacher => &self.thermal_teacher,
        }
    }

    /// EMA-updates exactly one teacher; the other is left untouched.
    pub fn update(&mut self, slot: TeacherSlot, student: &ParamVector) -> Result<()> {
        let next = ema_update(self.get(slot), student, self.ema_alpha)?;
        match slot {
            TeacherSlot::RgbTeacher => self.rgb_teacher = next,
            TeacherSlot::ThermalTeacher => self.thermal_teacher = next,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PseudoLabelPolicy {
    ScoreThreshold { threshold: f64 },
    /// Keeps the `ceil(top_fraction * n)` best of an `n`-candidate pool.
    TopPercent { top_fraction: f64 },
}

impl PseudoLabelPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PseudoLabelPolicy::ScoreThreshold { threshold } if (0.0..=1.0).contains(&threshold) => Ok(()),
            PseudoLabelPolicy::TopPercent { top_fraction } if top_fraction > 0.0 && top_fraction <= 1.0 => {
                Ok(())
            }
            _ => Err(Error::config(format!("invalid pseudo-label policy {self:?}"))),
        }
    }
}

/// Number of candidates a top-fraction policy keeps from a pool of `n`.
pub fn top_count(top_fraction: f64, n: usize) -> usize {
    // the product is rounded first so that e.g. 0.01 * 300 does not ceil to 4
    let raw = top_fraction * n as f64;
    let rounded = (raw * 1e9).round() / 1e9;
    (rounded.ceil() as usize).min(n)
}

/// Applies `policy` to per-image candidate sets, treating all of them as one
/// pool. Output keeps the per-image grouping and ordering.
pub fn filter_pool(sets: &[DetectionSet], policy: &PseudoLabelPolicy) -> Vec<DetectionSet> {
    match *policy {
        PseudoLabelPolicy::ScoreThreshold { threshold } => sets
            .iter()
            .map(|s| DetectionSet {
                detections: s.detections.iter().filter(|d| d.score >= threshold).copied().collect(),
            })
            .collect(),
        PseudoLabelPolicy::TopPercent { top_fraction } => {
            let mut pool: Vec<(usize, usize, &Detection)> = sets
                .iter()
                .enumerate()
                .flat_map(|(img, s)| s.detections.iter().enumerate().map(move |(k, d)| (img, k, d)))
                .collect();
            pool.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let keep = top_count(top_fraction, pool.len());
            let mut out = vec![DetectionSet::default(); sets.len()];
            let mut chosen: Vec<(usize, usize)> = pool[..keep].iter().map(|&(i, k, _)| (i, k)).collect();
            chosen.sort_unstable();
            for (img, k) in chosen {
                out[img].detections.push(sets[img].detections[k]);
            }
            for s in &mut out {
                s.detections.sort_by(detection_order);
            }
            out
        }
    }
}

pub fn filter_candidates(set: &DetectionSet, policy: &PseudoLabelPolicy) -> DetectionSet {
    filter_pool(std::slice::from_ref(set), policy).pop().unwrap_or_default()
}

/// Teacher detections on a weakly augmented view, filtered by `policy`.
pub fn generate_pseudo_labels(
    detector: &Detector,
    teacher: &ParamVector,
    weak_view: &Image,
    policy: &PseudoLabelPolicy,
    decode: &DecodeConfig,
) -> Result<DetectionSet> {
    Ok(filter_candidates(&detector.detect(teacher, weak_view, decode)?, policy))
}

/// Batch form: a top-fraction policy ranks the whole batch as one pool.
pub fn generate_pseudo_labels_batch(
    detector: &Detector,
    teacher: &ParamVector,
    weak_views: &[&Image],
    policy: &PseudoLabelPolicy,
    decode: &DecodeConfig,
) -> Result<Vec<DetectionSet>> {
    let candidates = weak_views
        .iter()
        .map(|img| detector.detect(teacher, img, decode))
        .collect::<Result<Vec<_>>>()?;
    Ok(filter_pool(&candidates, policy))
}

/// Tags both sets with their teacher. They stay separate loss targets.
pub fn merge_dual_pseudo_labels(from_rgb: DetectionSet, from_thermal: DetectionSet) -> (DetectionSet, DetectionSet) {
    (
        from_rgb.tagged(LabelSource::RgbTeacher),
        from_thermal.tagged(LabelSource::ThermalTeacher),
    )
}

/// One unsupervised term per teacher, summed.
pub fn dual_unsupervised_loss(
    detector: &Detector,
    student: &ParamVector,
    strong_view: &Image,
    from_rgb: &DetectionSet,
    from_thermal: &DetectionSet,
) -> Result<((LossTerms, LossTerms), ParamVector)> {
    let (rgb_terms, mut grad) = detector.unsupervised_loss(student, strong_view, from_rgb)?;
    let (thr_terms, thr_grad) = detector.unsupervised_loss(student, strong_view, from_thermal)?;
    grad.add_scaled(&thr_grad, 1.0)?;
    Ok(((rgb_terms, thr_terms), grad))
}
