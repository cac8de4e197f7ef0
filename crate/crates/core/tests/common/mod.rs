//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use d3t::boxes::BBox;
use d3t::cli::ExperimentConfig;
use d3t::detector::{ArchConfig, Detector, ParamVector};
use d3t::eval::{GtBox, ScoredBox};
use d3t::schedule::{Branch, LambdaSchedule, ZigzagConfig};
use d3t::synthgen::{render_scene, Domain, DomainGapConfig, SceneGeometry, SceneSample};
use d3t::trainer::{Regime, ZigzagParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn detector() -> Detector {
    Detector::new(ArchConfig::default()).unwrap()
}

/// Initialised weights with extra random spread so every head is active.
pub fn random_params(det: &Detector, seed: u64, spread: f64) -> ParamVector {
    let mut p = det.init_params(seed);
    let mut r = rng(seed ^ 0xA5A5);
    for v in &mut p.values {
        *v += spread * r.random_range(-1.0..1.0);
    }
    p
}

pub fn scene(seed: u64, id: u64, domain: Domain) -> SceneSample {
    render_scene(seed, id, domain, &DomainGapConfig::default(), &SceneGeometry::default()).unwrap()
}

pub fn param_hash(p: &ParamVector) -> u64 {
    let mut h = DefaultHasher::new();
    for v in &p.values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub fn bitwise_eq(a: &ParamVector, b: &ParamVector) -> bool {
    a.values.len() == b.values.len() && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Small but complete experiment: every phase and branch is exercised.
pub fn small_experiment(regime: Regime) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_source: 24,
        n_target: 24,
        n_test: 12,
        ..ExperimentConfig::default()
    };
    let t = &mut cfg.trainer;
    t.regime = regime;
    t.seed = 11;
    t.total_iterations = 96;
    t.burn_in_iterations = 24;
    t.zigzag = ZigzagParams {
        z0_thr: 2,
        z0_rgb: 6,
        beta: 2,
        step_length: 16,
    };
    t.lambda = LambdaSchedule::Ramp {
        start_iter: 30,
        ramp_iters: 20,
    };
    t.eval_interval = 32;
    cfg
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of `f` around `p`, one coordinate at a time.
pub fn numeric_grad(p: &ParamVector, h: f64, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    (0..p.values.len())
        .map(|k| {
            let mut plus = p.clone();
            plus.values[k] += h;
            let mut minus = p.clone();
            minus.values[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate-wise relative error; magnitudes below `floor` count as
/// `floor` so that exact zeros compare sensibly.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Zigzag switch counter

/// Switch-counter interpreter for the zigzag loop with constant budgets.
/// The switch is advanced at the start of a new period, before the branch
/// test, so every period opens with `z_thr` thermal iterations.
pub fn switch_counter_trace(z_thr: u64, z_rgb: u64, iterations: u64) -> Vec<Branch> {
    let period = z_thr + z_rgb;
    let mut switch = z_thr;
    let mut out = Vec::with_capacity(iterations as usize);
    for i in 0..iterations {
        if i > 0 && i % period == 0 {
            switch += period;
        }
        out.push(if i < switch { Branch::Thermal } else { Branch::Rgb });
    }
    out
}

/// The same loop with the switch advanced after the branch, exactly as the
/// loop is usually written out.
pub fn switch_counter_trace_update_after(z_thr: u64, z_rgb: u64, iterations: u64) -> Vec<Branch> {
    let period = z_thr + z_rgb;
    let mut switch = z_thr;
    let mut out = Vec::with_capacity(iterations as usize);
    for i in 0..iterations {
        out.push(if i < switch { Branch::Thermal } else { Branch::Rgb });
        if i > 0 && i % period == 0 {
            switch += period;
        }
    }
    out
}

/// Interpreter for a full schedule: budgets grow by `beta` once per completed
/// step, and the switch is re-anchored at the start of every period and at
/// every step boundary.
pub fn stepped_trace(cfg: &ZigzagConfig) -> Vec<Branch> {
    let period = cfg.z0_thr + cfg.z0_rgb;
    let mut z_thr = cfg.z0_thr;
    let mut out = Vec::new();
    let mut switch = 0;
    for rel in 0..cfg.total_iterations - cfg.burn_in_iterations {
        if rel > 0 && rel % cfg.step_length == 0 {
            z_thr = (z_thr + cfg.beta).min(period);
        }
        if rel % period == 0 || rel % cfg.step_length == 0 {
            switch = rel - rel % period + z_thr;
        }
        out.push(if rel < switch { Branch::Thermal } else { Branch::Rgb });
    }
    out
}

// ---------------------------------------------------------------------------
// Average precision

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// True-positive count among the first `k` ranked detections, recomputed
/// from scratch for this prefix.
fn prefix_hits(ranked: &[ScoredBox], gts: &[GtBox], k: usize, thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut hits = 0;
    for d in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = oracle_iou(&d.bbox, &gt.bbox);
            if v >= thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            hits += 1;
        }
    }
    hits
}

/// 101-point interpolated AP by enumerating every ranking prefix:
/// `p(r) = max { precision(k) : recall(k) >= r }`.
pub fn brute_force_ap(dets: &[ScoredBox], gts: &[GtBox], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.index.cmp(&b.index))
    });
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = prefix_hits(&ranked, gts, k, thr) as f64;
            (tp / gts.len() as f64, tp / k as f64)
        })
        .collect();
    let mut sum = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Random single-class instance with at most 6 detections and 4 ground
/// truths over two images; coordinates on a coarse lattice so that
/// overlaps, exact ties and threshold-boundary IoUs all occur.
pub fn micro_instance(r: &mut impl Rng) -> (Vec<ScoredBox>, Vec<GtBox>) {
    let boxed = |r: &mut dyn rand::RngCore| {
        BBox::new(
            4.0 + r.random_range(0..6) as f64,
            4.0 + r.random_range(0..3) as f64,
            2.0 + r.random_range(0..3) as f64,
            2.0 + r.random_range(0..3) as f64,
        )
    };
    let n_gt = r.random_range(0..=4);
    let n_det = r.random_range(0..=6);
    let gts = (0..n_gt)
        .map(|_| GtBox {
            image_id: r.random_range(0..2),
            bbox: boxed(r),
        })
        .collect();
    let dets = (0..n_det)
        .map(|index| ScoredBox {
            image_id: r.random_range(0..2),
            index,
            score: r.random_range(1..=5) as f64 / 5.0,
            bbox: boxed(r),
        })
        .collect();
    (dets, gts)
}
