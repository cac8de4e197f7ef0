//! Zigzag domain scheduling and the pseudo-label weight ramp.
//!
//! The zigzag phase starts after burn-in and is split into steps of
//! `step_length` iterations. At step `t` the thermal budget is
//! `z0_thr + t * beta`, clamped to `[0, P]` with `P = z0_thr + z0_rgb`, and
//! the RGB budget is the remainder, so every step keeps the period `P`.
//! Inside a period the thermal iterations come first.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mt::TeacherSlot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Thermal,
    Rgb,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Thermal => "thermal",
            Branch::Rgb => "rgb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZigzagConfig {
    pub z0_thr: u64,
    pub z0_rgb: u64,
    pub beta: u64,
    pub step_length: u64,
    pub total_iterations: u64,
    pub burn_in_iterations: u64,
}

impl ZigzagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z0_thr + self.z0_rgb == 0 {
            return Err(Error::config("z0_thr + z0_rgb must be positive"));
        }
        if self.step_length < self.period() {
            return Err(Error::config(format!(
                "step_length {} shorter than one period {}",
                self.step_length,
                self.period()
            )));
        }
        if self.burn_in_iterations > self.total_iterations {
            return Err(Error::config("burn-in exceeds total iterations"));
        }
        Ok(())
    }

    pub fn period(&self) -> u64 {
        self.z0_thr + self.z0_rgb
    }

    /// `(z_thr, z_rgb)` at zigzag step `t`.
    pub fn budgets(&self, step: u64) -> (u64, u64) {
        let p = self.period();
        let z_thr = self.z0_thr.saturating_add(step.saturating_mul(self.beta)).min(p);
        (z_thr, p - z_thr)
    }

    pub fn step_index(&self, iteration: u64) -> Result<u64> {
        self.check_phase(iteration)?;
        Ok((iteration - self.burn_in_iterations) / self.step_length)
    }

    fn check_phase(&self, iteration: u64) -> Result<()> {
        if iteration < self.burn_in_iterations || iteration >= self.total_iterations {
            return Err(Error::contract(format!(
                "iteration {iteration} outside zigzag phase [{}, {})",
                self.burn_in_iterations, self.total_iterations
            )));
        }
        Ok(())
    }

    pub fn zigzag_iterations(&self) -> u64 {
        self.total_iterations - self.burn_in_iterations
    }
}

/// FLIR settings: 50/150, beta 50, 10k-iteration steps.
pub fn flir_defaults(total_iterations: u64, burn_in_iterations: u64) -> ZigzagConfig {
    zigzag_mode(50, 150, 50, 10_000, total_iterations, burn_in_iterations)
}

/// KAIST settings: 25/75, beta 25, 10k-iteration steps.
pub fn kaist_defaults(total_iterations: u64, burn_in_iterations: u64) -> ZigzagConfig {
    zigzag_mode(25, 75, 25, 10_000, total_iterations, burn_in_iterations)
}

pub fn zigzag_mode(
    z0_thr: u64,
    z0_rgb: u64,
    beta: u64,
    step_length: u64,
    total_iterations: u64,
    burn_in_iterations: u64,
) -> ZigzagConfig {
    ZigzagConfig {
        z0_thr,
        z0_rgb,
        beta,
        step_length,
        total_iterations,
        burn_in_iterations,
    }
}

/// Equal alternation of `k` thermal then `k` RGB iterations.
pub fn fixed_mode(k: u64, total_iterations: u64, burn_in_iterations: u64) -> ZigzagConfig {
    ZigzagConfig {
        z0_thr: k,
        z0_rgb: k,
        beta: 0,
        step_length: 2 * k,
        total_iterations,
        burn_in_iterations,
    }
}

pub fn domain_at(cfg: &ZigzagConfig, iteration: u64) -> Result<Branch> {
    let step = cfg.step_index(iteration)?;
    let (z_thr, _) = cfg.budgets(step);
    let r = (iteration - cfg.burn_in_iterations) % cfg.period();
    Ok(if r < z_thr { Branch::Thermal } else { Branch::Rgb })
}

pub fn teacher_to_update(branch: Branch) -> TeacherSlot {
    match branch {
        Branch::Thermal => TeacherSlot::ThermalTeacher,
        Branch::Rgb => TeacherSlot::RgbTeacher,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    /// Linear 0 -> 1 between `start_iter` and `start_iter + ramp_iters`.
    Ramp { start_iter: u64, ramp_iters: u64 },
    Fixed { value: f64 },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaSchedule::Ramp { ramp_iters, .. } if ramp_iters >= 1 => Ok(()),
            LambdaSchedule::Fixed { value } if (0.0..=1.0).contains(&value) => Ok(()),
            _ => Err(Error::config(format!("invalid lambda schedule {self:?}"))),
        }
    }
}

pub fn lambda_at(sched: &LambdaSchedule, iteration: u64) -> f64 {
    match *sched {
        LambdaSchedule::Ramp { start_iter, ramp_iters } => {
            if iteration <= start_iter {
                0.0
            } else {
                ((iteration - start_iter) as f64 / ramp_iters as f64).min(1.0)
            }
        }
        LambdaSchedule::Fixed { value } => value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub domain: Branch,
    pub teacher_updated: TeacherSlot,
    pub lambda: f64,
    pub z_thr: u64,
    pub z_rgb: u64,
    pub step_index: u64,
}

/// One row per zigzag iteration.
pub fn trace(cfg: &ZigzagConfig, lambda: &LambdaSchedule) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    (cfg.burn_in_iterations..cfg.total_iterations)
        .map(|i| {
            let step = cfg.step_index(i)?;
            let (z_thr, z_rgb) = cfg.budgets(step);
            let domain = domain_at(cfg, i)?;
            Ok(TraceRow {
                iteration: i,
                domain,
                teacher_updated: teacher_to_update(domain),
                lambda: lambda_at(lambda, i),
                z_thr,
                z_rgb,
                step_index: step,
            })
        })
        .collect()
}

pub fn write_trace_csv(rows: &[TraceRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "iteration,domain,teacher_updated,lambda,z_thr,z_rgb,step_index")?;
    for r in rows {
        let teacher = match r.teacher_updated {
            TeacherSlot::RgbTeacher => "rgb_teacher",
            TeacherSlot::ThermalTeacher => "thermal_teacher",
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.domain.as_str(),
            teacher,
            r.lambda,
            r.z_thr,
            r.z_rgb,
            r.step_index
        )?;
    }
    Ok(())
}
