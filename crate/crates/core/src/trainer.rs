//! Stochastic-gradient training with Adam.
//!
//! Step `k` draws all of its randomness (data batch, levels, noise) from
//! stream `k` of the run seed, so a run resumed from a checkpoint continues
//! exactly where an uninterrupted run would be.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{sample_data, DataSpec};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::objectives::{build_problem, ObjectiveSpec, Variant};
use crate::rng;
use crate::schedule::{Schedule, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

fn default_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub objective: ObjectiveSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub adam: AdamHyper,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many steps (the final one is always written).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Record real elapsed time in the loss log instead of zeros.
    #[serde(default)]
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn new(variant: Variant, steps: usize, seed: u64) -> Self {
        Self {
            objective: ObjectiveSpec::new(variant, 1),
            batch_size: default_batch(),
            steps,
            adam: AdamHyper::default(),
            seed,
            checkpoint_every: None,
            log_wall_time: false,
        }
    }

    /// Everything checkable before the first step.
    pub fn validate(&self, data: &DataSpec, s: &Schedule, params: &DenoiserParams) -> Result<()> {
        self.objective
            .validate(params.mode, params.variance_mode, s)
            .map_err(|e| Error::Config(e.to_string()))?;
        params.validate()?;
        if self.batch_size == 0 || self.batch_size < self.objective.levels_per_step {
            return Err(Error::Config(format!(
                "batch_size {} must be at least levels_per_step {}",
                self.batch_size, self.objective.levels_per_step
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("adam step size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return Err(Error::Config("adam decays must lie in [0, 1) and eps be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        data.mixture().map_err(|e| Error::Config(e.to_string()))?;
        if data.dim() != params.dim() {
            return Err(Error::Config(format!(
                "data has dimension {}, network {}",
                data.dim(),
                params.dim()
            )));
        }
        if params.levels != s.levels() {
            return Err(Error::Config(format!(
                "network embeds {} levels, schedule has {}",
                params.levels,
                s.levels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub variant: Variant,
    pub value: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of completed steps.
    pub step: usize,
    pub config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub data: DataSpec,
    pub model: DenoiserParams,
    pub optimizer: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub optimizer: AdamState,
    pub log: Vec<LossRecord>,
}

/// Run `config.steps` Adam steps from `init`.
pub fn train(config: &TrainConfig, data: &DataSpec, s: &Schedule, init: DenoiserParams) -> Result<TrainOutcome> {
    let start = Checkpoint {
        step: 0,
        config: config.clone(),
        schedule: s.spec().clone(),
        data: data.clone(),
        optimizer: AdamState::new(init.num_params()),
        model: init,
    };
    resume(start, s, |_| Ok(()))
}

/// Continue from `start` up to `start.config.steps` completed steps, calling
/// `on_checkpoint` every `checkpoint_every` steps and after the last one.
pub fn resume<F>(start: Checkpoint, s: &Schedule, mut on_checkpoint: F) -> Result<TrainOutcome>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    let Checkpoint {
        step: first,
        config,
        data,
        model: mut params,
        optimizer: mut state,
        ..
    } = start;
    config.validate(&data, s, &params)?;
    if state.m.len() != params.num_params() {
        return Err(Error::Config("optimiser state does not match the network".into()));
    }
    let clock = Instant::now();
    let mut log = Vec::with_capacity(config.steps.saturating_sub(first));
    let mut flat = params.to_flat();
    for step in first..config.steps {
        let mut r = rng::split(config.seed, step as u64);
        let x0 = sample_data(&data, config.batch_size, &mut r)?;
        let problem = build_problem(&config.objective, params.mode, params.variance_mode, s, &x0, &mut r)?;
        let (value, grad) = problem.value_and_gradient(&params).map_err(|e| Error::Diverged {
            step,
            reason: e.to_string(),
        })?;
        adam_step(&mut flat, &grad.to_flat(), &mut state, &config.adam)?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        params.set_flat(&flat)?;
        log.push(LossRecord {
            step,
            variant: config.objective.variant,
            value,
            seed: config.seed,
            wall_ms: if config.log_wall_time {
                clock.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        let done = step + 1;
        let due = config.checkpoint_every.is_some_and(|k| done % k == 0);
        if due || done == config.steps {
            on_checkpoint(&Checkpoint {
                step: done,
                config: config.clone(),
                schedule: s.spec().clone(),
                data: data.clone(),
                model: params.clone(),
                optimizer: state.clone(),
            })?;
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        log,
    })
}

/// Loss log as CSV with columns `step,variant,value,seed,wall_ms`.
pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,variant,value,seed,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            r.variant.name(),
            fmt_f64(r.value),
            r.seed,
            r.wall_ms
        ));
    }
    out
}

/// Exponential moving average with smoothing factor `alpha`.
pub fn smoothed(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for v in values {
        let next = match acc {
            None => *v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}
