//! Ancestral sampling through the learned reverse chain.

use ndarray::Array2;

use crate::denoiser::{mean_affine, variance_for_level, Denoiser, VarianceMode};
use crate::error::{Error, Result};
use crate::forward::posterior_unchecked;
use crate::rng::{self, normal_matrix, Stream};
use crate::schedule::{Schedule, ScheduleSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleOptions {
    /// Keep every intermediate state, not just `x_0`.
    pub keep_trace: bool,
    /// Add no noise in the final `t = 1` step even under the noising
    /// variance. Posterior-variance models never add noise there.
    pub denoise_final: bool,
}

/// Output of the reverse chain. With `keep_trace`, `chain[k]` is the state
/// at level `levels[k]`, running from the starting level down to 0;
/// otherwise only the final state is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub chain: Vec<Array2<f64>>,
    pub levels: Vec<usize>,
    pub seed: u64,
    pub schedule: ScheduleSpec,
}

impl SampleTrace {
    /// The generated samples `x_0`.
    pub fn samples(&self) -> &Array2<f64> {
        self.chain.last().expect("chain is never empty")
    }
}

/// Draw `x_T ~ N(0, I)` and run the reverse chain down to `x_0`.
pub fn generate<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    n: usize,
    dim: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrace> {
    let mut r = rng::root(seed);
    let x_init = normal_matrix(&mut r, n, dim);
    run_chain(model, s, s.levels(), x_init, &mut r, seed, opts)
}

/// Run the reverse chain from a given state at level `t_start`.
pub fn denoise_from<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    t_start: usize,
    x_init: Array2<f64>,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrace> {
    s.check_level(t_start)?;
    let mut r = rng::root(seed);
    run_chain(model, s, t_start, x_init, &mut r, seed, opts)
}

fn run_chain<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    t_start: usize,
    x_init: Array2<f64>,
    r: &mut Stream,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrace> {
    check_finite(&x_init, t_start)?;
    let n = x_init.nrows();
    let dim = x_init.ncols();
    let mut chain = Vec::new();
    let mut levels = Vec::new();
    let mut x = x_init;
    for t in (1..=t_start).rev() {
        let pred = model.predict_rows(s, &x, &vec![t; n])?;
        let p = posterior_unchecked(s, t);
        let (alpha, beta) = mean_affine(&p, model.mean_mode());
        let mut next = pred * alpha + &x * beta;
        let silent = t == 1
            && (opts.denoise_final || model.variance_mode() == VarianceMode::PosteriorVariance);
        let var = variance_for_level(&p, s, t, model.variance_mode());
        if !silent && var > 0.0 {
            next = next + normal_matrix(r, n, dim) * var.sqrt();
        }
        check_finite(&next, t - 1)?;
        if opts.keep_trace {
            chain.push(std::mem::replace(&mut x, next));
            levels.push(t);
        } else {
            x = next;
        }
    }
    chain.push(x);
    levels.push(0);
    Ok(SampleTrace {
        chain,
        levels,
        seed,
        schedule: s.spec().clone(),
    })
}

fn check_finite(x: &Array2<f64>, level: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampler state at level {level}")))
    }
}
