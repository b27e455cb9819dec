//! Training objectives.
//!
//! Every objective here is, for fixed random draws, a quadratic function of
//! the network output: a weighted sum of squared residuals `A_i P_i + B_i`
//! plus per-row constants. [`Problem`] holds that quadratic. Building it
//! consumes randomness (levels, data noise) but never looks at the network,
//! so the same problem can be evaluated for several parameter settings
//! (paired seeds) or differentiated on a [`GradientTape`].
//!
//! All values are losses to minimise: the negative of the log-likelihood
//! style objectives they estimate.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{likelihood_variance, loss_and_gradient, mean_affine, Denoiser, DenoiserParams, MeanMode, VarianceMode};
use crate::error::{Error, Result};
use crate::forward::{conditional_with, posterior_unchecked, Batch};
use crate::rng::{normal_matrix, Stream};
use crate::schedule::Schedule;
use crate::tape::{GradientTape, Var};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Naive,
    RaoBlackwell,
    SimplifiedDdpm,
    Vdm,
    Elbo,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::RaoBlackwell => "rao_blackwell",
            Variant::SimplifiedDdpm => "simplified_ddpm",
            Variant::Vdm => "vdm",
            Variant::Elbo => "elbo",
        }
    }

    /// Checks the parameterisation requirements of the variant.
    pub fn check_modes(&self, mode: MeanMode, variance_mode: VarianceMode) -> Result<()> {
        match self {
            Variant::SimplifiedDdpm if mode != MeanMode::PredictEps => Err(Error::ModeMismatch(
                "simplified_ddpm needs a predict_eps model".into(),
            )),
            Variant::Vdm
                if mode != MeanMode::PredictX0 || variance_mode != VarianceMode::PosteriorVariance =>
            {
                Err(Error::ModeMismatch(
                    "vdm needs a predict_x0 model with posterior_variance".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Unit,
    /// `w_{t-1} = (1 - λ_t²) / κ_t`, which turns the ε-parameterised
    /// Rao-Blackwell loss into the simplified objective.
    SimplifiedCancelling,
    Custom,
}

/// Per-level weights `w_{t-1}` of the tied objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: WeightKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl Default for WeightScheme {
    fn default() -> Self {
        Self::unit()
    }
}

impl WeightScheme {
    pub fn unit() -> Self {
        Self {
            kind: WeightKind::Unit,
            values: None,
        }
    }

    pub fn simplified_cancelling() -> Self {
        Self {
            kind: WeightKind::SimplifiedCancelling,
            values: None,
        }
    }

    pub fn custom(values: Vec<f64>) -> Self {
        Self {
            kind: WeightKind::Custom,
            values: Some(values),
        }
    }

    pub fn validate(&self, s: &Schedule) -> Result<()> {
        if self.kind == WeightKind::Custom {
            let Some(v) = &self.values else {
                return Err(Error::Config("custom weights need values".into()));
            };
            if v.len() != s.levels() {
                return Err(Error::Config(format!(
                    "{} custom weights for {} levels",
                    v.len(),
                    s.levels()
                )));
            }
        }
        for t in 1..=s.levels() {
            let w = self.weight(s, t);
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("weight at level {t} is {w}")));
            }
        }
        Ok(())
    }

    /// Weight of the level-`t` term. Assumes [`WeightScheme::validate`] passed.
    pub fn weight(&self, s: &Schedule, t: usize) -> f64 {
        match self.kind {
            WeightKind::Unit => 1.0,
            WeightKind::SimplifiedCancelling => s.sigma2(t) / kappa(s, t),
            WeightKind::Custom => self.values.as_ref().map_or(f64::NAN, |v| v[t - 1]),
        }
    }

    pub fn id(&self) -> String {
        match self.kind {
            WeightKind::Unit => "unit".into(),
            WeightKind::SimplifiedCancelling => "simplified_cancelling".into(),
            WeightKind::Custom => "custom".into(),
        }
    }
}

/// How the levels of the tied objective are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSampling {
    /// Uniform levels, weight applied explicitly.
    #[default]
    Uniform,
    /// Levels drawn with probability proportional to their weight, which
    /// then drops out of the summand.
    ProportionalToWeight,
}

/// `κ_t = (a d / c)²`: the factor between squared mean and squared noise
/// errors in the ε-parameterisation.
pub fn kappa(s: &Schedule, t: usize) -> f64 {
    let p = posterior_unchecked(s, t);
    (p.a * p.d / p.c).powi(2)
}

/// Weight of the VDM loss: `SNR(t-1) - SNR(t)` for `t >= 2`. At `t = 1`
/// `SNR(0)` is infinite; the weight is `a² / σ²` with the floored
/// likelihood variance, i.e. `1 / (1 - λ_1²)`.
pub fn vdm_weight(s: &Schedule, t: usize) -> f64 {
    if t == 1 {
        1.0 / s.sigma2(1)
    } else {
        s.snr_at(t - 1) - s.snr_at(t)
    }
}

/// `Σ_t ½ log(2πe (1 - λ_t²))`, the entropy of the noising conditionals
/// per data coordinate.
pub fn entropy_constant(s: &Schedule) -> f64 {
    (1..=s.levels())
        .map(|t| 0.5 * (LN_2PI + 1.0 + s.sigma2(t).ln()))
        .sum()
}

/// An objective value with estimator metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub variant: Variant,
    pub levels: Vec<usize>,
    pub batch: usize,
    pub weights_id: String,
    /// Standard error conditional on the sampled levels, from the spread of
    /// per-sample contributions.
    pub std_err: f64,
    /// Per-sample contributions; `value` is their sum.
    #[serde(skip)]
    pub unit_values: Vec<f64>,
}

/// Standard error of a sum of i.i.d. contributions.
pub fn sum_std_err(units: &[f64]) -> f64 {
    let n = units.len();
    if n < 2 {
        return 0.0;
    }
    let mean = units.iter().sum::<f64>() / n as f64;
    let var = units.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (n as f64 * var).sqrt()
}

/// Standard error of `a.value - b.value` for estimates built from the same
/// draws.
pub fn paired_std_err(a: &LossEstimate, b: &LossEstimate) -> f64 {
    let d: Vec<f64> = a
        .unit_values
        .iter()
        .zip(&b.unit_values)
        .map(|(x, y)| x - y)
        .collect();
    sum_std_err(&d)
}

/// A fixed quadratic in the network output `P`:
/// `Σ_i w_i ‖A_i P_i + B_i‖² + Σ_i k_i + Σ_j e_j`.
#[derive(Debug, Clone)]
pub struct Problem {
    pub variant: Variant,
    pub weights_id: String,
    pub levels_sampled: Vec<usize>,
    pub batch: usize,
    /// Network inputs and their levels.
    pub x_t: Array2<f64>,
    pub levels: Vec<usize>,
    scale: Array2<f64>,
    offset: Array2<f64>,
    weight: Array2<f64>,
    constant: Vec<f64>,
    unit: Vec<usize>,
    unit_constant: Vec<f64>,
}

impl Problem {
    fn empty(variant: Variant, weights_id: String, levels_sampled: Vec<usize>, batch: usize, dim: usize) -> Self {
        Self {
            variant,
            weights_id,
            levels_sampled,
            batch,
            x_t: Array2::zeros((0, dim)),
            levels: Vec::new(),
            scale: Array2::zeros((0, 1)),
            offset: Array2::zeros((0, dim)),
            weight: Array2::zeros((0, 1)),
            constant: Vec::new(),
            unit: Vec::new(),
            unit_constant: vec![0.0; batch],
        }
    }

    fn push_rows(
        &mut self,
        x_t: Array2<f64>,
        t: usize,
        scale: f64,
        offset: Array2<f64>,
        weight: f64,
        constant: f64,
        units: &[usize],
    ) {
        let m = x_t.nrows();
        let cat = |a: &Array2<f64>, b: Array2<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching widths")
        };
        self.x_t = cat(&self.x_t, x_t);
        self.offset = cat(&self.offset, offset);
        self.scale = cat(&self.scale, Array2::from_elem((m, 1), scale));
        self.weight = cat(&self.weight, Array2::from_elem((m, 1), weight));
        self.levels.extend(std::iter::repeat_n(t, m));
        self.constant.extend(std::iter::repeat_n(constant, m));
        self.unit.extend_from_slice(units);
    }

    pub fn rows(&self) -> usize {
        self.x_t.nrows()
    }

    /// Value and per-sample contributions for a given prediction matrix.
    pub fn evaluate_prediction(&self, pred: &Array2<f64>) -> Result<LossEstimate> {
        if pred.dim() != self.x_t.dim() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} for problem {:?}",
                pred.dim(),
                self.x_t.dim()
            )));
        }
        let mut units = self.unit_constant.clone();
        for i in 0..self.rows() {
            let a = self.scale[[i, 0]];
            let sq: f64 = pred
                .row(i)
                .iter()
                .zip(self.offset.row(i))
                .map(|(p, b)| (a * p + b).powi(2))
                .sum();
            units[self.unit[i]] += self.weight[[i, 0]] * sq + self.constant[i];
        }
        let value: f64 = units.iter().sum();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", self.variant.name())));
        }
        Ok(LossEstimate {
            value,
            variant: self.variant,
            levels: self.levels_sampled.clone(),
            batch: self.batch,
            weights_id: self.weights_id.clone(),
            std_err: sum_std_err(&units),
            unit_values: units,
        })
    }

    pub fn evaluate<M: Denoiser + ?Sized>(&self, model: &M, s: &Schedule) -> Result<LossEstimate> {
        let pred = model.predict_rows(s, &self.x_t, &self.levels)?;
        self.evaluate_prediction(&pred)
    }

    /// Records the loss as a function of the prediction node.
    pub fn record<'t>(&self, tape: &'t GradientTape, pred: Var<'t>) -> Var<'t> {
        let total_constant: f64 =
            self.constant.iter().sum::<f64>() + self.unit_constant.iter().sum::<f64>();
        pred.mul(tape.leaf(self.scale.clone()))
            .add(tape.leaf(self.offset.clone()))
            .square()
            .mul(tape.leaf(self.weight.clone()))
            .sum()
            .add(tape.scalar(total_constant))
    }

    /// Loss value and its exact gradient with respect to the network.
    pub fn value_and_gradient(&self, params: &DenoiserParams) -> Result<(f64, DenoiserParams)> {
        loss_and_gradient(params, &self.x_t, &self.levels, |tape, pred| {
            Ok(self.record(tape, pred))
        })
    }
}

/// Per-level term of the objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Naive,
    RaoBlackwell,
    Simplified,
    Vdm,
}

struct Slot {
    t: usize,
    rows: Vec<usize>,
    factor: f64,
}

struct Modes {
    mean: MeanMode,
    variance: VarianceMode,
}

fn check_batch(s: &Schedule, x0: &Batch) -> Result<()> {
    if x0.rows() == 0 {
        return Err(Error::InvalidArgument("empty data batch".into()));
    }
    let _ = s;
    Ok(())
}

fn rows_of(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Build the quadratic for the given level slots. Randomness is consumed in
/// slot order: one noise matrix covering all slot rows (two for naive).
fn assemble(
    term: Term,
    variant: Variant,
    weights_id: String,
    levels_sampled: Vec<usize>,
    modes: &Modes,
    s: &Schedule,
    x0: &Batch,
    slots: &[Slot],
    rng: &mut Stream,
) -> Result<Problem> {
    let dim = x0.dim();
    let total: usize = slots.iter().map(|sl| sl.rows.len()).sum();
    let noise = normal_matrix(rng, total, dim);
    let step_noise = match term {
        Term::Naive => Some(normal_matrix(rng, total, dim)),
        _ => None,
    };
    let mut problem = Problem::empty(variant, weights_id, levels_sampled, x0.rows(), dim);
    let mut offset_row = 0;
    for sl in slots {
        let t = sl.t;
        let m = sl.rows.len();
        if m == 0 {
            continue;
        }
        let x0s = Batch {
            x: rows_of(&x0.x, &sl.rows),
            level: None,
        };
        let eps = noise.slice(ndarray::s![offset_row..offset_row + m, ..]).to_owned();
        let p = posterior_unchecked(s, t);
        let var_theta = likelihood_variance(s, t, modes.variance);
        let (alpha, beta) = mean_affine(&p, modes.mean);
        let half_d = 0.5 * dim as f64;
        let (x_t, scale, offset, weight, constant) = match term {
            Term::RaoBlackwell => {
                let x_t = conditional_with(s, t, &x0s, &eps)?.x;
                let target = p.mean(&x0s.x, &x_t);
                let offset = &x_t * beta - target;
                let constant = sl.factor * half_d * (p.var / var_theta + LN_2PI + var_theta.ln());
                (x_t, alpha, offset, sl.factor * 0.5 / var_theta, constant)
            }
            Term::Naive => {
                let step = step_noise
                    .as_ref()
                    .unwrap()
                    .slice(ndarray::s![offset_row..offset_row + m, ..])
                    .to_owned();
                let x_prev = if t == 1 {
                    x0s.x.clone()
                } else {
                    conditional_with(s, t - 1, &x0s, &eps)?.x
                };
                let x_t = &x_prev * s.lambda(t) + step * s.sigma2(t).sqrt();
                let offset = &x_t * beta - x_prev;
                let constant = sl.factor * half_d * (LN_2PI + var_theta.ln());
                (x_t, alpha, offset, sl.factor * 0.5 / var_theta, constant)
            }
            Term::Simplified => {
                let x_t = conditional_with(s, t, &x0s, &eps)?.x;
                (x_t, 1.0, -eps, sl.factor * 0.5, 0.0)
            }
            Term::Vdm => {
                let x_t = conditional_with(s, t, &x0s, &eps)?.x;
                (x_t, 1.0, -x0s.x, sl.factor * 0.5 * vdm_weight(s, t), 0.0)
            }
        };
        problem.push_rows(x_t, t, scale, offset, weight, constant, &sl.rows);
        offset_row += m;
    }
    Ok(problem)
}

fn single_level(s: &Schedule, t: usize, x0: &Batch) -> Result<Vec<Slot>> {
    s.check_level(t)?;
    check_batch(s, x0)?;
    Ok(vec![Slot {
        t,
        rows: (0..x0.rows()).collect(),
        factor: 1.0 / x0.rows() as f64,
    }])
}

fn modes_of<M: Denoiser + ?Sized>(model: &M) -> Modes {
    Modes {
        mean: model.mean_mode(),
        variance: model.variance_mode(),
    }
}

/// Draw `levels_per_step` levels and split the batch between them: row `i`
/// goes to the `(i mod L)`-th draw. Each slot's factor makes the estimate
/// unbiased for `Σ_t w_t E[term_t]`.
fn tied_slots(
    s: &Schedule,
    weights: &WeightScheme,
    sampling: LevelSampling,
    x0: &Batch,
    levels_per_step: usize,
    rng: &mut Stream,
) -> Result<(Vec<Slot>, Vec<usize>)> {
    check_batch(s, x0)?;
    weights.validate(s)?;
    if levels_per_step == 0 || levels_per_step > x0.rows() {
        return Err(Error::InvalidArgument(format!(
            "levels_per_step must be in 1..={}, got {levels_per_step}",
            x0.rows()
        )));
    }
    let big_t = s.levels();
    let w: Vec<f64> = (1..=big_t).map(|t| weights.weight(s, t)).collect();
    let total_w: f64 = w.iter().sum();
    let draws: Vec<usize> = (0..levels_per_step)
        .map(|_| match sampling {
            LevelSampling::Uniform => rng.random_range(1..=big_t),
            LevelSampling::ProportionalToWeight => {
                let u: f64 = rng.random::<f64>() * total_w;
                let mut acc = 0.0;
                let mut pick = big_t;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk;
                    if u < acc {
                        pick = k + 1;
                        break;
                    }
                }
                pick
            }
        })
        .collect();
    let l = levels_per_step as f64;
    let slots = draws
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let rows: Vec<usize> = (j..x0.rows()).step_by(levels_per_step).collect();
            let n_l = rows.len() as f64;
            let factor = match sampling {
                LevelSampling::Uniform => big_t as f64 * w[t - 1] / (l * n_l),
                LevelSampling::ProportionalToWeight => total_w / (l * n_l),
            };
            Slot { t, rows, factor }
        })
        .collect();
    Ok((slots, draws))
}

/// `-mean log N(x_{t-1}; μ_θ(x_t, t-1), σ²_θ)` with `(x_{t-1}, x_t)` drawn
/// from the noising process given `x0`.
pub fn naive_level_loss<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    t: usize,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<LossEstimate> {
    let slots = single_level(s, t, x0)?;
    let p = assemble(Term::Naive, Variant::Naive, "unit".into(), vec![t], &modes_of(model), s, x0, &slots, rng)?;
    p.evaluate(model, s)
}

/// The level-`t` loss with the inner expectation over `x_{t-1}` done
/// analytically: `½[(‖μ_{t-1|0,t} - μ_θ‖² + D σ²_{t-1|0,t}) / σ²_θ + D log 2πσ²_θ]`.
pub fn rao_blackwell_level_loss<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    t: usize,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<LossEstimate> {
    let slots = single_level(s, t, x0)?;
    let p = assemble(
        Term::RaoBlackwell,
        Variant::RaoBlackwell,
        "unit".into(),
        vec![t],
        &modes_of(model),
        s,
        x0,
        &slots,
        rng,
    )?;
    p.evaluate(model, s)
}

/// Unbiased estimate of `Σ_t w_{t-1} L_{t-1}` from `levels_per_step`
/// uniformly drawn levels.
pub fn tied_objective<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    weights: &WeightScheme,
    x0: &Batch,
    rng: &mut Stream,
    levels_per_step: usize,
) -> Result<LossEstimate> {
    tied_objective_with(model, s, weights, LevelSampling::Uniform, x0, rng, levels_per_step)
}

pub fn tied_objective_with<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    weights: &WeightScheme,
    sampling: LevelSampling,
    x0: &Batch,
    rng: &mut Stream,
    levels_per_step: usize,
) -> Result<LossEstimate> {
    let spec = ObjectiveSpec {
        variant: Variant::RaoBlackwell,
        weights: weights.clone(),
        level_sampling: sampling,
        levels_per_step,
    };
    build_problem(&spec, model.mean_mode(), model.variance_mode(), s, x0, rng)?.evaluate(model, s)
}

/// `(T / 2) E_t E ‖ε - ε̂_θ(x_t, t-1)‖²`.
pub fn simplified_ddpm_loss<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    x0: &Batch,
    rng: &mut Stream,
    levels_per_step: usize,
) -> Result<LossEstimate> {
    let spec = ObjectiveSpec::new(Variant::SimplifiedDdpm, levels_per_step);
    build_problem(&spec, model.mean_mode(), model.variance_mode(), s, x0, rng)?.evaluate(model, s)
}

/// `(T / 2) E_t E[(SNR(t-1) - SNR(t)) ‖x_0 - x̂_θ(x_t, t-1)‖²]`.
pub fn vdm_loss<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    x0: &Batch,
    rng: &mut Stream,
    levels_per_step: usize,
) -> Result<LossEstimate> {
    let spec = ObjectiveSpec::new(Variant::Vdm, levels_per_step);
    build_problem(&spec, model.mean_mode(), model.variance_mode(), s, x0, rng)?.evaluate(model, s)
}

/// `Σ_t w_{t-1} L_{t-1}` with every level evaluated on the whole batch.
pub fn exhaustive_rao_blackwell<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    weights: &WeightScheme,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<LossEstimate> {
    exhaustive_problem(Term::RaoBlackwell, weights, model.mean_mode(), model.variance_mode(), s, x0, rng)?
        .evaluate(model, s)
}

/// `(1 / 2) Σ_t E[(SNR(t-1) - SNR(t)) ‖x_0 - x̂(x_t)‖²]` with every level on
/// the whole batch.
pub fn exhaustive_vdm<M: Denoiser + ?Sized>(
    model: &M,
    s: &Schedule,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<LossEstimate> {
    Variant::Vdm.check_modes(model.mean_mode(), model.variance_mode())?;
    exhaustive_problem(Term::Vdm, &WeightScheme::unit(), model.mean_mode(), model.variance_mode(), s, x0, rng)?
        .evaluate(model, s)
}

fn exhaustive_problem(
    term: Term,
    weights: &WeightScheme,
    mean: MeanMode,
    variance: VarianceMode,
    s: &Schedule,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<Problem> {
    check_batch(s, x0)?;
    weights.validate(s)?;
    let n = x0.rows();
    let slots: Vec<Slot> = (1..=s.levels())
        .map(|t| Slot {
            t,
            rows: (0..n).collect(),
            factor: weights.weight(s, t) / n as f64,
        })
        .collect();
    let variant = match term {
        Term::Vdm => Variant::Vdm,
        _ => Variant::RaoBlackwell,
    };
    assemble(
        term,
        variant,
        weights.id(),
        (1..=s.levels()).collect(),
        &Modes { mean, variance },
        s,
        x0,
        &slots,
        rng,
    )
}

/// Full-trajectory Monte-Carlo estimate of the evidence lower bound,
/// returned as a loss (`value = -ELBO`).
pub fn elbo<M: Denoiser + ?Sized>(model: &M, s: &Schedule, x0: &Batch, rng: &mut Stream) -> Result<LossEstimate> {
    let traj = Trajectories::sample(s, x0, rng)?;
    traj.elbo_problem(model.mean_mode(), model.variance_mode(), s)?
        .evaluate(model, s)
}

/// Noising trajectories `x_0, x_1, ..., x_T` for a batch.
#[derive(Debug, Clone)]
pub struct Trajectories {
    /// `states[t]` holds `x_t` for every row.
    pub states: Vec<Array2<f64>>,
}

impl Trajectories {
    pub fn sample(s: &Schedule, x0: &Batch, rng: &mut Stream) -> Result<Self> {
        check_batch(s, x0)?;
        let mut states = vec![x0.x.clone()];
        for t in 1..=s.levels() {
            let eps = normal_matrix(rng, x0.rows(), x0.dim());
            let next = &states[t - 1] * s.lambda(t) + eps * s.sigma2(t).sqrt();
            states.push(next);
        }
        Ok(Self { states })
    }

    /// `-[log p(x_T) + Σ_t log p_θ(x_{t-1} | x_t)] / n - D H` as a quadratic.
    pub fn elbo_problem(&self, mean: MeanMode, variance: VarianceMode, s: &Schedule) -> Result<Problem> {
        let x0 = &self.states[0];
        let (n, dim) = x0.dim();
        let units: Vec<usize> = (0..n).collect();
        let mut problem = Problem::empty(Variant::Elbo, "unit".into(), (1..=s.levels()).collect(), n, dim);
        let nf = n as f64;
        let half_d = 0.5 * dim as f64;
        for t in 1..=s.levels() {
            let p = posterior_unchecked(s, t);
            let var_theta = likelihood_variance(s, t, variance);
            let (alpha, beta) = mean_affine(&p, mean);
            let x_t = self.states[t].clone();
            let offset = &x_t * beta - &self.states[t - 1];
            let constant = half_d * (LN_2PI + var_theta.ln()) / nf;
            problem.push_rows(x_t, t, alpha, offset, 0.5 / var_theta / nf, constant, &units);
        }
        let entropy = dim as f64 * entropy_constant(s);
        let last = &self.states[s.levels()];
        for (i, row) in last.rows().into_iter().enumerate() {
            let prior = -0.5 * row.iter().map(|v| v * v).sum::<f64>() - half_d * LN_2PI;
            problem.unit_constant[i] = (-prior - entropy) / nf;
        }
        Ok(problem)
    }

    /// `Σ_t L_{t-1}` evaluated at the trajectory's `(x_0, x_t)` pairs, with
    /// the inner expectation over `x_{t-1}` done analytically.
    pub fn rao_blackwell_problem(&self, mean: MeanMode, variance: VarianceMode, s: &Schedule) -> Result<Problem> {
        let x0 = &self.states[0];
        let (n, dim) = x0.dim();
        let units: Vec<usize> = (0..n).collect();
        let mut problem =
            Problem::empty(Variant::RaoBlackwell, "unit".into(), (1..=s.levels()).collect(), n, dim);
        let nf = n as f64;
        let half_d = 0.5 * dim as f64;
        for t in 1..=s.levels() {
            let p = posterior_unchecked(s, t);
            let var_theta = likelihood_variance(s, t, variance);
            let (alpha, beta) = mean_affine(&p, mean);
            let x_t = self.states[t].clone();
            let offset = &x_t * beta - p.mean(x0, &x_t);
            let constant = half_d * (p.var / var_theta + LN_2PI + var_theta.ln()) / nf;
            problem.push_rows(x_t, t, alpha, offset, 0.5 / var_theta / nf, constant, &units);
        }
        Ok(problem)
    }
}

/// Objective selection used by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default)]
    pub level_sampling: LevelSampling,
    #[serde(default = "one")]
    pub levels_per_step: usize,
}

fn one() -> usize {
    1
}

impl ObjectiveSpec {
    pub fn new(variant: Variant, levels_per_step: usize) -> Self {
        Self {
            variant,
            weights: WeightScheme::unit(),
            level_sampling: LevelSampling::Uniform,
            levels_per_step,
        }
    }

    /// Checks everything that can be checked before drawing any data.
    pub fn validate(&self, mean: MeanMode, variance: VarianceMode, s: &Schedule) -> Result<()> {
        self.variant.check_modes(mean, variance)?;
        self.weights.validate(s)?;
        if self.levels_per_step == 0 {
            return Err(Error::Config("levels_per_step must be positive".into()));
        }
        let explicit_weights = matches!(self.variant, Variant::Naive | Variant::RaoBlackwell);
        if !explicit_weights
            && (self.weights.kind != WeightKind::Unit || self.level_sampling != LevelSampling::Uniform)
        {
            return Err(Error::Config(format!(
                "{} carries its own weighting; use unit weights and uniform level sampling",
                self.variant.name()
            )));
        }
        Ok(())
    }
}

/// Draw the random quantities of one objective evaluation.
pub fn build_problem(
    spec: &ObjectiveSpec,
    mean: MeanMode,
    variance: VarianceMode,
    s: &Schedule,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<Problem> {
    spec.validate(mean, variance, s)?;
    let modes = Modes { mean, variance };
    let term = match spec.variant {
        Variant::Elbo => {
            return Trajectories::sample(s, x0, rng)?.elbo_problem(mean, variance, s);
        }
        Variant::Naive => Term::Naive,
        Variant::RaoBlackwell => Term::RaoBlackwell,
        Variant::SimplifiedDdpm => Term::Simplified,
        Variant::Vdm => Term::Vdm,
    };
    let (mut slots, draws) = tied_slots(s, &spec.weights, spec.level_sampling, x0, spec.levels_per_step, rng)?;
    if matches!(term, Term::Simplified | Term::Vdm) {
        // these carry their weight inside the term; tied_slots used unit weights
        for sl in &mut slots {
            sl.factor = s.levels() as f64 / (spec.levels_per_step as f64 * sl.rows.len() as f64);
        }
    }
    assemble(term, spec.variant, spec.weights.id(), draws, &modes, s, x0, &slots, rng)
}
