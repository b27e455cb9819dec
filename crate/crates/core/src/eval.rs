//! Sample-quality metrics and the numerical checks run against trained or
//! analytic denoisers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::datasets::{
    noisy_log_density, optimal_epsilon, posterior_moments_x0, sample_data, DataSpec, Mixture,
};
use crate::denoiser::{Denoiser, MeanMode};
use crate::error::{Error, Result};
use crate::forward::Batch;
use crate::io::fmt_f64;
use crate::objectives::{
    exhaustive_vdm, paired_std_err, sum_std_err, vdm_weight, LN_2PI, Trajectories,
};
use crate::rng::{self, normal_matrix};
use crate::schedule::{Schedule, ScheduleSpec};

/// Smallest model bin mass before renormalising.
pub const MODEL_MASS_FLOOR: f64 = 1e-12;
/// Grid points per axis of a one-dimensional score sweep.
pub const SWEEP_POINTS_1D: usize = 401;
/// Grid points per axis of a two-dimensional score sweep.
pub const SWEEP_POINTS_2D: usize = 101;
/// Half-width of the score sweep grid in marginal standard deviations.
pub const SWEEP_HALF_WIDTH: f64 = 4.0;
/// Relative tolerance on matched schedule endpoints.
pub const ENDPOINT_TOLERANCE: f64 = 1e-9;

/// `KL(p ‖ q) = Σ p log(p / q)` over matching bins. Terms with `p = 0`
/// contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} bins", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mass of `N(mean, var)` on `[lo, hi)`; a zero variance is a point mass.
fn interval_mass(mean: f64, var: f64, lo: f64, hi: f64) -> f64 {
    if var == 0.0 {
        return if mean >= lo && mean < hi { 1.0 } else { 0.0 };
    }
    let sd = var.sqrt();
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    // use the upper tail on the right so far-tail bins keep their precision
    if a > 0.0 {
        0.5 * (erfc(a / std::f64::consts::SQRT_2) - erfc(b / std::f64::consts::SQRT_2))
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Per-bin mass of a mixture on the regular grid `range` (same on every
/// axis), flattened row-major over the coordinates.
fn binned_mixture(mix: &Mixture, bins: usize, range: (f64, f64)) -> Vec<f64> {
    let dim = mix.dim();
    let width = (range.1 - range.0) / bins as f64;
    let edge = |i: usize| range.0 + i as f64 * width;
    let total = bins.pow(dim as u32);
    let mut out = vec![0.0; total];
    for k in 0..mix.components() {
        let per_axis: Vec<Vec<f64>> = (0..dim)
            .map(|d| {
                (0..bins)
                    .map(|i| interval_mass(mix.means[k][d], mix.variances[k][d], edge(i), edge(i + 1)))
                    .collect()
            })
            .collect();
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut mass = mix.weights[k];
            let mut rest = flat;
            for d in (0..dim).rev() {
                mass *= per_axis[d][rest % bins];
                rest /= bins;
            }
            *slot += mass;
        }
    }
    out
}

/// KL from the add-one-smoothed histogram of `samples` to the analytic
/// density of `spec` integrated over the same bins. Samples outside `range`
/// are dropped and the model mass is renormalised to the range.
pub fn histogram_kl(samples: &Array2<f64>, spec: &DataSpec, bins: usize, range: (f64, f64)) -> Result<f64> {
    let dim = spec.dim();
    if !(dim == 1 || dim == 2) {
        return Err(Error::UnsupportedSpec(format!("histogram KL needs D = 1 or 2, got {dim}")));
    }
    if samples.ncols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "samples have {} columns, data has {dim}",
            samples.ncols()
        )));
    }
    if bins < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 bins, got {bins}")));
    }
    if !(range.0.is_finite() && range.1.is_finite() && range.1 > range.0) {
        return Err(Error::InvalidArgument(format!("bad histogram range {range:?}")));
    }
    let width = (range.1 - range.0) / bins as f64;
    let mut counts = vec![1.0; bins.pow(dim as u32)];
    'rows: for row in samples.rows() {
        let mut flat = 0;
        for v in row.iter() {
            if !(*v >= range.0 && *v < range.1) {
                continue 'rows;
            }
            let i = (((v - range.0) / width) as usize).min(bins - 1);
            flat = flat * bins + i;
        }
        counts[flat] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let p: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let mut q = binned_mixture(&spec.mixture()?, bins, range);
    for m in q.iter_mut() {
        *m = m.max(MODEL_MASS_FLOOR);
    }
    let mass: f64 = q.iter().sum();
    q.iter_mut().for_each(|m| *m /= mass);
    kl_divergence(&p, &q)
}

/// Per-coordinate sample moments with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub mean_std_err: Vec<f64>,
    pub var: Vec<f64>,
    pub var_std_err: Vec<f64>,
}

impl Moments {
    pub fn of(samples: &Array2<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument("moments need at least two samples".into()));
        }
        let nf = n as f64;
        let mut out = Moments {
            mean: vec![],
            mean_std_err: vec![],
            var: vec![],
            var_std_err: vec![],
        };
        for col in samples.columns() {
            let mean = col.sum() / nf;
            let d2: Vec<f64> = col.iter().map(|v| (v - mean).powi(2)).collect();
            let var = d2.iter().sum::<f64>() / (nf - 1.0);
            let m4 = d2.iter().map(|v| v * v).sum::<f64>() / nf;
            out.mean.push(mean);
            out.mean_std_err.push((var / nf).sqrt());
            out.var.push(var);
            out.var_std_err.push(((m4 - var * var).max(0.0) / nf).sqrt());
        }
        Ok(out)
    }

    /// Largest `|mean|` and `|var - 1|` over coordinates.
    pub fn errors(&self) -> (f64, f64) {
        let m = self.mean.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let v = self.var.iter().fold(0.0_f64, |a, v| a.max((v - 1.0).abs()));
        (m, v)
    }

    /// Whether every coordinate has mean 0 and variance 1 within `k`
    /// standard errors.
    pub fn standard_within(&self, k: f64) -> bool {
        (0..self.mean.len()).all(|d| {
            self.mean[d].abs() <= k * self.mean_std_err[d]
                && (self.var[d] - 1.0).abs() <= k * self.var_std_err[d]
        })
    }
}

/// Grid used by score sweeps with the analytic marginal density at each
/// point.
fn sweep_grid(spec: &DataSpec, s: &Schedule, t: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let dim = spec.dim();
    let points = match dim {
        1 => SWEEP_POINTS_1D,
        2 => SWEEP_POINTS_2D,
        _ => return Err(Error::UnsupportedSpec(format!("score sweep needs D = 1 or 2, got {dim}"))),
    };
    let (mean, var) = spec.mixture()?.noised(s.cum_lambda(t)).moments();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            let half = SWEEP_HALF_WIDTH * var[d].sqrt();
            (0..points)
                .map(|i| mean[d] - half + 2.0 * half * i as f64 / (points - 1) as f64)
                .collect()
        })
        .collect();
    let total = points.pow(dim as u32);
    let mut grid = Array2::zeros((total, dim));
    let mut density = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rest = flat;
        for d in (0..dim).rev() {
            grid[[flat, d]] = axes[d][rest % points];
            rest /= points;
        }
        let x = grid.row(flat).to_vec();
        density.push(noisy_log_density(spec, s, t, &x)?.exp());
    }
    Ok((grid, density))
}

/// RMSE at each requested level between the model's noise prediction and
/// the optimal one, over a regular grid weighted by the noisy marginal.
pub fn score_error_sweep<M: Denoiser + ?Sized>(
    model: &M,
    spec: &DataSpec,
    s: &Schedule,
    levels: &[usize],
) -> Result<Vec<f64>> {
    if model.mean_mode() != MeanMode::PredictEps {
        return Err(Error::ModeMismatch("score sweep needs a noise-predicting model".into()));
    }
    if spec.dim() != model_dim(model, s, spec.dim())? {
        return Err(Error::ShapeMismatch("model and data dimensions differ".into()));
    }
    levels
        .iter()
        .map(|&t| {
            s.check_level(t)?;
            let (grid, density) = sweep_grid(spec, s, t)?;
            let pred = model.predict_rows(s, &grid, &vec![t; grid.nrows()])?;
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, row) in grid.rows().into_iter().enumerate() {
                let opt = optimal_epsilon(spec, s, t, &row.to_vec())?;
                let err: f64 = opt.iter().zip(pred.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
                num += density[i] * err;
                den += density[i];
            }
            Ok((num / den).sqrt())
        })
        .collect()
}

/// Output width of a model on a one-row probe.
fn model_dim<M: Denoiser + ?Sized>(model: &M, s: &Schedule, dim: usize) -> Result<usize> {
    Ok(model.predict_rows(s, &Array2::zeros((1, dim)), &[1])?.ncols())
}

/// How the expectation over `x_0` and `x_t` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expectation {
    /// Deterministic quadrature over `x_t` using the analytic posterior of
    /// `x_0`. One-dimensional data only.
    Quadrature { points: usize },
    /// `n` data draws, shared by both schedules.
    MonteCarlo { n: usize, seed: u64 },
}

/// Expected VDM loss of a fixed predictor with every level summed, and its
/// standard error (zero for quadrature).
pub fn expected_vdm_loss<M: Denoiser + ?Sized>(
    model: &M,
    spec: &DataSpec,
    s: &Schedule,
    how: Expectation,
) -> Result<(f64, Vec<f64>)> {
    if model.mean_mode() != MeanMode::PredictX0 {
        return Err(Error::ModeMismatch("VDM loss needs a data-predicting model".into()));
    }
    match how {
        Expectation::Quadrature { points } => {
            let total = (1..=s.levels())
                .map(|t| Ok(0.5 * vdm_weight(s, t) * expected_x0_error(model, spec, s, t, points)?))
                .sum::<Result<f64>>()?;
            Ok((total, vec![]))
        }
        Expectation::MonteCarlo { n, seed } => {
            let x0 = sample_data(spec, n, &mut rng::split(seed, 0))?;
            let est = exhaustive_vdm(model, s, &x0, &mut rng::split(seed, 1))?;
            Ok((est.value, est.unit_values))
        }
    }
}

/// `E ‖x_0 - f(x_t)‖²` at level `t` by trapezoidal quadrature over each
/// component of the noisy marginal.
fn expected_x0_error<M: Denoiser + ?Sized>(
    model: &M,
    spec: &DataSpec,
    s: &Schedule,
    t: usize,
    points: usize,
) -> Result<f64> {
    if spec.dim() != 1 {
        return Err(Error::UnsupportedSpec("quadrature needs one-dimensional data".into()));
    }
    if points < 3 {
        return Err(Error::InvalidArgument("quadrature needs at least 3 points".into()));
    }
    let noisy = spec.mixture()?.noised(s.cum_lambda(t));
    let mut total = 0.0;
    for k in 0..noisy.components() {
        let (mean, var) = (noisy.means[k][0], noisy.variances[k][0]);
        let sd = var.sqrt();
        let h = 20.0 * sd / (points - 1) as f64;
        let xs: Vec<f64> = (0..points).map(|i| mean - 10.0 * sd + i as f64 * h).collect();
        let grid = Array2::from_shape_vec((points, 1), xs.clone()).expect("column");
        let pred = model.predict_rows(s, &grid, &vec![t; points])?;
        let mut acc = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let (m, v) = posterior_moments_x0(spec, s, t, &[*x])?;
            let component = (-0.5 * ((x - mean).powi(2) / var + LN_2PI + var.ln())).exp();
            let end = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
            acc += end * component * noisy.weights[k] * (v[0] + (m[0] - pred[[i, 0]]).powi(2));
        }
        total += acc * h;
    }
    Ok(total)
}

/// One point of an endpoint-invariance series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub levels: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub gap: f64,
    pub relative_gap: f64,
    /// Standard error of `loss_a - loss_b`; zero for quadrature.
    pub std_err: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ENDPOINT_TOLERANCE * a.abs().max(b.abs())
}

/// `|L(s1) - L(s2)|` for the VDM loss of a fixed predictor under two
/// schedules with the same SNR endpoints.
pub fn endpoint_invariance_gap<M: Denoiser + ?Sized>(
    model: &M,
    spec: &DataSpec,
    s1: &Schedule,
    s2: &Schedule,
    how: Expectation,
) -> Result<GapPoint> {
    let (t1, t2) = (s1.levels(), s2.levels());
    if !close(s1.snr_at(1), s2.snr_at(1)) || !close(s1.snr_at(t1), s2.snr_at(t2)) {
        return Err(Error::Config(format!(
            "schedules have different SNR endpoints: ({}, {}) vs ({}, {})",
            s1.snr_at(1),
            s1.snr_at(t1),
            s2.snr_at(1),
            s2.snr_at(t2)
        )));
    }
    let (loss_a, units_a) = expected_vdm_loss(model, spec, s1, how)?;
    let (loss_b, units_b) = expected_vdm_loss(model, spec, s2, how)?;
    let diffs: Vec<f64> = units_a.iter().zip(&units_b).map(|(a, b)| a - b).collect();
    let gap = (loss_a - loss_b).abs();
    Ok(GapPoint {
        levels: t1,
        loss_a,
        loss_b,
        gap,
        relative_gap: if gap == 0.0 { 0.0 } else { gap / loss_b.abs() },
        std_err: sum_std_err(&diffs),
    })
}

/// Default linear-β schedule and the log-SNR-linear schedule with the same
/// endpoints.
pub fn matched_schedules(levels: usize) -> Result<(Schedule, Schedule)> {
    let linear = ScheduleSpec::LinearBeta {
        levels,
        beta1: None,
        beta2: None,
    }
    .build()?;
    let log_snr = Schedule::log_snr_linear(levels, linear.snr_at(1), linear.snr_at(levels))?;
    Ok((linear, log_snr))
}

/// Endpoint-invariance gap of [`matched_schedules`] at each `T`.
pub fn endpoint_invariance_series<M: Denoiser + ?Sized>(
    model: &M,
    spec: &DataSpec,
    levels: &[usize],
    how: Expectation,
) -> Result<Vec<GapPoint>> {
    levels
        .iter()
        .map(|&t| {
            let (a, b) = matched_schedules(t)?;
            endpoint_invariance_gap(model, spec, &a, &b, how)
        })
        .collect()
}

pub fn gap_series_csv(series: &[GapPoint]) -> String {
    let mut out = String::from("T,loss_a,loss_b,gap,relative_gap,std_err\n");
    for p in series {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.levels,
            fmt_f64(p.loss_a),
            fmt_f64(p.loss_b),
            fmt_f64(p.gap),
            fmt_f64(p.relative_gap),
            fmt_f64(p.std_err)
        );
    }
    out
}

/// Result of comparing ELBO and loss differences between two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstancyGap {
    /// `|(ELBO_a - ELBO_b) - (L_a - L_b)|`.
    pub gap: f64,
    /// `sqrt(se(ELBO_a - ELBO_b)² + se(L_a - L_b)²)`.
    pub std_err: f64,
    pub elbo_diff: f64,
    pub loss_diff: f64,
}

/// Both differences use the same data and trajectories, so the constant
/// relating ELBO and negative loss cancels draw by draw.
pub fn elbo_constancy_gap<A, B>(a: &A, b: &B, spec: &DataSpec, s: &Schedule, n: usize, seed: u64) -> Result<ConstancyGap>
where
    A: Denoiser + ?Sized,
    B: Denoiser + ?Sized,
{
    let x0 = sample_data(spec, n, &mut rng::split(seed, 0))?;
    let traj = Trajectories::sample(s, &x0, &mut rng::split(seed, 1))?;
    let elbo_a = traj.elbo_problem(a.mean_mode(), a.variance_mode(), s)?.evaluate(a, s)?;
    let elbo_b = traj.elbo_problem(b.mean_mode(), b.variance_mode(), s)?.evaluate(b, s)?;
    let rb_a = traj.rao_blackwell_problem(a.mean_mode(), a.variance_mode(), s)?.evaluate(a, s)?;
    let rb_b = traj.rao_blackwell_problem(b.mean_mode(), b.variance_mode(), s)?.evaluate(b, s)?;
    // values are losses: ELBO = -elbo.value and L = -rb.value
    let elbo_diff = elbo_b.value - elbo_a.value;
    let loss_diff = rb_b.value - rb_a.value;
    Ok(ConstancyGap {
        gap: (elbo_diff - loss_diff).abs(),
        std_err: paired_std_err(&elbo_a, &elbo_b).hypot(paired_std_err(&rb_a, &rb_b)),
        elbo_diff,
        loss_diff,
    })
}

/// Monte-Carlo estimate of `-Σ_t E log q(x_t | x_{t-1})` per coordinate
/// from `n` unit-Gaussian trajectories, with its standard error.
pub fn entropy_monte_carlo(s: &Schedule, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::root(seed);
    let x0 = Batch::new(normal_matrix(&mut r, n, 1))?;
    let traj = Trajectories::sample(s, &x0, &mut r)?;
    let mut units = vec![0.0; n];
    for t in 1..=s.levels() {
        let (lam, var) = (s.lambda(t), s.sigma2(t));
        for (i, u) in units.iter_mut().enumerate() {
            let r = traj.states[t][[i, 0]] - lam * traj.states[t - 1][[i, 0]];
            *u += 0.5 * (LN_2PI + var.ln() + r * r / var);
        }
    }
    let mean = units.iter().sum::<f64>() / n as f64;
    Ok((mean, sum_std_err(&units) / n as f64))
}

/// Named scalar metrics with run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub n: usize,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(seed: u64, n: usize, schedule: ScheduleSpec, checkpoint: Option<String>) -> Self {
        Self {
            seed,
            n,
            schedule,
            checkpoint,
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["seed".to_string(), "n".into(), "checkpoint".into()];
        cols.extend(self.metrics.keys().cloned());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.seed.to_string(),
            self.n.to_string(),
            self.checkpoint.clone().unwrap_or_default(),
        ];
        cols.extend(self.metrics.values().map(|v| fmt_f64(*v)));
        cols.join(",")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Appends one row, writing the header first if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", self.csv_header())?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Standalone SVG scatter of the first two columns over a square window.
pub fn scatter_svg(samples: &Array2<f64>, range: (f64, f64), size: u32) -> Result<String> {
    if samples.ncols() < 2 {
        return Err(Error::ShapeMismatch("scatter needs two columns".into()));
    }
    let px = size as f64;
    let scale = px / (range.1 - range.0);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    );
    let mid = px / 2.0;
    let _ = writeln!(
        out,
        "<path d=\"M0 {mid:.2} H{px:.2} M{mid:.2} 0 V{px:.2}\" stroke=\"#ccc\" stroke-width=\"1\"/>"
    );
    for row in samples.rows() {
        let (x, y) = (row[0], row[1]);
        if x < range.0 || x > range.1 || y < range.0 || y > range.1 {
            continue;
        }
        let cx = (x - range.0) * scale;
        let cy = px - (y - range.0) * scale;
        let _ = writeln!(out, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"1\" fill=\"#1f4e9c\" fill-opacity=\"0.4\"/>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}
