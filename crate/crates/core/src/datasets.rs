//! Toy data distributions with exact noisy marginals.
//!
//! Every spec is a finite mixture of diagonal Gaussians. Convolving such a
//! mixture with the `q(x_t | x_0)` kernel gives another mixture, so the score
//! of every noisy marginal, the optimal noise predictor and the posterior
//! mean `E[x_0 | x_t]` are all available in closed form.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, MeanMode, VarianceMode};
use crate::error::{Error, Result};
use crate::forward::Batch;
use crate::rng::{normal, Stream};
use crate::schedule::Schedule;

fn default_ring_count() -> usize {
    8
}

/// Serialisable description of a data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    UnitGaussian {
        dim: usize,
    },
    /// One-dimensional Gaussian mixture, standardised before use.
    Gmm1d {
        means: Vec<f64>,
        weights: Vec<f64>,
        variances: Vec<f64>,
    },
    /// `count` equal-weight isotropic Gaussians evenly spaced on a circle,
    /// standardised before use.
    Ring2d {
        radius: f64,
        #[serde(default = "default_ring_count")]
        count: usize,
        variance: f64,
    },
    /// All mass at `location`. Not standardised: its variance is zero.
    PointMass {
        location: Vec<f64>,
    },
}

/// A mixture of diagonal Gaussians. `means[k]` and `variances[k]` have one
/// entry per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl DataSpec {
    pub fn dim(&self) -> usize {
        match self {
            DataSpec::UnitGaussian { dim } => *dim,
            DataSpec::Gmm1d { .. } => 1,
            DataSpec::Ring2d { .. } => 2,
            DataSpec::PointMass { location } => location.len(),
        }
    }

    /// The distribution actually sampled, after standardisation.
    pub fn mixture(&self) -> Result<Mixture> {
        let raw = self.raw_mixture()?;
        match self {
            DataSpec::Gmm1d { .. } | DataSpec::Ring2d { .. } => Ok(raw.standardised()),
            _ => Ok(raw),
        }
    }

    fn raw_mixture(&self) -> Result<Mixture> {
        let bad = |msg: String| Err(Error::UnsupportedSpec(msg));
        match self {
            DataSpec::UnitGaussian { dim } => {
                if *dim == 0 {
                    return bad("unit_gaussian needs dim >= 1".into());
                }
                Ok(Mixture {
                    weights: vec![1.0],
                    means: vec![vec![0.0; *dim]],
                    variances: vec![vec![1.0; *dim]],
                })
            }
            DataSpec::Gmm1d {
                means,
                weights,
                variances,
            } => {
                if means.is_empty() || means.len() != weights.len() || means.len() != variances.len()
                {
                    return bad("gmm1d needs equally many means, weights and variances".into());
                }
                check_weights(weights)?;
                if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad("gmm1d variances must be finite and non-negative".into());
                }
                if means.iter().any(|m| !m.is_finite()) {
                    return bad("gmm1d means must be finite".into());
                }
                let raw = Mixture {
                    weights: weights.clone(),
                    means: means.iter().map(|m| vec![*m]).collect(),
                    variances: variances.iter().map(|v| vec![*v]).collect(),
                };
                if raw.moments().1[0] <= 0.0 {
                    return bad("gmm1d has zero variance and cannot be standardised".into());
                }
                Ok(raw)
            }
            DataSpec::Ring2d {
                radius,
                count,
                variance,
            } => {
                if *count == 0 || !(radius.is_finite() && *radius > 0.0) {
                    return bad("ring2d needs count >= 1 and a positive radius".into());
                }
                if !(variance.is_finite() && *variance >= 0.0) {
                    return bad("ring2d variance must be finite and non-negative".into());
                }
                let means = (0..*count)
                    .map(|k| {
                        let angle = 2.0 * std::f64::consts::PI * k as f64 / *count as f64;
                        vec![radius * angle.cos(), radius * angle.sin()]
                    })
                    .collect();
                let raw = Mixture {
                    weights: vec![1.0 / *count as f64; *count],
                    means,
                    variances: vec![vec![*variance; 2]; *count],
                };
                if raw.moments().1.iter().any(|v| *v <= 0.0) {
                    return bad("ring2d has a degenerate coordinate".into());
                }
                Ok(raw)
            }
            DataSpec::PointMass { location } => {
                if location.is_empty() || location.iter().any(|v| !v.is_finite()) {
                    return bad("point_mass needs a finite, non-empty location".into());
                }
                Ok(Mixture {
                    weights: vec![1.0],
                    means: vec![location.clone()],
                    variances: vec![vec![0.0; location.len()]],
                })
            }
        }
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::UnsupportedSpec("mixture weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::UnsupportedSpec(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

impl Mixture {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Per-coordinate mean and variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for k in 0..self.components() {
            for d in 0..dim {
                let m = self.means[k][d];
                mean[d] += self.weights[k] * m;
                second[d] += self.weights[k] * (self.variances[k][d] + m * m);
            }
        }
        let var = (0..dim).map(|d| second[d] - mean[d] * mean[d]).collect();
        (mean, var)
    }

    /// Affine map to zero mean and unit per-coordinate variance.
    pub fn standardised(&self) -> Mixture {
        let (mean, var) = self.moments();
        let scale: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        Mixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| (0..m.len()).map(|d| (m[d] - mean[d]) / scale[d]).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| (0..v.len()).map(|d| v[d] / var[d]).collect())
                .collect(),
        }
    }

    /// The law of `x_t = Λ x_0 + sqrt(1 - Λ²) ε` when `x_0` follows `self`.
    pub fn noised(&self, cum_lambda: f64) -> Mixture {
        let l2 = cum_lambda * cum_lambda;
        Mixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| cum_lambda * v).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().map(|s| l2 * s + 1.0 - l2).collect())
                .collect(),
        }
    }

    /// Log-densities of each component at `x`, including the mixture weight.
    fn weighted_log_components(&self, x: &[f64]) -> Vec<f64> {
        (0..self.components())
            .map(|k| {
                let mut lp = self.weights[k].ln();
                for (d, xd) in x.iter().enumerate() {
                    let v = self.variances[k][d];
                    let r = xd - self.means[k][d];
                    lp -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
                }
                lp
            })
            .collect()
    }

    /// Component responsibilities at `x`; requires positive variances.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let lp = self.weighted_log_components(x);
        let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lp.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    /// `log p(x)`; requires positive variances.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let lp = self.weighted_log_components(x);
        let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + lp.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
    }

    /// `∇ log p(x)`; requires positive variances.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        (0..x.len())
            .map(|d| {
                (0..self.components())
                    .map(|k| -r[k] * (x[d] - self.means[k][d]) / self.variances[k][d])
                    .sum()
            })
            .collect()
    }
}

/// `n` independent draws from the standardised distribution.
pub fn sample_data(spec: &DataSpec, n: usize, rng: &mut Stream) -> Result<Batch> {
    let mix = spec.mixture()?;
    let dim = mix.dim();
    let mut x = Array2::zeros((n, dim));
    for mut row in x.rows_mut() {
        let k = pick(&mix.weights, rng);
        for d in 0..dim {
            row[d] = mix.means[k][d] + mix.variances[k][d].sqrt() * normal(rng);
        }
    }
    if n == 0 {
        return Ok(Batch { x, level: None });
    }
    Batch::new(x)
}

fn pick(weights: &[f64], rng: &mut Stream) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

fn noisy_mixture(spec: &DataSpec, s: &Schedule, t: usize, x: &[f64]) -> Result<Mixture> {
    s.check_level(t)?;
    let mix = spec.mixture()?;
    if x.len() != mix.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point has {} coordinates, data has {}",
            x.len(),
            mix.dim()
        )));
    }
    Ok(mix.noised(s.cum_lambda(t)))
}

/// `log q_t(x)`.
pub fn noisy_log_density(spec: &DataSpec, s: &Schedule, t: usize, x: &[f64]) -> Result<f64> {
    Ok(noisy_mixture(spec, s, t, x)?.log_density(x))
}

/// `∇ log q_t(x)` of the noisy marginal at level `t`.
pub fn noisy_marginal_score(spec: &DataSpec, s: &Schedule, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    Ok(noisy_mixture(spec, s, t, x)?.score(x))
}

/// `E[ε | x_t = x] = -sqrt(1 - Λ_t²) ∇ log q_t(x)`.
pub fn optimal_epsilon(spec: &DataSpec, s: &Schedule, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    let d = s.cum_noise(t).sqrt();
    Ok(noisy_marginal_score(spec, s, t, x)?
        .into_iter()
        .map(|g| -d * g)
        .collect())
}

/// `E[x_0 | x_t = x]`.
pub fn posterior_mean_x0(spec: &DataSpec, s: &Schedule, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    s.check_level(t)?;
    let mix = spec.mixture()?;
    let noisy = noisy_mixture(spec, s, t, x)?;
    let c = s.cum_lambda(t);
    let r = noisy.responsibilities(x);
    Ok((0..x.len())
        .map(|d| {
            (0..mix.components())
                .map(|k| {
                    let m = mix.means[k][d];
                    let gain = c * mix.variances[k][d] / noisy.variances[k][d];
                    r[k] * (m + gain * (x[d] - c * m))
                })
                .sum()
        })
        .collect())
}

/// Per-coordinate `(E[x_0 | x_t = x], Var[x_0 | x_t = x])`.
pub fn posterior_moments_x0(
    spec: &DataSpec,
    s: &Schedule,
    t: usize,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mix = spec.mixture()?;
    let noisy = noisy_mixture(spec, s, t, x)?;
    let c = s.cum_lambda(t);
    let r = noisy.responsibilities(x);
    let mut mean = vec![0.0; x.len()];
    let mut second = vec![0.0; x.len()];
    for k in 0..mix.components() {
        for d in 0..x.len() {
            let v = mix.variances[k][d];
            let gain = c * v / noisy.variances[k][d];
            let m = mix.means[k][d] + gain * (x[d] - c * mix.means[k][d]);
            let var = v - gain * c * v;
            mean[d] += r[k] * m;
            second[d] += r[k] * (var + m * m);
        }
    }
    let var = (0..x.len()).map(|d| (second[d] - mean[d] * mean[d]).max(0.0)).collect();
    Ok((mean, var))
}

/// The Bayes-optimal predictor for a known data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDenoiser {
    pub data: DataSpec,
    pub mode: MeanMode,
    pub variance_mode: VarianceMode,
}

impl OptimalDenoiser {
    pub fn new(data: DataSpec, mode: MeanMode, variance_mode: VarianceMode) -> Result<Self> {
        data.mixture()?;
        Ok(Self {
            data,
            mode,
            variance_mode,
        })
    }
}

impl Denoiser for OptimalDenoiser {
    fn mean_mode(&self) -> MeanMode {
        self.mode
    }

    fn variance_mode(&self) -> VarianceMode {
        self.variance_mode
    }

    fn predict_rows(&self, s: &Schedule, x_t: &Array2<f64>, levels: &[usize]) -> Result<Array2<f64>> {
        if levels.len() != x_t.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} levels for {} rows",
                levels.len(),
                x_t.nrows()
            )));
        }
        let mut out = Array2::zeros(x_t.dim());
        for (i, row) in x_t.rows().into_iter().enumerate() {
            let x = row.to_vec();
            let pred = match self.mode {
                MeanMode::PredictX0 => posterior_mean_x0(&self.data, s, levels[i], &x)?,
                MeanMode::PredictEps => optimal_epsilon(&self.data, s, levels[i], &x)?,
            };
            out.row_mut(i).assign(&Array1::from(pred));
        }
        Ok(out)
    }
}
