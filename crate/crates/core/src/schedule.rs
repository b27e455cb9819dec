//! Variance-preserving augmentation schedules.
//!
//! A schedule is the coefficient sequence `λ_1..λ_T` of the noising
//! auto-regression `x_t = λ_t x_{t-1} + sqrt(1 - λ_t²) ε_t`. Everything the
//! other modules read (cumulative products `Λ_t`, conditional noise
//! `1 - Λ_t²`, signal-to-noise ratios) is derived once at construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;

/// Default first-level noise variance of the linear-β family.
pub const DEFAULT_BETA1: f64 = 1e-4;
/// Default last-level noise variance of the linear-β family.
pub const DEFAULT_BETA_LAST: f64 = 0.02;
/// Floor applied to `Λ_t` by the quarter-cosine family.
pub const COSINE_CLIP: f64 = 1e-6;

/// Serialisable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `1 - λ_t² = beta1 + (t-1) beta2`. Missing values take the defaults
    /// `beta1 = 1e-4` and `beta2` such that the last level has `1 - λ_T² = 0.02`.
    LinearBeta {
        #[serde(rename = "T")]
        levels: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta1: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta2: Option<f64>,
    },
    QuarterCosine {
        #[serde(rename = "T")]
        levels: usize,
    },
    LogSnrLinear {
        #[serde(rename = "T")]
        levels: usize,
        snr_max: f64,
        snr_min: f64,
    },
    Custom {
        lambda: Vec<f64>,
    },
}

impl ScheduleSpec {
    pub fn levels(&self) -> usize {
        match self {
            ScheduleSpec::LinearBeta { levels, .. }
            | ScheduleSpec::QuarterCosine { levels }
            | ScheduleSpec::LogSnrLinear { levels, .. } => *levels,
            ScheduleSpec::Custom { lambda } => lambda.len(),
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        match *self {
            ScheduleSpec::LinearBeta {
                levels,
                beta1,
                beta2,
            } => {
                let b1 = beta1.unwrap_or(DEFAULT_BETA1);
                let b2 = beta2.unwrap_or_else(|| default_beta2(levels, b1));
                Schedule::linear_beta(levels, b1, b2)
            }
            ScheduleSpec::QuarterCosine { levels } => Schedule::quarter_cosine(levels),
            ScheduleSpec::LogSnrLinear {
                levels,
                snr_max,
                snr_min,
            } => Schedule::log_snr_linear(levels, snr_max, snr_min),
            ScheduleSpec::Custom { ref lambda } => Schedule::from_lambdas(lambda.clone()),
        }
    }
}

/// Slope giving `1 - λ_T² = 0.02` when the first level uses `beta1`.
pub fn default_beta2(levels: usize, beta1: f64) -> f64 {
    if levels <= 1 {
        0.0
    } else {
        (DEFAULT_BETA_LAST - beta1) / (levels - 1) as f64
    }
}

/// The α/β/ᾱ sequences used by most diffusion code bases.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardNotation {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// An immutable, validated schedule with cached derived quantities.
///
/// Index conventions: `lambda`/`sigma2` are defined for `1..=T`; the
/// cumulative quantities are also defined at `t = 0`, where `Λ_0 = 1`,
/// `1 - Λ_0² = 0` and `SNR(0) = +∞`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "ScheduleSpec", try_from = "ScheduleSpec")]
pub struct Schedule {
    spec: ScheduleSpec,
    lambda: Vec<f64>,
    sigma2: Vec<f64>,
    // index 0 holds the t = 0 values
    cum: Vec<f64>,
    cum_noise: Vec<f64>,
    snr: Vec<f64>,
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> Self {
        s.spec
    }
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        spec.build()
    }
}

impl PartialEq for Schedule {
    fn eq(&self, other: &Self) -> bool {
        self.lambda == other.lambda
    }
}

impl Schedule {
    /// Linear noise-variance schedule `1 - λ_t² = beta1 + (t-1) beta2`.
    pub fn linear_beta(levels: usize, beta1: f64, beta2: f64) -> Result<Self> {
        check_levels(levels)?;
        let mut lambda = Vec::with_capacity(levels);
        for t in 1..=levels {
            let beta = beta1 + (t - 1) as f64 * beta2;
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::InvalidSchedule {
                    t,
                    reason: format!("1 - lambda^2 = {beta} must lie in (0, 1)"),
                });
            }
            lambda.push((1.0 - beta).sqrt());
        }
        Self::with_spec(
            lambda,
            ScheduleSpec::LinearBeta {
                levels,
                beta1: Some(beta1),
                beta2: Some(beta2),
            },
        )
    }

    /// `Λ_t = cos(t/T · π/2)`, floored at [`COSINE_CLIP`].
    pub fn quarter_cosine(levels: usize) -> Result<Self> {
        check_levels(levels)?;
        let mut lambda = Vec::with_capacity(levels);
        let mut prev = 1.0;
        for t in 1..=levels {
            let cum = (t as f64 / levels as f64 * std::f64::consts::FRAC_PI_2)
                .cos()
                .max(COSINE_CLIP);
            lambda.push(cum / prev);
            prev = cum;
        }
        Self::with_spec(lambda, ScheduleSpec::QuarterCosine { levels })
    }

    /// Log-SNR linearly spaced from `ln snr_max` at `t = 1` to `ln snr_min`
    /// at `t = T`. Needs `T >= 2` so both endpoints are attained.
    pub fn log_snr_linear(levels: usize, snr_max: f64, snr_min: f64) -> Result<Self> {
        check_levels(levels)?;
        if !(snr_min > 0.0 && snr_max > snr_min && snr_max.is_finite()) {
            return Err(Error::InvalidSchedule {
                t: 1,
                reason: format!("need snr_max > snr_min > 0, got {snr_max} and {snr_min}"),
            });
        }
        if levels < 2 {
            return Err(Error::InvalidSchedule {
                t: 1,
                reason: "log-SNR-linear spacing needs at least two levels".into(),
            });
        }
        let (hi, lo) = (snr_max.ln(), snr_min.ln());
        let step = (lo - hi) / (levels - 1) as f64;
        let mut lambda = Vec::with_capacity(levels);
        let mut prev = 1.0;
        for t in 1..=levels {
            let log_snr = if t == levels {
                lo
            } else {
                hi + (t - 1) as f64 * step
            };
            let snr = log_snr.exp();
            let cum = (snr / (1.0 + snr)).sqrt();
            lambda.push(cum / prev);
            prev = cum;
        }
        Self::with_spec(
            lambda,
            ScheduleSpec::LogSnrLinear {
                levels,
                snr_max,
                snr_min,
            },
        )
    }

    /// Schedule from explicit coefficients.
    pub fn from_lambdas(lambda: Vec<f64>) -> Result<Self> {
        let spec = ScheduleSpec::Custom {
            lambda: lambda.clone(),
        };
        Self::with_spec(lambda, spec)
    }

    /// Inverse of [`Schedule::to_standard_notation`]: `λ_t = sqrt(α_t)`.
    pub fn from_alphas(alpha: &[f64]) -> Result<Self> {
        Self::from_lambdas(alpha.iter().map(|a| a.sqrt()).collect())
    }

    fn with_spec(lambda: Vec<f64>, spec: ScheduleSpec) -> Result<Self> {
        check_levels(lambda.len())?;
        for (i, &l) in lambda.iter().enumerate() {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::InvalidSchedule {
                    t: i + 1,
                    reason: format!("lambda = {l} must lie strictly inside (0, 1)"),
                });
            }
        }
        let levels = lambda.len();
        let sigma2: Vec<f64> = lambda.iter().map(|l| 1.0 - l * l).collect();
        let mut cum = Vec::with_capacity(levels + 1);
        let mut cum_noise = Vec::with_capacity(levels + 1);
        let mut snr = Vec::with_capacity(levels + 1);
        cum.push(1.0);
        cum_noise.push(0.0);
        snr.push(f64::INFINITY);
        for t in 1..=levels {
            let l = lambda[t - 1];
            let c = cum[t - 1] * l;
            // telescoped form: no cancellation when Λ_t is close to one
            let u = sigma2[t - 1] + l * l * cum_noise[t - 1];
            let s = c * c / u;
            if !(c > 0.0) || !(s < snr[t - 1]) || !s.is_finite() {
                return Err(Error::InvalidSchedule {
                    t,
                    reason: "cumulative signal underflowed or SNR is not strictly decreasing"
                        .into(),
                });
            }
            cum.push(c);
            cum_noise.push(u);
            snr.push(s);
        }
        Ok(Self {
            spec,
            lambda,
            sigma2,
            cum,
            cum_noise,
            snr,
        })
    }

    /// Number of noise levels `T`.
    pub fn levels(&self) -> usize {
        self.lambda.len()
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// `λ_t`, `1 <= t <= T`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t - 1]
    }

    /// Noising variance `σ_t² = 1 - λ_t²`, `1 <= t <= T`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// `Λ_t`, `0 <= t <= T`.
    pub fn cum_lambda(&self, t: usize) -> f64 {
        self.cum[t]
    }

    /// Conditional noise variance `1 - Λ_t²`, `0 <= t <= T`.
    pub fn cum_noise(&self, t: usize) -> f64 {
        self.cum_noise[t]
    }

    /// `SNR(t)` for `0 <= t <= T` without range checking; `SNR(0) = ∞`.
    pub fn snr_at(&self, t: usize) -> f64 {
        self.snr[t]
    }

    /// `SNR(t) = Λ_t² / (1 - Λ_t²)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        Ok(self.snr[t])
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.levels() {
            Err(Error::LevelOutOfRange {
                t,
                max: self.levels(),
            })
        } else {
            Ok(())
        }
    }

    pub fn to_standard_notation(&self) -> StandardNotation {
        StandardNotation {
            alpha: self.lambda.iter().map(|l| l * l).collect(),
            beta: self.sigma2.clone(),
            alpha_bar: self.cum[1..].iter().map(|c| c * c).collect(),
        }
    }

    /// Per-level table with columns `t,lambda,Lambda,sigma2,snr,log_snr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,lambda,Lambda,sigma2,snr,log_snr\n");
        for t in 1..=self.levels() {
            out.push_str(&format!(
                "{t},{},{},{},{},{}\n",
                fmt_f64(self.lambda(t)),
                fmt_f64(self.cum_lambda(t)),
                fmt_f64(self.sigma2(t)),
                fmt_f64(self.snr[t]),
                fmt_f64(self.snr[t].ln()),
            ));
        }
        out
    }
}

fn check_levels(levels: usize) -> Result<()> {
    if levels == 0 {
        Err(Error::InvalidSchedule {
            t: 0,
            reason: "a schedule needs at least one level".into(),
        })
    } else {
        Ok(())
    }
}
