//! The noising process and its closed-form Gaussian conditionals.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::{normal_matrix, Stream};
use crate::schedule::Schedule;

/// Rows of `D`-dimensional data, optionally tagged with a per-row level.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub level: Option<Vec<usize>>,
}

impl Batch {
    /// Validated batch: at least one row, one column, all entries finite.
    pub fn new(x: Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch must be non-empty, got {:?}",
                x.dim()
            )));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("batch entry {v}")));
        }
        Ok(Self { x, level: None })
    }

    pub fn at_level(mut self, t: usize) -> Self {
        self.level = Some(vec![t; self.x.nrows()]);
        self
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn unlabelled(x: Array2<f64>) -> Self {
        Self { x, level: None }
    }
}

/// Exact Gaussian `q(x_{t-1} | x_0, x_t) = N(a x_0 + b x_t, var)` together
/// with the one-shot coefficients `x_t = c x_0 + d ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub a: f64,
    pub b: f64,
    pub var: f64,
    pub c: f64,
    pub d: f64,
}

impl PosteriorCoefficients {
    pub fn mean(&self, x0: &Array2<f64>, x_t: &Array2<f64>) -> Array2<f64> {
        x0 * self.a + x_t * self.b
    }
}

/// One application of the noising auto-regression at level `t`.
pub fn noise_step(s: &Schedule, t: usize, x_prev: &Batch, rng: &mut Stream) -> Result<Batch> {
    s.check_level(t)?;
    let eps = normal_matrix(rng, x_prev.rows(), x_prev.dim());
    noise_step_with(s, t, x_prev, &eps)
}

/// [`noise_step`] with caller-supplied standard-normal noise.
pub fn noise_step_with(s: &Schedule, t: usize, x_prev: &Batch, eps: &Array2<f64>) -> Result<Batch> {
    s.check_level(t)?;
    same_shape(&x_prev.x, eps, "noise")?;
    let x = &x_prev.x * s.lambda(t) + eps * s.sigma2(t).sqrt();
    Ok(Batch::unlabelled(x).at_level(t))
}

/// Draw `x_t ~ q(x_t | x_0)` and return it with the noise that produced it.
pub fn conditional_on_data(
    s: &Schedule,
    t: usize,
    x0: &Batch,
    rng: &mut Stream,
) -> Result<(Batch, Batch)> {
    s.check_level(t)?;
    let eps = normal_matrix(rng, x0.rows(), x0.dim());
    let x_t = conditional_with(s, t, x0, &eps)?;
    Ok((x_t, Batch::unlabelled(eps)))
}

/// `x_t = Λ_t x_0 + sqrt(1 - Λ_t²) ε` for a given `ε`.
pub fn conditional_with(s: &Schedule, t: usize, x0: &Batch, eps: &Array2<f64>) -> Result<Batch> {
    s.check_level(t)?;
    same_shape(&x0.x, eps, "noise")?;
    let x = &x0.x * s.cum_lambda(t) + eps * s.cum_noise(t).sqrt();
    Ok(Batch::unlabelled(x).at_level(t))
}

/// Coefficients of `q(x_{t-1} | x_0, x_t)`. At `t = 1` this is the point
/// mass on `x_0`: `(a, b, var) = (1, 0, 0)`.
pub fn posterior_coefficients(s: &Schedule, t: usize) -> Result<PosteriorCoefficients> {
    s.check_level(t)?;
    Ok(posterior_unchecked(s, t))
}

pub(crate) fn posterior_unchecked(s: &Schedule, t: usize) -> PosteriorCoefficients {
    let prev_cum = s.cum_lambda(t - 1);
    let prev_noise = s.cum_noise(t - 1);
    let noise = s.cum_noise(t);
    let sigma2 = s.sigma2(t);
    PosteriorCoefficients {
        a: prev_cum * sigma2 / noise,
        b: prev_noise * s.lambda(t) / noise,
        var: prev_noise * sigma2 / noise,
        c: s.cum_lambda(t),
        d: noise.sqrt(),
    }
}

/// Draw `x_{t-1} ~ q(x_{t-1} | x_0, x_t)`.
pub fn posterior_sample(
    coeffs: &PosteriorCoefficients,
    x0: &Batch,
    x_t: &Batch,
    rng: &mut Stream,
) -> Result<Batch> {
    same_shape(&x0.x, &x_t.x, "x_t")?;
    let eps = normal_matrix(rng, x0.rows(), x0.dim());
    posterior_sample_with(coeffs, x0, x_t, &eps)
}

pub fn posterior_sample_with(
    coeffs: &PosteriorCoefficients,
    x0: &Batch,
    x_t: &Batch,
    eps: &Array2<f64>,
) -> Result<Batch> {
    same_shape(&x0.x, &x_t.x, "x_t")?;
    same_shape(&x0.x, eps, "noise")?;
    let x = coeffs.mean(&x0.x, &x_t.x) + eps * coeffs.var.sqrt();
    Ok(Batch::unlabelled(x))
}

pub(crate) fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        Err(Error::ShapeMismatch(format!(
            "{what} has shape {:?}, expected {:?}",
            b.dim(),
            a.dim()
        )))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn two_level() -> Schedule {
        Schedule::from_lambdas(vec![0.9, 0.9]).unwrap()
    }

    fn batch(v: f64) -> Batch {
        Batch::new(array![[v]]).unwrap()
    }

    #[test]
    fn noise_step_hand_value() {
        let s = Schedule::from_lambdas(vec![0.9]).unwrap();
        let out = noise_step_with(&s, 1, &batch(0.0), &array![[1.0]]).unwrap();
        assert_relative_eq!(out.x[[0, 0]], 0.19f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(out.x[[0, 0]], 0.43589, epsilon = 1e-5);
        assert_eq!(out.level, Some(vec![1]));
    }

    #[test]
    fn nearly_noiseless_step_is_identity() {
        let s = Schedule::from_lambdas(vec![1.0 - 1e-15]).unwrap();
        let x = batch(0.7);
        let out = noise_step_with(&s, 1, &x, &array![[0.0]]).unwrap();
        assert_relative_eq!(out.x[[0, 0]], 0.7, max_relative = 1e-14);
    }

    #[test]
    fn level_range_is_checked() {
        let s = two_level();
        let mut r = rng::root(0);
        assert!(matches!(
            noise_step(&s, 3, &batch(0.0), &mut r),
            Err(Error::LevelOutOfRange { t: 3, max: 2 })
        ));
        assert!(conditional_on_data(&s, 0, &batch(0.0), &mut r).is_err());
        assert!(posterior_coefficients(&s, 5).is_err());
    }

    #[test]
    fn conditional_hand_value() {
        let x2 = conditional_with(&two_level(), 2, &batch(1.0), &array![[0.0]]).unwrap();
        assert_relative_eq!(x2.x[[0, 0]], 0.81, max_relative = 1e-15);
    }

    #[test]
    fn posterior_hand_values() {
        let p = posterior_coefficients(&two_level(), 2).unwrap();
        assert_relative_eq!(p.a, 0.9 * 0.19 / 0.3439, max_relative = 1e-13);
        assert_relative_eq!(p.a, 0.497238, epsilon = 1e-6);
        assert_relative_eq!(p.b, 0.497238, epsilon = 1e-6);
        assert_relative_eq!(p.var, 0.104973, epsilon = 1e-6);
        assert_relative_eq!(p.a + p.b * 0.81, 0.9, max_relative = 1e-14);
        let first = posterior_coefficients(&two_level(), 1).unwrap();
        assert_eq!((first.a, first.b, first.var), (1.0, 0.0, 0.0));
    }

    #[test]
    fn posterior_sample_degenerate_and_hand_value() {
        let p = posterior_coefficients(&two_level(), 2).unwrap();
        let out =
            posterior_sample_with(&p, &batch(1.0), &batch(0.81), &array![[0.0]]).unwrap();
        assert_relative_eq!(out.x[[0, 0]], 0.9, max_relative = 1e-14);
        let point = PosteriorCoefficients {
            a: 0.3,
            b: 0.2,
            var: 0.0,
            c: 0.5,
            d: 0.5,
        };
        let mut r = rng::root(3);
        let out = posterior_sample(&point, &batch(1.0), &batch(2.0), &mut r).unwrap();
        assert_relative_eq!(out.x[[0, 0]], 0.7, max_relative = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = posterior_coefficients(&two_level(), 2).unwrap();
        let two = Batch::new(array![[1.0], [2.0]]).unwrap();
        let mut r = rng::root(0);
        assert!(matches!(
            posterior_sample(&p, &batch(1.0), &two, &mut r),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(Array2::zeros((0, 1))).is_err());
        assert!(Batch::new(array![[f64::NAN]]).is_err());
    }
}
