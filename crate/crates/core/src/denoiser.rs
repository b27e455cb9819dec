//! The level-conditioned regression model.
//!
//! A feed-forward network reads `[x_t, emb(t - 1)]` and returns either a
//! prediction of the clean data or of the injected noise. Both are turned
//! into the reverse-process mean by an affine map fixed by the schedule, and
//! the reverse-process variance is one of two fixed options.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::OptimalDenoiser;
use crate::error::{Error, Result};
use crate::forward::{posterior_unchecked, same_shape, Batch, PosteriorCoefficients};
use crate::rng::{normal, Stream};
use crate::schedule::Schedule;
use crate::tape::{silu, GradientTape, Var};

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const DEFAULT_EMBED_DIM: usize = 16;

/// What the network output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Output is `x̂_0`; mean is `a x̂_0 + b x_t`.
    PredictX0,
    /// Output is `ε̂`; mean is `(a / c)(x_t - d ε̂) + b x_t`.
    PredictEps,
}

/// Which fixed variance the reverse conditional uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `1 - λ_t²`.
    NoisingVariance,
    /// Variance of `q(x_{t-1} | x_0, x_t)`.
    PosteriorVariance,
}

/// Anything that maps noisy inputs at given levels to raw predictions.
pub trait Denoiser {
    fn mean_mode(&self) -> MeanMode;
    fn variance_mode(&self) -> VarianceMode;

    /// Raw prediction for each row of `x_t`; `levels[i]` is the noise level
    /// of row `i` (the network itself is conditioned on `levels[i] - 1`).
    fn predict_rows(&self, s: &Schedule, x_t: &Array2<f64>, levels: &[usize]) -> Result<Array2<f64>>;
}

/// Raw prediction for a batch at a single level.
pub fn predict<M: Denoiser + ?Sized>(model: &M, s: &Schedule, x_t: &Batch, t: usize) -> Result<Batch> {
    s.check_level(t)?;
    let out = model.predict_rows(s, &x_t.x, &vec![t; x_t.rows()])?;
    Ok(Batch { x: out, level: None })
}

/// Map a raw prediction to the reverse-process mean at the level `coeffs`
/// was computed for.
pub fn mean_from_prediction(
    coeffs: &PosteriorCoefficients,
    x_t: &Batch,
    prediction: &Batch,
    mode: MeanMode,
) -> Result<Batch> {
    same_shape(&x_t.x, &prediction.x, "prediction")?;
    let (scale, shift) = mean_affine(coeffs, mode);
    Ok(Batch {
        x: &prediction.x * scale + &x_t.x * shift,
        level: None,
    })
}

/// `(α, β)` with `mean = α · prediction + β · x_t`.
pub fn mean_affine(p: &PosteriorCoefficients, mode: MeanMode) -> (f64, f64) {
    match mode {
        MeanMode::PredictX0 => (p.a, p.b),
        MeanMode::PredictEps => (-p.a * p.d / p.c, p.a / p.c + p.b),
    }
}

/// Variance of the reverse conditional used when sampling. Exactly zero at
/// `t = 1` in posterior mode.
pub fn variance_for_level(coeffs: &PosteriorCoefficients, s: &Schedule, t: usize, mode: VarianceMode) -> f64 {
    match mode {
        VarianceMode::NoisingVariance => s.sigma2(t),
        VarianceMode::PosteriorVariance => coeffs.var,
    }
}

/// Variance of the reverse conditional inside likelihood terms. Identical
/// to [`variance_for_level`] except that the zero variance at `t = 1` in
/// posterior mode is floored at `1 - λ_1²`, keeping the likelihood finite.
pub fn likelihood_variance(s: &Schedule, t: usize, mode: VarianceMode) -> f64 {
    let var = variance_for_level(&posterior_unchecked(s, t), s, t, mode);
    if var > 0.0 {
        var
    } else {
        s.sigma2(t)
    }
}

/// Sinusoidal embedding of level `t`: `E / 2` pairs `(sin ω_k t, cos ω_k t)`
/// with frequencies spaced geometrically from 1 down to `π / (2 (T + 1))`.
/// The lowest-frequency cosine is strictly decreasing on `0..=T`, so
/// distinct levels always get distinct embeddings.
pub fn level_embedding(t: usize, embed_dim: usize, levels: usize) -> Result<Vec<f64>> {
    if embed_dim < 2 || embed_dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding width must be even and at least 2, got {embed_dim}"
        )));
    }
    if t > levels {
        return Err(Error::LevelOutOfRange { t, max: levels });
    }
    let pairs = embed_dim / 2;
    let lowest = std::f64::consts::FRAC_PI_2 / (levels as f64 + 1.0);
    let mut out = Vec::with_capacity(embed_dim);
    for k in 0..pairs {
        let omega = if pairs == 1 {
            lowest
        } else {
            lowest.powf(k as f64 / (pairs - 1) as f64)
        };
        let phase = omega * t as f64;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// One affine layer `h W + b`; `weight` is `inputs x outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LayerDoc", try_from = "LayerDoc")]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    inputs: usize,
    outputs: usize,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<Layer> for LayerDoc {
    fn from(l: Layer) -> Self {
        LayerDoc {
            inputs: l.weight.nrows(),
            outputs: l.weight.ncols(),
            weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias.iter().copied().collect(),
        }
    }
}

impl TryFrom<LayerDoc> for Layer {
    type Error = Error;

    fn try_from(doc: LayerDoc) -> Result<Self> {
        let flat: Vec<f64> = doc.weight.into_iter().flatten().collect();
        let weight = Array2::from_shape_vec((doc.inputs, doc.outputs), flat)
            .map_err(|e| Error::Config(format!("layer weight: {e}")))?;
        let bias = Array2::from_shape_vec((1, doc.outputs), doc.bias)
            .map_err(|e| Error::Config(format!("layer bias: {e}")))?;
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameter".into()));
        }
        Ok(Layer { weight, bias })
    }
}

/// Parameters of the feed-forward denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub layers: Vec<Layer>,
    pub mode: MeanMode,
    pub variance_mode: VarianceMode,
    pub embed_dim: usize,
    /// Number of levels `T` the embedding is laid out for.
    #[serde(rename = "T")]
    pub levels: usize,
}

/// Architecture of a [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    pub mode: MeanMode,
    pub variance_mode: VarianceMode,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

impl DenoiserParams {
    /// He-normal weights, zero biases.
    pub fn init(arch: &Architecture, levels: usize, rng: &mut Stream) -> Result<Self> {
        level_embedding(0, arch.embed_dim, levels)?;
        if arch.dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut widths = vec![arch.dim + arch.embed_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || std * normal(rng)),
                    bias: Array2::zeros((1, w[1])),
                }
            })
            .collect();
        Ok(Self {
            layers,
            mode: arch.mode,
            variance_mode: arch.variance_mode,
            embed_dim: arch.embed_dim,
            levels,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(Error::Config("network has no layers".into()));
        };
        level_embedding(0, self.embed_dim, self.levels)?;
        if first.weight.nrows() != self.dim() + self.embed_dim {
            return Err(Error::Config(format!(
                "input width {} does not equal data dim {} plus embedding {}",
                first.weight.nrows(),
                self.dim(),
                self.embed_dim
            )));
        }
        for w in self.layers.windows(2) {
            if w[0].weight.ncols() != w[1].weight.nrows() {
                return Err(Error::Config("consecutive layer widths disagree".into()));
            }
        }
        for l in &self.layers {
            if l.bias.dim() != (1, l.weight.ncols()) {
                return Err(Error::Config("bias width disagrees with weight".into()));
            }
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        Ok(())
    }

    /// Network input `[x_t, emb(t - 1)]` for each row.
    fn input(&self, x_t: &Array2<f64>, levels: &[usize]) -> Result<Array2<f64>> {
        if x_t.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x_t.ncols(),
                self.dim()
            )));
        }
        if levels.len() != x_t.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} levels for {} rows",
                levels.len(),
                x_t.nrows()
            )));
        }
        let dim = self.dim();
        let mut table: Vec<Option<Vec<f64>>> = vec![None; self.levels + 1];
        let mut out = Array2::zeros((x_t.nrows(), dim + self.embed_dim));
        for (i, &t) in levels.iter().enumerate() {
            if t == 0 || t > self.levels {
                return Err(Error::LevelOutOfRange { t, max: self.levels });
            }
            if table[t].is_none() {
                table[t] = Some(level_embedding(t - 1, self.embed_dim, self.levels)?);
            }
            let emb = table[t].as_ref().unwrap();
            let mut row = out.row_mut(i);
            for d in 0..dim {
                row[d] = x_t[[i, d]];
            }
            for (k, e) in emb.iter().enumerate() {
                row[dim + k] = *e;
            }
        }
        Ok(out)
    }

    fn forward_plain(&self, input: Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weight) + &l.bias;
            if i < last {
                h.mapv_inplace(silu);
            }
        }
        h
    }

    /// Records the forward pass on `tape`; returns the parameter leaves in
    /// `(weight, bias)` order and the output node.
    fn record<'t>(&self, tape: &'t GradientTape, input: Array2<f64>) -> (Vec<Var<'t>>, Var<'t>) {
        let last = self.layers.len() - 1;
        let mut leaves = Vec::with_capacity(2 * self.layers.len());
        let mut h = tape.leaf(input);
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.leaf(l.weight.clone());
            let b = tape.leaf(l.bias.clone());
            leaves.push(w);
            leaves.push(b);
            h = h.matmul(w).add(b);
            if i < last {
                h = h.silu();
            }
        }
        (leaves, h)
    }
}

impl Denoiser for DenoiserParams {
    fn mean_mode(&self) -> MeanMode {
        self.mode
    }

    fn variance_mode(&self) -> VarianceMode {
        self.variance_mode
    }

    fn predict_rows(&self, _s: &Schedule, x_t: &Array2<f64>, levels: &[usize]) -> Result<Array2<f64>> {
        let out = self.forward_plain(self.input(x_t, levels)?);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(out)
    }
}

/// Value of a scalar objective of the network output together with its
/// exact gradient with respect to every parameter.
///
/// `loss_fn` receives the tape and the recorded `n x D` prediction node and
/// must build the loss from recorded primitives. The gradient is returned
/// as a parameter set of identical shape.
pub fn loss_and_gradient<F>(
    params: &DenoiserParams,
    x_t: &Array2<f64>,
    levels: &[usize],
    loss_fn: F,
) -> Result<(f64, DenoiserParams)>
where
    F: for<'t> FnOnce(&'t GradientTape, Var<'t>) -> Result<Var<'t>>,
{
    let input = params.input(x_t, levels)?;
    let tape = GradientTape::new();
    let (leaves, pred) = params.record(&tape, input);
    let loss = loss_fn(&tape, pred)?;
    if loss.shape() != (1, 1) {
        return Err(Error::ShapeMismatch(format!(
            "loss must be a scalar, got {:?}",
            loss.shape()
        )));
    }
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let grads = tape.backward(loss);
    let mut grad = params.clone();
    for (i, l) in grad.layers.iter_mut().enumerate() {
        l.weight = grads.wrt(leaves[2 * i]);
        l.bias = grads.wrt(leaves[2 * i + 1]);
    }
    Ok((value, grad))
}

/// A stored model: either a trained network or an analytic predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Network(DenoiserParams),
    Analytic(OptimalDenoiser),
}

impl Denoiser for Model {
    fn mean_mode(&self) -> MeanMode {
        match self {
            Model::Network(p) => p.mean_mode(),
            Model::Analytic(o) => o.mean_mode(),
        }
    }

    fn variance_mode(&self) -> VarianceMode {
        match self {
            Model::Network(p) => p.variance_mode(),
            Model::Analytic(o) => o.variance_mode(),
        }
    }

    fn predict_rows(&self, s: &Schedule, x_t: &Array2<f64>, levels: &[usize]) -> Result<Array2<f64>> {
        match self {
            Model::Network(p) => p.predict_rows(s, x_t, levels),
            Model::Analytic(o) => o.predict_rows(s, x_t, levels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::posterior_coefficients;
    use crate::rng;
    use approx::assert_relative_eq;
    use ndarray::array;
    use ndarray::Axis;
    use proptest::prelude::*;

    fn arch(dim: usize, hidden: Vec<usize>, embed_dim: usize) -> Architecture {
        Architecture {
            dim,
            hidden,
            embed_dim,
            mode: MeanMode::PredictEps,
            variance_mode: VarianceMode::NoisingVariance,
        }
    }

    fn two_level() -> Schedule {
        Schedule::from_lambdas(vec![0.9, 0.9]).unwrap()
    }

    #[test]
    fn embedding_at_zero_and_range() {
        let e = level_embedding(0, 16, 1000).unwrap();
        for k in 0..8 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        for t in [1, 17, 999, 1000] {
            assert!(level_embedding(t, 16, 1000)
                .unwrap()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(level_embedding(1, 15, 10).is_err());
        assert!(level_embedding(11, 4, 10).is_err());
    }

    #[test]
    fn embeddings_are_distinct_for_every_level_pair() {
        for levels in [1usize, 2, 10, 1000] {
            for dim in [2usize, 16] {
                let all: Vec<Vec<f64>> =
                    (0..=levels).map(|t| level_embedding(t, dim, levels).unwrap()).collect();
                // the lowest-frequency cosine is strictly monotone in t
                let lowest: Vec<f64> = all.iter().map(|e| e[dim - 1]).collect();
                assert!(lowest.windows(2).all(|w| w[1] < w[0]));
                if levels <= 10 {
                    for i in 0..all.len() {
                        for j in i + 1..all.len() {
                            let d2: f64 =
                                all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).powi(2)).sum();
                            assert!(d2 > 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_network_predicts_zero() {
        let s = two_level();
        let p = DenoiserParams::init(&arch(2, vec![8], 4), 2, &mut rng::root(0))
            .unwrap()
            .zeros_like();
        let x = Batch::new(array![[1.0, -3.0], [0.5, 2.0]]).unwrap();
        let out = predict(&p, &s, &x, 2).unwrap();
        assert!(out.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prediction_is_deterministic() {
        let s = two_level();
        let p = DenoiserParams::init(&arch(2, vec![8, 8], 4), 2, &mut rng::root(4)).unwrap();
        let x = Batch::new(array![[1.0, -3.0], [0.5, 2.0]]).unwrap();
        assert_eq!(predict(&p, &s, &x, 1).unwrap(), predict(&p, &s, &x, 1).unwrap());
    }

    #[test]
    fn single_linear_layer_hand_value() {
        let s = two_level();
        // inputs [x1, x2, sin, cos]; at t = 1 the network sees level 0
        let p = DenoiserParams {
            layers: vec![Layer {
                weight: array![[1.0, 2.0], [0.0, 1.0], [5.0, 5.0], [0.5, -0.5]],
                bias: array![[0.25, 0.0]],
            }],
            mode: MeanMode::PredictX0,
            variance_mode: VarianceMode::NoisingVariance,
            embed_dim: 2,
            levels: 2,
        };
        let out = predict(&p, &s, &Batch::new(array![[1.0, 3.0]]).unwrap(), 1).unwrap();
        // [1, 3] · [[1, 2], [0, 1]] = [1, 5]; plus cos(0) · [0.5, -0.5]; plus bias
        assert_relative_eq!(out.x[[0, 0]], 1.75, max_relative = 1e-15);
        assert_relative_eq!(out.x[[0, 1]], 4.5, max_relative = 1e-15);
    }

    #[test]
    fn mean_hand_value_and_modes() {
        let s = two_level();
        let p = posterior_coefficients(&s, 2).unwrap();
        let x0 = Batch::new(array![[1.0]]).unwrap();
        let xt = Batch::new(array![[0.81]]).unwrap();
        let m = mean_from_prediction(&p, &xt, &x0, MeanMode::PredictX0).unwrap();
        assert_relative_eq!(m.x[[0, 0]], 0.9, max_relative = 1e-14);
        let eps = Batch::new(array![[0.3]]).unwrap();
        let xt = crate::forward::conditional_with(&s, 2, &x0, &eps.x).unwrap();
        let from_eps = mean_from_prediction(&p, &xt, &eps, MeanMode::PredictEps).unwrap();
        let from_x0 = mean_from_prediction(&p, &xt, &x0, MeanMode::PredictX0).unwrap();
        assert_relative_eq!(from_eps.x[[0, 0]], from_x0.x[[0, 0]], max_relative = 1e-12);
    }

    #[test]
    fn variance_options() {
        let s = Schedule::from_lambdas(vec![0.9]).unwrap();
        let p = posterior_coefficients(&s, 1).unwrap();
        assert_relative_eq!(
            variance_for_level(&p, &s, 1, VarianceMode::NoisingVariance),
            0.19,
            max_relative = 1e-15
        );
        assert_eq!(variance_for_level(&p, &s, 1, VarianceMode::PosteriorVariance), 0.0);
        assert_eq!(likelihood_variance(&s, 1, VarianceMode::PosteriorVariance), s.sigma2(1));
        let s = two_level();
        let p = posterior_coefficients(&s, 2).unwrap();
        assert_relative_eq!(
            variance_for_level(&p, &s, 2, VarianceMode::PosteriorVariance),
            0.104973,
            epsilon = 1e-6
        );
    }

    #[test]
    fn params_json_round_trip_is_exact() {
        let p = DenoiserParams::init(&arch(2, vec![5, 3], 4), 7, &mut rng::root(9)).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: DenoiserParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        assert!(json.contains("\"embed_dim\":4"));
        assert!(json.contains("\"mode\":\"predict_eps\""));
    }

    #[test]
    fn flat_round_trip() {
        let p = DenoiserParams::init(&arch(1, vec![4], 2), 3, &mut rng::root(1)).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.num_params(), 3 * 4 + 4 + 4 + 1);
        assert!(q.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let s = Schedule::linear_beta(6, 1e-2, 1e-2).unwrap();
        let p = DenoiserParams::init(&arch(2, vec![7, 5], 4), 6, &mut rng::root(2)).unwrap();
        let x = rng::normal_matrix(&mut rng::root(3), 5, 2);
        let levels = [1, 2, 3, 6, 4];
        let plain = p.predict_rows(&s, &x, &levels).unwrap();
        let tape = GradientTape::new();
        let (_, out) = p.record(&tape, p.input(&x, &levels).unwrap());
        assert_eq!(out.value(), plain);
    }

    #[test]
    fn quadratic_loss_gradient_closed_form() {
        // loss = ½‖x W‖² for a bias-free linear layer has gradient xᵀ x W
        let w = array![[0.3, -1.2], [0.7, 0.4], [0.0, 0.0], [0.0, 0.0]];
        let p = DenoiserParams {
            layers: vec![Layer {
                weight: w.clone(),
                bias: Array2::zeros((1, 2)),
            }],
            mode: MeanMode::PredictX0,
            variance_mode: VarianceMode::NoisingVariance,
            embed_dim: 2,
            levels: 1,
        };
        // at level 1 the embedding of level 0 is (0, 1); zero rows of W kill it
        let x = array![[1.0, 2.0], [-0.5, 0.25]];
        let (value, grad) =
            loss_and_gradient(&p, &x, &[1, 1], |_, pred| Ok(pred.square().sum().scale(0.5))).unwrap();
        let xw = x.dot(&w.slice(ndarray::s![0..2, ..]));
        assert_relative_eq!(value, 0.5 * xw.mapv(|v| v * v).sum(), max_relative = 1e-14);
        let expected = x.t().dot(&x).dot(&w.slice(ndarray::s![0..2, ..]));
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(grad.layers[0].weight[[i, j]], expected[[i, j]], max_relative = 1e-14);
            }
        }
        // the cos row sees input 1 for both rows: gradient is the column sums of x W
        let colsum = xw.sum_axis(Axis(0));
        assert_relative_eq!(grad.layers[0].weight[[3, 0]], colsum[0], max_relative = 1e-14);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = DenoiserParams::init(&arch(1, vec![3], 2), 2, &mut rng::root(0)).unwrap();
        let (value, grad) =
            loss_and_gradient(&p, &array![[0.4]], &[2], |tape, _| Ok(tape.scalar(3.5))).unwrap();
        assert_eq!(value, 3.5);
        assert!(grad.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let p = DenoiserParams::init(&arch(1, vec![3], 2), 2, &mut rng::root(0)).unwrap();
        let r = loss_and_gradient(&p, &array![[0.4]], &[2], |tape, _| Ok(tape.scalar(f64::NAN)));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = DenoiserParams::init(&arch(2, vec![6, 5], 4), 5, &mut rng::root(8)).unwrap();
        let x = rng::normal_matrix(&mut rng::root(9), 4, 2);
        let levels = [1, 3, 5, 2];
        let target = rng::normal_matrix(&mut rng::root(10), 4, 2);
        let loss = |q: &DenoiserParams| -> (f64, DenoiserParams) {
            let target = target.clone();
            loss_and_gradient(q, &x, &levels, move |tape, pred| {
                Ok(pred.sub(tape.leaf(target)).square().sum())
            })
            .unwrap()
        };
        let (_, grad) = loss(&p);
        let base = p.to_flat();
        let g = grad.to_flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut up = p.clone();
            let mut flat = base.clone();
            flat[i] += h;
            up.set_flat(&flat).unwrap();
            let mut down = p.clone();
            flat[i] -= 2.0 * h;
            down.set_flat(&flat).unwrap();
            let fd = (loss(&up).0 - loss(&down).0) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-6);
            assert!((g[i] - fd).abs() / scale < 1e-4, "coordinate {i}: {} vs {fd}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn parameterisations_give_identical_means(
            betas in prop::collection::vec(1e-3f64..0.05, 2..40),
            x0 in -3.0f64..3.0,
            eps in -3.0f64..3.0,
            pick in 0usize..1000,
        ) {
            let lambda: Vec<f64> = betas.iter().map(|b| (1.0 - b).sqrt()).collect();
            let s = Schedule::from_lambdas(lambda).unwrap();
            let t = 1 + pick % s.levels();
            let p = posterior_coefficients(&s, t).unwrap();
            // an arbitrary fixed predictor f(x) = sin(x) + 0.3
            let xt = Batch::new(array![[s.cum_lambda(t) * x0 + s.cum_noise(t).sqrt() * eps]]).unwrap();
            let f = xt.x.mapv(|v| v.sin() + 0.3);
            let e = (&xt.x - &f * p.c) / p.d;
            let via_x0 = mean_from_prediction(&p, &xt, &Batch { x: f, level: None }, MeanMode::PredictX0).unwrap();
            let via_eps = mean_from_prediction(&p, &xt, &Batch { x: e, level: None }, MeanMode::PredictEps).unwrap();
            let (u, v) = (via_x0.x[[0, 0]], via_eps.x[[0, 0]]);
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{u} vs {v}");
        }

        #[test]
        fn posterior_variance_never_exceeds_noising_variance(
            betas in prop::collection::vec(1e-4f64..0.2, 2..60),
        ) {
            let lambda: Vec<f64> = betas.iter().map(|b| (1.0 - b).sqrt()).collect();
            let s = Schedule::from_lambdas(lambda).unwrap();
            for t in 2..=s.levels() {
                let p = posterior_coefficients(&s, t).unwrap();
                prop_assert!(
                    variance_for_level(&p, &s, t, VarianceMode::PosteriorVariance)
                        <= variance_for_level(&p, &s, t, VarianceMode::NoisingVariance)
                );
            }
        }
    }
}
