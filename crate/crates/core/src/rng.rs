//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `&mut Stream`. Independent
//! workers (training steps, levels, shards) get their own stream split from a
//! root seed by ChaCha stream id, so results never depend on scheduling order.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Root stream for `seed`.
pub fn root(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic child stream `id` of `seed`; distinct ids never overlap.
pub fn split(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix of i.i.d. standard normals, filled row-major.
pub fn normal_matrix(rng: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
