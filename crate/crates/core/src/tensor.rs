//! Small numerical helpers shared by the encoder, heads and training loops.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Probability floor used in every log/ratio argument.
pub const CLAMP_EPS: f64 = 1e-8;

/// Stage tags mixed into the run seed so each pipeline stage draws from its
/// own deterministic stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Batch,
    Split,
    Length,
    Probe,
    Adapt,
    Tsne,
    Synthetic,
    Dropout,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Init => 0x01,
            Stage::Batch => 0x02,
            Stage::Split => 0x03,
            Stage::Length => 0x04,
            Stage::Probe => 0x05,
            Stage::Adapt => 0x06,
            Stage::Tsne => 0x07,
            Stage::Synthetic => 0x08,
            Stage::Dropout => 0x09,
        }
    }
}

/// Seeded generator for one pipeline stage.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed ^ stage.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Matrix with entries drawn from N(0, std²).
pub fn randn2(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// View of a [batch, seq, d] tensor as a [batch*seq, d] matrix.
pub fn flat2(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (b, s, d) = x.dim();
    x.view()
        .into_shape((b * s, d))
        .expect("contiguous activation tensor")
}

/// [batch*seq, d] matrix product against a [d, k] weight, reshaped back to 3-D.
pub fn matmul3(x: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (b, s, _) = x.dim();
    let k = w.dim().1;
    let out = flat2(x).dot(w);
    out.into_shape((b, s, k)).expect("matmul output shape")
}

/// Squared L2 norm accumulated over a set of gradient tensors.
pub fn sq_norm1(x: &Array1<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn sq_norm2(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// True when every entry is finite.
pub fn all_finite3(x: &Array3<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Fisher-Yates shuffled index vector.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
