//! Deterministic numeric kernels shared by the backbone, draft heads,
//! trainer, and vocoder.
//!
//! Everything here is a pure function over immutable inputs: same inputs give
//! bit-identical outputs on every platform, which is what makes the decode
//! traces and training runs reproducible end to end.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64` values.
///
/// Weights are stored as `rows x cols` with `row(i)` contiguous, so a
/// projection `y = W x` walks each weight row once.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows_data: &[Vec<f64>]) -> Self {
        let rows = rows_data.len();
        let cols = if rows == 0 { 0 } else { rows_data[0].len() };
        let mut data = Vec::with_capacity(rows * cols);
        for r in rows_data {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Fill with i.i.d. normal(0, std) draws from `rng`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.next_normal() * std;
        }
        m
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Exact product `a * b` with plain k-order accumulation.
///
/// The accumulation order is the naive triple loop, so results are
/// bit-identical to a reference implementation of the same loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Temperature softmax with max-subtraction stabilization.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Param(format!("softmax temperature must be > 0, got {temperature}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("softmax: non-finite logit".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// RMS normalization: `y_i = gain_i * x_i / sqrt(mean(x^2) + epsilon)`.
pub fn rms_norm(x: &[f64], gain: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(Error::Shape(format!("rms_norm: x len {} vs gain len {}", x.len(), gain.len())));
    }
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let inv = 1.0 / (ms + epsilon).sqrt();
    Ok(x.iter().zip(gain).map(|(&xi, &gi)| gi * xi * inv).collect())
}

/// Rotate consecutive pairs of `v` in place by `sign * position / base^(2i/d)`.
pub(crate) fn rotate_pairs(v: &mut [f64], position: usize, base: f64, sign: f64) {
    let d = v.len() as f64;
    let pos = position as f64;
    for i in 0..v.len() / 2 {
        let theta = sign * pos / base.powf(2.0 * i as f64 / d);
        let (sin, cos) = theta.sin_cos();
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

/// Rotary position encoding applied to a query/key pair.
///
/// Pair `(v[2i], v[2i+1])` is rotated by angle `position / base^(2i/d)`,
/// which preserves each pair's Euclidean norm.
pub fn rotary_apply(
    q: &[f64],
    k_vec: &[f64],
    position: usize,
    base: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.len() % 2 != 0 || k_vec.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "rotary_apply: lengths must be even, got {} and {}",
            q.len(),
            k_vec.len()
        )));
    }
    let mut qo = q.to_vec();
    let mut ko = k_vec.to_vec();
    rotate_pairs(&mut qo, position, base, 1.0);
    rotate_pairs(&mut ko, position, base, 1.0);
    Ok((qo, ko))
}

/// Dot product with four independent accumulators.
///
/// The lane split is fixed, so the summation order (and therefore the result)
/// is identical on every call and every platform. All model forward paths use
/// this one implementation, which is what makes chunked and one-token-at-a-time
/// decoding bit-identical.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y = W x` over weight rows.
pub fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    (0..w.rows).map(|o| dot(w.row(o), x)).collect()
}

/// `y_p = W x_p` for a batch of inputs, walking each weight row once.
///
/// For models whose weights spill out of cache this keeps the per-call memory
/// traffic flat in the batch width, which is the regime where verifying a
/// short draft suffix in one call beats one call per token.
pub fn matvec_batch(w: &Matrix, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; w.rows]; xs.len()];
    for o in 0..w.rows {
        let wrow = w.row(o);
        for (p, x) in xs.iter().enumerate() {
            out[p][o] = dot(wrow, x);
        }
    }
    out
}

/// `y = W^T x` (used by backward passes).
pub fn matvec_transposed(w: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.rows, x.len());
    let mut out = vec![0.0; w.cols];
    for (o, &xo) in x.iter().enumerate() {
        let wrow = w.row(o);
        for (acc, &wv) in out.iter_mut().zip(wrow) {
            *acc += xo * wv;
        }
    }
    out
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable counter-based generator (splitmix64 core).
///
/// Identical `(seed, stream_id)` keys produce identical draw sequences on all
/// platforms; sampling never touches OS entropy.
#[derive(Debug, Clone)]
pub struct RngStream {
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0)
    }

    /// Stream keyed by `(seed, stream_id)`; distinct ids give decorrelated streams.
    pub fn keyed(seed: u64, stream_id: u64) -> Self {
        RngStream { counter: mix64(seed) ^ mix64(stream_id.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1)) }
    }

    /// Derive an independent child stream without disturbing this one.
    pub fn substream(&self, stream_id: u64) -> Self {
        RngStream { counter: mix64(self.counter) ^ mix64(stream_id.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1)) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(GOLDEN_GAMMA);
        mix64(self.counter)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: u64) -> u64 {
        // Desk-scale n; modulo bias is negligible against 2^64.
        self.next_u64() % n.max(1)
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sample an index from a probability vector by inverse CDF walk.
    pub fn next_categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// FNV-1a over raw little-endian bytes; used for weight freeze checks.
pub fn content_hash(slices: &[&[f64]]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for s in slices {
        for v in *s {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}
