//! Pre-norm decoder block: RMS-normed rotary attention and a SwiGLU feed
//! forward, each wrapped in a residual connection.
//!
//! The same arithmetic serves three callers: incremental decoding with a KV
//! cache, full-sequence training forward with a tape of intermediates, and
//! the hand-written backward pass that consumes the tape. All dot products go
//! through [`nn::dot`], so decoding a suffix in one call is bit-identical to
//! decoding it token by token.

use crate::error::{Error, Result};
use crate::nn::{self, dot, rotate_pairs, softmax, Matrix, RngStream};

/// Rotary angle base shared by every attention layer.
pub const ROTARY_BASE: f64 = 10000.0;
/// RMS normalization epsilon shared by every norm in the model.
pub const NORM_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

#[inline]
pub(crate) fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Backward pass of [`nn::rms_norm`]; accumulates into `dgain`, returns `dx`.
pub(crate) fn rms_norm_backward(
    x: &[f64],
    gain: &[f64],
    eps: f64,
    dy: &[f64],
    dgain: &mut [f64],
) -> Vec<f64> {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = (ms + eps).sqrt();
    let s: f64 = dy.iter().zip(gain).zip(x).map(|((&d, &g), &xv)| d * g * xv).sum();
    let mut dx = vec![0.0; x.len()];
    for j in 0..x.len() {
        dx[j] = gain[j] * dy[j] / r - x[j] * s / (n * r * r * r);
        dgain[j] += dy[j] * x[j] / r;
    }
    dx
}

/// Per-key-position attention cache for one block.
#[derive(Debug, Clone, Default)]
pub struct BlockKv {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl BlockKv {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Drop cached entries at positions `>= keep`.
    pub fn truncate(&mut self, keep: usize) {
        self.keys.truncate(keep);
        self.values.truncate(keep);
    }
}

/// Weights for one decoder block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
    pub attn_gain: Vec<f64>,
    pub ffn_gain: Vec<f64>,
}

/// Intermediates recorded by the training forward, consumed by `backward`.
pub struct BlockTape {
    x: Vec<Vec<f64>>,
    xn1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// probs[t][h] holds the attention row over key positions `0..=t`.
    probs: Vec<Vec<Vec<f64>>>,
    attn_cat: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    xn2: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    hsw: Vec<Vec<f64>>,
}

impl BlockWeights {
    pub fn init(dim: usize, ffn_dim: usize, std: f64, rng: &mut RngStream) -> Self {
        BlockWeights {
            wq: Matrix::randn(dim, dim, std, rng),
            wk: Matrix::randn(dim, dim, std, rng),
            wv: Matrix::randn(dim, dim, std, rng),
            wo: Matrix::randn(dim, dim, std, rng),
            w1: Matrix::randn(ffn_dim, dim, std, rng),
            w2: Matrix::randn(dim, ffn_dim, std, rng),
            w3: Matrix::randn(ffn_dim, dim, std, rng),
            attn_gain: vec![1.0; dim],
            ffn_gain: vec![1.0; dim],
        }
    }

    pub fn zeros(dim: usize, ffn_dim: usize) -> Self {
        BlockWeights {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
            w1: Matrix::zeros(ffn_dim, dim),
            w2: Matrix::zeros(dim, ffn_dim),
            w3: Matrix::zeros(ffn_dim, dim),
            attn_gain: vec![0.0; dim],
            ffn_gain: vec![0.0; dim],
        }
    }

    /// Named parameter tensors in a fixed order (checkpoint layout order).
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("wq", &self.wq.data[..]),
            ("wk", &self.wk.data[..]),
            ("wv", &self.wv.data[..]),
            ("wo", &self.wo.data[..]),
            ("w1", &self.w1.data[..]),
            ("w2", &self.w2.data[..]),
            ("w3", &self.w3.data[..]),
            ("attn_gain", &self.attn_gain[..]),
            ("ffn_gain", &self.ffn_gain[..]),
        ]
    }

    /// Mutable parameters with a decay flag: true for matrices, false for
    /// norm gains (the optimizer decays only the matrices).
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>, bool)> {
        vec![
            ("wq", &mut self.wq.data, true),
            ("wk", &mut self.wk.data, true),
            ("wv", &mut self.wv.data, true),
            ("wo", &mut self.wo.data, true),
            ("w1", &mut self.w1.data, true),
            ("w2", &mut self.w2.data, true),
            ("w3", &mut self.w3.data, true),
            ("attn_gain", &mut self.attn_gain, false),
            ("ffn_gain", &mut self.ffn_gain, false),
        ]
    }

    fn dim(&self) -> usize {
        self.wq.rows
    }

    /// Project a batch of normed inputs through q/k/v and rotate q,k per head.
    fn qkv(
        &self,
        xn: &[Vec<f64>],
        start_pos: usize,
        n_heads: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dim = self.dim();
        let dh = dim / n_heads;
        let mut qs = nn::matvec_batch(&self.wq, xn);
        let mut ks = nn::matvec_batch(&self.wk, xn);
        let vs = nn::matvec_batch(&self.wv, xn);
        for (off, (q, k)) in qs.iter_mut().zip(ks.iter_mut()).enumerate() {
            let pos = start_pos + off;
            for h in 0..n_heads {
                rotate_pairs(&mut q[h * dh..(h + 1) * dh], pos, ROTARY_BASE, 1.0);
                rotate_pairs(&mut k[h * dh..(h + 1) * dh], pos, ROTARY_BASE, 1.0);
            }
        }
        (qs, ks, vs)
    }

    /// Attend one rotated query over `keys[0..kv_len]`, returning the
    /// concatenated head outputs and (optionally) the per-head prob rows.
    fn attend(
        q: &[f64],
        keys: &[Vec<f64>],
        values: &[Vec<f64>],
        n_heads: usize,
        want_probs: bool,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let dim = q.len();
        let dh = dim / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; dim];
        let mut probs = Vec::new();
        for h in 0..n_heads {
            let hs = h * dh..(h + 1) * dh;
            let qh = &q[hs.clone()];
            let scores: Vec<f64> =
                keys.iter().map(|k| dot(qh, &k[hs.clone()]) * scale).collect();
            let p = softmax(&scores, 1.0).expect("attention scores are finite");
            let oh = &mut out[hs.clone()];
            for (u, &pu) in p.iter().enumerate() {
                let vh = &values[u][hs.clone()];
                for (o, &vv) in oh.iter_mut().zip(vh) {
                    *o += pu * vv;
                }
            }
            if want_probs {
                probs.push(p);
            }
        }
        (out, probs)
    }

    /// Incremental forward over a suffix of positions `start_pos..start_pos + xs.len()`.
    ///
    /// The cache must already hold exactly `start_pos` entries; the new keys
    /// and values are appended. Weight rows are walked once per projection
    /// regardless of suffix width.
    pub fn forward_suffix(
        &self,
        xs: &[Vec<f64>],
        start_pos: usize,
        n_heads: usize,
        kv: &mut BlockKv,
    ) -> Result<Vec<Vec<f64>>> {
        if kv.len() != start_pos {
            return Err(Error::State(format!(
                "block cache holds {} positions, expected {}",
                kv.len(),
                start_pos
            )));
        }
        let xn: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| nn::rms_norm(x, &self.attn_gain, NORM_EPS))
            .collect::<Result<_>>()?;
        let (qs, ks, vs) = self.qkv(&xn, start_pos, n_heads);
        kv.keys.extend(ks);
        kv.values.extend(vs);

        let mut attn_cat = Vec::with_capacity(xs.len());
        for (off, q) in qs.iter().enumerate() {
            let visible = start_pos + off + 1;
            let (o, _) = Self::attend(q, &kv.keys[..visible], &kv.values[..visible], n_heads, false);
            attn_cat.push(o);
        }
        let attn_out = nn::matvec_batch(&self.wo, &attn_cat);
        let x_mid: Vec<Vec<f64>> = xs
            .iter()
            .zip(&attn_out)
            .map(|(x, ao)| x.iter().zip(ao).map(|(a, b)| a + b).collect())
            .collect();

        let xn2: Vec<Vec<f64>> = x_mid
            .iter()
            .map(|x| nn::rms_norm(x, &self.ffn_gain, NORM_EPS))
            .collect::<Result<_>>()?;
        let a = nn::matvec_batch(&self.w1, &xn2);
        let b = nn::matvec_batch(&self.w3, &xn2);
        let hsw: Vec<Vec<f64>> = a
            .iter()
            .zip(&b)
            .map(|(av, bv)| av.iter().zip(bv).map(|(&ai, &bi)| silu(ai) * bi).collect())
            .collect();
        let ffn_out = nn::matvec_batch(&self.w2, &hsw);
        Ok(x_mid
            .iter()
            .zip(&ffn_out)
            .map(|(x, f)| x.iter().zip(f).map(|(a, b)| a + b).collect())
            .collect())
    }

    /// Full-sequence forward that records every intermediate for `backward`.
    pub fn forward_train(
        &self,
        xs: &[Vec<f64>],
        n_heads: usize,
    ) -> Result<(Vec<Vec<f64>>, BlockTape)> {
        let xn1: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| nn::rms_norm(x, &self.attn_gain, NORM_EPS))
            .collect::<Result<_>>()?;
        let (qs, ks, vs) = self.qkv(&xn1, 0, n_heads);

        let mut attn_cat = Vec::with_capacity(xs.len());
        let mut probs = Vec::with_capacity(xs.len());
        for (t, q) in qs.iter().enumerate() {
            let (o, p) = Self::attend(q, &ks[..=t], &vs[..=t], n_heads, true);
            attn_cat.push(o);
            probs.push(p);
        }
        let attn_out = nn::matvec_batch(&self.wo, &attn_cat);
        let x_mid: Vec<Vec<f64>> = xs
            .iter()
            .zip(&attn_out)
            .map(|(x, ao)| x.iter().zip(ao).map(|(a, b)| a + b).collect())
            .collect();

        let xn2: Vec<Vec<f64>> = x_mid
            .iter()
            .map(|x| nn::rms_norm(x, &self.ffn_gain, NORM_EPS))
            .collect::<Result<_>>()?;
        let a = nn::matvec_batch(&self.w1, &xn2);
        let b = nn::matvec_batch(&self.w3, &xn2);
        let hsw: Vec<Vec<f64>> = a
            .iter()
            .zip(&b)
            .map(|(av, bv)| av.iter().zip(bv).map(|(&ai, &bi)| silu(ai) * bi).collect())
            .collect();
        let ffn_out = nn::matvec_batch(&self.w2, &hsw);
        let out: Vec<Vec<f64>> = x_mid
            .iter()
            .zip(&ffn_out)
            .map(|(x, f)| x.iter().zip(f).map(|(a, b)| a + b).collect())
            .collect();

        let tape = BlockTape {
            x: xs.to_vec(),
            xn1,
            q: qs,
            k: ks,
            v: vs,
            probs,
            attn_cat,
            x_mid,
            xn2,
            a,
            b,
            hsw,
        };
        Ok((out, tape))
    }

    /// Backward pass through the block. Accumulates parameter gradients into
    /// `grads` (same layout as `self`) and returns the gradient with respect
    /// to the block input.
    pub fn backward(
        &self,
        tape: &BlockTape,
        d_out: &[Vec<f64>],
        n_heads: usize,
        grads: &mut BlockWeights,
    ) -> Vec<Vec<f64>> {
        let t_len = tape.x.len();
        let dim = self.dim();
        let dh = dim / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // FFN half: out = x_mid + w2 (silu(w1 xn2) * (w3 xn2)).
        let mut d_x_mid: Vec<Vec<f64>> = d_out.to_vec();
        let mut d_xn1 = vec![vec![0.0; dim]; t_len];
        for t in 0..t_len {
            let dy = &d_out[t];
            accum_outer(&mut grads.w2, dy, &tape.hsw[t]);
            let dhsw = nn::matvec_transposed(&self.w2, dy);
            let da: Vec<f64> = dhsw
                .iter()
                .zip(&tape.b[t])
                .zip(&tape.a[t])
                .map(|((&dh_, &bv), &av)| dh_ * bv * silu_grad(av))
                .collect();
            let db: Vec<f64> = dhsw
                .iter()
                .zip(&tape.a[t])
                .map(|(&dh_, &av)| dh_ * silu(av))
                .collect();
            accum_outer(&mut grads.w1, &da, &tape.xn2[t]);
            accum_outer(&mut grads.w3, &db, &tape.xn2[t]);
            let mut dxn2 = nn::matvec_transposed(&self.w1, &da);
            for (acc, v) in dxn2.iter_mut().zip(nn::matvec_transposed(&self.w3, &db)) {
                *acc += v;
            }
            let dmid =
                rms_norm_backward(&tape.x_mid[t], &self.ffn_gain, NORM_EPS, &dxn2, &mut grads.ffn_gain);
            for (acc, v) in d_x_mid[t].iter_mut().zip(dmid) {
                *acc += v;
            }
        }

        // Attention half: x_mid = x + wo attn_cat.
        let mut dx: Vec<Vec<f64>> = d_x_mid.clone();
        let mut dq = vec![vec![0.0; dim]; t_len];
        let mut dk = vec![vec![0.0; dim]; t_len];
        let mut dv = vec![vec![0.0; dim]; t_len];
        for t in 0..t_len {
            accum_outer(&mut grads.wo, &d_x_mid[t], &tape.attn_cat[t]);
            let d_cat = nn::matvec_transposed(&self.wo, &d_x_mid[t]);
            for h in 0..n_heads {
                let hs = h * dh..(h + 1) * dh;
                let d_oh = &d_cat[hs.clone()];
                let p = &tape.probs[t][h];
                // dP[u] = <dO, V_u>; dV_u += P[u] dO.
                let mut dp = vec![0.0; t + 1];
                for u in 0..=t {
                    dp[u] = dot(d_oh, &tape.v[u][hs.clone()]);
                    let dvh = &mut dv[u][hs.clone()];
                    for (acc, &d) in dvh.iter_mut().zip(d_oh) {
                        *acc += p[u] * d;
                    }
                }
                let row_dot: f64 = dp.iter().zip(p).map(|(&d, &pv)| d * pv).sum();
                for u in 0..=t {
                    let ds = p[u] * (dp[u] - row_dot) * scale;
                    let qh = &tape.q[t][hs.clone()];
                    let kh = &tape.k[u][hs.clone()];
                    let dqh = &mut dq[t][hs.clone()];
                    for (acc, &kv_) in dqh.iter_mut().zip(kh) {
                        *acc += ds * kv_;
                    }
                    let dkh = &mut dk[u][hs.clone()];
                    for (acc, &qv) in dkh.iter_mut().zip(qh) {
                        *acc += ds * qv;
                    }
                }
            }
        }
        // Undo the rotation, then push through the projections.
        for t in 0..t_len {
            for h in 0..n_heads {
                let hs = h * dh..(h + 1) * dh;
                rotate_pairs(&mut dq[t][hs.clone()], t, ROTARY_BASE, -1.0);
                rotate_pairs(&mut dk[t][hs.clone()], t, ROTARY_BASE, -1.0);
            }
            accum_outer(&mut grads.wq, &dq[t], &tape.xn1[t]);
            accum_outer(&mut grads.wk, &dk[t], &tape.xn1[t]);
            accum_outer(&mut grads.wv, &dv[t], &tape.xn1[t]);
            let mut dxn1_t = nn::matvec_transposed(&self.wq, &dq[t]);
            for (acc, v) in dxn1_t.iter_mut().zip(nn::matvec_transposed(&self.wk, &dk[t])) {
                *acc += v;
            }
            for (acc, v) in dxn1_t.iter_mut().zip(nn::matvec_transposed(&self.wv, &dv[t])) {
                *acc += v;
            }
            for (acc, v) in d_xn1[t].iter_mut().zip(dxn1_t) {
                *acc += v;
            }
            let dxt =
                rms_norm_backward(&tape.x[t], &self.attn_gain, NORM_EPS, &d_xn1[t], &mut grads.attn_gain);
            for (acc, v) in dx[t].iter_mut().zip(dxt) {
                *acc += v;
            }
        }
        dx
    }
}

/// `gw[o][i] += dy[o] * x[i]`.
pub(crate) fn accum_outer(gw: &mut Matrix, dy: &[f64], x: &[f64]) {
    for (o, &dyo) in dy.iter().enumerate() {
        let row = gw.row_mut(o);
        for (r, &xi) in row.iter_mut().zip(x) {
            *r += dyo * xi;
        }
    }
}
