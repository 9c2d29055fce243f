//! Decoder-only backbone: token embedding, a stack of pre-norm blocks, a
//! final RMS norm, and a bias-free LM head.
//!
//! The hidden state exposed everywhere is the post-final-norm vector, so
//! `logits = lm_head(hidden)` holds exactly. Draft heads consume these same
//! hidden states as their level-zero input.

use serde::{Deserialize, Serialize};

use crate::block::{BlockKv, BlockTape, BlockWeights, NORM_EPS};
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, RngStream};

/// Shape of the backbone and its draft-head cascade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token space size, including the reserved EOS and PAD ids at the top.
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Number of cascaded draft modules hanging off the backbone.
    pub n_mtp_modules: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 66,
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 512,
            n_mtp_modules: 2,
        }
    }
}

impl ModelConfig {
    /// End-of-sequence token id (second from the top of the vocabulary).
    pub fn eos_token(&self) -> u32 {
        (self.vocab_size - 2) as u32
    }

    /// Padding token id (top of the vocabulary); never generated, never scored.
    pub fn pad_token(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    /// Number of ordinary data tokens (ids below EOS).
    pub fn n_data_tokens(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 4 (2 data tokens + EOS + PAD), got {}",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.dim == 0 {
            return Err(Error::Config("dim, n_layers, ffn_dim must be positive".into()));
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must divide evenly into n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for pairwise rotation",
                self.head_dim()
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.n_mtp_modules == 0 {
            return Err(Error::Config("n_mtp_modules must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-block attention caches for one decode stream.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub blocks: Vec<BlockKv>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        KvCache { blocks: (0..n_layers).map(|_| BlockKv::default()).collect() }
    }

    /// Number of positions currently cached.
    pub fn len(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Roll the cache back so only positions `< keep` remain.
    pub fn truncate(&mut self, keep: usize) -> Result<()> {
        if keep > self.len() {
            return Err(Error::Param(format!(
                "cannot truncate cache of {} positions up to {}",
                self.len(),
                keep
            )));
        }
        for b in &mut self.blocks {
            b.truncate(keep);
        }
        Ok(())
    }
}

/// Tape of intermediates from a training forward pass.
pub struct BackboneTape {
    tokens: Vec<u32>,
    block_tapes: Vec<BlockTape>,
    pre_final: Vec<Vec<f64>>,
}

/// The backbone model. Weights are plain `f64` tensors; there is no
/// interior mutability, so a `&Backbone` caller can never change them.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ModelConfig,
    /// vocab_size x dim token embedding table.
    pub embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Vec<f64>,
    /// vocab_size x dim output projection, no bias.
    pub lm_head: Matrix,
}

impl Backbone {
    /// Fresh model with normal(0, 0.02) weights drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::keyed(seed, 0xBAC0);
        let std = 0.02;
        let embed = Matrix::randn(config.vocab_size, config.dim, std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::init(config.dim, config.ffn_dim, std, &mut rng))
            .collect();
        let final_gain = vec![1.0; config.dim];
        let lm_head = Matrix::randn(config.vocab_size, config.dim, std, &mut rng);
        Ok(Backbone { config, embed, blocks, final_gain, lm_head })
    }

    /// All-zero model used as a gradient accumulator.
    pub fn zeros_like(config: &ModelConfig) -> Self {
        Backbone {
            config: config.clone(),
            embed: Matrix::zeros(config.vocab_size, config.dim),
            blocks: (0..config.n_layers)
                .map(|_| BlockWeights::zeros(config.dim, config.ffn_dim))
                .collect(),
            final_gain: vec![0.0; config.dim],
            lm_head: Matrix::zeros(config.vocab_size, config.dim),
        }
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers)
    }

    /// Named parameter tensors in checkpoint order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embed".into(), &self.embed.data[..])];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, data) in b.params() {
                out.push((format!("block{i}.{name}"), data));
            }
        }
        out.push(("final_gain".into(), &self.final_gain[..]));
        out.push(("lm_head".into(), &self.lm_head.data[..]));
        out
    }

    /// Mutable parameters with decay flags (matrices decay, gains do not).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f64>, bool)> {
        let mut out: Vec<(String, &mut Vec<f64>, bool)> =
            vec![("embed".into(), &mut self.embed.data, true)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, data, decay) in b.params_mut() {
                out.push((format!("block{i}.{name}"), data, decay));
            }
        }
        out.push(("final_gain".into(), &mut self.final_gain, false));
        out.push(("lm_head".into(), &mut self.lm_head.data, true));
        out
    }

    /// FNV-1a digest over every weight byte; used to verify the backbone
    /// stayed frozen across a draft-head training run.
    pub fn content_hash(&self) -> u64 {
        let slices: Vec<&[f64]> = self.params().into_iter().map(|(_, s)| s).collect();
        nn::content_hash(&slices)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token {} outside vocabulary of size {}",
                    t, self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        tokens.iter().map(|&t| self.embed.row(t as usize).to_vec()).collect()
    }

    /// Run the suffix `tokens` through the stack, appending to `cache`.
    /// Returns the post-final-norm hidden state for each new position.
    pub fn forward_suffix(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let start = cache.len();
        if start + tokens.len() > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                start + tokens.len(),
                self.config.max_seq_len
            )));
        }
        let mut hs = self.embed_tokens(tokens);
        for (block, kv) in self.blocks.iter().zip(cache.blocks.iter_mut()) {
            hs = block.forward_suffix(&hs, start, self.config.n_heads, kv)?;
        }
        hs.iter().map(|h| nn::rms_norm(h, &self.final_gain, NORM_EPS)).collect()
    }

    /// Forward a whole sequence with a throwaway cache.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut cache = self.new_cache();
        self.forward_suffix(tokens, &mut cache)
    }

    /// LM head logits for one hidden state.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        nn::matvec(&self.lm_head, hidden)
    }

    /// LM head logits for a batch of hidden states, weight rows walked once.
    pub fn logits_batch(&self, hidden: &[Vec<f64>]) -> Vec<Vec<f64>> {
        nn::matvec_batch(&self.lm_head, hidden)
    }

    /// Training forward: full sequence, no cache, tape kept for `backward`.
    pub fn forward_train(&self, tokens: &[u32]) -> Result<(Vec<Vec<f64>>, BackboneTape)> {
        self.check_tokens(tokens)?;
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let mut hs = self.embed_tokens(tokens);
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, tape) = block.forward_train(&hs, self.config.n_heads)?;
            hs = out;
            block_tapes.push(tape);
        }
        let pre_final = hs.clone();
        let h0 = hs
            .iter()
            .map(|h| nn::rms_norm(h, &self.final_gain, NORM_EPS))
            .collect::<Result<Vec<_>>>()?;
        Ok((h0, BackboneTape { tokens: tokens.to_vec(), block_tapes, pre_final }))
    }

    /// Backward from gradients on the post-final-norm hidden states down to
    /// every backbone parameter except the LM head (whose gradient the
    /// caller accumulates directly from the logit gradients).
    pub fn backward(&self, tape: &BackboneTape, d_hidden: &[Vec<f64>], grads: &mut Backbone) {
        let mut d: Vec<Vec<f64>> = tape
            .pre_final
            .iter()
            .zip(d_hidden)
            .map(|(x, dy)| {
                crate::block::rms_norm_backward(x, &self.final_gain, NORM_EPS, dy, &mut grads.final_gain)
            })
            .collect();
        for ((block, btape), gblock) in self
            .blocks
            .iter()
            .zip(&tape.block_tapes)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            d = block.backward(btape, &d, self.config.n_heads, gblock);
        }
        for (t, &tok) in tape.tokens.iter().enumerate() {
            let row = grads.embed.row_mut(tok as usize);
            for (acc, v) in row.iter_mut().zip(&d[t]) {
                *acc += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dot, matmul};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
            n_mtp_modules: 2,
        }
    }

    #[test]
    fn config_token_ids_sit_at_top_of_vocab() {
        let c = tiny_config();
        assert_eq!(c.eos_token(), 10);
        assert_eq!(c.pad_token(), 11);
        assert_eq!(c.n_data_tokens(), 10);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.vocab_size = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.n_mtp_modules = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.dim = 2;
        c.n_heads = 2;
        // head dim 1 is odd, cannot rotate pairs
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn chunked_and_per_token_hidden_states_are_bit_identical() {
        let bb = Backbone::init(tiny_config(), 42).unwrap();
        let toks: Vec<u32> = vec![1, 4, 2, 9, 0, 3, 7];

        let mut cache_a = bb.new_cache();
        let all = bb.forward_suffix(&toks, &mut cache_a).unwrap();

        let mut cache_b = bb.new_cache();
        let mut one = Vec::new();
        for t in &toks {
            one.extend(bb.forward_suffix(&[*t], &mut cache_b).unwrap());
        }
        assert_eq!(all, one);

        // Mixed chunking too.
        let mut cache_c = bb.new_cache();
        let mut mixed = Vec::new();
        mixed.extend(bb.forward_suffix(&toks[..3], &mut cache_c).unwrap());
        mixed.extend(bb.forward_suffix(&toks[3..5], &mut cache_c).unwrap());
        mixed.extend(bb.forward_suffix(&toks[5..], &mut cache_c).unwrap());
        assert_eq!(all, mixed);
    }

    #[test]
    fn cache_rollback_reproduces_hidden_states() {
        let bb = Backbone::init(tiny_config(), 7).unwrap();
        let toks: Vec<u32> = vec![5, 1, 8, 2, 6];
        let mut cache = bb.new_cache();
        let full = bb.forward_suffix(&toks, &mut cache).unwrap();
        cache.truncate(2).unwrap();
        assert_eq!(cache.len(), 2);
        let redo = bb.forward_suffix(&toks[2..], &mut cache).unwrap();
        assert_eq!(&full[2..], &redo[..]);

        // Truncating to the current length is the identity.
        let before = cache.blocks[0].keys.clone();
        cache.truncate(cache.len()).unwrap();
        assert_eq!(cache.blocks[0].keys, before);
        // Truncating to zero then replaying equals a fresh run exactly.
        cache.truncate(0).unwrap();
        let replay = bb.forward_suffix(&toks, &mut cache).unwrap();
        assert_eq!(replay, full);
        // Asking for more positions than exist is a parameter error.
        assert!(matches!(cache.truncate(99), Err(Error::Param(_))));
    }

    #[test]
    fn appending_a_token_leaves_earlier_hidden_states_unchanged() {
        let bb = Backbone::init(tiny_config(), 13).unwrap();
        let base: Vec<u32> = vec![2, 7, 1, 4];
        let short = bb.forward_full(&base).unwrap();
        let mut longer = base.clone();
        longer.push(9);
        let long = bb.forward_full(&longer).unwrap();
        assert_eq!(&long[..base.len()], &short[..]);
    }

    #[test]
    fn per_prefix_recompute_oracle_matches_full_forward() {
        // Running each prefix separately needs no causal mask at the final
        // position; agreement pins the masking of the full pass.
        let bb = Backbone::init(tiny_config(), 21).unwrap();
        let mut rng = RngStream::new(77);
        let toks: Vec<u32> = (0..12).map(|_| rng.next_below(10) as u32).collect();
        let full = bb.forward_full(&toks).unwrap();
        for i in 0..toks.len() {
            let prefix = bb.forward_full(&toks[..=i]).unwrap();
            let got = bb.logits(prefix.last().unwrap());
            let want = bb.logits(&full[i]);
            for (g, w) in got.iter().zip(&want) {
                let rel = (g - w).abs() / w.abs().max(1e-30);
                assert!(rel < 1e-6);
            }
        }
    }

    #[test]
    fn empty_suffix_is_a_no_op() {
        let bb = Backbone::init(tiny_config(), 2).unwrap();
        let mut cache = bb.new_cache();
        bb.forward_suffix(&[1, 2], &mut cache).unwrap();
        let out = bb.forward_suffix(&[], &mut cache).unwrap();
        assert!(out.is_empty());
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn capacity_error_past_max_seq_len() {
        let bb = Backbone::init(tiny_config(), 1).unwrap();
        let toks = vec![0u32; 17];
        let mut cache = bb.new_cache();
        assert!(matches!(bb.forward_suffix(&toks, &mut cache), Err(Error::Capacity(_))));
        // Incremental overflow too.
        let mut cache = bb.new_cache();
        bb.forward_suffix(&vec![0u32; 16], &mut cache).unwrap();
        assert!(matches!(bb.forward_suffix(&[0], &mut cache), Err(Error::Capacity(_))));
    }

    #[test]
    fn out_of_vocab_token_is_input_error() {
        let bb = Backbone::init(tiny_config(), 1).unwrap();
        let mut cache = bb.new_cache();
        assert!(matches!(bb.forward_suffix(&[12], &mut cache), Err(Error::Input(_))));
    }

    #[test]
    fn lm_head_matches_matmul_oracle() {
        let bb = Backbone::init(tiny_config(), 3).unwrap();
        let hs = bb.forward_full(&[1, 2, 3]).unwrap();
        // Oracle: H (t x dim) * lm_head^T (dim x vocab) via the matmul kernel.
        let hmat = Matrix::from_rows(&hs);
        let mut wt = Matrix::zeros(bb.config.dim, bb.config.vocab_size);
        for i in 0..bb.config.vocab_size {
            for j in 0..bb.config.dim {
                wt.data[j * bb.config.vocab_size + i] = bb.lm_head.get(i, j);
            }
        }
        let want = matmul(&hmat, &wt).unwrap();
        for (t, h) in hs.iter().enumerate() {
            let got = bb.logits(h);
            for (v, w) in got.iter().zip(want.row(t)) {
                let rel = (v - w).abs() / w.abs().max(1e-30);
                assert!(rel < 1e-12, "logit mismatch {v} vs {w}");
            }
        }
    }

    #[test]
    fn lm_head_is_linear_and_bias_free() {
        let bb = Backbone::init(tiny_config(), 17).unwrap();
        assert!(bb.logits(&vec![0.0; 8]).iter().all(|&v| v == 0.0));
        let mut rng = RngStream::new(4);
        let h1: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
        let h2: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
        let sum: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
        let lhs = bb.logits(&sum);
        let rhs: Vec<f64> =
            bb.logits(&h1).iter().zip(bb.logits(&h2)).map(|(a, b)| a + b).collect();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn train_forward_matches_cached_forward() {
        let bb = Backbone::init(tiny_config(), 11).unwrap();
        let toks: Vec<u32> = vec![3, 0, 9, 4];
        let infer = bb.forward_full(&toks).unwrap();
        let (train, _) = bb.forward_train(&toks).unwrap();
        assert_eq!(infer, train);
    }

    #[test]
    fn content_hash_tracks_weight_changes() {
        let bb = Backbone::init(tiny_config(), 5).unwrap();
        let h1 = bb.content_hash();
        assert_eq!(h1, bb.clone().content_hash());
        let mut changed = bb.clone();
        changed.blocks[1].wq.data[17] += 1e-9;
        assert_ne!(h1, changed.content_hash());
    }

    #[test]
    fn backward_matches_finite_difference_on_tiny_model() {
        let cfg = ModelConfig {
            vocab_size: 6,
            dim: 4,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 6,
            max_seq_len: 8,
            n_mtp_modules: 1,
        };
        let bb = Backbone::init(cfg.clone(), 9).unwrap();
        let toks: Vec<u32> = vec![1, 3, 0];
        let mut rng = RngStream::new(100);
        let c: Vec<Vec<f64>> =
            (0..3).map(|_| (0..4).map(|_| rng.next_normal()).collect()).collect();
        let loss_of = |m: &Backbone| -> f64 {
            let hs = m.forward_full(&toks).unwrap();
            hs.iter().zip(&c).map(|(h, cv)| dot(h, cv)).sum()
        };
        let (_, tape) = bb.forward_train(&toks).unwrap();
        let mut grads = Backbone::zeros_like(&cfg);
        bb.backward(&tape, &c, &mut grads);

        let h = 1e-5;
        let mut probe = bb.clone();
        // Embedding row of a used token.
        for idx in [0usize, 2] {
            let flat = 1 * cfg.dim + idx; // token 1's row
            let analytic = grads.embed.data[flat];
            probe.embed.data[flat] += h;
            let lp = loss_of(&probe);
            probe.embed.data[flat] -= 2.0 * h;
            let lm = loss_of(&probe);
            probe.embed.data[flat] += h;
            let num = (lp - lm) / (2.0 * h);
            assert!((analytic - num).abs() < 1e-5, "embed[{flat}]: {analytic} vs {num}");
        }
        // A block weight and the final gain.
        let analytic = grads.blocks[0].wq.data[5];
        probe.blocks[0].wq.data[5] += h;
        let lp = loss_of(&probe);
        probe.blocks[0].wq.data[5] -= 2.0 * h;
        let lm = loss_of(&probe);
        probe.blocks[0].wq.data[5] += h;
        let num = (lp - lm) / (2.0 * h);
        assert!((analytic - num).abs() < 1e-5, "wq[5]: {analytic} vs {num}");

        let analytic = grads.final_gain[1];
        probe.final_gain[1] += h;
        let lp = loss_of(&probe);
        probe.final_gain[1] -= 2.0 * h;
        let lm = loss_of(&probe);
        probe.final_gain[1] += h;
        let num = (lp - lm) / (2.0 * h);
        assert!((analytic - num).abs() < 1e-5, "final_gain[1]: {analytic} vs {num}");
    }
}
