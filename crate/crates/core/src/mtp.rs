//! The draft-head cascade. Each module is a bias-free linear projector
//! followed by one decoder block; module k consumes the full history of
//! module k-1's hidden states (level 0 being the backbone's post-norm
//! states) and every module scores drafts through the backbone's own LM
//! head, never a copy of it.

use crate::backbone::Backbone;
use crate::block::{accum_outer, BlockKv, BlockTape, BlockWeights};
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, RngStream};

/// A sequence of hidden vectors tagged with its cascade level
/// (0 = backbone output, k = output of draft module k).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub level: usize,
    pub values: Vec<Vec<f64>>,
}

/// One draft module: dim-to-dim projector (no bias, no activation) plus a
/// single decoder block.
#[derive(Debug, Clone)]
pub struct MtpModule {
    pub proj: Matrix,
    pub block: BlockWeights,
}

/// Tape for one module's training forward.
pub struct MtpTape {
    inputs: Vec<Vec<f64>>,
    block_tape: BlockTape,
}

impl MtpModule {
    pub fn init(dim: usize, ffn_dim: usize, std: f64, rng: &mut RngStream) -> Self {
        MtpModule {
            proj: Matrix::randn(dim, dim, std, rng),
            block: BlockWeights::init(dim, ffn_dim, std, rng),
        }
    }

    pub fn zeros(dim: usize, ffn_dim: usize) -> Self {
        MtpModule { proj: Matrix::zeros(dim, dim), block: BlockWeights::zeros(dim, ffn_dim) }
    }

    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![("proj", &self.proj.data[..])];
        out.extend(self.block.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>, bool)> {
        let mut out: Vec<(&'static str, &mut Vec<f64>, bool)> =
            vec![("proj", &mut self.proj.data, true)];
        out.extend(self.block.params_mut());
        out
    }

    /// Incremental forward over new positions, appending to `kv`.
    pub fn forward_suffix(
        &self,
        inputs: &[Vec<f64>],
        start_pos: usize,
        n_heads: usize,
        kv: &mut BlockKv,
    ) -> Result<Vec<Vec<f64>>> {
        let projected = nn::matvec_batch(&self.proj, inputs);
        self.block.forward_suffix(&projected, start_pos, n_heads, kv)
    }

    /// Full-sequence forward with a tape for `backward`.
    pub fn forward_train(
        &self,
        inputs: &[Vec<f64>],
        n_heads: usize,
    ) -> Result<(Vec<Vec<f64>>, MtpTape)> {
        let projected = nn::matvec_batch(&self.proj, inputs);
        let (out, block_tape) = self.block.forward_train(&projected, n_heads)?;
        Ok((out, MtpTape { inputs: inputs.to_vec(), block_tape }))
    }

    /// Backward through block and projector; returns gradient on the inputs
    /// so a deeper module's loss can keep flowing into shallower modules.
    pub fn backward(
        &self,
        tape: &MtpTape,
        d_out: &[Vec<f64>],
        n_heads: usize,
        grads: &mut MtpModule,
    ) -> Vec<Vec<f64>> {
        let d_proj = self.block.backward(&tape.block_tape, d_out, n_heads, &mut grads.block);
        let mut d_in = Vec::with_capacity(d_proj.len());
        for (t, dp) in d_proj.iter().enumerate() {
            accum_outer(&mut grads.proj, dp, &tape.inputs[t]);
            d_in.push(nn::matvec_transposed(&self.proj, dp));
        }
        d_in
    }
}

/// Per-module incremental caches for one decode session. All module caches
/// advance and roll back together with the backbone's sequence position.
#[derive(Debug, Clone)]
pub struct CascadeState {
    pub caches: Vec<BlockKv>,
}

impl CascadeState {
    pub fn new(n_modules: usize) -> Self {
        CascadeState { caches: (0..n_modules).map(|_| BlockKv::default()).collect() }
    }

    pub fn len(&self) -> usize {
        self.caches.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncate(&mut self, keep: usize) -> Result<()> {
        if keep > self.len() {
            return Err(Error::Param(format!(
                "cannot truncate cascade state of {} positions up to {}",
                self.len(),
                keep
            )));
        }
        for c in &mut self.caches {
            c.truncate(keep);
        }
        Ok(())
    }

    fn check_aligned(&self) -> Result<usize> {
        let len = self.len();
        if self.caches.iter().any(|c| c.len() != len) {
            return Err(Error::Contract(format!(
                "cascade module caches disagree on length: {:?}",
                self.caches.iter().map(|c| c.len()).collect::<Vec<_>>()
            )));
        }
        Ok(len)
    }
}

/// The ordered stack of draft modules (module k at index k-1).
#[derive(Debug, Clone)]
pub struct MtpCascade {
    pub modules: Vec<MtpModule>,
    pub n_heads: usize,
}

impl MtpCascade {
    pub fn init(dim: usize, ffn_dim: usize, n_heads: usize, n_modules: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, 0x347D);
        let modules =
            (0..n_modules).map(|_| MtpModule::init(dim, ffn_dim, 0.02, &mut rng)).collect();
        MtpCascade { modules, n_heads }
    }

    pub fn zeros_like(&self) -> Self {
        let dim = self.modules[0].proj.rows;
        let ffn_dim = self.modules[0].block.w1.rows;
        MtpCascade {
            modules: self.modules.iter().map(|_| MtpModule::zeros(dim, ffn_dim)).collect(),
            n_heads: self.n_heads,
        }
    }

    pub fn n_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn new_state(&self) -> CascadeState {
        CascadeState::new(self.modules.len())
    }

    /// Named parameters; module indices are 1-based to match level numbering.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, m) in self.modules.iter().enumerate() {
            for (name, data) in m.params() {
                out.push((format!("mtp.{}.{}", i + 1, name), data));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f64>, bool)> {
        let mut out = Vec::new();
        for (i, m) in self.modules.iter_mut().enumerate() {
            for (name, data, decay) in m.params_mut() {
                out.push((format!("mtp.{}.{}", i + 1, name), data, decay));
            }
        }
        out
    }

    pub fn content_hash(&self) -> u64 {
        let slices: Vec<&[f64]> = self.params().into_iter().map(|(_, s)| s).collect();
        nn::content_hash(&slices)
    }

    /// Whole-sequence forward of module `k` (1-based) with level checking.
    pub fn mtp_forward(&self, k: usize, h_prev: &HiddenStates) -> Result<HiddenStates> {
        if k == 0 || k > self.modules.len() {
            return Err(Error::Contract(format!(
                "module index {k} outside cascade of {} modules",
                self.modules.len()
            )));
        }
        if h_prev.level != k - 1 {
            return Err(Error::Contract(format!(
                "module {k} expects level {} input, got level {}",
                k - 1,
                h_prev.level
            )));
        }
        let mut kv = BlockKv::default();
        let values = self.modules[k - 1].forward_suffix(&h_prev.values, 0, self.n_heads, &mut kv)?;
        Ok(HiddenStates { level: k, values })
    }

    /// Feed newly produced level-0 states into every module's cache.
    /// Returns the hidden states each module produced for the new positions
    /// (index 0 holds level 1, and so on).
    pub fn ingest(&self, h0_new: &[Vec<f64>], state: &mut CascadeState) -> Result<Vec<Vec<Vec<f64>>>> {
        let start = state.check_aligned()?;
        let mut prev = h0_new.to_vec();
        let mut per_module = Vec::with_capacity(self.modules.len());
        for (m, kv) in self.modules.iter().zip(state.caches.iter_mut()) {
            prev = m.forward_suffix(&prev, start, self.n_heads, kv)?;
            per_module.push(prev.clone());
        }
        Ok(per_module)
    }

    /// Draft one token per module from the backbone's latest hidden state.
    ///
    /// Module 1 consumes `h0_last`, module k consumes module k-1's output at
    /// this same step, and every draft is scored through the backbone's LM
    /// head. Returns `(logits, hidden)` per module in cascade order.
    pub fn speculate(
        &self,
        h0_last: &[f64],
        backbone: &Backbone,
        state: &mut CascadeState,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let per_module = self.ingest(std::slice::from_ref(&h0_last.to_vec()), state)?;
        Ok(per_module
            .into_iter()
            .map(|mut hs| {
                let h = hs.pop().expect("one position in, one out");
                (backbone.logits(&h), h)
            })
            .collect())
    }

    /// Ingest fresh level-0 states and draft from the newest one in a single
    /// pass: each module sees one batched suffix call covering all of
    /// `h0_new`, and its output at the final position becomes that module's
    /// draft. Produces the same logits, hiddens, and cache contents as
    /// `ingest(&h0_new[..n-1])` followed by `speculate(&h0_new[n-1])`, but
    /// walks every module's weights once instead of twice.
    pub fn speculate_batch(
        &self,
        h0_new: &[Vec<f64>],
        backbone: &Backbone,
        state: &mut CascadeState,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if h0_new.is_empty() {
            return Err(Error::Contract("speculate_batch needs at least one fresh state".into()));
        }
        let start = state.check_aligned()?;
        let mut prev = h0_new.to_vec();
        let mut out = Vec::with_capacity(self.modules.len());
        for (m, kv) in self.modules.iter().zip(state.caches.iter_mut()) {
            prev = m.forward_suffix(&prev, start, self.n_heads, kv)?;
            let h = prev.last().expect("at least one position in, same out").clone();
            out.push((backbone.logits(&h), h));
        }
        Ok(out)
    }
}
