//! Draft-and-verify generation loop.
//!
//! Each step runs exactly one backbone forward over the not-yet-cached
//! suffix (the newest trusted token plus any pending drafts), verifies the
//! pending drafts in cascade order by top-k membership in the backbone's
//! logits at the position just before each draft, rolls back on rejection,
//! and otherwise samples a fresh trusted token and speculates new drafts.
//! A rejected draft at level 1 discards every pending token; a rejection at
//! a deeper level discards only from that level on. Every token that
//! survives to the output was either sampled from backbone logits directly
//! or accepted by verification against them.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, KvCache};
use crate::error::{Error, Result};
use crate::mtp::{CascadeState, MtpCascade};
use crate::nn::{softmax, RngStream};
use crate::trainer::argmax_lowest_id;

/// Sampling hyperparameters shared by trusted-token and draft sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerParams {
    /// Softmax temperature; 0 means exact argmax (lowest id wins ties).
    pub temperature: f64,
    pub top_k: usize,
    /// Optional nucleus cutoff in (0, 1], applied after the top-k filter.
    pub top_p: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams { temperature: 1.0, top_k: 16, top_p: None, seed: 0 }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Param("sampler top_k must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Param(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Param(format!("top_p must lie in (0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == 1
    }
}

/// Verification thresholds: a draft is accepted when it appears among the
/// top `topk_v` backbone logits, or top `eos_topk_v` when the draft is EOS.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub topk_v: usize,
    pub eos_topk_v: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams { topk_v: 8, eos_topk_v: 1 }
    }
}

impl VerifyParams {
    pub fn validate(&self) -> Result<()> {
        if self.eos_topk_v == 0 || self.eos_topk_v > self.topk_v {
            return Err(Error::Param(format!(
                "need 1 <= eos_topk_v <= topk_v, got eos {} vs {}",
                self.eos_topk_v, self.topk_v
            )));
        }
        Ok(())
    }

    /// True when both thresholds cover the whole vocabulary, making every
    /// verification vacuously pass.
    pub fn vacuous(&self, vocab_size: usize) -> bool {
        self.topk_v >= vocab_size && self.eos_topk_v >= vocab_size
    }
}

/// Counters for one generation run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub backbone_forwards: u64,
    pub backbone_samples: u64,
    pub accepted_per_module: Vec<u64>,
    pub rejected_per_module: Vec<u64>,
    pub tokens_emitted: u64,
    pub wall_ns: u128,
    /// Generation stopped at the length cap without a trusted EOS.
    pub truncated: bool,
    /// Set when the verify thresholds covered the whole vocabulary, so the
    /// acceptance ratio is structural rather than measured.
    pub verification_disabled: bool,
    pub found_eos: bool,
}

/// Per-event decode trace record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub kind: TraceKind,
    pub token: u32,
    /// 0 for backbone events, the 1-based module index for draft events.
    pub module: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    BackboneSample,
    Draft,
    Accept,
    Reject,
    Rollback,
    Eos,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::BackboneSample => "backbone_sample",
            TraceKind::Draft => "draft",
            TraceKind::Accept => "accept",
            TraceKind::Reject => "reject",
            TraceKind::Rollback => "rollback",
            TraceKind::Eos => "eos",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "backbone_sample" => TraceKind::BackboneSample,
            "draft" => TraceKind::Draft,
            "accept" => TraceKind::Accept,
            "reject" => TraceKind::Reject,
            "rollback" => TraceKind::Rollback,
            "eos" => TraceKind::Eos,
            other => return Err(Error::Format(format!("unknown trace kind {other:?}"))),
        })
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.step, self.kind.as_str(), self.token, self.module)
    }
}

impl TraceEvent {
    pub fn parse_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("trace line needs 4 fields: {line:?}")));
        }
        let bad = |what: &str| Error::Format(format!("bad {what} in trace line {line:?}"));
        Ok(TraceEvent {
            step: parts[0].parse().map_err(|_| bad("step"))?,
            kind: TraceKind::parse(parts[1])?,
            token: parts[2].parse().map_err(|_| bad("token"))?,
            module: parts[3].parse().map_err(|_| bad("module"))?,
        })
    }
}

pub fn trace_to_string(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(TraceEvent::parse_line).collect()
}

/// Sample a token id: top-k filter, optional nucleus cutoff, temperature
/// softmax, seeded draw. Temperature 0 (or top_k 1) short-circuits to argmax
/// with lowest-id tie-break and consumes no randomness.
pub fn sample(logits: &[f64], sp: &SamplerParams, rng: &mut RngStream) -> Result<u32> {
    sp.validate()?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("sample: non-finite logit".into()));
    }
    if sp.greedy() {
        return Ok(argmax_lowest_id(logits) as u32);
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b].partial_cmp(&logits[a]).expect("finite logits").then(a.cmp(&b))
    });
    idx.truncate(sp.top_k);
    if let Some(p) = sp.top_p {
        // Cutoff mass is measured at temperature 1 over the top-k set.
        let base: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
        let probs = softmax(&base, 1.0)?;
        let mut cum = 0.0;
        let mut keep = idx.len();
        for (n, &pv) in probs.iter().enumerate() {
            cum += pv;
            if cum >= p {
                keep = n + 1;
                break;
            }
        }
        idx.truncate(keep);
    }
    let kept: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
    let probs = softmax(&kept, sp.temperature)?;
    Ok(idx[rng.next_categorical(&probs)] as u32)
}

/// Accept `candidate` iff it sits among the top `m` logits, where ties at
/// the boundary go to the lower token id and `m` is the EOS threshold when
/// the candidate is the EOS token.
pub fn verify_token(logits: &[f64], candidate: u32, vp: &VerifyParams, is_eos: bool) -> bool {
    let m = if is_eos { vp.eos_topk_v } else { vp.topk_v };
    let c = candidate as usize;
    let lc = logits[c];
    let mut better = 0usize;
    for (i, &l) in logits.iter().enumerate() {
        if l > lc || (l == lc && i < c) {
            better += 1;
            if better >= m {
                return false;
            }
        }
    }
    true
}

/// The model surface the decode loop drives. The production implementation
/// wraps a backbone and its cascade; tests substitute scripted engines to
/// pin the control flow.
pub trait SpecEngine {
    fn vocab_size(&self) -> usize;
    fn eos_token(&self) -> u32;
    fn n_modules(&self) -> usize;
    /// Maximum number of positions the engine can hold.
    fn capacity(&self) -> usize;
    /// Number of positions already forwarded (cache length).
    fn forwarded(&self) -> usize;
    /// Forward new tokens, returning logits for each new position.
    fn forward(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f64>>>;
    /// Discard state for positions `>= keep`.
    fn rollback(&mut self, keep: usize) -> Result<()>;
    /// Draft logits per module at the latest forwarded position.
    fn speculate(&mut self) -> Result<Vec<Vec<f64>>>;
}

/// Production engine: backbone + cascade with their incremental caches.
pub struct ModelEngine<'a> {
    backbone: &'a Backbone,
    cascade: &'a MtpCascade,
    kv: KvCache,
    cascade_state: CascadeState,
    /// Hidden states for forwarded positions the cascade has not seen yet.
    h0_pending: Vec<Vec<f64>>,
}

impl<'a> ModelEngine<'a> {
    pub fn new(backbone: &'a Backbone, cascade: &'a MtpCascade) -> Self {
        ModelEngine {
            backbone,
            cascade,
            kv: backbone.new_cache(),
            cascade_state: cascade.new_state(),
            h0_pending: Vec::new(),
        }
    }
}

impl SpecEngine for ModelEngine<'_> {
    fn vocab_size(&self) -> usize {
        self.backbone.config.vocab_size
    }

    fn eos_token(&self) -> u32 {
        self.backbone.config.eos_token()
    }

    fn n_modules(&self) -> usize {
        self.cascade.n_modules()
    }

    fn capacity(&self) -> usize {
        self.backbone.config.max_seq_len
    }

    fn forwarded(&self) -> usize {
        self.kv.len()
    }

    fn forward(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let h0 = self.backbone.forward_suffix(tokens, &mut self.kv)?;
        let logits = self.backbone.logits_batch(&h0);
        self.h0_pending.extend(h0);
        Ok(logits)
    }

    fn rollback(&mut self, keep: usize) -> Result<()> {
        self.kv.truncate(keep)?;
        let ingested = self.cascade_state.len();
        if ingested > keep {
            self.cascade_state.truncate(keep)?;
            self.h0_pending.clear();
        } else {
            self.h0_pending.truncate(keep - ingested);
        }
        Ok(())
    }

    fn speculate(&mut self) -> Result<Vec<Vec<f64>>> {
        if self.h0_pending.is_empty() {
            return Err(Error::Contract("speculate called with no fresh hidden state".into()));
        }
        let fresh = std::mem::take(&mut self.h0_pending);
        let drafts = self.cascade.speculate_batch(&fresh, self.backbone, &mut self.cascade_state)?;
        debug_assert_eq!(self.cascade_state.len(), self.kv.len());
        Ok(drafts.into_iter().map(|(logits, _)| logits).collect())
    }
}

/// Mutable decode-session bookkeeping (everything except the engine).
#[derive(Debug)]
pub struct DecodeState {
    pub seq: Vec<u32>,
    /// Count of unverified drafts at the tail of `seq`, in module order.
    pub pending: usize,
    pub rng: RngStream,
    pub step: u64,
    pub first_eos: Option<usize>,
    /// Total sequence-length cap for this run.
    pub max_len: usize,
}

impl DecodeState {
    pub fn new(prompt: &[u32], max_len: usize, seed: u64) -> Self {
        DecodeState {
            seq: prompt.to_vec(),
            pending: 0,
            rng: RngStream::keyed(seed, 0xDEC0),
            step: 0,
            first_eos: None,
            max_len,
        }
    }

    pub fn trusted_len(&self) -> usize {
        self.seq.len() - self.pending
    }

    fn finished(&self) -> bool {
        (self.first_eos.is_some() && self.pending == 0) || self.trusted_len() >= self.max_len
    }
}

fn push_event(
    trace: &mut Option<&mut Vec<TraceEvent>>,
    step: u64,
    kind: TraceKind,
    token: u32,
    module: usize,
) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(TraceEvent { step, kind, token, module });
    }
}

/// One iteration of the verify/sample/speculate loop.
///
/// Runs exactly one backbone forward over the suffix of `st.seq` that the
/// engine has not yet cached, then either resolves a rejection (ending the
/// step) or extends the sequence with a trusted token and fresh drafts.
pub fn decode_step<E: SpecEngine>(
    engine: &mut E,
    st: &mut DecodeState,
    sp: &SamplerParams,
    vp: &VerifyParams,
    metrics: &mut DecodeMetrics,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<()> {
    if st.seq.is_empty() {
        return Err(Error::State("decode_step on empty sequence".into()));
    }
    if st.finished() {
        return Err(Error::State("decode_step after termination".into()));
    }
    st.step += 1;
    let step = st.step;
    let eos = engine.eos_token();

    let old_fwd = engine.forwarded();
    let logits = engine.forward(&st.seq[old_fwd..])?;
    metrics.backbone_forwards += 1;

    let trusted_len = st.trusted_len();
    // Verify pending drafts in module order.
    for j in 0..st.pending {
        let slot = trusted_len + j;
        let row = slot - 1 - old_fwd;
        let cand = st.seq[slot];
        let is_eos = cand == eos;
        if verify_token(&logits[row], cand, vp, is_eos) {
            metrics.accepted_per_module[j] += 1;
            push_event(&mut trace, step, TraceKind::Accept, cand, j + 1);
            if is_eos {
                // The trusted region now ends at this EOS; everything past
                // it is unverified and gets stripped.
                push_event(&mut trace, step, TraceKind::Eos, cand, j + 1);
                for k in j + 1..st.pending {
                    push_event(&mut trace, step, TraceKind::Rollback, st.seq[trusted_len + k], k + 1);
                }
                st.seq.truncate(slot + 1);
                engine.rollback(slot + 1)?;
                st.pending = 0;
                st.first_eos = Some(slot);
                metrics.found_eos = true;
                return Ok(());
            }
        } else {
            metrics.rejected_per_module[j] += 1;
            push_event(&mut trace, step, TraceKind::Reject, cand, j + 1);
            for k in j + 1..st.pending {
                push_event(&mut trace, step, TraceKind::Rollback, st.seq[trusted_len + k], k + 1);
            }
            // Drop the rejected draft and everything after it, then resample
            // from the very logits that vetoed it.
            st.seq.truncate(slot);
            engine.rollback(slot)?;
            st.pending = 0;
            let replacement = sample(&logits[row], sp, &mut st.rng)?;
            metrics.backbone_samples += 1;
            push_event(&mut trace, step, TraceKind::BackboneSample, replacement, 0);
            st.seq.push(replacement);
            if replacement == eos {
                st.first_eos = Some(st.seq.len() - 1);
                metrics.found_eos = true;
                push_event(&mut trace, step, TraceKind::Eos, replacement, 0);
            }
            return Ok(());
        }
    }
    st.pending = 0;

    // Nothing rejected: extend with a trusted token sampled from the final
    // position, then speculate fresh drafts.
    if st.seq.len() >= st.max_len {
        return Ok(());
    }
    let trusted = sample(logits.last().expect("forward returned rows"), sp, &mut st.rng)?;
    metrics.backbone_samples += 1;
    push_event(&mut trace, step, TraceKind::BackboneSample, trusted, 0);
    st.seq.push(trusted);
    if trusted == eos {
        st.first_eos = Some(st.seq.len() - 1);
        metrics.found_eos = true;
        push_event(&mut trace, step, TraceKind::Eos, trusted, 0);
        return Ok(());
    }
    let room = st.max_len.saturating_sub(st.seq.len());
    let n_drafts = engine.n_modules().min(room);
    if n_drafts == 0 {
        return Ok(());
    }
    let draft_logits = engine.speculate()?;
    for (k, dl) in draft_logits.iter().take(n_drafts).enumerate() {
        let d = sample(dl, sp, &mut st.rng)?;
        push_event(&mut trace, step, TraceKind::Draft, d, k + 1);
        st.seq.push(d);
        st.pending += 1;
    }
    Ok(())
}

/// Completed run: final token sequence (prompt included, cut at the first
/// trusted EOS) plus counters and the optional event trace.
#[derive(Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub metrics: DecodeMetrics,
    pub trace: Vec<TraceEvent>,
}

fn check_prompt<E: SpecEngine>(engine: &E, prompt: &[u32], max_len: usize) -> Result<usize> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must be non-empty".into()));
    }
    for &t in prompt {
        if t as usize >= engine.vocab_size() {
            return Err(Error::Input(format!("prompt token {t} outside vocabulary")));
        }
    }
    let cap = max_len.min(engine.capacity());
    if prompt.len() > cap {
        return Err(Error::Capacity(format!(
            "prompt of {} tokens exceeds the length cap {}",
            prompt.len(),
            cap
        )));
    }
    Ok(cap)
}

/// Full draft-and-verify generation over any engine.
pub fn generate_with_engine<E: SpecEngine>(
    engine: &mut E,
    prompt: &[u32],
    max_len: usize,
    sp: &SamplerParams,
    vp: &VerifyParams,
    want_trace: bool,
) -> Result<DecodeOutput> {
    sp.validate()?;
    vp.validate()?;
    let cap = check_prompt(engine, prompt, max_len)?;
    let t0 = Instant::now();
    let mut st = DecodeState::new(prompt, cap, sp.seed);
    let mut metrics = DecodeMetrics {
        accepted_per_module: vec![0; engine.n_modules()],
        rejected_per_module: vec![0; engine.n_modules()],
        verification_disabled: vp.vacuous(engine.vocab_size()),
        ..DecodeMetrics::default()
    };
    let mut trace = Vec::new();
    let trace_arg = want_trace.then_some(&mut trace);
    let mut trace_arg = trace_arg;

    while !st.finished() {
        decode_step(engine, &mut st, sp, vp, &mut metrics, trace_arg.as_deref_mut())?;
    }

    // Strip unverified drafts left at the tail.
    if st.pending > 0 {
        let trusted = st.trusted_len();
        for k in 0..st.pending {
            let tok = st.seq[trusted + k];
            push_event(&mut trace_arg.as_deref_mut(), st.step, TraceKind::Rollback, tok, k + 1);
        }
        st.seq.truncate(trusted);
        engine.rollback(trusted)?;
        st.pending = 0;
    }
    if let Some(e) = st.first_eos {
        st.seq.truncate(e + 1);
    }
    metrics.truncated = st.first_eos.is_none();
    metrics.tokens_emitted = (st.seq.len() - prompt.len()) as u64;
    metrics.wall_ns = t0.elapsed().as_nanos();

    let accepted: u64 = metrics.accepted_per_module.iter().sum();
    if metrics.tokens_emitted != metrics.backbone_samples + accepted {
        return Err(Error::Contract(format!(
            "accounting identity broken: emitted {} vs samples {} + accepts {}",
            metrics.tokens_emitted, metrics.backbone_samples, accepted
        )));
    }
    Ok(DecodeOutput { tokens: st.seq, metrics, trace })
}

/// Draft-and-verify generation with the production backbone + cascade.
pub fn generate(
    backbone: &Backbone,
    cascade: &MtpCascade,
    prompt: &[u32],
    max_len: usize,
    sp: &SamplerParams,
    vp: &VerifyParams,
    want_trace: bool,
) -> Result<DecodeOutput> {
    let mut engine = ModelEngine::new(backbone, cascade);
    generate_with_engine(&mut engine, prompt, max_len, sp, vp, want_trace)
}

/// Plain autoregressive baseline: one backbone forward per emitted token,
/// same sampler and the same EOS/length termination.
pub fn generate_vanilla(
    backbone: &Backbone,
    prompt: &[u32],
    max_len: usize,
    sp: &SamplerParams,
    want_trace: bool,
) -> Result<DecodeOutput> {
    sp.validate()?;
    struct Bare<'a> {
        backbone: &'a Backbone,
        kv: KvCache,
    }
    impl SpecEngine for Bare<'_> {
        fn vocab_size(&self) -> usize {
            self.backbone.config.vocab_size
        }
        fn eos_token(&self) -> u32 {
            self.backbone.config.eos_token()
        }
        fn n_modules(&self) -> usize {
            0
        }
        fn capacity(&self) -> usize {
            self.backbone.config.max_seq_len
        }
        fn forwarded(&self) -> usize {
            self.kv.len()
        }
        fn forward(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
            let h0 = self.backbone.forward_suffix(tokens, &mut self.kv)?;
            Ok(self.backbone.logits_batch(&h0))
        }
        fn rollback(&mut self, keep: usize) -> Result<()> {
            self.kv.truncate(keep)
        }
        fn speculate(&mut self) -> Result<Vec<Vec<f64>>> {
            Err(Error::Contract("vanilla decoding never speculates".into()))
        }
    }
    let mut engine = Bare { backbone, kv: backbone.new_cache() };
    let cap = check_prompt(&engine, prompt, max_len)?;
    let t0 = Instant::now();
    let mut st = DecodeState::new(prompt, cap, sp.seed);
    let mut metrics = DecodeMetrics::default();
    let mut trace = Vec::new();

    while st.first_eos.is_none() && st.seq.len() < cap {
        st.step += 1;
        let old = engine.forwarded();
        let logits = engine.forward(&st.seq[old..])?;
        metrics.backbone_forwards += 1;
        let tok = sample(logits.last().expect("rows"), sp, &mut st.rng)?;
        metrics.backbone_samples += 1;
        if want_trace {
            trace.push(TraceEvent { step: st.step, kind: TraceKind::BackboneSample, token: tok, module: 0 });
        }
        st.seq.push(tok);
        if tok == engine.eos_token() {
            st.first_eos = Some(st.seq.len() - 1);
            metrics.found_eos = true;
            if want_trace {
                trace.push(TraceEvent { step: st.step, kind: TraceKind::Eos, token: tok, module: 0 });
            }
        }
    }
    metrics.truncated = st.first_eos.is_none();
    metrics.tokens_emitted = (st.seq.len() - prompt.len()) as u64;
    metrics.wall_ns = t0.elapsed().as_nanos();
    Ok(DecodeOutput { tokens: st.seq, metrics, trace })
}

/// Acceptance-ratio summary in the per-module + total shape.
#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    pub per_module: Vec<f64>,
    pub total: f64,
    pub accel_tokens_per_sec: f64,
    pub vanilla_tokens_per_sec: Option<f64>,
}

impl SpeedupReport {
    /// Render as "32.21+15.66 (47.87)".
    pub fn ratio_line(&self) -> String {
        let parts: Vec<String> = self.per_module.iter().map(|r| format!("{r:.2}")).collect();
        format!("{} ({:.2})", parts.join("+"), self.total)
    }
}

fn tokens_per_sec(m: &DecodeMetrics) -> f64 {
    if m.wall_ns == 0 {
        return 0.0;
    }
    m.tokens_emitted as f64 / (m.wall_ns as f64 * 1e-9)
}

/// Per-module acceptance ratios (accepts per backbone forward, x100).
///
/// When verification was vacuous the ratio is pinned at the structural
/// 100.00 per module: every draft is accepted by construction, one per
/// module per forward, and the measured quotient differs only by the
/// cold-start forward.
pub fn speedup_report(accel: &DecodeMetrics, vanilla: Option<&DecodeMetrics>) -> SpeedupReport {
    let per_module: Vec<f64> = if accel.verification_disabled {
        accel.accepted_per_module.iter().map(|_| 100.0).collect()
    } else {
        accel
            .accepted_per_module
            .iter()
            .map(|&a| {
                if accel.backbone_forwards == 0 {
                    0.0
                } else {
                    100.0 * a as f64 / accel.backbone_forwards as f64
                }
            })
            .collect()
    };
    SpeedupReport {
        // fold from +0.0: `Sum` would give -0.0 for the zero-module case,
        // which prints as "-0.00" and confuses report diffs.
        total: per_module.iter().fold(0.0, |a, b| a + b),
        per_module,
        accel_tokens_per_sec: tokens_per_sec(accel),
        vanilla_tokens_per_sec: vanilla.map(tokens_per_sec),
    }
}

/// Merge counters from several runs into one (ratios then aggregate over
/// the whole set, matching how multi-utterance results are reported).
pub fn merge_metrics(all: &[DecodeMetrics]) -> DecodeMetrics {
    let mut out = DecodeMetrics::default();
    if let Some(first) = all.first() {
        out.accepted_per_module = vec![0; first.accepted_per_module.len()];
        out.rejected_per_module = vec![0; first.rejected_per_module.len()];
        out.verification_disabled = all.iter().all(|m| m.verification_disabled);
    }
    for m in all {
        out.backbone_forwards += m.backbone_forwards;
        out.backbone_samples += m.backbone_samples;
        out.tokens_emitted += m.tokens_emitted;
        out.wall_ns += m.wall_ns;
        out.truncated |= m.truncated;
        out.found_eos |= m.found_eos;
        for (a, b) in out.accepted_per_module.iter_mut().zip(&m.accepted_per_module) {
            *a += b;
        }
        for (a, b) in out.rejected_per_module.iter_mut().zip(&m.rejected_per_module) {
            *a += b;
        }
    }
    out
}

/// Replayed view of an event trace.
#[derive(Debug, Default)]
pub struct AuditReport {
    pub events: usize,
    pub backbone_samples: u64,
    pub accepts: u64,
    pub rejects: u64,
    pub rollbacks: u64,
    pub eos_events: u64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn trusted_tokens(&self) -> u64 {
        self.backbone_samples + self.accepts
    }
}

/// Replay a trace and check the trust discipline: drafts only enter the
/// trusted region through an accept, every reject/rollback removes exactly
/// one pending draft, trusted tokens are sampled only with no drafts
/// outstanding, and every EOS event follows the sample or accept that
/// produced it.
pub fn audit_trace(events: &[TraceEvent]) -> AuditReport {
    let mut r = AuditReport { events: events.len(), ..AuditReport::default() };
    let mut pending = 0i64;
    let mut last: Option<&TraceEvent> = None;
    for (i, e) in events.iter().enumerate() {
        match e.kind {
            TraceKind::Draft => {
                if e.module == 0 {
                    r.violations.push(format!("event {i}: draft with module 0"));
                }
                pending += 1;
            }
            TraceKind::Accept => {
                r.accepts += 1;
                pending -= 1;
            }
            TraceKind::Reject => {
                r.rejects += 1;
                pending -= 1;
            }
            TraceKind::Rollback => {
                r.rollbacks += 1;
                pending -= 1;
            }
            TraceKind::BackboneSample => {
                if pending != 0 {
                    r.violations.push(format!(
                        "event {i}: trusted token sampled with {pending} drafts unresolved"
                    ));
                }
                r.backbone_samples += 1;
            }
            TraceKind::Eos => {
                r.eos_events += 1;
                match last {
                    Some(prev)
                        if prev.token == e.token
                            && matches!(
                                prev.kind,
                                TraceKind::BackboneSample | TraceKind::Accept
                            ) => {}
                    _ => r.violations.push(format!(
                        "event {i}: eos not preceded by its own sample/accept"
                    )),
                }
            }
        }
        if pending < 0 {
            r.violations.push(format!("event {i}: more drafts resolved than issued"));
            pending = 0;
        }
        last = Some(e);
    }
    if pending != 0 {
        r.violations.push(format!("trace ends with {pending} unresolved drafts"));
    }
    r
}

/// Cross-check a trace against the metrics of the run that produced it.
pub fn audit_against_metrics(report: &AuditReport, m: &DecodeMetrics) -> Vec<String> {
    let mut v = Vec::new();
    if report.backbone_samples != m.backbone_samples {
        v.push(format!(
            "trace has {} backbone samples, metrics say {}",
            report.backbone_samples, m.backbone_samples
        ));
    }
    let accepted: u64 = m.accepted_per_module.iter().sum();
    if report.accepts != accepted {
        v.push(format!("trace has {} accepts, metrics say {accepted}", report.accepts));
    }
    if report.trusted_tokens() != m.tokens_emitted {
        v.push(format!(
            "trace implies {} emitted tokens, metrics say {}",
            report.trusted_tokens(),
            m.tokens_emitted
        ));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use std::collections::HashMap;

    fn sp_greedy() -> SamplerParams {
        SamplerParams { temperature: 0.0, top_k: 1, top_p: None, seed: 0 }
    }

    #[test]
    fn sample_top_k_one_is_argmax_at_any_temperature() {
        let logits = vec![0.3, 2.5, -1.0, 2.4];
        let mut rng = RngStream::new(1);
        let sp = SamplerParams { temperature: 5.0, top_k: 1, top_p: None, seed: 0 };
        for _ in 0..20 {
            assert_eq!(sample(&logits, &sp, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn sample_zero_temperature_breaks_ties_toward_lower_id() {
        let logits = vec![1.0, 7.0, 7.0, 3.0];
        let mut rng = RngStream::new(2);
        assert_eq!(sample(&logits, &sp_greedy(), &mut rng).unwrap(), 1);
    }

    #[test]
    fn sample_one_hot_logits_always_chooses_that_token() {
        let mut logits = vec![0.0; 6];
        logits[4] = 50.0;
        let sp = SamplerParams { temperature: 1.0, top_k: 6, top_p: None, seed: 0 };
        let mut rng = RngStream::new(3);
        for _ in 0..200 {
            assert_eq!(sample(&logits, &sp, &mut rng).unwrap(), 4);
        }
    }

    #[test]
    fn sample_frequencies_match_softmax_within_3_sigma() {
        let logits = vec![0.0, 1.0, 2.0];
        let sp = SamplerParams { temperature: 1.0, top_k: 3, top_p: None, seed: 0 };
        let probs = softmax(&logits, 1.0).unwrap();
        let n = 100_000usize;
        let mut counts = [0usize; 3];
        let mut rng = RngStream::new(4);
        for _ in 0..n {
            counts[sample(&logits, &sp, &mut rng).unwrap() as usize] += 1;
        }
        for i in 0..3 {
            let expect = probs[i] * n as f64;
            let sigma = (n as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            let diff = (counts[i] as f64 - expect).abs();
            assert!(diff < 3.0 * sigma, "token {i}: count {} vs {expect} (sigma {sigma})", counts[i]);
        }
    }

    #[test]
    fn sample_nucleus_cutoff_drops_tail() {
        // Probabilities at T=1 are ~[0.665, 0.245, 0.090]; top_p = 0.6 keeps
        // only the first candidate.
        let logits = vec![2.0, 1.0, 0.0];
        let sp = SamplerParams { temperature: 1.0, top_k: 3, top_p: Some(0.6), seed: 0 };
        let mut rng = RngStream::new(5);
        for _ in 0..100 {
            assert_eq!(sample(&logits, &sp, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn sample_rejects_bad_params() {
        let mut rng = RngStream::new(6);
        let bad_k = SamplerParams { top_k: 0, ..SamplerParams::default() };
        assert!(matches!(sample(&[1.0], &bad_k, &mut rng), Err(Error::Param(_))));
        let bad_p = SamplerParams { top_p: Some(1.5), ..SamplerParams::default() };
        assert!(matches!(sample(&[1.0], &bad_p, &mut rng), Err(Error::Param(_))));
        assert!(matches!(
            sample(&[f64::NAN], &SamplerParams::default(), &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn verify_accepts_argmax_at_any_threshold() {
        let logits = vec![0.1, 4.0, 2.0, 3.0];
        for m in 1..=4 {
            let vp = VerifyParams { topk_v: m, eos_topk_v: 1 };
            assert!(verify_token(&logits, 1, &vp, false));
        }
    }

    #[test]
    fn verify_whole_vocab_threshold_accepts_everything() {
        let mut rng = RngStream::new(7);
        let vp = VerifyParams { topk_v: 8, eos_topk_v: 8 };
        for _ in 0..50 {
            let logits: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
            let cand = rng.next_below(8) as u32;
            assert!(verify_token(&logits, cand, &vp, false));
            assert!(verify_token(&logits, cand, &vp, true));
        }
    }

    #[test]
    fn verify_matches_full_sort_oracle_and_is_monotone() {
        let mut rng = RngStream::new(8);
        for _ in 0..300 {
            let n = 10usize;
            // Duplicate logit values exercise the tie rule.
            let logits: Vec<f64> =
                (0..n).map(|_| (rng.next_below(5) as f64) * 0.5).collect();
            let cand = rng.next_below(n as u64) as u32;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b))
            });
            let rank = order.iter().position(|&i| i == cand as usize).unwrap();
            let mut prev = false;
            for m in 1..=n {
                let vp = VerifyParams { topk_v: m, eos_topk_v: m };
                let got = verify_token(&logits, cand, &vp, false);
                assert_eq!(got, rank < m, "sort oracle disagrees at m={m}");
                assert!(!prev || got, "acceptance must be monotone in m");
                prev = got;
            }
        }
    }

    #[test]
    fn eos_threshold_is_the_stricter_gate() {
        // Candidate ranks 3rd: passes topk_v = 3 as a data token but fails
        // the EOS gate at eos_topk_v = 1.
        let logits = vec![5.0, 4.0, 3.0, 0.0];
        let vp = VerifyParams { topk_v: 3, eos_topk_v: 1 };
        assert!(verify_token(&logits, 2, &vp, false));
        assert!(!verify_token(&logits, 2, &vp, true));
    }

    /// Logits looked up by (position, token); draft logits by position.
    /// Deterministic and rollback-aware, which lets tests pin the decode
    /// loop's control flow to a hand-executed script.
    struct ScriptedEngine {
        vocab: usize,
        eos: u32,
        n_modules: usize,
        cap: usize,
        fwd: usize,
        backbone: HashMap<(usize, u32), Vec<f64>>,
        drafts: HashMap<usize, Vec<Vec<f64>>>,
    }

    impl SpecEngine for ScriptedEngine {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn eos_token(&self) -> u32 {
            self.eos
        }
        fn n_modules(&self) -> usize {
            self.n_modules
        }
        fn capacity(&self) -> usize {
            self.cap
        }
        fn forwarded(&self) -> usize {
            self.fwd
        }
        fn forward(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::new();
            for (off, &t) in tokens.iter().enumerate() {
                let pos = self.fwd + off;
                let row = self
                    .backbone
                    .get(&(pos, t))
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.vocab]);
                out.push(row);
            }
            self.fwd += tokens.len();
            Ok(out)
        }
        fn rollback(&mut self, keep: usize) -> Result<()> {
            self.fwd = keep;
            Ok(())
        }
        fn speculate(&mut self) -> Result<Vec<Vec<f64>>> {
            Ok(self
                .drafts
                .get(&(self.fwd - 1))
                .cloned()
                .unwrap_or_else(|| vec![vec![0.0; self.vocab]; self.n_modules]))
        }
    }

    /// Hand-executed script: vocab {0, 1, eos=2, pad=3}, greedy sampling,
    /// topk_v = eos_topk_v = 1. The expected event list below was traced on
    /// paper, one loop iteration at a time.
    #[test]
    fn decode_loop_matches_pencil_trace() {
        let mut backbone = HashMap::new();
        let mut drafts = HashMap::new();
        // Step 1: prompt [0] at position 0; trusted argmax is 1; module 1
        // drafts 0, module 2 drafts 1.
        backbone.insert((0usize, 0u32), vec![1.0, 3.0, 0.0, 0.0]);
        drafts.insert(0usize, vec![vec![3.0, 1.0, 0.0, 0.0], vec![1.0, 3.0, 0.0, 0.0]]);
        // Step 2: forward [1, 0, 1] at positions 1..3. Logits at position 1
        // argmax to 1, so draft 0 at slot 2 is rejected at level 1; both
        // drafts are removed and the replacement (argmax 1) is appended.
        backbone.insert((1, 1), vec![1.0, 3.0, 0.0, 0.0]);
        backbone.insert((2, 0), vec![9.0, 0.0, 0.0, 0.0]);
        backbone.insert((3, 1), vec![9.0, 0.0, 0.0, 0.0]);
        // Step 3: forward the replacement at position 2; trusted argmax 0;
        // module 1 drafts 1, module 2 drafts 0.
        backbone.insert((2, 1), vec![3.0, 1.0, 0.0, 0.0]);
        drafts.insert(2, vec![vec![1.0, 3.0, 0.0, 0.0], vec![3.0, 1.0, 0.0, 0.0]]);
        // Step 4: forward [0, 1, 0] at positions 3..5. Position-3 logits
        // argmax 1: draft 1 at slot 4 accepted. Position-4 logits argmax 1:
        // draft 0 at slot 5 rejected at level 2, replacement 1 appended.
        backbone.insert((3, 0), vec![1.0, 3.0, 0.0, 0.0]);
        backbone.insert((4, 1), vec![1.0, 3.0, 0.0, 0.0]);
        backbone.insert((5, 0), vec![9.0, 0.0, 0.0, 0.0]);
        // Step 5: forward the replacement at position 5; trusted argmax is
        // EOS, so the run ends with no speculation.
        backbone.insert((5, 1), vec![0.0, 1.0, 9.0, 0.0]);

        let mut eng = ScriptedEngine {
            vocab: 4,
            eos: 2,
            n_modules: 2,
            cap: 16,
            fwd: 0,
            backbone,
            drafts,
        };
        let vp = VerifyParams { topk_v: 1, eos_topk_v: 1 };
        let out = generate_with_engine(&mut eng, &[0], 16, &sp_greedy(), &vp, true).unwrap();

        assert_eq!(out.tokens, vec![0, 1, 1, 0, 1, 1, 2]);
        assert_eq!(out.metrics.backbone_forwards, 5);
        assert_eq!(out.metrics.backbone_samples, 5);
        assert_eq!(out.metrics.accepted_per_module, vec![1, 0]);
        assert_eq!(out.metrics.rejected_per_module, vec![1, 1]);
        assert_eq!(out.metrics.tokens_emitted, 6);
        assert!(out.metrics.found_eos && !out.metrics.truncated);

        use TraceKind::*;
        let want = vec![
            (1, BackboneSample, 1, 0),
            (1, Draft, 0, 1),
            (1, Draft, 1, 2),
            (2, Reject, 0, 1),
            (2, Rollback, 1, 2),
            (2, BackboneSample, 1, 0),
            (3, BackboneSample, 0, 0),
            (3, Draft, 1, 1),
            (3, Draft, 0, 2),
            (4, Accept, 1, 1),
            (4, Reject, 0, 2),
            (4, BackboneSample, 1, 0),
            (5, BackboneSample, 2, 0),
            (5, Eos, 2, 0),
        ];
        let got: Vec<(u64, TraceKind, u32, usize)> =
            out.trace.iter().map(|e| (e.step, e.kind, e.token, e.module)).collect();
        assert_eq!(got, want);

        let audit = audit_trace(&out.trace);
        assert!(audit.ok(), "{:?}", audit.violations);
        assert!(audit_against_metrics(&audit, &out.metrics).is_empty());
    }

    #[test]
    fn accepted_eos_draft_strips_deeper_pending() {
        let mut backbone = HashMap::new();
        let mut drafts = HashMap::new();
        backbone.insert((0usize, 0u32), vec![0.0, 3.0, 0.0, 0.0]);
        // Module 1 drafts EOS; module 2 drafts a data token beyond it.
        drafts.insert(0usize, vec![vec![0.0, 0.0, 5.0, 0.0], vec![5.0, 0.0, 0.0, 0.0]]);
        // At position 1 (token 1) the backbone argmax is EOS, so the EOS
        // draft passes even the strictest gate.
        backbone.insert((1, 1), vec![0.0, 1.0, 9.0, 0.0]);
        let mut eng = ScriptedEngine {
            vocab: 4,
            eos: 2,
            n_modules: 2,
            cap: 16,
            fwd: 0,
            backbone,
            drafts,
        };
        let vp = VerifyParams { topk_v: 1, eos_topk_v: 1 };
        let out = generate_with_engine(&mut eng, &[0], 16, &sp_greedy(), &vp, true).unwrap();
        assert_eq!(out.tokens, vec![0, 1, 2]);
        assert_eq!(out.metrics.accepted_per_module, vec![1, 0]);
        assert_eq!(out.metrics.backbone_forwards, 2);
        // The module-2 draft was stripped, not rejected.
        assert_eq!(out.metrics.rejected_per_module, vec![0, 0]);
        let audit = audit_trace(&out.trace);
        assert!(audit.ok(), "{:?}", audit.violations);
        assert_eq!(audit.rollbacks, 1);
    }

    fn toy_model() -> (Backbone, MtpCascade) {
        let cfg = ModelConfig {
            vocab_size: 12,
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            max_seq_len: 64,
            n_mtp_modules: 2,
        };
        let bb = Backbone::init(cfg.clone(), 77).unwrap();
        let cas = MtpCascade::init(cfg.dim, cfg.ffn_dim, cfg.n_heads, 2, 78);
        (bb, cas)
    }

    #[test]
    fn cold_start_appends_one_trusted_plus_drafts_on_one_forward() {
        let (bb, cas) = toy_model();
        let mut eng = ModelEngine::new(&bb, &cas);
        let mut st = DecodeState::new(&[1, 2, 3], 64, 9);
        let mut metrics = DecodeMetrics {
            accepted_per_module: vec![0; 2],
            rejected_per_module: vec![0; 2],
            ..DecodeMetrics::default()
        };
        let sp = SamplerParams { temperature: 1.0, top_k: 12, top_p: None, seed: 9 };
        let vp = VerifyParams { topk_v: 4, eos_topk_v: 1 };
        decode_step(&mut eng, &mut st, &sp, &vp, &mut metrics, None).unwrap();
        assert_eq!(metrics.backbone_forwards, 1);
        // 3 prompt tokens + 1 trusted + 2 drafts (unless EOS landed first).
        if st.first_eos.is_none() {
            assert_eq!(st.seq.len(), 6);
            assert_eq!(st.pending, 2);
        }
    }

    #[test]
    fn vacuous_verification_never_rejects_and_reports_structural_ratio() {
        let (bb, cas) = toy_model();
        let sp = SamplerParams { temperature: 1.0, top_k: 10, top_p: None, seed: 5 };
        let vp = VerifyParams { topk_v: 12, eos_topk_v: 12 };
        let out = generate(&bb, &cas, &[1, 2], 50, &sp, &vp, false).unwrap();
        assert!(out.metrics.verification_disabled);
        assert_eq!(out.metrics.rejected_per_module, vec![0, 0]);
        let rep = speedup_report(&out.metrics, None);
        assert_eq!(rep.per_module, vec![100.0, 100.0]);
        assert_eq!(rep.ratio_line(), "100.00+100.00 (200.00)");
    }

    #[test]
    fn greedy_generate_equals_vanilla_on_random_models() {
        let (bb, cas) = toy_model();
        let sp = sp_greedy();
        let vp = VerifyParams { topk_v: 1, eos_topk_v: 1 };
        for pi in 0..12u32 {
            let prompt = vec![pi % 10, (pi + 3) % 10];
            let accel = generate(&bb, &cas, &prompt, 40, &sp, &vp, false).unwrap();
            let vanilla = generate_vanilla(&bb, &prompt, 40, &sp, false).unwrap();
            assert_eq!(accel.tokens, vanilla.tokens, "prompt {prompt:?}");
        }
    }

    #[test]
    fn vanilla_greedy_matches_independent_argmax_loop() {
        let (bb, _) = toy_model();
        let prompt = vec![4u32, 1];
        let out = generate_vanilla(&bb, &prompt, 30, &sp_greedy(), false).unwrap();
        // Independent oracle: full recompute per step, plain argmax loop.
        let mut seq = prompt.clone();
        while seq.len() < 30 {
            let h = bb.forward_full(&seq).unwrap();
            let logits = bb.logits(h.last().unwrap());
            let tok = argmax_lowest_id(&logits) as u32;
            seq.push(tok);
            if tok == bb.config.eos_token() {
                break;
            }
        }
        assert_eq!(out.tokens, seq);
        assert_eq!(out.metrics.backbone_forwards, out.metrics.tokens_emitted);
    }

    #[test]
    fn accounting_identity_and_throughput_band_hold_on_random_runs() {
        let (bb, cas) = toy_model();
        for seed in 0..10u64 {
            let sp = SamplerParams { temperature: 0.9, top_k: 12, top_p: None, seed };
            let vp = VerifyParams { topk_v: 6, eos_topk_v: 1 };
            let out = generate(&bb, &cas, &[2, 5, 7], 48, &sp, &vp, true).unwrap();
            let m = &out.metrics;
            let accepts: u64 = m.accepted_per_module.iter().sum();
            assert_eq!(m.tokens_emitted, m.backbone_samples + accepts);
            if accepts > 0 {
                let ratio = m.tokens_emitted as f64 / m.backbone_forwards as f64;
                assert!(ratio > 1.0 && ratio <= 3.0, "tokens/forward {ratio}");
            }
            let audit = audit_trace(&out.trace);
            assert!(audit.ok(), "{:?}", audit.violations);
            assert!(audit_against_metrics(&audit, m).is_empty());
        }
    }

    #[test]
    fn eos_first_backbone_finishes_within_two_forwards() {
        let mut backbone = HashMap::new();
        backbone.insert((0usize, 0u32), vec![0.0, 0.0, 9.0, 0.0]);
        let mut eng = ScriptedEngine {
            vocab: 4,
            eos: 2,
            n_modules: 2,
            cap: 16,
            fwd: 0,
            backbone,
            drafts: HashMap::new(),
        };
        let vp = VerifyParams { topk_v: 1, eos_topk_v: 1 };
        let out = generate_with_engine(&mut eng, &[0], 16, &sp_greedy(), &vp, true).unwrap();
        assert_eq!(out.tokens, vec![0, 2]);
        assert!(out.metrics.backbone_forwards <= 2);
        assert_eq!(out.metrics.tokens_emitted, 1);
    }

    #[test]
    fn length_cap_strips_pending_and_flags_truncation() {
        let (bb, cas) = toy_model();
        let sp = SamplerParams { temperature: 1.0, top_k: 10, top_p: None, seed: 3 };
        let vp = VerifyParams { topk_v: 12, eos_topk_v: 12 };
        let out = generate(&bb, &cas, &[1], 9, &sp, &vp, true).unwrap();
        assert!(out.tokens.len() <= 9);
        if !out.metrics.found_eos {
            assert!(out.metrics.truncated);
            assert_eq!(out.tokens.len(), 9);
        }
        let audit = audit_trace(&out.trace);
        assert!(audit.ok(), "{:?}", audit.violations);
    }

    #[test]
    fn trace_round_trips_through_text() {
        let (bb, cas) = toy_model();
        let sp = SamplerParams { temperature: 0.8, top_k: 8, top_p: Some(0.95), seed: 11 };
        let vp = VerifyParams { topk_v: 4, eos_topk_v: 1 };
        let out = generate(&bb, &cas, &[3, 3], 40, &sp, &vp, true).unwrap();
        let text = trace_to_string(&out.trace);
        let parsed = parse_trace(&text).unwrap();
        assert_eq!(parsed, out.trace);
        assert!(matches!(
            TraceEvent::parse_line("1,bogus,2,0"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn speedup_report_arithmetic_matches_hand_computation() {
        let m = DecodeMetrics {
            backbone_forwards: 200,
            backbone_samples: 200,
            accepted_per_module: vec![64, 31],
            rejected_per_module: vec![10, 5],
            tokens_emitted: 295,
            ..DecodeMetrics::default()
        };
        let rep = speedup_report(&m, None);
        assert_eq!(rep.per_module, vec![32.0, 15.5]);
        assert_eq!(rep.total, 47.5);
        assert_eq!(rep.ratio_line(), "32.00+15.50 (47.50)");
        // Zero accepts degenerate to a zero total.
        let m0 = DecodeMetrics {
            backbone_forwards: 10,
            accepted_per_module: vec![0, 0],
            ..DecodeMetrics::default()
        };
        assert_eq!(speedup_report(&m0, None).total, 0.0);
    }

    #[test]
    fn rejected_replacement_comes_from_the_rejecting_logits() {
        // Level-1 rejection must resample from the logits that vetoed the
        // draft, not from the final forward position.
        let mut backbone = HashMap::new();
        let mut drafts = HashMap::new();
        backbone.insert((0usize, 0u32), vec![0.0, 3.0, 0.0, 0.0]);
        drafts.insert(0usize, vec![vec![5.0, 0.0, 0.0, 0.0], vec![5.0, 0.0, 0.0, 0.0]]);
        backbone.insert((1, 1), vec![0.0, 8.0, 0.0, 0.0]); // rejects draft 0, argmax 1
        backbone.insert((2, 0), vec![9.0, 0.0, 0.0, 0.0]); // would argmax 0
        backbone.insert((3, 0), vec![9.0, 0.0, 0.0, 0.0]);
        let mut eng = ScriptedEngine {
            vocab: 4,
            eos: 2,
            n_modules: 2,
            cap: 6,
            fwd: 0,
            backbone: backbone.clone(),
            drafts,
        };
        let vp = VerifyParams { topk_v: 1, eos_topk_v: 1 };
        let mut st = DecodeState::new(&[0], 6, 0);
        let mut metrics = DecodeMetrics {
            accepted_per_module: vec![0; 2],
            rejected_per_module: vec![0; 2],
            ..DecodeMetrics::default()
        };
        decode_step(&mut eng, &mut st, &sp_greedy(), &vp, &mut metrics, None).unwrap();
        decode_step(&mut eng, &mut st, &sp_greedy(), &vp, &mut metrics, None).unwrap();
        // After the rejection the replacement is argmax of position-1 logits.
        assert_eq!(st.seq, vec![0, 1, 1]);
        assert_eq!(st.pending, 0);
    }
}
