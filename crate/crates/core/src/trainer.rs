//! Training for the draft-head cascade against a frozen backbone, plus the
//! next-token pretraining loop that produces that backbone in the first
//! place.
//!
//! The cascade objective offsets each module's targets: module k's
//! prediction at position t is scored against the ground-truth token at
//! t + k + 1 (the backbone itself covers t + 1). Losses are mean CE per
//! module over scored positions, summed across modules.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::mtp::{MtpCascade, MtpTape};
use crate::nn::{self, softmax, RngStream};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-4,
            warmup_steps: 200,
            total_steps: 5000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta1 < beta2 < 1, got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.max_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("max_lr must be > 0 and weight_decay >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be > 0 when set".into()));
            }
        }
        Ok(())
    }
}

/// Ground-truth tokens aligned with input positions, with a pad mask.
#[derive(Debug, Clone)]
pub struct TargetSequence {
    pub tokens: Vec<u32>,
    pub pad: Vec<bool>,
}

impl TargetSequence {
    pub fn from_tokens(tokens: &[u32]) -> Self {
        TargetSequence { tokens: tokens.to_vec(), pad: vec![false; tokens.len()] }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub per_module: Vec<f64>,
    pub wall_ms: f64,
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainSummary {
    pub rows: Vec<TrainLogRow>,
    /// Samples dropped because they were too short to score every module.
    pub skipped_samples: usize,
}

/// Warmup-cosine schedule: linear 0 -> max_lr over `warmup_steps`, cosine
/// decay to 0 at `total_steps`, clamped at 0 beyond.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Target index shift for each module: module k (1-based) predicts t + k + 1.
pub fn default_offsets(n_modules: usize) -> Vec<usize> {
    (1..=n_modules).map(|k| k + 1).collect()
}

/// Number of scored positions for each module on a length-`len` sequence.
pub fn scored_counts(len: usize, offsets: &[usize]) -> Vec<usize> {
    offsets.iter().map(|&off| len.saturating_sub(off)).collect()
}

/// True when every module has at least one scored position.
pub fn sample_usable(len: usize, offsets: &[usize]) -> bool {
    scored_counts(len, offsets).iter().all(|&c| c > 0)
}

fn ce_terms(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let p = softmax(logits, 1.0)?;
    let nll = -p[target].ln();
    let mut d = p;
    d[target] -= 1.0;
    Ok((nll, d))
}

/// Cascade losses for one sequence, optionally accumulating gradients.
///
/// Offsets are per module; pass [`default_offsets`] for the standard
/// objective or a deliberately wrong shift for regression tests. Returns
/// `(total, per_module)`, where each module's loss is the mean CE over its
/// scored positions and the total is their sum.
pub fn mtp_loss_with_offsets(
    backbone: &Backbone,
    cascade: &MtpCascade,
    h0: &[Vec<f64>],
    targets: &TargetSequence,
    offsets: &[usize],
    mut grads: Option<(&mut MtpCascade, f64)>,
) -> Result<(f64, Vec<f64>)> {
    let t_len = h0.len();
    if targets.tokens.len() != t_len || targets.pad.len() != t_len {
        return Err(Error::Shape(format!(
            "targets length {} vs hidden length {}",
            targets.tokens.len(),
            t_len
        )));
    }
    if offsets.len() != cascade.n_modules() {
        return Err(Error::Param(format!(
            "{} offsets for {} modules",
            offsets.len(),
            cascade.n_modules()
        )));
    }
    if !sample_usable(t_len, offsets) {
        return Err(Error::Input(format!(
            "sequence of {} positions leaves some module with no scored positions",
            t_len
        )));
    }

    // Forward every module, keeping tapes only when gradients are wanted.
    let want_grads = grads.is_some();
    let mut hidden_per_module: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cascade.n_modules());
    let mut tapes: Vec<Option<MtpTape>> = Vec::with_capacity(cascade.n_modules());
    let mut prev: &[Vec<f64>] = h0;
    for m in &cascade.modules {
        if want_grads {
            let (out, tape) = m.forward_train(prev, cascade.n_heads)?;
            hidden_per_module.push(out);
            tapes.push(Some(tape));
        } else {
            let (out, tape) = m.forward_train(prev, cascade.n_heads)?;
            drop(tape);
            hidden_per_module.push(out);
            tapes.push(None);
        }
        prev = hidden_per_module.last().unwrap();
    }

    let mut per_module = Vec::with_capacity(cascade.n_modules());
    // d_hidden[j][t]: gradient of the batch-scaled loss on module j's output.
    let mut d_hidden: Vec<Vec<Vec<f64>>> = hidden_per_module
        .iter()
        .map(|hs| vec![vec![0.0; hs[0].len()]; hs.len()])
        .collect();
    let scale_outer = grads.as_ref().map(|(_, s)| *s).unwrap_or(0.0);

    for (j, hs) in hidden_per_module.iter().enumerate() {
        let off = offsets[j];
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut scored: Vec<(usize, usize)> = Vec::new();
        for t in 0..t_len {
            let ti = t + off;
            if ti >= t_len || targets.pad[ti] || targets.pad[t] {
                continue;
            }
            scored.push((t, targets.tokens[ti] as usize));
            n += 1;
        }
        debug_assert!(n > 0);
        let inv_n = 1.0 / n as f64;
        for (t, target) in scored {
            let logits = backbone.logits(&hs[t]);
            let (nll, dlogits) = ce_terms(&logits, target)?;
            sum += nll;
            if want_grads {
                // dL/dh = lm_head^T dlogits, scaled by the mean and batch factors.
                let s = inv_n * scale_outer;
                let dl: Vec<f64> = dlogits.iter().map(|v| v * s).collect();
                let dh = nn::matvec_transposed(&backbone.lm_head, &dl);
                for (acc, v) in d_hidden[j][t].iter_mut().zip(dh) {
                    *acc += v;
                }
            }
        }
        per_module.push(sum * inv_n);
    }

    if let Some((gc, _)) = grads.as_mut() {
        // Walk modules deepest-first so each module's input gradient flows
        // into the next-shallower module on top of that module's own CE term.
        let mut carried: Option<Vec<Vec<f64>>> = None;
        for j in (0..cascade.n_modules()).rev() {
            let mut d_out = d_hidden[j].clone();
            if let Some(c) = carried.take() {
                for (row, crow) in d_out.iter_mut().zip(c) {
                    for (a, v) in row.iter_mut().zip(crow) {
                        *a += v;
                    }
                }
            }
            let tape = tapes[j].as_ref().expect("tape kept in grad mode");
            let d_in =
                cascade.modules[j].backward(tape, &d_out, cascade.n_heads, &mut gc.modules[j]);
            carried = Some(d_in);
        }
        // The remaining gradient targets h0; the backbone is frozen, so it
        // is dropped here by design.
    }

    let total = per_module.iter().sum();
    Ok((total, per_module))
}

/// Cascade loss for one sequence with the standard offsets.
pub fn mtp_loss(
    backbone: &Backbone,
    cascade: &MtpCascade,
    h0: &[Vec<f64>],
    targets: &TargetSequence,
) -> Result<(f64, Vec<f64>)> {
    mtp_loss_with_offsets(backbone, cascade, h0, targets, &default_offsets(cascade.n_modules()), None)
}

/// Adaptive-moment state, one (m, v) pair per tensor.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay adaptive-moment update.
///
/// `params` and `grads` must align index-for-index. Decay multiplies only
/// tensors whose decay flag is set, and is decoupled: it scales the weight
/// directly rather than entering the moment estimates.
fn adamw_update(
    params: &mut [(String, &mut Vec<f64>, bool)],
    grads: &[&Vec<f64>],
    st: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    st.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);

    let clip_scale = match cfg.grad_clip {
        Some(c) => {
            let norm2: f64 =
                grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
            let norm = norm2.sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    for (i, (_, w, decay)) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = &mut st.m[i];
        let v = &mut st.v[i];
        for j in 0..w.len() {
            let gj = g[j] * clip_scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let mut wj = w[j];
            if *decay {
                wj -= lr * cfg.weight_decay * wj;
            }
            wj -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            w[j] = wj;
        }
    }
}

fn shuffled_indices(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below((i + 1) as u64) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Deterministic batch sampler: shuffled epochs over the usable indices.
struct BatchCycler {
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl BatchCycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, 0xBA7C);
        let order = shuffled_indices(n, &mut rng);
        BatchCycler { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor >= self.order.len() {
                self.order = shuffled_indices(self.order.len(), &mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Train the cascade on `sequences` with the backbone frozen.
///
/// The hook runs after every optimizer step (checkpoint cadence, progress
/// printing); returning an error aborts the run. `offsets` selects each
/// module's target shift; anything but [`default_offsets`] exists for
/// regression tests that deliberately train against the wrong position.
pub fn train_mtp_with_offsets(
    backbone: &Backbone,
    cascade: &mut MtpCascade,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
    offsets: &[usize],
    mut hook: impl FnMut(u64, &MtpCascade, &TrainLogRow) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if offsets.len() != cascade.n_modules() {
        return Err(Error::Param(format!(
            "{} offsets for {} modules",
            offsets.len(),
            cascade.n_modules()
        )));
    }
    let usable: Vec<usize> =
        (0..sequences.len()).filter(|&i| sample_usable(sequences[i].len(), offsets)).collect();
    let skipped_samples = sequences.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Input(format!(
            "no sequence is long enough to score {} modules",
            cascade.n_modules()
        )));
    }

    let hash_before = backbone.content_hash();
    let mut h0_cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; usable.len()];
    let mut cycler = BatchCycler::new(usable.len(), cfg.seed);
    let shapes: Vec<usize> = cascade.params().iter().map(|(_, d)| d.len()).collect();
    let mut opt = AdamState::new(&shapes);
    let mut rows = Vec::with_capacity(cfg.total_steps as usize);

    for step in 0..cfg.total_steps {
        let t0 = Instant::now();
        let batch = cycler.next_batch(cfg.batch_size);
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads = cascade.zeros_like();
        let mut loss_total = 0.0;
        let mut per_module = vec![0.0; cascade.n_modules()];
        for bi in batch {
            if h0_cache[bi].is_none() {
                h0_cache[bi] = Some(backbone.forward_full(&sequences[usable[bi]])?);
            }
            let h0 = h0_cache[bi].as_ref().unwrap();
            let targets = TargetSequence::from_tokens(&sequences[usable[bi]]);
            let (total, per) = mtp_loss_with_offsets(
                backbone,
                cascade,
                h0,
                &targets,
                offsets,
                Some((&mut grads, inv_b)),
            )?;
            loss_total += total * inv_b;
            for (acc, v) in per_module.iter_mut().zip(per) {
                *acc += v * inv_b;
            }
        }
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_id: step });
        }
        let lr = lr_schedule(step, cfg);
        let grad_refs: Vec<Vec<f64>> = grads.params().into_iter().map(|(_, d)| d.to_vec()).collect();
        let grad_borrow: Vec<&Vec<f64>> = grad_refs.iter().collect();
        let mut params = cascade.params_mut();
        adamw_update(&mut params, &grad_borrow, &mut opt, lr, cfg);
        drop(params);

        let row = TrainLogRow {
            step,
            lr,
            loss_total,
            per_module,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        hook(step, cascade, &row)?;
        rows.push(row);
    }

    if backbone.content_hash() != hash_before {
        return Err(Error::Contract("backbone weights changed during cascade training".into()));
    }
    Ok(TrainSummary { rows, skipped_samples })
}

/// Train the cascade at the standard offsets, with a step hook.
pub fn train_mtp_with_hook(
    backbone: &Backbone,
    cascade: &mut MtpCascade,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
    hook: impl FnMut(u64, &MtpCascade, &TrainLogRow) -> Result<()>,
) -> Result<TrainSummary> {
    let offsets = default_offsets(cascade.n_modules());
    train_mtp_with_offsets(backbone, cascade, sequences, cfg, &offsets, hook)
}

/// Train the cascade with no step hook.
pub fn train_mtp(
    backbone: &Backbone,
    cascade: &mut MtpCascade,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    train_mtp_with_hook(backbone, cascade, sequences, cfg, |_, _, _| Ok(()))
}

/// Next-token CE pretraining for the backbone itself (the decode-time
/// backbone is frozen; this is how it gets its weights beforehand).
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..sequences.len()).filter(|&i| sequences[i].len() >= 2).collect();
    let skipped_samples = sequences.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Input("no sequence of length >= 2 to pretrain on".into()));
    }
    let mut cycler = BatchCycler::new(usable.len(), cfg.seed.wrapping_add(1));
    let shapes: Vec<usize> = backbone.params().iter().map(|(_, d)| d.len()).collect();
    let mut opt = AdamState::new(&shapes);
    let mut rows = Vec::with_capacity(cfg.total_steps as usize);

    for step in 0..cfg.total_steps {
        let t0 = Instant::now();
        let batch = cycler.next_batch(cfg.batch_size);
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads = Backbone::zeros_like(&backbone.config);
        let mut loss_total = 0.0;
        for bi in batch {
            let seq = &sequences[usable[bi]];
            let inputs = &seq[..seq.len() - 1];
            let (h0, tape) = backbone.forward_train(inputs)?;
            let n = inputs.len();
            let inv_n = 1.0 / n as f64;
            let mut d_h = vec![vec![0.0; backbone.config.dim]; n];
            let mut sum = 0.0;
            for t in 0..n {
                let logits = backbone.logits(&h0[t]);
                let (nll, dlogits) = ce_terms(&logits, seq[t + 1] as usize)?;
                sum += nll;
                let s = inv_n * inv_b;
                let dl: Vec<f64> = dlogits.iter().map(|v| v * s).collect();
                // LM head gradient and the hidden-state gradient feeding the stack.
                crate::block::accum_outer(&mut grads.lm_head, &dl, &h0[t]);
                d_h[t] = nn::matvec_transposed(&backbone.lm_head, &dl);
            }
            loss_total += sum * inv_n * inv_b;
            backbone.backward(&tape, &d_h, &mut grads);
        }
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_id: step });
        }
        let lr = lr_schedule(step, cfg);
        let grad_copy: Vec<Vec<f64>> = grads.params().into_iter().map(|(_, d)| d.to_vec()).collect();
        let grad_borrow: Vec<&Vec<f64>> = grad_copy.iter().collect();
        let mut params = backbone.params_mut();
        adamw_update(&mut params, &grad_borrow, &mut opt, lr, cfg);
        drop(params);
        rows.push(TrainLogRow {
            step,
            lr,
            loss_total,
            per_module: Vec::new(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainSummary { rows, skipped_samples })
}

/// Mean next-token CE of the backbone on held-out sequences.
pub fn backbone_eval_loss(backbone: &Backbone, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        let h0 = backbone.forward_full(&seq[..seq.len() - 1])?;
        for (t, h) in h0.iter().enumerate() {
            let logits = backbone.logits(h);
            let (nll, _) = ce_terms(&logits, seq[t + 1] as usize)?;
            sum += nll;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    Ok(sum / n as f64)
}

/// Per-module top-1 accuracy of the cascade at the given target offsets.
pub fn mtp_top1_accuracy(
    backbone: &Backbone,
    cascade: &MtpCascade,
    sequences: &[Vec<u32>],
    offsets: &[usize],
) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; cascade.n_modules()];
    let mut totals = vec![0usize; cascade.n_modules()];
    for seq in sequences {
        if !sample_usable(seq.len(), offsets) {
            continue;
        }
        let h0 = backbone.forward_full(seq)?;
        let mut prev = h0;
        for (j, m) in cascade.modules.iter().enumerate() {
            let mut kv = crate::block::BlockKv::default();
            let hs = m.forward_suffix(&prev, 0, cascade.n_heads, &mut kv)?;
            let off = offsets[j];
            for t in 0..seq.len() {
                let ti = t + off;
                if ti >= seq.len() {
                    continue;
                }
                let logits = backbone.logits(&hs[t]);
                let arg = argmax_lowest_id(&logits);
                if arg == seq[ti] as usize {
                    hits[j] += 1;
                }
                totals[j] += 1;
            }
            prev = hs;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

pub(crate) fn argmax_lowest_id(v: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference check of analytic cascade gradients.
///
/// Probes `n_probes` randomly chosen parameters (cycling through tensors so
/// every tensor gets coverage) and returns the worst relative error.
pub fn gradient_check(
    f: &mut dyn FnMut(&MtpCascade) -> f64,
    analytic: &MtpCascade,
    cascade: &mut MtpCascade,
    epsilon: f64,
    n_probes: usize,
    seed: u64,
) -> f64 {
    let mut rng = RngStream::keyed(seed, 0x6C4D);
    let n_tensors = analytic.params().len();
    let mut worst: f64 = 0.0;
    for probe in 0..n_probes {
        let ti = probe % n_tensors;
        let len = analytic.params()[ti].1.len();
        let idx = rng.next_below(len as u64) as usize;
        let a = analytic.params()[ti].1[idx];
        let shift = |cascade: &mut MtpCascade, delta: f64| {
            let mut ps = cascade.params_mut();
            ps[ti].1[idx] += delta;
        };
        let mut central = |cascade: &mut MtpCascade, h: f64| -> f64 {
            shift(cascade, h);
            let fp = f(cascade);
            shift(cascade, -2.0 * h);
            let fm = f(cascade);
            shift(cascade, h);
            (fp - fm) / (2.0 * h)
        };
        // Richardson-extrapolated central difference: the wide step keeps
        // float cancellation small and the combination cancels the O(h^2)
        // truncation term.
        let d1 = central(cascade, epsilon);
        let d2 = central(cascade, epsilon / 2.0);
        let numeric = (4.0 * d2 - d1) / 3.0;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Render training rows as CSV: step, lr, loss_total, one loss column per
/// module, wall_ms.
pub fn train_log_csv(rows: &[TrainLogRow], n_modules: usize) -> String {
    let mut out = String::from("step,lr,loss_total");
    for k in 1..=n_modules {
        let _ = write!(out, ",loss_mtp{k}");
    }
    out.push_str(",wall_ms\n");
    for r in rows {
        let _ = write!(out, "{},{},{}", r.step, r.lr, r.loss_total);
        for k in 0..n_modules {
            let v = r.per_module.get(k).copied().unwrap_or(0.0);
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{:.3}", r.wall_ms);
    }
    out
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow], n_modules: usize) -> Result<()> {
    Ok(std::fs::write(path, train_log_csv(rows, n_modules))?)
}
