//! The eight subcommands. Each one reads artifacts, calls into the library,
//! writes artifacts, and prints a short human summary; nothing here does any
//! math of its own.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};

use mtpv_core::backbone::Backbone;
use mtpv_core::checkpoint::{load_checkpoint, save_model, unpack};
use mtpv_core::corpus::{gen_corpus, quality_proxy, read_corpus, write_corpus, Corpus, CorpusSpec};
use mtpv_core::decode::{
    audit_against_metrics, audit_trace, generate, generate_vanilla, parse_trace, speedup_report,
    trace_to_string, DecodeMetrics, DecodeOutput,
};
use mtpv_core::harness::{ablation_csv, run_ablation, run_sweep, sweep_csv};
use mtpv_core::mtp::MtpCascade;
use mtpv_core::nn::RngStream;
use mtpv_core::trainer::{
    backbone_eval_loss, default_offsets, mtp_top1_accuracy, pretrain_backbone as pretrain,
    train_mtp as train_cascade, write_train_log,
};
use mtpv_core::vocoder::{spectral_csv, write_wav, Vocoder};

use crate::config::AppConfig;
use crate::{
    AblateArgs, DecodeArgs, Fail, GenDataArgs, PretrainArgs, SweepArgs, TraceAuditArgs,
    TrainMtpArgs, VocoderArgs,
};

fn read_data(dir: &Path) -> Result<(Corpus, CorpusSpec)> {
    read_corpus(dir)
        .with_context(|| format!("no corpus at {} (generate one with gen-data)", dir.display()))
}

fn read_model(path: &Path) -> Result<(Backbone, Option<MtpCascade>)> {
    let cp = load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(unpack(&cp)?)
}

/// Write an output artifact, creating parent directories so a fresh output
/// tree never masquerades as a missing-input failure.
fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn parse_ids(text: &str, what: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| anyhow!(Fail::Config(format!("bad {what} token id {t:?}"))))
        })
        .collect()
}

pub fn gen_data(cfg: &AppConfig, args: &GenDataArgs) -> Result<()> {
    let mut spec = cfg.corpus.clone();
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.n_sequences {
        spec.n_sequences = v;
    }
    if let Some(v) = args.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = args.order {
        spec.order = v;
    }
    if let Some(v) = args.min_len {
        spec.min_len = v;
    }
    if let Some(v) = args.max_len {
        spec.max_len = v;
    }
    let corpus = gen_corpus(&spec)?;
    write_corpus(&corpus, &spec, &args.out)?;
    let q = quality_proxy(&corpus.train, &spec)?;
    let tokens: usize = corpus.train.iter().chain(&corpus.held_out).map(Vec::len).sum();
    println!(
        "wrote {} train + {} held-out sequences ({} tokens) to {}",
        corpus.train.len(),
        corpus.held_out.len(),
        tokens,
        args.out.display()
    );
    println!("generator NLL on train: {:.4} nats/token over {} tokens", q.mean_nll, q.tokens);
    Ok(())
}

pub fn pretrain_backbone(cfg: &AppConfig, args: &PretrainArgs) -> Result<()> {
    let (corpus, spec) = read_data(&args.data)?;
    let mut tc = cfg.train.clone();
    if let Some(v) = args.steps {
        tc.total_steps = v;
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if let Some(v) = args.max_lr {
        tc.max_lr = v;
    }
    let mut mc = cfg.model.clone();
    if mc.vocab_size != spec.vocab_size {
        // The data defines the token space; a stale model section would
        // otherwise fail deep inside training with an opaque id error.
        eprintln!(
            "note: model.vocab_size {} adjusted to corpus vocab {}",
            mc.vocab_size, spec.vocab_size
        );
        mc.vocab_size = spec.vocab_size;
    }
    let mut backbone = Backbone::init(mc, tc.seed)?;
    let summary = pretrain(&mut backbone, &corpus.train, &tc)?;
    if let Some(log) = &args.log {
        write_train_log(log, &summary.rows, 0)?;
    }
    let last = summary.rows.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
    print!("pretrained {} steps, final loss {last:.4}", tc.total_steps);
    if corpus.held_out.is_empty() {
        println!();
    } else {
        println!(", held-out loss {:.4}", backbone_eval_loss(&backbone, &corpus.held_out)?);
    }
    save_model(&args.out, &mut backbone, None)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

pub fn train_mtp(cfg: &AppConfig, args: &TrainMtpArgs) -> Result<()> {
    let (corpus, _) = read_data(&args.data)?;
    let (mut backbone, existing) = read_model(&args.model)?;
    let mut tc = cfg.train.clone();
    if let Some(v) = args.steps {
        tc.total_steps = v;
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if let Some(v) = args.max_lr {
        tc.max_lr = v;
    }
    let existing_depth = existing.as_ref().map(MtpCascade::n_modules);
    let n_modules = args
        .modules
        .or(existing_depth)
        .unwrap_or(backbone.config.n_mtp_modules);
    if n_modules == 0 {
        return Err(Fail::Config("cascade needs at least one module (--modules)".into()).into());
    }
    let mut cascade = match existing {
        Some(c) if c.n_modules() == n_modules => c,
        _ => {
            let mc = &backbone.config;
            MtpCascade::init(mc.dim, mc.ffn_dim, mc.n_heads, n_modules, tc.seed)
        }
    };
    let summary = train_cascade(&backbone, &mut cascade, &corpus.train, &tc)?;
    if let Some(log) = &args.log {
        write_train_log(log, &summary.rows, n_modules)?;
    }
    let last = summary.rows.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
    println!(
        "trained {} modules for {} steps, final loss {last:.4} ({} short samples skipped)",
        n_modules, tc.total_steps, summary.skipped_samples
    );
    if !corpus.held_out.is_empty() {
        let eval = &corpus.held_out[..corpus.held_out.len().min(32)];
        let acc = mtp_top1_accuracy(&backbone, &cascade, eval, &default_offsets(n_modules))?;
        let cols: Vec<String> = acc.iter().map(|a| format!("{a:.3}")).collect();
        println!("held-out top-1 accuracy per module: {}", cols.join(" "));
    }
    backbone.config.n_mtp_modules = n_modules;
    save_model(&args.out, &mut backbone, Some(&mut cascade))?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn decode_prompt(args: &DecodeArgs) -> Result<Vec<u32>> {
    if let Some(text) = &args.prompt {
        return parse_ids(text, "prompt");
    }
    let Some(dir) = &args.data else {
        return Err(Fail::Config("decode needs --prompt or --data to build one".into()).into());
    };
    let (corpus, _) = read_data(dir)?;
    let seq = corpus.held_out.get(args.prompt_index).ok_or_else(|| {
        Fail::Config(format!(
            "--prompt-index {} out of range ({} held-out sequences)",
            args.prompt_index,
            corpus.held_out.len()
        ))
    })?;
    // Stay inside the data region so the prompt never contains EOS.
    let data_len = seq.len().saturating_sub(1).max(1);
    Ok(seq[..args.prompt_len.min(data_len)].to_vec())
}

pub fn decode(cfg: &AppConfig, args: &DecodeArgs) -> Result<()> {
    let prompt = decode_prompt(args)?;
    let (backbone, cascade) = read_model(&args.model)?;
    let mut sp = cfg.sampler.clone();
    if let Some(v) = args.temperature {
        sp.temperature = v;
    }
    if let Some(v) = args.top_k {
        sp.top_k = v;
    }
    if let Some(v) = args.seed {
        sp.seed = v;
    }
    let mut vp = cfg.verify.clone();
    if let Some(v) = args.topk_v {
        vp.topk_v = v;
    }
    if let Some(v) = args.eos_topk_v {
        vp.eos_topk_v = v;
    }
    let want_trace = args.trace.is_some();
    let out: DecodeOutput = if args.vanilla {
        generate_vanilla(&backbone, &prompt, args.max_len, &sp, want_trace)?
    } else {
        let cascade = cascade.ok_or_else(|| {
            Fail::Config(format!(
                "checkpoint {} has no draft cascade; run train-mtp or pass --vanilla",
                args.model.display()
            ))
        })?;
        generate(&backbone, &cascade, &prompt, args.max_len, &sp, &vp, want_trace)?
    };

    let ids: Vec<String> = out.tokens.iter().map(u32::to_string).collect();
    println!("{}", ids.join(" "));
    let m = &out.metrics;
    let secs = m.wall_ns as f64 / 1e9;
    eprintln!(
        "emitted {} tokens in {} forwards ({:.1} tok/s){}{}",
        m.tokens_emitted,
        m.backbone_forwards,
        m.tokens_emitted as f64 / secs.max(1e-9),
        if m.found_eos { ", hit EOS" } else { "" },
        if m.truncated { ", truncated at the cap" } else { "" },
    );
    if !args.vanilla {
        let rep = speedup_report(m, None);
        eprintln!("acceptance per module: {}", rep.ratio_line());
    }
    if let Some(path) = &args.trace {
        write_out(path, trace_to_string(&out.trace).as_bytes())?;
        eprintln!("trace written to {}", path.display());
    }
    if let Some(path) = &args.report {
        write_out(path, serde_json::to_string_pretty(m)?.as_bytes())?;
        eprintln!("metrics written to {}", path.display());
    }
    Ok(())
}

pub fn sweep(cfg: &AppConfig, args: &SweepArgs) -> Result<()> {
    let (backbone, cascade) = read_model(&args.model)?;
    let cascade = cascade.ok_or_else(|| {
        Fail::Config(format!("checkpoint {} has no draft cascade to sweep", args.model.display()))
    })?;
    let (corpus, spec) = read_data(&args.data)?;
    let mut sc = cfg.sweep.clone();
    if let Some(set) = &args.topk_set {
        sc.topk_set = set.clone();
    }
    if let Some(v) = args.n_prompts {
        sc.n_prompts = v;
    }
    if let Some(v) = args.max_len {
        sc.max_len = v;
    }
    let mut sp = cfg.sampler.clone();
    if let Some(v) = args.seed {
        sp.seed = v;
    }
    let report = run_sweep(&backbone, &cascade, &corpus.held_out, &spec, &sp, &sc)?;
    write_out(&args.out_csv, sweep_csv(&report).as_bytes())?;
    if let Some(path) = &args.out_json {
        write_out(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    for row in &report.rows {
        println!(
            "topk_v {:>3}: total ratio {:>7.2}, {:.1} tok/s accel vs {:.1} vanilla, NLL {:.4}",
            row.topk_v,
            row.ratio_total,
            row.tokens_per_sec_accel,
            row.tokens_per_sec_vanilla,
            row.quality_proxy
        );
    }
    if report.monotone {
        println!("acceptance ratios are non-decreasing in topk_v");
    } else {
        println!("monotonicity violations:");
        for v in &report.monotonicity_violations {
            println!("  {v}");
        }
    }
    println!("report digest {}", report.digest);
    println!("csv written to {}", args.out_csv.display());
    Ok(())
}

pub fn ablate(cfg: &AppConfig, args: &AblateArgs) -> Result<()> {
    let (backbone, cascade) = read_model(&args.model)?;
    let cascade = cascade.ok_or_else(|| {
        Fail::Config(format!("checkpoint {} has no draft cascade to ablate", args.model.display()))
    })?;
    let (corpus, spec) = read_data(&args.data)?;
    let mut sc = cfg.sweep.clone();
    if let Some(v) = args.n_prompts {
        sc.n_prompts = v;
    }
    if let Some(v) = args.max_len {
        sc.max_len = v;
    }
    let mut sp = cfg.sampler.clone();
    if let Some(v) = args.seed {
        sp.seed = v;
    }
    let mut vp = cfg.verify.clone();
    if let Some(v) = args.topk_v {
        vp.topk_v = v;
    }
    if let Some(v) = args.eos_topk_v {
        vp.eos_topk_v = v;
    }
    let rows = run_ablation(&backbone, &cascade, &corpus.held_out, &spec, &sp, &vp, &sc)?;
    write_out(&args.out_csv, ablation_csv(&rows).as_bytes())?;
    if let Some(path) = &args.out_json {
        write_out(path, serde_json::to_string_pretty(&rows)?.as_bytes())?;
    }
    for row in &rows {
        println!(
            "{:<16} ratio {:<24} {:.1} tok/s, NLL {:.4}",
            row.mode, row.ratio_line, row.tokens_per_sec, row.quality_proxy
        );
    }
    println!("csv written to {}", args.out_csv.display());
    Ok(())
}

pub fn vocoder_check(cfg: &AppConfig, args: &VocoderArgs) -> Result<()> {
    let vc = cfg.vocoder.clone();
    let voc = Vocoder::init(vc.clone(), args.seed)?;
    let tokens: Vec<u32> = match &args.tokens {
        Some(text) => parse_ids(text, "vocoder")?,
        None => {
            let mut rng = RngStream::keyed(args.seed, 0x70C0);
            (0..args.len).map(|_| rng.next_below(vc.vocab_size as u64) as u32).collect()
        }
    };

    let mut st = voc.new_stream();
    let mut streamed = Vec::new();
    for &t in &tokens {
        streamed.extend(voc.stream_push(&mut st, t)?);
    }
    streamed.extend(voc.stream_flush(&mut st)?);
    let offline = voc.offline_decode(&tokens)?;
    if streamed.len() != offline.len() {
        return Err(anyhow!(
            "streaming produced {} samples but offline synthesis {}",
            streamed.len(),
            offline.len()
        ));
    }
    let max_diff = streamed
        .iter()
        .zip(&offline)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if max_diff > 1e-9 {
        return Err(anyhow!("streamed and offline synthesis disagree (max |diff| {max_diff:.3e})"));
    }

    write_wav(&args.out, &streamed, vc.sample_rate)?;
    println!(
        "wrote {} samples ({:.3}s at {} Hz) for {} tokens to {}",
        streamed.len(),
        streamed.len() as f64 / vc.sample_rate as f64,
        vc.sample_rate,
        tokens.len(),
        args.out.display()
    );
    println!("streamed output matches offline synthesis (max |diff| {max_diff:.3e})");
    if let Some(path) = &args.spectral_csv {
        let frames = voc.offline_frames(&tokens)?;
        write_out(path, spectral_csv(&frames).as_bytes())?;
        println!("spectral dump written to {}", path.display());
    }
    Ok(())
}

pub fn trace_audit(args: &TraceAuditArgs) -> Result<()> {
    let text = fs::read_to_string(&args.trace)
        .with_context(|| format!("cannot read trace {}", args.trace.display()))?;
    let events = parse_trace(&text)?;
    let report = audit_trace(&events);
    println!(
        "{} events: {} backbone samples, {} accepts, {} rejects, {} rollbacks, {} eos",
        report.events,
        report.backbone_samples,
        report.accepts,
        report.rejects,
        report.rollbacks,
        report.eos_events
    );
    let mut violations = report.violations.clone();
    if let Some(path) = &args.metrics {
        let body = fs::read_to_string(path)
            .with_context(|| format!("cannot read metrics {}", path.display()))?;
        let metrics: DecodeMetrics = serde_json::from_str(&body)
            .map_err(|e| Fail::Config(format!("bad metrics {}: {e}", path.display())))?;
        violations.extend(audit_against_metrics(&report, &metrics));
    }
    if violations.is_empty() {
        println!("trace is clean");
        Ok(())
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        Err(Fail::Audit(violations.len()).into())
    }
}
