//! Sweep and ablation drivers behind the CLI.
//!
//! A sweep runs seeded generations over held-out prompts for each
//! verification top-k in a configured set, pairing every accelerated run
//! with a vanilla run on the same prompt and seed, and reports acceptance
//! ratios, throughput, and the true-generator quality proxy per point. The
//! ablation driver reruns the same prompts under the verification variants.
//!
//! Reports carry a content digest over everything except wall-clock
//! timing, so two runs of the same config can be checked for equality
//! without the throughput columns getting in the way.

use serde::Serialize;
use serde::Deserialize;
use serde_json::json;

use crate::backbone::Backbone;
use crate::corpus::{quality_proxy, CorpusSpec};
use crate::decode::{
    generate, generate_vanilla, merge_metrics, speedup_report, DecodeMetrics, SamplerParams,
    VerifyParams,
};
use crate::error::{Error, Result};
use crate::mtp::MtpCascade;

/// Sweep shape: which verification thresholds to visit and how much to
/// generate per point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub topk_set: Vec<usize>,
    /// Fixed EOS threshold; when absent each point uses eos_topk_v = topk_v
    /// so the largest point degenerates to no-verification exactly.
    pub eos_topk_v: Option<usize>,
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub max_len: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            topk_set: vec![1, 2, 4, 8, 16, 32],
            eos_topk_v: None,
            n_prompts: 20,
            prompt_len: 4,
            max_len: 64,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk_set.is_empty() {
            return Err(Error::Config("sweep needs a non-empty topk set".into()));
        }
        if self.topk_set.iter().any(|&k| k == 0) {
            return Err(Error::Config("sweep topk values must be positive".into()));
        }
        if self.n_prompts == 0 || self.prompt_len == 0 {
            return Err(Error::Config("sweep needs prompts of positive length".into()));
        }
        if self.max_len <= self.prompt_len {
            return Err(Error::Config(format!(
                "max_len {} leaves no room beyond the prompt length {}",
                self.max_len, self.prompt_len
            )));
        }
        Ok(())
    }

    fn verify_for(&self, topk_v: usize) -> VerifyParams {
        let eos = self.eos_topk_v.unwrap_or(topk_v).clamp(1, topk_v);
        VerifyParams { topk_v, eos_topk_v: eos }
    }
}

/// One sweep point: settings plus the measurements at that point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub topk_v: usize,
    pub eos_topk_v: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub ratio_per_module: Vec<f64>,
    pub ratio_total: f64,
    pub tokens_per_sec_accel: f64,
    pub tokens_per_sec_vanilla: f64,
    pub quality_proxy: f64,
}

/// Sweep output: config snapshot, one row per point, the monotonicity
/// verdict, and the determinism digest.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub rows: Vec<SweepPoint>,
    /// Whether every per-module ratio column is non-decreasing in topk_v.
    /// Violations are listed rather than failing the run, so a
    /// counterexample is visible instead of silently absorbed.
    pub monotone: bool,
    pub monotonicity_violations: Vec<String>,
    /// FNV-1a hex digest over all non-timing fields.
    pub digest: String,
}

/// One ablation variant's aggregate measurements.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub ratio_per_module: Vec<f64>,
    pub ratio_total: f64,
    pub ratio_line: String,
    pub tokens_per_sec: f64,
    pub quality_proxy: f64,
}

/// Deterministic prompt set: prefixes of held-out sequences, cycling when
/// there are fewer sequences than requested prompts.
pub fn sweep_prompts(held_out: &[Vec<u32>], n_prompts: usize, prompt_len: usize) -> Result<Vec<Vec<u32>>> {
    let usable: Vec<&Vec<u32>> = held_out.iter().filter(|s| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Input("no held-out sequences to draw prompts from".into()));
    }
    Ok((0..n_prompts)
        .map(|i| {
            let seq = usable[i % usable.len()];
            // Keep the prompt inside the data region, before the EOS.
            let data_len = seq.len().saturating_sub(1).max(1);
            seq[..prompt_len.min(data_len)].to_vec()
        })
        .collect())
}

fn prompt_sampler(sp: &SamplerParams, i: usize) -> SamplerParams {
    SamplerParams { seed: sp.seed.wrapping_add(7919 * i as u64), ..sp.clone() }
}

struct PointOutcome {
    metrics: DecodeMetrics,
    vanilla_metrics: DecodeMetrics,
    sequences: Vec<Vec<u32>>,
}

fn run_point(
    backbone: &Backbone,
    cascade: &MtpCascade,
    prompts: &[Vec<u32>],
    sp: &SamplerParams,
    vp: &VerifyParams,
    max_len: usize,
) -> Result<PointOutcome> {
    let mut per_run = Vec::new();
    let mut per_run_vanilla = Vec::new();
    let mut sequences = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let spi = prompt_sampler(sp, i);
        let out = generate(backbone, cascade, prompt, max_len, &spi, vp, false)?;
        let van = generate_vanilla(backbone, prompt, max_len, &spi, false)?;
        per_run.push(out.metrics);
        per_run_vanilla.push(van.metrics);
        sequences.push(out.tokens);
    }
    Ok(PointOutcome {
        metrics: merge_metrics(&per_run),
        vanilla_metrics: merge_metrics(&per_run_vanilla),
        sequences,
    })
}

/// Run the verification-threshold sweep on a trained model.
pub fn run_sweep(
    backbone: &Backbone,
    cascade: &MtpCascade,
    held_out: &[Vec<u32>],
    corpus_spec: &CorpusSpec,
    sp: &SamplerParams,
    cfg: &SweepConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    sp.validate()?;
    let prompts = sweep_prompts(held_out, cfg.n_prompts, cfg.prompt_len)?;
    let mut rows = Vec::with_capacity(cfg.topk_set.len());
    for &topk_v in &cfg.topk_set {
        let vp = cfg.verify_for(topk_v);
        vp.validate()?;
        let outcome = run_point(backbone, cascade, &prompts, sp, &vp, cfg.max_len)?;
        let rep = speedup_report(&outcome.metrics, Some(&outcome.vanilla_metrics));
        let quality = quality_proxy(&outcome.sequences, corpus_spec)?;
        rows.push(SweepPoint {
            topk_v,
            eos_topk_v: vp.eos_topk_v,
            temperature: sp.temperature,
            top_k: sp.top_k,
            ratio_per_module: rep.per_module.clone(),
            ratio_total: rep.total,
            tokens_per_sec_accel: rep.accel_tokens_per_sec,
            tokens_per_sec_vanilla: rep.vanilla_tokens_per_sec.unwrap_or(0.0),
            quality_proxy: quality.mean_nll,
        });
    }
    let (monotone, violations) = check_monotonicity(&rows);
    let config = json!({
        "sweep": cfg,
        "sampler": sp,
        "corpus": corpus_spec,
    });
    let digest = report_digest(&config, &rows, monotone);
    Ok(RunReport { config, rows, monotone, monotonicity_violations: violations, digest })
}

/// Check each per-module ratio column is non-decreasing when the rows are
/// ordered by topk_v. Ties within float noise pass.
fn check_monotonicity(rows: &[SweepPoint]) -> (bool, Vec<String>) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i].topk_v);
    let mut violations = Vec::new();
    for w in order.windows(2) {
        let (a, b) = (&rows[w[0]], &rows[w[1]]);
        for (m, (ra, rb)) in a.ratio_per_module.iter().zip(&b.ratio_per_module).enumerate() {
            if rb + 1e-9 < *ra {
                violations.push(format!(
                    "module {}: ratio drops from {ra} at topk_v {} to {rb} at topk_v {}",
                    m + 1,
                    a.topk_v,
                    b.topk_v
                ));
            }
        }
    }
    (violations.is_empty(), violations)
}

/// Run the four verification variants on the same prompts.
pub fn run_ablation(
    backbone: &Backbone,
    cascade: &MtpCascade,
    held_out: &[Vec<u32>],
    corpus_spec: &CorpusSpec,
    sp: &SamplerParams,
    vp: &VerifyParams,
    cfg: &SweepConfig,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    sp.validate()?;
    vp.validate()?;
    let prompts = sweep_prompts(held_out, cfg.n_prompts, cfg.prompt_len)?;
    let vocab = backbone.config.vocab_size;
    let variants: Vec<(&str, Option<VerifyParams>)> = vec![
        ("default", Some(vp.clone())),
        ("no_verification", Some(VerifyParams { topk_v: vocab, eos_topk_v: vocab })),
        ("no_eos_topk", Some(VerifyParams { topk_v: vp.topk_v, eos_topk_v: vp.topk_v })),
        ("baseline", None),
    ];
    let mut rows = Vec::new();
    for (mode, variant) in variants {
        let (metrics, sequences) = match &variant {
            Some(v) => {
                let outcome = run_point(backbone, cascade, &prompts, sp, v, cfg.max_len)?;
                (outcome.metrics, outcome.sequences)
            }
            None => {
                let mut per_run = Vec::new();
                let mut sequences = Vec::new();
                for (i, prompt) in prompts.iter().enumerate() {
                    let spi = prompt_sampler(sp, i);
                    let out = generate_vanilla(backbone, prompt, cfg.max_len, &spi, false)?;
                    per_run.push(out.metrics);
                    sequences.push(out.tokens);
                }
                (merge_metrics(&per_run), sequences)
            }
        };
        let rep = speedup_report(&metrics, None);
        let quality = quality_proxy(&sequences, corpus_spec)?;
        rows.push(AblationRow {
            mode: mode.to_string(),
            ratio_total: rep.total,
            ratio_line: rep.ratio_line(),
            ratio_per_module: rep.per_module,
            tokens_per_sec: rep.accel_tokens_per_sec,
            quality_proxy: quality.mean_nll,
        });
    }
    Ok(rows)
}

fn fnv1a_str(h: &mut u64, s: &str) {
    for b in s.as_bytes() {
        *h ^= *b as u64;
        *h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
}

/// Digest over everything reproducible: config snapshot, settings, ratios,
/// and quality numbers. Wall-clock throughput columns are excluded on
/// purpose; they are the only fields two identical runs may disagree on.
fn report_digest(config: &serde_json::Value, rows: &[SweepPoint], monotone: bool) -> String {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    fnv1a_str(&mut h, &config.to_string());
    for r in rows {
        fnv1a_str(
            &mut h,
            &format!(
                "{}|{}|{:?}|{}|{:?}|{:?}|{:?};",
                r.topk_v, r.eos_topk_v, r.temperature, r.top_k, r.ratio_per_module, r.ratio_total,
                r.quality_proxy
            ),
        );
    }
    fnv1a_str(&mut h, if monotone { "monotone" } else { "violations" });
    format!("{h:016x}")
}

/// CSV rendering of a sweep report, one row per point.
pub fn sweep_csv(report: &RunReport) -> String {
    let n_modules = report.rows.first().map(|r| r.ratio_per_module.len()).unwrap_or(0);
    let mut out = String::from("topk_v,eos_topk_v,temperature,top_k");
    for m in 1..=n_modules {
        out.push_str(&format!(",ratio_mtp{m}"));
    }
    out.push_str(",ratio_total,tokens_per_sec_accel,tokens_per_sec_vanilla,quality_proxy\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}", r.topk_v, r.eos_topk_v, r.temperature, r.top_k));
        for v in &r.ratio_per_module {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            r.ratio_total, r.tokens_per_sec_accel, r.tokens_per_sec_vanilla, r.quality_proxy
        ));
    }
    out
}

/// CSV rendering of the ablation rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let n_modules = rows.iter().map(|r| r.ratio_per_module.len()).max().unwrap_or(0);
    let mut out = String::from("mode");
    for m in 1..=n_modules {
        out.push_str(&format!(",ratio_mtp{m}"));
    }
    out.push_str(",ratio_total,tokens_per_sec,quality_proxy\n");
    for r in rows {
        out.push_str(&r.mode);
        for m in 0..n_modules {
            let v = r.ratio_per_module.get(m).copied().unwrap_or(0.0);
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{},{}\n", r.ratio_total, r.tokens_per_sec, r.quality_proxy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::corpus::gen_corpus;
    use crate::decode::generate_vanilla;

    fn fixture() -> (Backbone, MtpCascade, Vec<Vec<u32>>, CorpusSpec) {
        let spec = CorpusSpec {
            seed: 5,
            vocab_size: 14,
            order: 1,
            n_sequences: 40,
            min_len: 6,
            max_len: 20,
            sharpness: 2.0,
            deterministic: false,
        };
        let corpus = gen_corpus(&spec).unwrap();
        let cfg = ModelConfig {
            vocab_size: 14,
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            max_seq_len: 64,
            n_mtp_modules: 2,
        };
        let bb = Backbone::init(cfg.clone(), 61).unwrap();
        let cas = MtpCascade::init(cfg.dim, cfg.ffn_dim, cfg.n_heads, 2, 62);
        (bb, cas, corpus.held_out, spec)
    }

    fn small_sweep() -> SweepConfig {
        SweepConfig {
            topk_set: vec![1, 4, 14],
            eos_topk_v: None,
            n_prompts: 4,
            prompt_len: 3,
            max_len: 24,
        }
    }

    #[test]
    fn sweep_produces_one_row_per_point_with_sane_fields() {
        let (bb, cas, held, spec) = fixture();
        let sp = SamplerParams { temperature: 0.9, top_k: 12, top_p: None, seed: 3 };
        let report = run_sweep(&bb, &cas, &held, &spec, &sp, &small_sweep()).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert_eq!(row.ratio_per_module.len(), 2);
            assert!(row.ratio_total >= 0.0 && row.ratio_total.is_finite());
            assert!(row.quality_proxy.is_finite());
            assert_eq!(row.eos_topk_v, row.topk_v, "default aligns the EOS gate");
        }
        assert_eq!(report.monotone, report.monotonicity_violations.is_empty());
    }

    #[test]
    fn whole_vocab_point_reports_the_structural_two_hundred() {
        let (bb, cas, held, spec) = fixture();
        let sp = SamplerParams { temperature: 1.0, top_k: 14, top_p: None, seed: 8 };
        let cfg = SweepConfig { topk_set: vec![14], ..small_sweep() };
        let report = run_sweep(&bb, &cas, &held, &spec, &sp, &cfg).unwrap();
        assert_eq!(report.rows[0].ratio_per_module, vec![100.0, 100.0]);
        assert_eq!(report.rows[0].ratio_total, 200.0);
    }

    #[test]
    fn greedy_single_topk_point_matches_vanilla_exactly() {
        let (bb, cas, held, spec) = fixture();
        let sp = SamplerParams { temperature: 0.0, top_k: 1, top_p: None, seed: 2 };
        let cfg = SweepConfig { topk_set: vec![1], ..small_sweep() };
        let report = run_sweep(&bb, &cas, &held, &spec, &sp, &cfg).unwrap();
        // Reproduce the vanilla side on identical prompts and seeds.
        let prompts = sweep_prompts(&held, cfg.n_prompts, cfg.prompt_len).unwrap();
        let mut vanilla_seqs = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            let spi = prompt_sampler(&sp, i);
            vanilla_seqs.push(generate_vanilla(&bb, p, cfg.max_len, &spi, false).unwrap().tokens);
        }
        let vanilla_quality = quality_proxy(&vanilla_seqs, &spec).unwrap();
        assert_eq!(report.rows[0].quality_proxy, vanilla_quality.mean_nll);
    }

    #[test]
    fn sweep_is_deterministic_up_to_wall_clock() {
        let (bb, cas, held, spec) = fixture();
        let sp = SamplerParams { temperature: 0.8, top_k: 10, top_p: Some(0.95), seed: 17 };
        let a = run_sweep(&bb, &cas, &held, &spec, &sp, &small_sweep()).unwrap();
        let b = run_sweep(&bb, &cas, &held, &spec, &sp, &small_sweep()).unwrap();
        assert_eq!(a.digest, b.digest);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.ratio_per_module, rb.ratio_per_module);
            assert_eq!(ra.quality_proxy, rb.quality_proxy);
        }
        // And the digest reacts to a config change.
        let sp2 = SamplerParams { seed: 18, ..sp };
        let c = run_sweep(&bb, &cas, &held, &spec, &sp2, &small_sweep()).unwrap();
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn ablation_has_the_four_modes_with_their_structural_values() {
        let (bb, cas, held, spec) = fixture();
        let sp = SamplerParams { temperature: 0.9, top_k: 12, top_p: None, seed: 4 };
        let vp = VerifyParams { topk_v: 4, eos_topk_v: 1 };
        let rows =
            run_ablation(&bb, &cas, &held, &spec, &sp, &vp, &small_sweep()).unwrap();
        let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
        assert_eq!(modes, vec!["default", "no_verification", "no_eos_topk", "baseline"]);
        let noverif = &rows[1];
        assert_eq!(noverif.ratio_per_module, vec![100.0, 100.0]);
        assert_eq!(noverif.ratio_line, "100.00+100.00 (200.00)");
        let baseline = &rows[3];
        assert_eq!(baseline.ratio_total, 0.0);
        assert!(baseline.ratio_per_module.is_empty());
    }

    #[test]
    fn csv_outputs_have_stable_headers() {
        let (bb, cas, held, spec) = fixture();
        let sp = SamplerParams { temperature: 1.0, top_k: 12, top_p: None, seed: 1 };
        let report = run_sweep(&bb, &cas, &held, &spec, &sp, &small_sweep()).unwrap();
        let csv = sweep_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "topk_v,eos_topk_v,temperature,top_k,ratio_mtp1,ratio_mtp2,ratio_total,tokens_per_sec_accel,tokens_per_sec_vanilla,quality_proxy"
        );
        assert_eq!(csv.lines().count(), 1 + report.rows.len());

        let vp = VerifyParams { topk_v: 4, eos_topk_v: 1 };
        let rows = run_ablation(&bb, &cas, &held, &spec, &sp, &vp, &small_sweep()).unwrap();
        let acsv = ablation_csv(&rows);
        assert_eq!(
            acsv.lines().next().unwrap(),
            "mode,ratio_mtp1,ratio_mtp2,ratio_total,tokens_per_sec,quality_proxy"
        );
        assert_eq!(acsv.lines().count(), 5);
    }

    #[test]
    fn empty_held_out_set_is_an_input_error() {
        let (bb, cas, _, spec) = fixture();
        let sp = SamplerParams::default();
        let err = run_sweep(&bb, &cas, &[], &spec, &sp, &small_sweep());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn sweep_config_validation() {
        let cfg = SweepConfig { topk_set: vec![], ..SweepConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = SweepConfig { topk_set: vec![0], ..SweepConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = SweepConfig { max_len: 4, prompt_len: 4, ..SweepConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
