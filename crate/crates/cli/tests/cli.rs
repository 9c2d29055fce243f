//! End-to-end runs of the compiled binary: the full pipeline in a temp
//! directory, the documented exit codes, and the artifact formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn mtpv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mtpv"))
}

/// Run and collect (exit code, stdout, stderr); a signal death fails loudly.
fn run(cmd: &mut Command) -> (i32, String, String) {
    let out = cmd.output().expect("binary failed to launch");
    let code = out.status.code().expect("process killed by signal");
    (
        code,
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mtpv-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const PIPELINE_CONFIG: &str = r#"{
  "corpus": {"seed": 5, "vocab_size": 18, "order": 1, "n_sequences": 80, "min_len": 8, "max_len": 24, "sharpness": 3.0},
  "model": {"vocab_size": 18, "dim": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 64, "max_seq_len": 96, "n_mtp_modules": 2},
  "train": {"max_lr": 0.003, "warmup_steps": 10, "total_steps": 40, "batch_size": 8, "grad_clip": 1.0, "seed": 1},
  "sampler": {"temperature": 0.9, "top_k": 8, "seed": 11},
  "verify": {"topk_v": 4, "eos_topk_v": 1},
  "sweep": {"topk_set": [1, 18], "n_prompts": 4, "prompt_len": 3, "max_len": 32}
}"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(&path, PIPELINE_CONFIG).unwrap();
    path
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = work_dir("pipeline");
    let cfg = write_config(&dir);
    let data = dir.join("data");
    let bb = dir.join("bb.ckpt");
    let mtp = dir.join("mtp.ckpt");

    let (code, out, err) = run(mtpv().args(["--config"]).arg(&cfg).arg("gen-data").arg("--out").arg(&data));
    assert_eq!(code, 0, "gen-data failed: {err}");
    assert!(out.contains("held-out"), "unexpected gen-data output: {out}");
    for f in ["train.txt", "held_out.txt", "spec.json"] {
        assert!(data.join(f).exists(), "gen-data did not write {f}");
    }

    let pre_log = dir.join("pretrain.csv");
    let (code, _, err) = run(mtpv()
        .args(["--config"])
        .arg(&cfg)
        .arg("pretrain-backbone")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&bb)
        .arg("--log")
        .arg(&pre_log));
    assert_eq!(code, 0, "pretrain-backbone failed: {err}");
    let log = fs::read_to_string(&pre_log).unwrap();
    assert!(log.starts_with("step,lr,loss_total,wall_ms\n"), "bad pretrain log header: {log}");

    let mtp_log = dir.join("mtp.csv");
    let (code, _, err) = run(mtpv()
        .args(["--config"])
        .arg(&cfg)
        .arg("train-mtp")
        .arg("--data")
        .arg(&data)
        .arg("--model")
        .arg(&bb)
        .arg("--out")
        .arg(&mtp)
        .args(["--steps", "60"])
        .arg("--log")
        .arg(&mtp_log));
    assert_eq!(code, 0, "train-mtp failed: {err}");
    let log = fs::read_to_string(&mtp_log).unwrap();
    assert!(
        log.starts_with("step,lr,loss_total,loss_mtp1,loss_mtp2,wall_ms\n"),
        "bad training log header: {log}"
    );

    let trace = dir.join("trace.txt");
    let report = dir.join("metrics.json");
    let (code, out, err) = run(mtpv()
        .args(["--config"])
        .arg(&cfg)
        .arg("decode")
        .arg("--model")
        .arg(&mtp)
        .arg("--data")
        .arg(&data)
        .args(["--max-len", "40"])
        .arg("--trace")
        .arg(&trace)
        .arg("--report")
        .arg(&report));
    assert_eq!(code, 0, "decode failed: {err}");
    let first = out.lines().next().unwrap_or("");
    assert!(
        !first.is_empty() && first.split(' ').all(|t| t.parse::<u32>().is_ok()),
        "decode stdout is not a token line: {first:?}"
    );
    for line in fs::read_to_string(&trace).unwrap().lines() {
        assert_eq!(line.split(',').count(), 4, "trace line shape: {line:?}");
    }
    assert!(fs::read_to_string(&report).unwrap().contains("tokens_emitted"));

    let (code, out, err) = run(mtpv().arg("trace-audit").arg(&trace).arg("--metrics").arg(&report));
    assert_eq!(code, 0, "trace-audit failed: {err}");
    assert!(out.contains("trace is clean"), "audit output: {out}");

    // Vanilla decode from the same checkpoint, explicit prompt.
    let (code, _, err) = run(mtpv()
        .args(["--config"])
        .arg(&cfg)
        .arg("decode")
        .arg("--model")
        .arg(&mtp)
        .args(["--prompt", "3 5 1", "--vanilla", "--max-len", "24"]));
    assert_eq!(code, 0, "vanilla decode failed: {err}");

    let sweep_csv = dir.join("sweep.csv");
    let sweep_json = dir.join("sweep.json");
    let (code, out, err) = run(mtpv()
        .args(["--config"])
        .arg(&cfg)
        .arg("sweep")
        .arg("--model")
        .arg(&mtp)
        .arg("--data")
        .arg(&data)
        .arg("--out-csv")
        .arg(&sweep_csv)
        .arg("--out-json")
        .arg(&sweep_json));
    assert_eq!(code, 0, "sweep failed: {err}");
    assert!(out.contains("report digest"), "sweep output: {out}");
    let csv = fs::read_to_string(&sweep_csv).unwrap();
    assert!(csv.starts_with("topk_v,"), "sweep csv header: {csv}");
    assert!(csv.contains("ratio_mtp1") && csv.contains("ratio_mtp2"));
    assert_eq!(csv.lines().count(), 3, "expected 2 sweep rows plus header");
    assert!(fs::read_to_string(&sweep_json).unwrap().contains("digest"));

    let abl_csv = dir.join("ablation.csv");
    let abl_json = dir.join("ablation.json");
    let (code, out, err) = run(mtpv()
        .args(["--config"])
        .arg(&cfg)
        .arg("ablate")
        .arg("--model")
        .arg(&mtp)
        .arg("--data")
        .arg(&data)
        .arg("--out-csv")
        .arg(&abl_csv)
        .arg("--out-json")
        .arg(&abl_json));
    assert_eq!(code, 0, "ablate failed: {err}");
    // The no-verification variant carries the structural per-module value.
    assert!(out.contains("100.00+100.00 (200.00)"), "ablate output: {out}");
    let csv = fs::read_to_string(&abl_csv).unwrap();
    assert_eq!(csv.lines().count(), 5, "header plus four variants: {csv}");
    for mode in ["default", "no_verification", "no_eos_topk", "baseline"] {
        assert!(csv.contains(mode), "ablation csv lacks {mode}: {csv}");
    }
    assert!(fs::read_to_string(&abl_json).unwrap().contains("100.00+100.00 (200.00)"));
}

#[test]
fn generated_data_is_reproducible() {
    let dir = work_dir("gen-repro");
    let cfg = write_config(&dir);
    for sub in ["a", "b"] {
        let (code, _, err) =
            run(mtpv().args(["--config"]).arg(&cfg).arg("gen-data").arg("--out").arg(dir.join(sub)));
        assert_eq!(code, 0, "gen-data failed: {err}");
    }
    for f in ["train.txt", "held_out.txt"] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn vocoder_check_writes_a_wav() {
    let dir = work_dir("vocoder");
    let wav = dir.join("check.wav");
    let spectral = dir.join("frames.csv");
    let (code, out, err) = run(mtpv()
        .arg("vocoder-check")
        .arg("--out")
        .arg(&wav)
        .args(["--len", "24"])
        .arg("--spectral-csv")
        .arg(&spectral));
    assert_eq!(code, 0, "vocoder-check failed: {err}");
    assert!(out.contains("matches offline"), "vocoder output: {out}");
    let bytes = fs::read(&wav).unwrap();
    assert_eq!(&bytes[..4], b"RIFF", "not a RIFF file");
    assert_eq!(&bytes[8..12], b"WAVE", "not a WAVE file");
    let csv = fs::read_to_string(&spectral).unwrap();
    assert!(csv.starts_with("frame,bin,magnitude,phase\n"), "spectral header: {csv}");
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = work_dir("missing");
    let (code, _, err) = run(mtpv()
        .arg("decode")
        .arg("--model")
        .arg(dir.join("nope.ckpt"))
        .args(["--prompt", "1 2"]));
    assert_eq!(code, 3, "missing checkpoint: {err}");

    let (code, _, _) = run(mtpv()
        .arg("pretrain-backbone")
        .arg("--data")
        .arg(dir.join("no-data"))
        .arg("--out")
        .arg(dir.join("bb.ckpt")));
    assert_eq!(code, 3, "missing corpus should exit 3");

    let (code, _, _) = run(mtpv().arg("trace-audit").arg(dir.join("no-trace.txt")));
    assert_eq!(code, 3, "missing trace should exit 3");
}

#[test]
fn config_problems_exit_2() {
    let dir = work_dir("badcfg");

    let broken = dir.join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    let (code, _, err) =
        run(mtpv().args(["--config"]).arg(&broken).arg("gen-data").arg("--out").arg(dir.join("d")));
    assert_eq!(code, 2, "unparseable config: {err}");

    let unknown = dir.join("unknown.json");
    fs::write(&unknown, r#"{"modle": {}}"#).unwrap();
    let (code, _, err) =
        run(mtpv().args(["--config"]).arg(&unknown).arg("gen-data").arg("--out").arg(dir.join("d")));
    assert_eq!(code, 2, "unknown section: {err}");

    let invalid = dir.join("invalid.json");
    fs::write(&invalid, r#"{"corpus": {"vocab_size": 1}}"#).unwrap();
    let (code, _, err) =
        run(mtpv().args(["--config"]).arg(&invalid).arg("gen-data").arg("--out").arg(dir.join("d")));
    assert_eq!(code, 2, "invalid corpus spec: {err}");

    // Prompt ids must parse; this is user input, not a missing artifact,
    // and it is checked before the checkpoint is even opened.
    let (code, _, err) = run(mtpv()
        .arg("decode")
        .arg("--model")
        .arg(dir.join("irrelevant.ckpt"))
        .args(["--prompt", "1 x 3"]));
    assert_eq!(code, 2, "bad prompt id should exit 2: {err}");
}

#[test]
fn violated_trace_exits_4() {
    let dir = work_dir("audit");
    let trace = dir.join("bad-trace.txt");
    // An accept with no draft to back it: the replay must object.
    fs::write(&trace, "1,backbone_sample,3,0\n1,accept,5,1\n").unwrap();
    let (code, _, err) = run(mtpv().arg("trace-audit").arg(&trace));
    assert_eq!(code, 4, "invalid trace should exit 4: {err}");
    assert!(err.contains("violation"), "stderr should list violations: {err}");
}
