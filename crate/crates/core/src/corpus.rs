//! Synthetic token corpus with a known generator.
//!
//! Sequences are order-k Markov chains over the data tokens, terminated by
//! an explicit EOS whose hazard ramps up linearly between the configured
//! minimum and maximum length. The whole corpus is a pure function of the
//! spec, and because the transition table is known exactly, generated text
//! can be scored by its true negative log-likelihood, which stands in for
//! an external quality metric.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::RngStream;

/// Upper bound on the number of Markov contexts we are willing to tabulate.
const MAX_CONTEXTS: usize = 1 << 20;
/// Probability floor when scoring events the generator considers impossible.
const PROB_FLOOR: f64 = 1e-12;

/// Everything that determines a corpus, bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Total vocabulary including the EOS and PAD slots (the top two ids).
    pub vocab_size: usize,
    /// Markov order; 0 means i.i.d. tokens.
    pub order: usize,
    pub n_sequences: usize,
    /// Minimum data tokens before EOS becomes possible.
    pub min_len: usize,
    /// Data-token count at which EOS is certain. Equal min and max give
    /// fixed-length sequences.
    pub max_len: usize,
    /// Concentration of the random transition rows; higher is peakier.
    pub sharpness: f64,
    /// Replace each transition row with a one-hot at its argmax, making the
    /// chain a deterministic map from context to next token.
    pub deterministic: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            vocab_size: 66,
            order: 2,
            n_sequences: 600,
            min_len: 8,
            max_len: 48,
            sharpness: 3.0,
            deterministic: false,
        }
    }
}

impl CorpusSpec {
    pub fn n_data_tokens(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos_token(&self) -> u32 {
        (self.vocab_size - 2) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 3 {
            return bad(format!(
                "vocab_size {} leaves no data tokens beside EOS and PAD",
                self.vocab_size
            ));
        }
        if self.n_sequences == 0 {
            return bad("n_sequences must be positive".into());
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if !(self.sharpness > 0.0) || !self.sharpness.is_finite() {
            return bad(format!("sharpness must be a positive finite number, got {}", self.sharpness));
        }
        let mut contexts = 1usize;
        for _ in 0..self.order {
            contexts = match contexts.checked_mul(self.n_data_tokens()) {
                Some(c) if c <= MAX_CONTEXTS => c,
                _ => {
                    return bad(format!(
                        "order {} over {} data tokens needs more than {MAX_CONTEXTS} contexts",
                        self.order,
                        self.n_data_tokens()
                    ))
                }
            };
        }
        Ok(())
    }
}

/// The realized generator: transition rows plus the EOS hazard ramp.
pub struct Generator {
    pub spec: CorpusSpec,
    /// One probability row over the data tokens per context id.
    table: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_data_tokens();
        let contexts = n.pow(spec.order as u32);
        let mut rng = RngStream::keyed(spec.seed, 0x7AB1);
        let mut table = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            let weights: Vec<f64> =
                (0..n).map(|_| (spec.sharpness * rng.next_normal()).exp()).collect();
            let row = if spec.deterministic {
                let best = weights
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                let mut one_hot = vec![0.0; n];
                one_hot[best] = 1.0;
                one_hot
            } else {
                let z: f64 = weights.iter().sum();
                weights.iter().map(|w| w / z).collect()
            };
            table.push(row);
        }
        Ok(Generator { spec: spec.clone(), table })
    }

    /// Rolling context id over the last `order` tokens. Missing history and
    /// tokens the generator cannot emit (PAD showing up in a scored model
    /// generation) both count as token 0.
    pub fn context_id(&self, history: &[u32]) -> usize {
        let n = self.spec.n_data_tokens();
        let mut id = 0usize;
        for i in 0..self.spec.order {
            let tok = history
                .len()
                .checked_sub(i + 1)
                .map(|j| history[j] as usize)
                .filter(|&t| t < n)
                .unwrap_or(0);
            id = id * n + tok;
        }
        id
    }

    pub fn row(&self, context_id: usize) -> &[f64] {
        &self.table[context_id]
    }

    /// EOS hazard after `len` data tokens have been emitted.
    pub fn stop_prob(&self, len: usize) -> f64 {
        if len < self.spec.min_len {
            return 0.0;
        }
        let span = (self.spec.max_len - self.spec.min_len + 1) as f64;
        ((len - self.spec.min_len + 1) as f64 / span).min(1.0)
    }

    fn draw_sequence(&self, rng: &mut RngStream) -> Vec<u32> {
        let mut seq = Vec::new();
        loop {
            let ps = self.stop_prob(seq.len());
            if ps > 0.0 && rng.next_f64() < ps {
                seq.push(self.spec.eos_token());
                return seq;
            }
            let row = self.row(self.context_id(&seq));
            seq.push(rng.next_categorical(row) as u32);
        }
    }
}

/// Generated sequences, already split 90/10.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Vec<u32>>,
    pub held_out: Vec<Vec<u32>>,
}

/// Generate the corpus for a spec. Every tenth sequence goes to the
/// held-out split; everything is a pure function of the spec.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let generator = Generator::new(spec)?;
    let mut rng = RngStream::keyed(spec.seed, 0xDA7A);
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for i in 0..spec.n_sequences {
        let seq = generator.draw_sequence(&mut rng);
        if i % 10 == 9 {
            held_out.push(seq);
        } else {
            train.push(seq);
        }
    }
    Ok(Corpus { train, held_out })
}

fn render_token_lines(seqs: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for seq in seqs {
        let words: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}

/// Write train.txt, held_out.txt, and the spec snapshot into `dir`.
pub fn write_corpus(corpus: &Corpus, spec: &CorpusSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train.txt"), render_token_lines(&corpus.train))?;
    fs::write(dir.join("held_out.txt"), render_token_lines(&corpus.held_out))?;
    let json = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Format(format!("corpus spec serialization: {e}")))?;
    fs::write(dir.join("spec.json"), json)?;
    Ok(())
}

/// Parse a plain-text token file: one sequence per line, ids separated by
/// spaces.
pub fn read_token_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<u32> = line
            .split_whitespace()
            .map(|w| {
                w.parse::<u32>().map_err(|_| {
                    Error::Format(format!("{}:{}: bad token {w:?}", path.display(), ln + 1))
                })
            })
            .collect::<Result<_>>()?;
        out.push(seq);
    }
    Ok(out)
}

/// Load a corpus directory written by `write_corpus`.
pub fn read_corpus(dir: &Path) -> Result<(Corpus, CorpusSpec)> {
    let spec_text = fs::read_to_string(dir.join("spec.json"))?;
    let spec: CorpusSpec = serde_json::from_str(&spec_text)
        .map_err(|e| Error::Config(format!("corpus spec.json: {e}")))?;
    Ok((
        Corpus {
            train: read_token_file(&dir.join("train.txt"))?,
            held_out: read_token_file(&dir.join("held_out.txt"))?,
        },
        spec,
    ))
}

/// True-generator scoring result.
#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    /// Mean per-token negative log-likelihood; lower is better, 0 is a
    /// deterministic chain scored on its own output.
    pub mean_nll: f64,
    pub tokens: u64,
    /// Events the generator assigns probability ~0, scored at the floor.
    pub clipped: u64,
}

/// Score sequences under the true generator, EOS hazard included.
///
/// Scoring stops at the first EOS of each sequence (it is the terminator).
/// Tokens with ids outside the vocabulary are a scoring error; in-vocabulary
/// tokens the generator cannot emit (PAD, or zero-probability transitions in
/// a deterministic chain) are clipped to a probability floor and counted.
pub fn quality_proxy(sequences: &[Vec<u32>], spec: &CorpusSpec) -> Result<QualityReport> {
    let generator = Generator::new(spec)?;
    let n_data = spec.n_data_tokens() as u32;
    let mut nll_sum = 0.0;
    let mut tokens = 0u64;
    let mut clipped = 0u64;
    let mut score = |p: f64| {
        if p < PROB_FLOOR {
            clipped += 1;
            nll_sum += -PROB_FLOOR.ln();
        } else {
            nll_sum += -p.ln();
        }
        tokens += 1;
    };
    for seq in sequences {
        let mut history: Vec<u32> = Vec::new();
        for &tok in seq {
            if tok as usize >= spec.vocab_size {
                return Err(Error::Scoring(format!(
                    "token {tok} outside the vocabulary of {}",
                    spec.vocab_size
                )));
            }
            let ps = generator.stop_prob(history.len());
            if tok == spec.eos_token() {
                score(ps);
                break;
            }
            let p_tok = if tok < n_data {
                generator.row(generator.context_id(&history))[tok as usize]
            } else {
                0.0 // PAD: in vocabulary, never emitted by the generator
            };
            score((1.0 - ps) * p_tok);
            history.push(tok);
        }
    }
    Ok(QualityReport {
        mean_nll: if tokens == 0 { 0.0 } else { nll_sum / tokens as f64 },
        tokens,
        clipped,
    })
}
