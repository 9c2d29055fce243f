//! Streaming spectral decoder head.
//!
//! Tokens run through a small causal decoder-block stack, then a stack of
//! conv1d layers where each layer sees a bounded window [t-left, t+right]
//! of frames, then a linear head that predicts per-frame STFT magnitude and
//! phase. An overlap-add iSTFT turns the frames into waveform samples.
//!
//! The point of the module is the streaming contract: pushing tokens one at
//! a time emits exactly the same samples as decoding the whole sequence
//! offline, with the only delay being the conv layers' declared right
//! lookahead. Both paths share the per-frame kernels but are orchestrated
//! independently, so the equivalence tests compare two genuinely different
//! routes.

use std::path::Path;
use std::sync::Arc;
use std::{fs, fmt::Write as _};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::block::{silu, BlockKv, BlockWeights, NORM_EPS};
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, RngStream};

/// Guard below which an overlap-add normalizer counts as zero.
const WSUM_GUARD: f64 = 1e-12;
/// Allowed deviation when checking the constant-overlap-add condition.
const COLA_TOL: f64 = 1e-10;

/// Shape of the streaming head: transformer stack, conv stack, and STFT
/// geometry. The synthesis window is always a periodic Hann of `n_fft`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    /// Per conv layer, how many future frames it may see. Left context is
    /// `kernel - 1 - right`, so every layer spans exactly `kernel` frames.
    pub conv_right: Vec<usize>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            vocab_size: 66,
            dim: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 64,
            conv_kernel: 7,
            conv_right: vec![0, 2, 0],
            n_fft: 64,
            hop: 16,
            sample_rate: 16_000,
        }
    }
}

impl StreamConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Total emission delay in frames: the sum of per-layer lookaheads.
    pub fn total_lookahead(&self) -> usize {
        self.conv_right.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return bad("vocab_size, dim and ffn_dim must be positive".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return bad(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.dim / self.n_heads % 2 != 0 {
            return bad("attention head size must be even for the rotary pairs".into());
        }
        if self.conv_kernel == 0 || self.conv_right.is_empty() {
            return bad("need a positive kernel and at least one conv layer".into());
        }
        for (i, &r) in self.conv_right.iter().enumerate() {
            if r >= self.conv_kernel {
                return bad(format!(
                    "conv layer {i}: right lookahead {r} leaves no room in kernel {}",
                    self.conv_kernel
                ));
            }
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return bad(format!("n_fft must be even and >= 2, got {}", self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("need 0 < hop <= n_fft, got hop {} n_fft {}", self.hop, self.n_fft));
        }
        cola_constant(&hann_periodic(self.n_fft), self.hop)?;
        Ok(())
    }
}

/// Periodic Hann window: w[n] = 0.5 (1 - cos(2 pi n / N)).
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos()))
        .collect()
}

/// Check the squared window tiles to a constant at this hop and return that
/// constant. Overlap-add resynthesis is distortion-free exactly when it does.
pub fn cola_constant(window: &[f64], hop: usize) -> Result<f64> {
    let mut sums = vec![0.0; hop];
    for (j, &w) in window.iter().enumerate() {
        sums[j % hop] += w * w;
    }
    let c = sums[0];
    for (r, &s) in sums.iter().enumerate() {
        if (s - c).abs() > COLA_TOL {
            return Err(Error::Config(format!(
                "window fails constant-overlap-add at hop {hop}: offset {r} sums to {s}, offset 0 to {c}"
            )));
        }
    }
    Ok(c)
}

/// One frame of predicted spectrum.
#[derive(Debug, Clone)]
pub struct SpectralFrame {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectralFrame {
    fn check(&self, n_bins: usize) -> Result<()> {
        if self.magnitude.len() != n_bins || self.phase.len() != n_bins {
            return Err(Error::Input(format!(
                "spectral frame has {} magnitude / {} phase bins, expected {n_bins}",
                self.magnitude.len(),
                self.phase.len()
            )));
        }
        if self.magnitude.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::Input("spectral magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// One conv1d layer over frame vectors: `kernel` weight taps plus a bias.
/// Tap t multiplies the input at frame `f - left + t`; frames outside the
/// available range count as zeros.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub taps: Vec<Matrix>,
    pub bias: Vec<f64>,
    pub right: usize,
}

impl ConvLayer {
    fn left(&self) -> usize {
        self.taps.len() - 1 - self.right
    }

    /// Evaluate output frame `f` against whatever inputs exist; missing
    /// frames on either side contribute nothing (zero padding).
    fn at(&self, input: &[Vec<f64>], f: usize) -> Vec<f64> {
        let left = self.left() as isize;
        let mut y = self.bias.clone();
        for (t, w) in self.taps.iter().enumerate() {
            let j = f as isize - left + t as isize;
            if j < 0 || j as usize >= input.len() {
                continue;
            }
            let x = &input[j as usize];
            for (r, yr) in y.iter_mut().enumerate() {
                *yr += nn::dot(w.row(r), x);
            }
        }
        y
    }
}

/// Immutable vocoder weights.
#[derive(Debug, Clone)]
pub struct Vocoder {
    pub config: StreamConfig,
    pub embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Vec<f64>,
    pub convs: Vec<ConvLayer>,
    /// Linear head: dim -> 2 * n_bins (magnitudes then phases).
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

impl Vocoder {
    pub fn init(config: StreamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::keyed(seed, 0x70C0);
        let std = 0.02;
        let embed = Matrix::randn(config.vocab_size, config.dim, std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::init(config.dim, config.ffn_dim, std, &mut rng))
            .collect();
        let convs = config
            .conv_right
            .iter()
            .map(|&right| ConvLayer {
                taps: (0..config.conv_kernel)
                    .map(|_| Matrix::randn(config.dim, config.dim, std, &mut rng))
                    .collect(),
                bias: vec![0.0; config.dim],
                right,
            })
            .collect();
        let head = Matrix::randn(2 * config.n_bins(), config.dim, std, &mut rng);
        Ok(Vocoder {
            final_gain: vec![1.0; config.dim],
            head_bias: vec![0.0; 2 * config.n_bins()],
            config,
            embed,
            blocks,
            convs,
            head,
        })
    }

    /// All-zero weights; useful as the silence baseline.
    pub fn zeros(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Vocoder {
            embed: Matrix::zeros(config.vocab_size, config.dim),
            blocks: (0..config.n_layers)
                .map(|_| BlockWeights::zeros(config.dim, config.ffn_dim))
                .collect(),
            final_gain: vec![1.0; config.dim],
            convs: config
                .conv_right
                .iter()
                .map(|&right| ConvLayer {
                    taps: (0..config.conv_kernel)
                        .map(|_| Matrix::zeros(config.dim, config.dim))
                        .collect(),
                    bias: vec![0.0; config.dim],
                    right,
                })
                .collect(),
            head: Matrix::zeros(2 * config.n_bins(), config.dim),
            head_bias: vec![0.0; 2 * config.n_bins()],
            config,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token {t} outside the vocoder embedding range {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Transformer stack over the whole sequence at once.
    fn block_stack_full(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed.row(t as usize).to_vec()).collect();
        for bw in &self.blocks {
            let mut kv = BlockKv::default();
            xs = bw.forward_suffix(&xs, 0, self.config.n_heads, &mut kv)?;
        }
        xs.iter().map(|x| nn::rms_norm(x, &self.final_gain, NORM_EPS)).collect()
    }

    /// Conv stack over a complete frame sequence (zero padding both sides).
    fn conv_stack_full(&self, mut feat: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        for (i, layer) in self.convs.iter().enumerate() {
            let n = feat.len();
            let mut out = Vec::with_capacity(n);
            for f in 0..n {
                let mut y = layer.at(&feat, f);
                if i + 1 < self.convs.len() {
                    for v in &mut y {
                        *v = silu(*v);
                    }
                }
                out.push(y);
            }
            feat = out;
        }
        feat
    }

    fn head_frame(&self, h: &[f64]) -> SpectralFrame {
        let y = nn::matvec(&self.head, h);
        let bins = self.config.n_bins();
        SpectralFrame {
            magnitude: (0..bins).map(|k| (y[k] + self.head_bias[k]).max(0.0)).collect(),
            phase: (0..bins).map(|k| y[bins + k] + self.head_bias[bins + k]).collect(),
        }
    }

    /// Predicted spectral frames for a whole token sequence, one per token.
    pub fn offline_frames(&self, tokens: &[u32]) -> Result<Vec<SpectralFrame>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let feat = self.conv_stack_full(self.block_stack_full(tokens)?);
        Ok(feat.iter().map(|h| self.head_frame(h)).collect())
    }

    /// Whole-sequence decode: exactly `tokens.len() * hop` samples.
    pub fn offline_decode(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let frames = self.offline_frames(tokens)?;
        istft_synthesize(&frames, &self.config)
    }

    pub fn new_stream(&self) -> StreamState {
        let mut planner = FftPlanner::new();
        StreamState {
            kv: vec![BlockKv::default(); self.blocks.len()],
            bufs: vec![Vec::new(); self.convs.len() + 1],
            spectral_done: 0,
            ola: Vec::new(),
            wsum: Vec::new(),
            frames_in: 0,
            samples_out: 0,
            flushed: false,
            window: hann_periodic(self.config.n_fft),
            fft: planner.plan_fft_inverse(self.config.n_fft),
        }
    }

    /// Feed one token; returns whatever samples became final (possibly
    /// nothing while the lookahead fills).
    pub fn stream_push(&self, st: &mut StreamState, token: u32) -> Result<Vec<f64>> {
        if st.flushed {
            return Err(Error::State("stream_push after flush".into()));
        }
        self.check_tokens(&[token])?;
        let mut x = self.embed.row(token as usize).to_vec();
        for (bw, kv) in self.blocks.iter().zip(st.kv.iter_mut()) {
            x = bw
                .forward_suffix(&[x], st.frames_in, self.config.n_heads, kv)?
                .pop()
                .expect("one output per input frame");
        }
        st.bufs[0].push(nn::rms_norm(&x, &self.final_gain, NORM_EPS)?);
        st.frames_in += 1;
        let out = self.advance(st, false);
        debug_assert_eq!(
            st.samples_out,
            st.frames_in.saturating_sub(self.config.total_lookahead()) * self.config.hop
        );
        Ok(out)
    }

    /// Drain the lookahead using zero-padded future frames. After this the
    /// total emitted length equals the offline length exactly.
    pub fn stream_flush(&self, st: &mut StreamState) -> Result<Vec<f64>> {
        if st.flushed {
            return Err(Error::State("stream_flush called twice".into()));
        }
        st.flushed = true;
        Ok(self.advance(st, true))
    }

    /// Run every conv layer as far as its inputs allow, then finalize and
    /// emit any fully-overlapped sample blocks.
    fn advance(&self, st: &mut StreamState, flushing: bool) -> Vec<f64> {
        for (i, layer) in self.convs.iter().enumerate() {
            let target = if flushing {
                st.frames_in
            } else {
                st.bufs[i].len().saturating_sub(layer.right)
            };
            let (head, tail) = st.bufs.split_at_mut(i + 1);
            let input = &head[i];
            let output = &mut tail[0];
            while output.len() < target {
                let mut y = layer.at(input, output.len());
                if i + 1 < self.convs.len() {
                    for v in &mut y {
                        *v = silu(*v);
                    }
                }
                output.push(y);
            }
        }
        let hop = self.config.hop;
        let n_fft = self.config.n_fft;
        let ready = st.bufs[self.convs.len()].len();
        let mut emitted = Vec::new();
        while st.spectral_done < ready {
            let f = st.spectral_done;
            let frame = self.head_frame(&st.bufs[self.convs.len()][f]);
            let time = istft_frame(&frame, st.fft.as_ref(), n_fft);
            let need = f * hop + n_fft;
            if st.ola.len() < need {
                st.ola.resize(need, 0.0);
                st.wsum.resize(need, 0.0);
            }
            for (j, (&tv, &wv)) in time.iter().zip(&st.window).enumerate() {
                st.ola[f * hop + j] += tv * wv;
                st.wsum[f * hop + j] += wv * wv;
            }
            // Later frames start at (f+1)*hop or beyond, so this block is
            // final the moment frame f lands.
            for p in f * hop..(f + 1) * hop {
                emitted.push(normalize_sample(st.ola[p], st.wsum[p]));
            }
            st.spectral_done += 1;
        }
        st.samples_out += emitted.len();
        emitted
    }
}

/// Streaming session: caches for the block stack, per-layer frame buffers,
/// and the overlap-add tail that is not yet fully covered.
pub struct StreamState {
    kv: Vec<BlockKv>,
    /// bufs[0]: block-stack outputs; bufs[i]: outputs of conv layer i-1.
    bufs: Vec<Vec<Vec<f64>>>,
    spectral_done: usize,
    ola: Vec<f64>,
    wsum: Vec<f64>,
    pub frames_in: usize,
    pub samples_out: usize,
    flushed: bool,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

fn normalize_sample(acc: f64, wsum: f64) -> f64 {
    if wsum > WSUM_GUARD {
        acc / wsum
    } else {
        0.0
    }
}

/// Inverse FFT of one spectral frame, unwindowed, scaled to the signal
/// domain. The DC and Nyquist bins keep only their real component so the
/// assembled spectrum is exactly Hermitian.
fn istft_frame(frame: &SpectralFrame, fft: &dyn Fft<f64>, n_fft: usize) -> Vec<f64> {
    let half = n_fft / 2;
    let mut spec = vec![Complex::new(0.0, 0.0); n_fft];
    spec[0] = Complex::new(frame.magnitude[0] * frame.phase[0].cos(), 0.0);
    spec[half] = Complex::new(frame.magnitude[half] * frame.phase[half].cos(), 0.0);
    for k in 1..half {
        let c = Complex::from_polar(frame.magnitude[k], frame.phase[k]);
        spec[k] = c;
        spec[n_fft - k] = c.conj();
    }
    fft.process(&mut spec);
    spec.iter().map(|c| c.re / n_fft as f64).collect()
}

/// Overlap-add synthesis: window each inverse frame, add at hop offsets,
/// divide by the accumulated squared window, return `frames * hop` samples.
pub fn istft_synthesize(frames: &[SpectralFrame], cfg: &StreamConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    for f in frames {
        f.check(cfg.n_bins())?;
    }
    let window = hann_periodic(cfg.n_fft);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(cfg.n_fft);
    let total = (frames.len() - 1) * cfg.hop + cfg.n_fft;
    let mut ola = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    for (f, frame) in frames.iter().enumerate() {
        let time = istft_frame(frame, fft.as_ref(), cfg.n_fft);
        for (j, (&tv, &wv)) in time.iter().zip(&window).enumerate() {
            ola[f * cfg.hop + j] += tv * wv;
            wsum[f * cfg.hop + j] += wv * wv;
        }
    }
    Ok((0..frames.len() * cfg.hop).map(|p| normalize_sample(ola[p], wsum[p])).collect())
}

/// Forward STFT with the same window/hop geometry; used by the round-trip
/// checks and the spectral debug dump.
pub fn stft(signal: &[f64], cfg: &StreamConfig) -> Result<Vec<SpectralFrame>> {
    cfg.validate()?;
    let window = hann_periodic(cfg.n_fft);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_bins();
    let mut frames = Vec::new();
    let mut start = 0;
    while start + cfg.n_fft <= signal.len() {
        let mut buf: Vec<Complex<f64>> = signal[start..start + cfg.n_fft]
            .iter()
            .zip(&window)
            .map(|(&s, &w)| Complex::new(s * w, 0.0))
            .collect();
        fft.process(&mut buf);
        frames.push(SpectralFrame {
            magnitude: buf[..bins].iter().map(|c| c.norm()).collect(),
            phase: buf[..bins].iter().map(|c| c.im.atan2(c.re)).collect(),
        });
        start += cfg.hop;
    }
    Ok(frames)
}

/// Write mono 32-bit float PCM WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let n = samples.len() as u32;
    let data_len = n * 4;
    let mut out = Vec::with_capacity(58 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(4 + 24 + 12 + 8 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"fact");
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read back a WAV produced by `write_wav` (mono f32 PCM only).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut rate = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(Error::Format("truncated WAV chunk".into()));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(Error::Format("short fmt chunk".into()));
                }
                let fmt = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let ch = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                if fmt != 3 || ch != 1 {
                    return Err(Error::Format(format!(
                        "expected mono IEEE-float WAV, got format {fmt} with {ch} channels"
                    )));
                }
                rate = Some(u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap()));
            }
            b"data" => {
                let mut samples = Vec::with_capacity(len / 4);
                for c in bytes[body..body + len].chunks_exact(4) {
                    samples.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
                data = Some(samples);
            }
            _ => {}
        }
        pos = body + len + len % 2;
    }
    match (data, rate) {
        (Some(d), Some(r)) => Ok((d, r)),
        _ => Err(Error::Format("WAV missing fmt or data chunk".into())),
    }
}

/// Debug dump: frame index, bin, magnitude, phase.
pub fn spectral_csv(frames: &[SpectralFrame]) -> String {
    let mut out = String::from("frame,bin,magnitude,phase\n");
    for (f, frame) in frames.iter().enumerate() {
        for (b, (&m, &p)) in frame.magnitude.iter().zip(&frame.phase).enumerate() {
            let _ = writeln!(out, "{f},{b},{m},{p}");
        }
    }
    out
}
