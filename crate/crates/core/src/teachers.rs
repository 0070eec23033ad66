//! Stand-in supervision: a frozen pseudo-text encoder for utterance targets
//! and a DSP descriptor pipeline for frame targets.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::{normal, sinusoidal_positions, TransformerLayer};
use crate::tensor::{Binder, Graph, ParamId, ParamStore, Tensor};

/// Token vocabulary size; id 0 is reserved for the empty transcript.
pub const VOCAB: usize = 1000;
pub const TEACHER_SEED: u64 = 0x7e47_5eed;
pub const TEACHER_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptTokens(pub Vec<usize>);

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(transcript: &str) -> TranscriptTokens {
    let ids: Vec<usize> = transcript
        .to_lowercase()
        .split_whitespace()
        .map(|w| (fnv1a64(w.as_bytes()) % (VOCAB as u64 - 1)) as usize + 1)
        .collect();
    if ids.is_empty() {
        TranscriptTokens(vec![0])
    } else {
        TranscriptTokens(ids)
    }
}

/// Seed-fixed embedding table plus a small frozen transformer, mean-pooled.
#[derive(Clone, Debug)]
pub struct SemanticTeacher {
    store: ParamStore<f32>,
    embedding: ParamId,
    layers: Vec<TransformerLayer>,
    dim: usize,
}

impl SemanticTeacher {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "teacher width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(TEACHER_SEED);
        let mut store = ParamStore::new();
        let embedding = store.insert("teacher.embedding", normal(&mut rng, &[VOCAB, dim], 1.0), true)?;
        let layers = (0..TEACHER_LAYERS)
            .map(|i| TransformerLayer::new(&mut store, &format!("teacher.layer{i}"), dim, heads, &mut rng, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            embedding,
            layers,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Contextual token vectors, `tokens × dim`.
    pub fn contextual(&self, tokens: &TranscriptTokens) -> Result<Tensor<f32>> {
        let table = &self.store.get(self.embedding).value;
        let n = tokens.0.len();
        let mut data = Vec::with_capacity(n * self.dim);
        for &id in &tokens.0 {
            if id >= VOCAB {
                return Err(Error::Input(format!("token id {id} outside vocabulary")));
            }
            data.extend_from_slice(table.row(id));
        }
        let pos = sinusoidal_positions::<f32>(n, self.dim);
        for (d, p) in data.iter_mut().zip(pos.data()) {
            *d += p;
        }
        let mut g = Graph::new();
        let mut b = Binder::inference(&self.store);
        let mut h = g.constant(Tensor::new(vec![n, self.dim], data)?);
        let mask = vec![true; n];
        for layer in &self.layers {
            h = layer.forward(&mut g, &mut b, h, &mask)?;
        }
        Ok(g.value(h).clone())
    }

    /// Utterance target `y_text`.
    pub fn embed(&self, tokens: &TranscriptTokens) -> Result<Vec<f32>> {
        let ctx = self.contextual(tokens)?;
        let n = ctx.rows();
        let mut out = vec![0.0f32; self.dim];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(ctx.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f32);
        Ok(out)
    }

    pub fn embed_text(&self, transcript: &str) -> Result<Vec<f32>> {
        self.embed(&tokenize(transcript))
    }

    /// Parameter tensors of transformer layer `i`, in declaration order.
    pub fn layer_tensors(&self, i: usize) -> Vec<Tensor<f32>> {
        self.layers[i]
            .param_ids()
            .into_iter()
            .map(|id| self.store.get(id).value.clone())
            .collect()
    }
}

pub const LLD_WINDOW: usize = 400;
pub const LLD_HOP: usize = 160;
const FFT_SIZE: usize = 512;
const LOG_FLOOR: f64 = 1e-10;
/// Autocorrelation lag range: 400 Hz down to 50 Hz.
const MIN_LAG: usize = 40;
const MAX_LAG: usize = 320;
const PITCH_SCALE_HZ: f64 = 500.0;
/// Earliest peak within this fraction of the global maximum wins, which
/// keeps integer multiples of the period from being chosen.
const SUBHARMONIC_RATIO: f64 = 0.9;

/// 100 Hz low-level descriptors: `F` mel log-energies, log energy, zero
/// crossing rate, pitch (Hz/500) and voicing.
#[derive(Clone)]
pub struct AcousticTeacher {
    bands: usize,
    filterbank: Vec<Vec<(usize, f64)>>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for AcousticTeacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AcousticTeacher").field("bands", &self.bands).finish()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl AcousticTeacher {
    /// `dim` is the full descriptor width `F + 4`.
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 5 {
            return Err(Error::Config(format!(
                "acoustic target width must be at least 5, got {dim}"
            )));
        }
        let bands = dim - 4;
        let bins = FFT_SIZE / 2 + 1;
        let nyquist = crate::frontend::SAMPLE_RATE as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = nyquist / (bins - 1) as f64;
        let filterbank = (0..bands)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let window = (0..LLD_WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / LLD_WINDOW as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Ok(Self {
            bands,
            filterbank,
            window,
            fft,
        })
    }

    pub fn dim(&self) -> usize {
        self.bands + 4
    }

    /// Row count for `len` samples: frames are centred on multiples of the hop.
    pub fn rows(len: usize) -> usize {
        len / LLD_HOP + 1
    }

    /// Descriptor matrix at 100 Hz, `rows × (F + 4)`.
    pub fn lld(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        if samples.len() < LLD_WINDOW {
            return Err(Error::Input(format!(
                "{} samples is shorter than one {LLD_WINDOW}-sample analysis window",
                samples.len()
            )));
        }
        let rows = Self::rows(samples.len());
        let half = LLD_WINDOW / 2;
        let dim = self.dim();
        let mut out = Vec::with_capacity(rows * dim);
        let mut frame = vec![0.0f64; LLD_WINDOW];
        let mut spectrum = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for r in 0..rows {
            let start = (r * LLD_HOP) as i64 - half as i64;
            for (n, f) in frame.iter_mut().enumerate() {
                let i = start + n as i64;
                *f = if i >= 0 && (i as usize) < samples.len() {
                    samples[i as usize] as f64
                } else {
                    0.0
                };
            }
            spectrum.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for ((c, &x), &w) in spectrum.iter_mut().zip(&frame).zip(&self.window) {
                c.re = x * w;
            }
            self.fft.process(&mut spectrum);
            for filter in &self.filterbank {
                let e: f64 = filter.iter().map(|&(k, w)| w * spectrum[k].norm_sqr()).sum();
                out.push(e.max(LOG_FLOOR).ln() as f32);
            }
            let energy: f64 = frame.iter().zip(&self.window).map(|(x, w)| (x * w).powi(2)).sum();
            out.push(energy.max(LOG_FLOOR).ln() as f32);
            out.push(zero_crossing_rate(&frame) as f32);
            let (pitch, voicing) = pitch_and_voicing(&frame);
            out.push(pitch as f32);
            out.push(voicing as f32);
        }
        Tensor::new(vec![rows, dim], out)
    }
}

fn zero_crossing_rate(frame: &[f64]) -> f64 {
    let crossings = frame.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    crossings as f64 / (frame.len() - 1) as f64
}

/// Normalized autocorrelation `Σ x[n]x[n+τ] / √(Σx[n]² · Σx[n+τ]²)`.
pub fn normalized_autocorrelation(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (frame[i], frame[i + lag]);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    let denom = (xx * yy).sqrt();
    if denom > 0.0 {
        xy / denom
    } else {
        0.0
    }
}

/// Returns (pitch in Hz/500 clamped to [0,1], voicing in [0,1]).
fn pitch_and_voicing(frame: &[f64]) -> (f64, f64) {
    let max_lag = MAX_LAG.min(frame.len() - 2);
    let r: Vec<f64> = (MIN_LAG..=max_lag)
        .map(|lag| normalized_autocorrelation(frame, lag))
        .collect();
    let best = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return (0.0, 0.0);
    }
    let is_peak = |i: usize| {
        let left = i == 0 || r[i] >= r[i - 1];
        let right = i + 1 == r.len() || r[i] >= r[i + 1];
        left && right
    };
    let i = (0..r.len())
        .find(|&i| r[i] >= SUBHARMONIC_RATIO * best && is_peak(i))
        .unwrap_or(0);
    // Parabolic refinement of the peak position.
    let mut lag = (MIN_LAG + i) as f64;
    if i > 0 && i + 1 < r.len() {
        let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            lag += 0.5 * (a - c) / denom;
        }
    }
    let hz = crate::frontend::SAMPLE_RATE as f64 / lag;
    ((hz / PITCH_SCALE_HZ).clamp(0.0, 1.0), r[i].clamp(0.0, 1.0))
}

/// Averages consecutive row pairs (dropping an odd trailing row), then keeps
/// at most `frames` rows.
pub fn downsample_targets(lld: &Tensor<f32>, frames: usize) -> Result<Tensor<f32>> {
    if lld.rank() != 2 || lld.rows() < 2 {
        return Err(Error::Input(format!(
            "descriptor matrix needs at least 2 rows, got shape {:?}",
            lld.shape()
        )));
    }
    let cols = lld.cols();
    let rows = (lld.rows() / 2).min(frames);
    if rows == 0 {
        return Err(Error::Input("no frames to align targets with".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (a, b) = (lld.row(2 * r), lld.row(2 * r + 1));
        data.extend(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)));
    }
    Tensor::new(vec![rows, cols], data)
}
