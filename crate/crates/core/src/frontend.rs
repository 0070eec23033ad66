//! Raw waveform handling and the convolutional frame extractor.
//!
//! The extractor is seven convolutions with kernel widths `(10,3,3,3,3,2,2)`
//! and strides `(5,2,2,2,2,2,2)`: a total hop of 320 samples, i.e. one frame
//! every 20 ms at 16 kHz. Each layer uses `Same` padding (`ceil(len/stride)`
//! outputs), so a waveform of `n` samples yields `ceil(n / 320)` frames and any
//! multiple of the hop maps to exactly `n / 320` frames.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Binder, Graph, Padding, ParamStore, Real, Tensor, Var};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_RATE: u32 = 50;
/// Samples per output frame.
pub const HOP: usize = 320;
/// Shortest clip accepted in downstream mode.
pub const DOWNSTREAM_MIN_SECONDS: f64 = 1.0;
pub const DOWNSTREAM_MAX_SECONDS: f64 = 30.0;

pub const EXTRACTOR_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
pub const EXTRACTOR_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

/// Mono 16 kHz audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Reads a mono 16 kHz PCM16 RIFF/WAVE file, scaling samples by 1/32768.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.sample_rate != SAMPLE_RATE
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::Input(format!(
                "{}: expected mono 16 kHz PCM16, got {} ch / {} Hz / {} bit",
                path.display(),
                spec.channels,
                spec.sample_rate,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Self::new(samples)
    }

    /// Writes PCM16, rounding and clipping to the representable range.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }

    /// The waveform after a PCM16 write/read round trip.
    pub fn quantized(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|&s| (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as f32 / 32768.0)
            .collect();
        Self { samples }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Exact target length: random crop when longer, zero-pad the tail when shorter.
    Pretrain,
    /// Keep the first `target` seconds at most; pad to at least one second.
    Downstream,
}

/// A cropped or padded waveform; samples at or past `valid_samples` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Cropped {
    pub waveform: Waveform,
    pub valid_samples: usize,
}

pub fn crop_or_pad(
    w: &Waveform,
    target_seconds: f64,
    rng: &mut ChaCha8Rng,
    mode: CropMode,
) -> Result<Cropped> {
    if !(target_seconds > 0.0) {
        return Err(Error::Input(format!(
            "crop target must be positive, got {target_seconds}"
        )));
    }
    if w.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    let target = (target_seconds * SAMPLE_RATE as f64).round() as usize;
    let (start, keep, out_len) = match mode {
        CropMode::Pretrain => {
            if w.len() > target {
                (rng.random_range(0..=w.len() - target), target, target)
            } else {
                (0, w.len(), target)
            }
        }
        CropMode::Downstream => {
            let min = (DOWNSTREAM_MIN_SECONDS * SAMPLE_RATE as f64).round() as usize;
            let keep = w.len().min(target);
            (0, keep, keep.max(min))
        }
    };
    let mut samples = w.samples[start..start + keep].to_vec();
    samples.resize(out_len, 0.0);
    Ok(Cropped {
        waveform: Waveform { samples },
        valid_samples: keep,
    })
}

/// Frames produced for `len` input samples.
pub fn frame_count(len: usize) -> usize {
    EXTRACTOR_STRIDES.iter().fold(len, |l, &s| l.div_ceil(s))
}

/// Inclusive sample range (possibly extending past either end) seen by
/// output frame `j`.
pub fn receptive_field(j: usize) -> (i64, i64) {
    let (mut lo, mut hi) = (j as i64, j as i64);
    for (&k, &s) in EXTRACTOR_KERNELS.iter().zip(&EXTRACTOR_STRIDES).rev() {
        let pad = ((k - 1) / 2) as i64;
        lo = lo * s as i64 - pad;
        hi = hi * s as i64 - pad + k as i64 - 1;
    }
    (lo, hi)
}

/// A frame is valid unless at least half of its receptive field is padding
/// (samples past `valid_samples` or outside the signal).
pub fn frame_validity(len: usize, valid_samples: usize) -> Vec<bool> {
    (0..frame_count(len))
        .map(|j| {
            let (lo, hi) = receptive_field(j);
            let span = (hi - lo + 1) as f64;
            let real_lo = lo.max(0);
            let real_hi = hi.min(valid_samples as i64 - 1);
            let real = (real_hi - real_lo + 1).max(0) as f64;
            (span - real) / span < 0.5
        })
        .collect()
}

/// Frame-level representation at 50 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    /// `T × D`
    pub frames: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> FrameSequence<T> {
    pub fn new(frames: Tensor<T>, valid: Vec<bool>) -> Result<Self> {
        if frames.rank() != 2 || frames.rows() != valid.len() {
            return Err(Error::Shape {
                op: "frame_sequence",
                lhs: frames.shape().to_vec(),
                rhs: vec![valid.len()],
            });
        }
        Ok(Self { frames, valid })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn frame_rate(&self) -> u32 {
        FRAME_RATE
    }
}

/// Convolutional feature extractor: conv → layer norm → gelu per stage, then
/// a linear projection from the extractor channels to the model width.
#[derive(Clone, Debug)]
pub struct FrameExtractor {
    convs: Vec<crate::tensor::ParamId>,
    norms: Vec<LayerNorm>,
    projection: Linear,
}

impl FrameExtractor {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = 1;
        for (i, &k) in EXTRACTOR_KERNELS.iter().enumerate() {
            let std = 1.0 / ((k * c_in) as f64).sqrt();
            convs.push(store.insert(
                format!("extractor.conv{i}.weight"),
                crate::nn::normal(rng, &[k, c_in, channels], std),
                frozen,
            )?);
            norms.push(LayerNorm::new(store, &format!("extractor.norm{i}"), channels, frozen)?);
            c_in = channels;
        }
        let projection = Linear::new(store, "extractor.projection", channels, width, rng, frozen)?;
        Ok(Self {
            convs,
            norms,
            projection,
        })
    }

    /// Returns the `T × width` frame matrix on the graph.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<T>, samples: &[f32]) -> Result<Var> {
        if samples.len() < HOP {
            return Err(Error::Input(format!(
                "waveform of {} samples is shorter than one {HOP}-sample hop",
                samples.len()
            )));
        }
        let x = Tensor::new(
            vec![samples.len(), 1],
            samples.iter().map(|&s| T::lit(s as f64)).collect(),
        )?;
        let mut h = g.constant(x);
        for ((&w, norm), &stride) in self.convs.iter().zip(&self.norms).zip(&EXTRACTOR_STRIDES) {
            let wv = b.var(g, w);
            h = g.conv1d(h, wv, stride, Padding::Same)?;
            h = norm.forward(g, b, h)?;
            h = g.gelu(h)?;
        }
        self.projection.forward(g, b, h)
    }

    /// Inference-only extraction to a [`FrameSequence`].
    pub fn extract<T: Real>(&self, store: &ParamStore<T>, cropped: &Cropped) -> Result<FrameSequence<T>> {
        let mut g = Graph::new();
        let mut b = Binder::inference(store);
        let out = self.forward(&mut g, &mut b, cropped.waveform.samples())?;
        let valid = frame_validity(cropped.waveform.len(), cropped.valid_samples);
        FrameSequence::new(g.value(out).clone(), valid)
    }

    pub fn param_ids(&self) -> Vec<crate::tensor::ParamId> {
        let mut ids = Vec::new();
        for (&c, n) in self.convs.iter().zip(&self.norms) {
            ids.extend([c, n.gain, n.bias]);
        }
        ids.extend([self.projection.weight, self.projection.bias]);
        ids
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn wave(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f32 * 0.01).sin() * 0.5).collect()).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn crop_identity_when_lengths_match() {
        let w = wave(80_000);
        let c = crop_or_pad(&w, 5.0, &mut rng(1), CropMode::Pretrain).unwrap();
        assert_eq!(c.waveform, w);
        assert_eq!(c.valid_samples, 80_000);
    }

    #[test]
    fn crop_pads_short_input() {
        let w = wave(48_000);
        let c = crop_or_pad(&w, 5.0, &mut rng(1), CropMode::Pretrain).unwrap();
        assert_eq!(c.waveform.len(), 80_000);
        assert_eq!(c.valid_samples, 48_000);
        assert!(c.waveform.samples()[48_000..].iter().all(|&s| s == 0.0));
        let valid = frame_validity(c.waveform.len(), c.valid_samples);
        assert_eq!(valid.len(), 250);
        assert_eq!(valid.iter().filter(|&&v| v).count(), 150);
    }

    #[test]
    fn crop_offset_is_seed_deterministic() {
        let w = wave(128_000);
        let a = crop_or_pad(&w, 5.0, &mut rng(9), CropMode::Pretrain).unwrap();
        let b = crop_or_pad(&w, 5.0, &mut rng(9), CropMode::Pretrain).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.waveform.len(), 80_000);
        let offsets: std::collections::HashSet<usize> = (0..20)
            .map(|s| {
                let c = crop_or_pad(&w, 5.0, &mut rng(s), CropMode::Pretrain).unwrap();
                let first = c.waveform.samples()[0];
                w.samples().iter().position(|&x| x == first).unwrap()
            })
            .collect();
        assert!(offsets.len() > 1);
    }

    #[test]
    fn downstream_mode_limits() {
        let short = wave(4_000);
        let c = crop_or_pad(&short, DOWNSTREAM_MAX_SECONDS, &mut rng(0), CropMode::Downstream).unwrap();
        assert_eq!(c.waveform.len(), 16_000);
        assert_eq!(c.valid_samples, 4_000);

        let mid = wave(40_000);
        let c = crop_or_pad(&mid, DOWNSTREAM_MAX_SECONDS, &mut rng(0), CropMode::Downstream).unwrap();
        assert_eq!(c.waveform, mid);

        let long = wave(31 * 16_000);
        let c = crop_or_pad(&long, DOWNSTREAM_MAX_SECONDS, &mut rng(0), CropMode::Downstream).unwrap();
        assert_eq!(c.waveform.len(), 30 * 16_000);
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(matches!(Waveform::new(vec![]), Err(Error::Input(_))));
    }

    #[test]
    fn frame_count_schedule() {
        assert_eq!(frame_count(80_000), 250);
        assert_eq!(frame_count(16_000), 50);
        assert_eq!(frame_count(320), 1);
        for n in [320usize, 999, 16_001, 33_333] {
            let t = frame_count(n) as i64;
            assert!((t - (n / HOP) as i64).abs() <= 1, "{n}");
        }
        for k in 1..200 {
            assert_eq!(frame_count(2 * k * HOP), 2 * frame_count(k * HOP));
        }
    }

    #[test]
    fn receptive_field_spans_about_one_window() {
        let (lo, hi) = receptive_field(10);
        assert!(lo <= 10 * 320 && hi >= 11 * 320 - 1);
        assert!(hi - lo + 1 < 1000);
    }

    #[test]
    fn extractor_output_shape_and_determinism() {
        let mut store = ParamStore::<f32>::new();
        let ex = FrameExtractor::new(&mut store, 8, 16, &mut rng(3), false).unwrap();
        let c = Cropped {
            waveform: wave(16_000),
            valid_samples: 16_000,
        };
        let a = ex.extract(&store, &c).unwrap();
        let b = ex.extract(&store, &c).unwrap();
        assert_eq!(a.frames.shape(), &[50, 16]);
        assert_eq!(a, b);

        let zeros = Cropped {
            waveform: Waveform::new(vec![0.0; 3_200]).unwrap(),
            valid_samples: 3_200,
        };
        let z = ex.extract(&store, &zeros).unwrap();
        assert!(z.frames.is_finite());

        let too_short = Cropped {
            waveform: Waveform::new(vec![0.0; 100]).unwrap(),
            valid_samples: 100,
        };
        assert!(matches!(ex.extract(&store, &too_short), Err(Error::Input(_))));
    }

    #[test]
    fn wav_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = wave(1_000);
        w.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back, w.quantized());
    }
}
