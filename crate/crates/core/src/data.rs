//! Manifests, deterministic batching and the synthetic emotional-speech corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::frontend::{Waveform, SAMPLE_RATE};

pub const MANIFEST_HEADER: &str = "id,source,label,transcript";

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    File(PathBuf),
    Synth { seed: u64, class: usize },
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(p) => write!(f, "file:{}", p.display()),
            Source::Synth { seed, class } => write!(f, "synth:{seed}:{class}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Unlabeled,
    Class(usize),
    /// Valence, arousal, dominance in `[1, 5]`.
    Attributes([f64; 3]),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Unlabeled => f.write_str("-"),
            Label::Class(c) => write!(f, "{c}"),
            Label::Attributes([v, a, d]) => write!(f, "{v}:{a}:{d}"),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "-" {
            return Ok(Label::Unlabeled);
        }
        if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("attribute label `{s}` needs three values v:a:d"));
            }
            let mut vad = [0.0; 3];
            for (slot, p) in vad.iter_mut().zip(&parts) {
                let v: f64 = p.parse().map_err(|_| format!("attribute `{p}` is not a number"))?;
                if !(1.0..=5.0).contains(&v) {
                    return Err(format!("attribute {v} outside [1, 5]"));
                }
                *slot = v;
            }
            return Ok(Label::Attributes(vad));
        }
        s.parse()
            .map(Label::Class)
            .map_err(|_| format!("label `{s}` is neither a class id, v:a:d nor -"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
    pub label: Label,
    pub transcript: String,
}

impl ManifestEntry {
    /// The transcript, generated from the seed for synthetic sources left blank.
    pub fn resolved_transcript(&self) -> String {
        match (&self.source, self.transcript.trim().is_empty()) {
            (Source::Synth { seed, class }, true) => synth_transcript(&SynthSpec::default(), *seed, *class),
            _ => self.transcript.clone(),
        }
    }

    pub fn load_audio(&self) -> Result<Waveform> {
        match &self.source {
            Source::File(path) => Waveform::read_wav(path),
            Source::Synth { seed, class } => {
                render_categorical(&SynthSpec::default(), *seed, *class, &self.resolved_transcript())
            }
        }
    }
}

fn parse_source(s: &str, base: &Path) -> std::result::Result<Source, String> {
    if let Some(path) = s.strip_prefix("file:") {
        if path.is_empty() {
            return Err("empty file path".into());
        }
        let p = Path::new(path);
        return Ok(Source::File(if p.is_absolute() { p.to_path_buf() } else { base.join(p) }));
    }
    if let Some(rest) = s.strip_prefix("synth:") {
        let (seed, class) = rest
            .split_once(':')
            .ok_or_else(|| format!("synth source `{s}` must be synth:<seed>:<class>"))?;
        let seed = seed.parse().map_err(|_| format!("bad synth seed `{seed}`"))?;
        let class: usize = class.parse().map_err(|_| format!("bad synth class `{class}`"))?;
        if class >= CLASS_PROFILES.len() {
            return Err(format!("synth class {class} exceeds the {} available profiles", CLASS_PROFILES.len()));
        }
        return Ok(Source::Synth { seed, class });
    }
    Err(format!("source `{s}` must start with file: or synth:"))
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let display = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: display.clone(),
        line,
        msg,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("bad header `{h}`, expected `{MANIFEST_HEADER}`"))),
        None => return Err(parse_err(1, "missing header".into())),
    }
    let mut entries = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let id = fields[0].trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(parse_err(line_no, format!("invalid id `{id}`")));
        }
        if let Some(prev) = first_seen.insert(id.to_string(), line_no) {
            return Err(parse_err(line_no, format!("duplicate id `{id}` (first on line {prev})")));
        }
        let source = parse_source(fields[1].trim(), base).map_err(|m| parse_err(line_no, m))?;
        let label = fields[2].trim().parse().map_err(|m| parse_err(line_no, m))?;
        entries.push(ManifestEntry {
            id: id.to_string(),
            source,
            label,
            transcript: fields[3].trim().to_string(),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Serializes entries; file sources are written relative to `dir` when possible.
pub fn format_manifest(entries: &[ManifestEntry], dir: &Path) -> Result<String> {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let source = match &e.source {
            Source::File(p) => format!("file:{}", p.strip_prefix(dir).unwrap_or(p).display()),
            s => s.to_string(),
        };
        for field in [&e.id, &source, &e.transcript] {
            if field.contains([',', '\n', '\r']) {
                return Err(Error::Input(format!("manifest field `{field}` contains a separator")));
            }
        }
        out.push_str(&format!("{},{},{},{}\n", e.id, source, e.label, e.transcript));
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    crate::checkpoint::write_atomic(path, format_manifest(entries, dir)?.as_bytes())
}

/// Mixes a seed with a stream index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Index batches for one epoch: shuffled by `(seed, epoch)`, short tail kept.
pub fn batch_iterator(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Deterministic split into (kept, held out). Class-labelled entries are
/// split per class so both sides stay balanced.
pub fn split_entries(entries: &[ManifestEntry], held_out: f64, seed: u64) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if !(0.0..1.0).contains(&held_out) {
        return Err(Error::Config(format!("held-out fraction {held_out} outside [0, 1)")));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let key = match e.label {
            Label::Class(c) => Some(c),
            _ => None,
        };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![false; entries.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * held_out).round() as usize;
        for &i in &idx[..k] {
            out[i] = true;
        }
    }
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for (e, o) in entries.iter().zip(out) {
        if o { held.push(e.clone()) } else { kept.push(e.clone()) }
    }
    Ok((kept, held))
}

/// Per-class acoustic profile: f0 band and amplitude-modulation rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassProfile {
    pub f0: (f64, f64),
    pub am_rate: f64,
}

pub const CLASS_PROFILES: [ClassProfile; 8] = [
    ClassProfile { f0: (100.0, 120.0), am_rate: 3.0 },
    ClassProfile { f0: (135.0, 160.0), am_rate: 4.5 },
    ClassProfile { f0: (175.0, 205.0), am_rate: 6.0 },
    ClassProfile { f0: (225.0, 265.0), am_rate: 7.5 },
    ClassProfile { f0: (85.0, 95.0), am_rate: 5.0 },
    ClassProfile { f0: (280.0, 320.0), am_rate: 3.5 },
    ClassProfile { f0: (125.0, 132.0), am_rate: 8.0 },
    ClassProfile { f0: (330.0, 380.0), am_rate: 2.0 },
];

pub const VOCABULARY: [&str; 24] = [
    "sun", "rain", "home", "road", "light", "stone", "river", "night", "bread", "music", "glass", "field",
    "storm", "garden", "voice", "paper", "window", "summer", "cloud", "letter", "forest", "winter", "silver", "market",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub profiles: Vec<ClassProfile>,
    /// Standard deviation of the additive white noise.
    pub noise: f64,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    pub vocabulary: Vec<String>,
    /// Probability that a word comes from the utterance's class-preferred subset.
    pub class_word_bias: f64,
    pub words: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::new(4).expect("default class count is valid")
    }
}

impl SynthSpec {
    pub fn new(classes: usize) -> Result<Self> {
        if !(2..=CLASS_PROFILES.len()).contains(&classes) {
            return Err(Error::Config(format!(
                "class count must be in 2..={}, got {classes}",
                CLASS_PROFILES.len()
            )));
        }
        Ok(Self {
            classes,
            profiles: CLASS_PROFILES[..classes].to_vec(),
            noise: 0.02,
            duration: (1.5, 2.5),
            vocabulary: VOCABULARY.iter().map(|w| w.to_string()).collect(),
            class_word_bias: 0.7,
            words: (3, 5),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.profiles.len() != self.classes {
            return Err(Error::Config("need at least 2 classes, one profile each".into()));
        }
        for p in &self.profiles {
            if !(p.f0.0 >= 50.0 && p.f0.1 <= 400.0 && p.f0.0 <= p.f0.1) {
                return Err(Error::Config(format!("f0 band {:?} outside 50..400 Hz", p.f0)));
            }
        }
        if !(self.duration.0 > 0.0 && self.duration.0 <= self.duration.1) {
            return Err(Error::Config(format!("bad duration range {:?}", self.duration)));
        }
        if self.vocabulary.is_empty() || self.words.0 == 0 || self.words.0 > self.words.1 {
            return Err(Error::Config("bad vocabulary or word-count range".into()));
        }
        Ok(())
    }

    fn class_words(&self, class: usize) -> Vec<&str> {
        let words: Vec<&str> = self
            .vocabulary
            .iter()
            .enumerate()
            .filter(|(i, _)| i % self.classes == class % self.classes)
            .map(|(_, w)| w.as_str())
            .collect();
        if words.is_empty() {
            self.vocabulary.iter().map(String::as_str).collect()
        } else {
            words
        }
    }
}

/// Class-biased pseudo-transcript, a pure function of `(seed, class)`.
pub fn synth_transcript(spec: &SynthSpec, seed: u64, class: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let n = rng.random_range(spec.words.0..=spec.words.1);
    let preferred = spec.class_words(class);
    (0..n)
        .map(|_| {
            if rng.random_bool(spec.class_word_bias) {
                preferred[rng.random_range(0..preferred.len())].to_string()
            } else {
                spec.vocabulary[rng.random_range(0..spec.vocabulary.len())].clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two formant frequencies derived from the word's spelling.
fn word_formants(word: &str) -> (f64, f64) {
    let h = word
        .to_lowercase()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    let u1 = (h & 0xffff) as f64 / 65535.0;
    let u2 = ((h >> 16) & 0xffff) as f64 / 65535.0;
    (300.0 + 600.0 * u1, 1000.0 + 1500.0 * u2)
}

fn spectral_envelope(hz: f64, formants: (f64, f64)) -> f64 {
    let peak = |centre: f64, bw: f64| (-0.5 * ((hz - centre) / bw).powi(2)).exp();
    0.05 + peak(formants.0, 120.0) + 0.7 * peak(formants.1, 180.0)
}

/// Voice parameters for one utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoiceParams {
    pub f0: f64,
    pub am_rate: f64,
    /// Scale of the voiced component (unit-energy harmonic sum).
    pub gain: f64,
    pub noise: f64,
    pub seconds: f64,
}

/// Harmonic source with per-word formant envelopes, amplitude modulation
/// and additive white noise.
pub fn render_voice(params: VoiceParams, transcript: &str, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let len = (params.seconds * SAMPLE_RATE as f64).round() as usize;
    if len == 0 {
        return Err(Error::Input("synthetic utterance has zero length".into()));
    }
    let words: Vec<&str> = transcript.split_whitespace().collect();
    let formants: Vec<(f64, f64)> = if words.is_empty() {
        vec![(500.0, 1500.0)]
    } else {
        words.iter().map(|w| word_formants(w)).collect()
    };
    let sr = SAMPLE_RATE as f64;
    let harmonics = ((4000.0 / params.f0).floor() as usize).max(1);
    let amps: Vec<Vec<f64>> = formants
        .iter()
        .map(|&f| {
            let a: Vec<f64> = (1..=harmonics).map(|k| spectral_envelope(k as f64 * params.f0, f)).collect();
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            a.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let segment = len as f64 / formants.len() as f64;
    let fade = 0.02 * sr;
    let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut samples = Vec::with_capacity(len);
    let mut current = vec![0.0; harmonics];
    for n in 0..len {
        let pos = n as f64 / segment;
        let w = (pos.floor() as usize).min(formants.len() - 1);
        // crossfade into the next word over the last `fade` samples of a segment
        let into_next = (n as f64 - (w as f64 + 1.0) * segment + fade) / fade;
        if into_next > 0.0 && w + 1 < formants.len() {
            let t = into_next.min(1.0);
            for (c, (a, b)) in current.iter_mut().zip(amps[w].iter().zip(&amps[w + 1])) {
                *c = (1.0 - t) * a + t * b;
            }
        } else {
            current.copy_from_slice(&amps[w]);
        }
        let t = n as f64 / sr;
        let base = std::f64::consts::TAU * params.f0 * t;
        let voiced: f64 = current
            .iter()
            .enumerate()
            .map(|(k, a)| a * (base * (k + 1) as f64 + phases[k]).sin())
            .sum();
        let am = 0.6 + 0.4 * (std::f64::consts::TAU * params.am_rate * t + am_phase).sin();
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * params.noise;
        samples.push((params.gain * am * voiced + noise).clamp(-1.0, 1.0) as f32);
    }
    Waveform::new(samples)
}

/// Categorical utterance: class sets the f0 band and modulation rate.
pub fn render_categorical(spec: &SynthSpec, seed: u64, class: usize, transcript: &str) -> Result<Waveform> {
    let profile = spec
        .profiles
        .get(class)
        .or_else(|| CLASS_PROFILES.get(class))
        .ok_or_else(|| Error::Input(format!("no synthetic profile for class {class}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let params = VoiceParams {
        f0: rng.random_range(profile.f0.0..=profile.f0.1),
        am_rate: profile.am_rate * rng.random_range(0.9..1.1),
        gain: rng.random_range(0.15..0.25),
        noise: spec.noise * rng.random_range(0.8..1.25),
        seconds: rng.random_range(spec.duration.0..=spec.duration.1),
    };
    render_voice(params, transcript, &mut rng)
}

/// Attribute utterance: f0 drives valence, modulation rate and loudness drive
/// arousal, noise level drives dominance. Returns the audio and `[v, a, d]`.
pub fn render_attributes(spec: &SynthSpec, seed: u64, transcript: &str) -> Result<(Waveform, [f64; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let (uv, ua, ud): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let params = VoiceParams {
        f0: 100.0 + 200.0 * uv,
        am_rate: 2.0 + 6.0 * ua,
        gain: 0.08 + 0.2 * ua,
        noise: 0.005 + 0.1 * ud,
        seconds: rng.random_range(spec.duration.0..=spec.duration.1),
    };
    let vad = [1.0 + 4.0 * uv, 1.0 + 4.0 * ua, 1.0 + 4.0 * ud];
    Ok((render_voice(params, transcript, &mut rng)?, vad))
}

/// Files written by [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub all: Vec<ManifestEntry>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub pairs: Vec<ManifestEntry>,
}

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.2;
pub const SIMILARITY_PAIRS: usize = 100;

/// Writes `wav/*.wav`, `manifest.csv`, `train.csv`/`val.csv`/`test.csv` and a
/// `pairs.csv` of same-class utterance pairs (consecutive rows form a pair;
/// ids starting `same` share a transcript, ids starting `diff` do not).
pub fn generate_corpus(spec: &SynthSpec, n: usize, seed: u64, out: &Path, attributes: bool) -> Result<Corpus> {
    spec.validate()?;
    if n < spec.classes {
        return Err(Error::Config(format!("need at least {} utterances, got {n}", spec.classes)));
    }
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let width = n.to_string().len().max(4);
    let mut all = Vec::with_capacity(n);
    for i in 0..n {
        let utt_seed = derive_seed(seed, 1000 + i as u64);
        let class = i % spec.classes;
        let id = format!("utt{i:0width$}");
        let transcript = synth_transcript(spec, utt_seed, class);
        let (wave, label) = if attributes {
            let (w, vad) = render_attributes(spec, utt_seed, &transcript)?;
            let vad = vad.map(|v| (v * 1e4).round() / 1e4);
            (w, Label::Attributes(vad))
        } else {
            (render_categorical(spec, utt_seed, class, &transcript)?, Label::Class(class))
        };
        let path = wav_dir.join(format!("{id}.wav"));
        wave.write_wav(&path)?;
        all.push(ManifestEntry {
            id,
            source: Source::File(path),
            label,
            transcript,
        });
    }
    let (rest, test) = split_entries(&all, TEST_FRACTION, derive_seed(seed, 10))?;
    let (train, val) = split_entries(&rest, VAL_FRACTION, derive_seed(seed, 11))?;
    let pairs = similarity_pairs(spec, SIMILARITY_PAIRS, derive_seed(seed, 12));
    for (name, entries) in [("manifest.csv", &all), ("train.csv", &train), ("val.csv", &val), ("test.csv", &test), ("pairs.csv", &pairs)] {
        write_manifest(entries, out.join(name))?;
    }
    Ok(Corpus {
        all,
        train,
        val,
        test,
        pairs,
    })
}

/// Same-class synthetic pairs: `n` sharing a transcript, `n` with different
/// transcripts. Sources are `synth:` so no audio files are needed.
pub fn similarity_pairs(spec: &SynthSpec, n: usize, seed: u64) -> Vec<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * n);
    for kind in ["same", "diff"] {
        for i in 0..n {
            let class = i % spec.classes;
            let (sa, sb): (u64, u64) = (rng.random(), rng.random());
            let ta = synth_transcript(spec, sa, class);
            let mut tb = if kind == "same" { ta.clone() } else { synth_transcript(spec, sb, class) };
            let mut bump = 0u64;
            while kind == "diff" && tb == ta {
                bump += 1;
                tb = synth_transcript(spec, sb.wrapping_add(bump), class);
            }
            for (suffix, s, t) in [("a", sa, ta), ("b", sb, tb)] {
                out.push(ManifestEntry {
                    id: format!("{kind}{i:04}{suffix}"),
                    source: Source::Synth { seed: s, class },
                    label: Label::Class(class),
                    transcript: t,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teachers::AcousticTeacher;

    fn parse(text: &str) -> Result<Vec<ManifestEntry>> {
        parse_manifest(text, Path::new("/data/m.csv"))
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse("id,source,label,transcript\n").unwrap().is_empty());
    }

    #[test]
    fn manifest_fields() {
        let m = parse(
            "id,source,label,transcript\na,file:x/a.wav,2,hello there\nb,synth:7:2,-,\nc,file:/abs/c.wav,1.5:3:4.25,\n",
        )
        .unwrap();
        assert_eq!(m[0].source, Source::File(PathBuf::from("/data/x/a.wav")));
        assert_eq!(m[0].label, Label::Class(2));
        assert_eq!(m[0].transcript, "hello there");
        assert_eq!(m[1].source, Source::Synth { seed: 7, class: 2 });
        assert_eq!(m[1].label, Label::Unlabeled);
        assert_eq!(m[2].source, Source::File(PathBuf::from("/abs/c.wav")));
        assert_eq!(m[2].label, Label::Attributes([1.5, 3.0, 4.25]));
        // synth sources resolve without files
        let w = m[1].load_audio().unwrap();
        assert!(w.len() > 16_000);
        assert!(!m[1].resolved_transcript().is_empty());
    }

    #[test]
    fn manifest_errors_cite_lines() {
        match parse("id,source,label,transcript\na,synth:1:0,0,\nb,synth:2:0,0,\na,synth:3:0,0,\n") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("line 2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("id,src,label,transcript\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("id,source,label,transcript\na,synth:1:0,0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("id,source,label,transcript\na,http:x,0,\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("id,source,label,transcript\na,synth:1:0,9:1:1,\n"), Err(Error::Parse { line: 2, .. })));
        assert!(read_manifest("/nonexistent/m.csv").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                id: "x".into(),
                source: Source::File(dir.path().join("wav/x.wav")),
                label: Label::Attributes([1.0, 2.5, 5.0]),
                transcript: "a b".into(),
            },
            ManifestEntry {
                id: "y".into(),
                source: Source::Synth { seed: 3, class: 1 },
                label: Label::Unlabeled,
                transcript: String::new(),
            },
        ];
        let path = dir.path().join("m.csv");
        write_manifest(&entries, &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("file:wav/x.wav"));
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn batching_rules() {
        let sizes: Vec<usize> = batch_iterator(5, 2, 0, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert_eq!(batch_iterator(10, 3, 4, 2).unwrap(), batch_iterator(10, 3, 4, 2).unwrap());
        let first = batch_iterator(10, 3, 4, 0).unwrap()[0].clone();
        let differing = (1..=100).filter(|&e| batch_iterator(10, 3, 4, e).unwrap()[0] != first).count();
        assert!(differing >= 95);
        let mut all: Vec<usize> = batch_iterator(10, 3, 4, 7).unwrap().concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_iterator(3, 0, 0, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let entries: Vec<ManifestEntry> = (0..40)
            .map(|i| ManifestEntry {
                id: format!("u{i}"),
                source: Source::Synth { seed: i, class: (i % 4) as usize },
                label: Label::Class((i % 4) as usize),
                transcript: String::new(),
            })
            .collect();
        let (a, b) = split_entries(&entries, 0.2, 1).unwrap();
        assert_eq!((a.len(), b.len()), (32, 8));
        for c in 0..4 {
            assert_eq!(b.iter().filter(|e| e.label == Label::Class(c)).count(), 2);
        }
        assert_eq!(split_entries(&entries, 0.2, 1).unwrap().1, b);
    }

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let spec = SynthSpec {
            duration: (0.5, 0.6),
            ..SynthSpec::new(3).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c1 = generate_corpus(&spec, 10, 5, d1.path(), false).unwrap();
        generate_corpus(&spec, 10, 5, d2.path(), false).unwrap();
        for name in ["manifest.csv", "train.csv", "val.csv", "test.csv", "pairs.csv", "wav/utt0003.wav"] {
            assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap(), "{name}");
        }
        let counts: Vec<usize> = (0..3).map(|c| c1.all.iter().filter(|e| e.label == Label::Class(c)).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(c1.train.len() + c1.val.len() + c1.test.len(), 10);
        // files load back as the quantized synthesis
        let e = &c1.all[3];
        let direct = render_categorical(&spec, derive_seed(5, 1003), 0, &e.transcript).unwrap();
        assert_eq!(e.load_audio().unwrap(), direct.quantized());
        assert!(generate_corpus(&spec, 2, 5, d1.path(), false).is_err());
    }

    #[test]
    fn pairs_share_class_and_transcript_rule() {
        let spec = SynthSpec::default();
        let pairs = similarity_pairs(&spec, 10, 3);
        assert_eq!(pairs.len(), 40);
        for p in pairs.chunks(2) {
            assert_eq!(p[0].label, p[1].label);
            let same = p[0].id.starts_with("same");
            assert_eq!(same, p[0].transcript == p[1].transcript);
        }
    }

    fn lld_means(w: &Waveform, t: &AcousticTeacher) -> Vec<f64> {
        let m = t.lld(w.samples()).unwrap();
        let voiced: Vec<usize> = (0..m.rows()).filter(|&r| m.row(r)[15] > 0.5).collect();
        (0..m.cols())
            .map(|c| voiced.iter().map(|&r| m.row(r)[c] as f64).sum::<f64>() / voiced.len().max(1) as f64)
            .collect()
    }

    #[test]
    fn pitch_proxy_separates_classes() {
        let spec = SynthSpec::default();
        let t = AcousticTeacher::new(16).unwrap();
        let mut correct = 0;
        let n = 200;
        for i in 0..n {
            let class = i % 4;
            let seed = derive_seed(77, i as u64);
            let w = render_categorical(&spec, seed, class, &synth_transcript(&spec, seed, class)).unwrap();
            let hz = lld_means(&w, &t)[14] * 500.0;
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let d = |c: usize| (hz - 0.5 * (spec.profiles[c].f0.0 + spec.profiles[c].f0.1)).abs();
                    d(a).partial_cmp(&d(b)).unwrap()
                })
                .unwrap();
            correct += (nearest == class) as usize;
        }
        assert!(correct as f64 / n as f64 > 0.9, "{correct}/{n}");
    }
}
