//! INI-style configuration with `[model]`, `[pretrain]`, `[probe]` and
//! `[data]` sections. `preset = desk|paper` is applied before any other key,
//! wherever it appears.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::downstream::BankVariant;
use crate::error::{Error, Result};
use crate::model::{Freeze, ModelConfig, Preset, SemanticInit};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub crop_seconds: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub seed: u64,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub freeze: Freeze,
    /// Warm start: parameters are copied by name from this checkpoint.
    pub init_checkpoint: Option<PathBuf>,
}

impl PretrainConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            lambda: 1.0,
            crop_seconds: 5.0,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            steps: 300,
            seed: 0,
            checkpoint_every: 0,
            freeze: Freeze::default(),
            init_checkpoint: None,
        };
        match p {
            Preset::Desk => desk,
            Preset::Paper => Self {
                batch_size: 128,
                lr: 1e-5,
                steps: 200_000,
                checkpoint_every: 10_000,
                ..desk
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub seeds: usize,
    pub variant: BankVariant,
    /// Downstream clips are cut to this many seconds.
    pub max_seconds: f64,
}

impl ProbeConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 50,
            hidden: 256,
            seeds: 5,
            variant: BankVariant::Both,
            max_seconds: 30.0,
        };
        match p {
            Preset::Desk => desk,
            Preset::Paper => Self { lr: 1e-4, ..desk },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub val_fraction: f64,
    pub split_seed: u64,
    pub synth_noise: f64,
    pub synth_min_seconds: f64,
    pub synth_max_seconds: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            split_seed: 0,
            synth_noise: 0.02,
            synth_min_seconds: 1.5,
            synth_max_seconds: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn parse_value<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("cannot parse `{raw}` as {}", std::any::type_name::<T>()))
}

fn parse_bool(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{raw}`")),
    }
}

fn positive(v: f64, what: &str) -> std::result::Result<f64, String> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{what} must be positive and finite, got {v}"))
    }
}

fn at_least_one<T: FromStr + PartialOrd + From<u8>>(raw: &str) -> std::result::Result<T, String> {
    let v: T = parse_value(raw)?;
    if v < T::from(1u8) {
        return Err(format!("must be at least 1, got `{raw}`"));
    }
    Ok(v)
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        Self {
            model: ModelConfig::preset(p),
            pretrain: PretrainConfig::preset(p),
            probe: ProbeConfig::preset(p),
            data: DataConfig::default(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut entries = Vec::new();
        let mut section = String::new();
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        let mut preset = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "pretrain" | "probe" | "data") {
                    return Err(err(line_no, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key == "preset" {
                if !(section.is_empty() || section == "model") {
                    return Err(err(line_no, "preset belongs in [model] or before any section".into()));
                }
                if let Some(prev) = seen.insert((String::new(), key.clone()), line_no) {
                    return Err(err(line_no, format!("preset already set on line {prev}")));
                }
                preset = Some(value.parse::<Preset>().map_err(|e| err(line_no, e.to_string()))?);
                continue;
            }
            if section.is_empty() {
                return Err(err(line_no, format!("key `{key}` outside any section")));
            }
            if let Some(prev) = seen.insert((section.clone(), key.clone()), line_no) {
                return Err(err(line_no, format!("`{key}` already set on line {prev}")));
            }
            entries.push((line_no, section.clone(), key, value));
        }

        let mut cfg = Self::preset(preset.unwrap_or(Preset::Desk));
        let mut last_model_line = 1;
        for (line_no, section, key, value) in entries {
            cfg.set(&section, &key, &value).map_err(|m| err(line_no, m))?;
            if section == "model" {
                last_model_line = line_no;
            }
        }
        cfg.model.validate().map_err(|e| err(last_model_line, e.to_string()))?;
        if cfg.data.synth_min_seconds > cfg.data.synth_max_seconds {
            return Err(err(1, "synth_min_seconds exceeds synth_max_seconds".into()));
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let q = &mut self.probe;
        let d = &mut self.data;
        match (section, key) {
            ("model", "width") => m.width = at_least_one(v)?,
            ("model", "heads") => m.heads = at_least_one(v)?,
            ("model", "common_layers") => m.common_layers = parse_value(v)?,
            ("model", "semantic_layers") => m.semantic_layers = at_least_one(v)?,
            ("model", "acoustic_layers") => m.acoustic_layers = at_least_one(v)?,
            ("model", "adapter_kernel") => m.adapter_kernel = at_least_one(v)?,
            ("model", "adapter_factor") => m.adapter_factor = at_least_one(v)?,
            ("model", "acoustic_dim") => m.acoustic_dim = at_least_one(v)?,
            ("model", "semantic_dim") => m.semantic_dim = at_least_one(v)?,
            ("model", "extractor_width") => m.extractor_width = at_least_one(v)?,
            ("model", "semantic_init") => m.semantic_init = SemanticInit::from_str(v).map_err(|e| e.to_string())?,
            ("pretrain", "lambda") => {
                let l: f64 = parse_value(v)?;
                if !(l.is_finite() && l >= 0.0) {
                    return Err(format!("lambda must be a finite value ≥ 0, got {v}"));
                }
                p.lambda = l;
            }
            ("pretrain", "crop_seconds") => p.crop_seconds = positive(parse_value(v)?, "crop_seconds")?,
            ("pretrain", "batch_size") => p.batch_size = at_least_one(v)?,
            ("pretrain", "lr") => p.lr = positive(parse_value(v)?, "lr")?,
            ("pretrain", "weight_decay") => p.weight_decay = non_negative(v)?,
            ("pretrain", "steps") => p.steps = at_least_one::<u32>(v)? as u64,
            ("pretrain", "seed") => p.seed = parse_value(v)?,
            ("pretrain", "checkpoint_every") => p.checkpoint_every = parse_value(v)?,
            ("pretrain", "freeze_extractor") => p.freeze.extractor = parse_bool(v)?,
            ("pretrain", "freeze_common") => p.freeze.common = parse_bool(v)?,
            ("pretrain", "init_checkpoint") => {
                p.init_checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            ("probe", "lr") => q.lr = positive(parse_value(v)?, "lr")?,
            ("probe", "weight_decay") => q.weight_decay = non_negative(v)?,
            ("probe", "batch_size") => q.batch_size = at_least_one(v)?,
            ("probe", "epochs") => q.epochs = at_least_one(v)?,
            ("probe", "hidden") => q.hidden = at_least_one(v)?,
            ("probe", "seeds") => q.seeds = at_least_one(v)?,
            ("probe", "variant") => q.variant = BankVariant::from_str(v).map_err(|e| e.to_string())?,
            ("probe", "max_seconds") => {
                q.max_seconds = positive(parse_value(v)?, "max_seconds")?;
                if q.max_seconds < crate::frontend::DOWNSTREAM_MIN_SECONDS {
                    return Err("max_seconds must be at least 1".into());
                }
            }
            ("data", "val_fraction") => {
                let f: f64 = parse_value(v)?;
                if !(0.0..1.0).contains(&f) {
                    return Err(format!("val_fraction must lie in [0, 1), got {v}"));
                }
                d.val_fraction = f;
            }
            ("data", "split_seed") => d.split_seed = parse_value(v)?,
            ("data", "synth_noise") => d.synth_noise = non_negative(v)?,
            ("data", "synth_min_seconds") => d.synth_min_seconds = positive(parse_value(v)?, "synth_min_seconds")?,
            ("data", "synth_max_seconds") => d.synth_max_seconds = positive(parse_value(v)?, "synth_max_seconds")?,
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. Parsing it yields `self`.
    pub fn to_ini(&self) -> String {
        let m = &self.model;
        let p = &self.pretrain;
        let q = &self.probe;
        let d = &self.data;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "preset = {}", m.preset);
        let _ = writeln!(s, "width = {}", m.width);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "common_layers = {}", m.common_layers);
        let _ = writeln!(s, "semantic_layers = {}", m.semantic_layers);
        let _ = writeln!(s, "acoustic_layers = {}", m.acoustic_layers);
        let _ = writeln!(s, "adapter_kernel = {}", m.adapter_kernel);
        let _ = writeln!(s, "adapter_factor = {}", m.adapter_factor);
        let _ = writeln!(s, "acoustic_dim = {}", m.acoustic_dim);
        let _ = writeln!(s, "semantic_dim = {}", m.semantic_dim);
        let _ = writeln!(s, "extractor_width = {}", m.extractor_width);
        let _ = writeln!(s, "semantic_init = {}", m.semantic_init);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "lambda = {}", p.lambda);
        let _ = writeln!(s, "crop_seconds = {}", p.crop_seconds);
        let _ = writeln!(s, "batch_size = {}", p.batch_size);
        let _ = writeln!(s, "lr = {}", p.lr);
        let _ = writeln!(s, "weight_decay = {}", p.weight_decay);
        let _ = writeln!(s, "steps = {}", p.steps);
        let _ = writeln!(s, "seed = {}", p.seed);
        let _ = writeln!(s, "checkpoint_every = {}", p.checkpoint_every);
        let _ = writeln!(s, "freeze_extractor = {}", p.freeze.extractor);
        let _ = writeln!(s, "freeze_common = {}", p.freeze.common);
        let init = p.init_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "init_checkpoint = {init}");
        let _ = writeln!(s, "\n[probe]");
        let _ = writeln!(s, "lr = {}", q.lr);
        let _ = writeln!(s, "weight_decay = {}", q.weight_decay);
        let _ = writeln!(s, "batch_size = {}", q.batch_size);
        let _ = writeln!(s, "epochs = {}", q.epochs);
        let _ = writeln!(s, "hidden = {}", q.hidden);
        let _ = writeln!(s, "seeds = {}", q.seeds);
        let _ = writeln!(s, "variant = {}", q.variant);
        let _ = writeln!(s, "max_seconds = {}", q.max_seconds);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "val_fraction = {}", d.val_fraction);
        let _ = writeln!(s, "split_seed = {}", d.split_seed);
        let _ = writeln!(s, "synth_noise = {}", d.synth_noise);
        let _ = writeln!(s, "synth_min_seconds = {}", d.synth_min_seconds);
        let _ = writeln!(s, "synth_max_seconds = {}", d.synth_max_seconds);
        s
    }
}

fn non_negative(raw: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_value(raw)?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be finite and ≥ 0, got {raw}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Config> {
        Config::parse(s, "test.ini")
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_desk_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.model, ModelConfig::desk());
        assert_eq!(c.model.bank_size(), 5);
    }

    #[test]
    fn paper_preset_expands_before_overrides() {
        let c = parse("[model]\nwidth = 96\npreset = paper\n").unwrap();
        assert_eq!(c.model.width, 96);
        assert_eq!(c.model.common_layers, 6);
        assert_eq!(c.model.acoustic_dim, 256);
        assert_eq!(c.pretrain.lr, 1e-5);
        assert_eq!(c.pretrain.batch_size, 128);
        let c = parse("preset = paper\n").unwrap();
        assert_eq!(c.model.bank_size(), 13);
        assert_eq!(c.model.bank_width(), 1536);
    }

    #[test]
    fn constraint_violations_cite_lines() {
        assert_eq!(line_of(parse("# c\n[pretrain]\nlambda = -1\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("[model]\nwdth = 3\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("[model]\nwidth = x\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("[nope]\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("width = 3\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("[model]\nwidth = 8\nwidth = 8\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("[model]\nacoustic_layers = 3\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("[pretrain]\nbatch_size = 0\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("[model]\npreset = huge\n").unwrap_err()), 2);
    }

    #[test]
    fn lambda_zero_allowed_and_comments_ignored() {
        let c = parse("[pretrain]\nlambda = 0 # off\n[probe]\nvariant = semantic\n").unwrap();
        assert_eq!(c.pretrain.lambda, 0.0);
        assert_eq!(c.probe.variant, BankVariant::Semantic);
    }

    #[test]
    fn canonical_form_round_trips() {
        let mut c = Config::preset(Preset::Paper);
        c.pretrain.lr = 3.3e-4;
        c.pretrain.init_checkpoint = Some(PathBuf::from("/tmp/a.ckpt"));
        c.data.synth_noise = 0.1 + 0.2;
        c.probe.variant = BankVariant::Acoustic;
        assert_eq!(parse(&c.to_ini()).unwrap(), c);
        let d = Config::default();
        assert_eq!(parse(&d.to_ini()).unwrap(), d);
    }
}
