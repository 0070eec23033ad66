//! Binary tensor container.
//!
//! ```text
//! "CARE" | u32 version | u32 len, config echo (UTF-8) | u32 count
//! count × ( u16 len, name | u8 rank | rank × u32 dim | f32 data )
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Frozen parameters carry a
//! `.frozen` name suffix.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{AdamW, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CARE";
pub const VERSION: u32 = 1;
pub const FROZEN_SUFFIX: &str = ".frozen";
const STEP_TENSOR: &str = "optim.step";
const MOMENT_M: &str = "adamw.m.";
const MOMENT_V: &str = "adamw.v.";
/// Tensors under this prefix are run metadata, not parameters.
pub const META_PREFIX: &str = "meta.";
/// Largest step count an f32 holds exactly.
const MAX_STEP: u64 = 1 << 24;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config_echo: impl Into<String>) -> Self {
        Self {
            config_echo: config_echo.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let echo = self.config_echo.as_bytes();
        out.extend_from_slice(&u32::try_from(echo.len()).map_err(|_| malformed("config echo too long"))?.to_le_bytes());
        out.extend_from_slice(echo);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(malformed(&format!("duplicate tensor name `{name}`")).into());
            }
            let len = u16::try_from(name.len()).map_err(|_| malformed("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.rank()).map_err(|_| malformed("tensor rank too large"))?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| malformed("extent too large"))?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if buf.len() < 12 {
            return Err(CheckpointError::Truncated("header"));
        }
        let body_end = buf.len() - 4;
        let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&buf[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader {
            buf: &buf[..body_end],
            pos: r.pos,
        };
        let echo_len = r.u32("config echo length")? as usize;
        let config_echo = std::str::from_utf8(r.take(echo_len, "config echo")?)
            .map_err(|_| malformed("config echo is not UTF-8"))?
            .to_string();
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| malformed("tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(malformed(&format!("duplicate tensor name `{name}`")));
            }
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor shape").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| malformed("tensor too large"))?;
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| malformed("tensor too large"))?, "tensor data")?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| malformed(&format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != r.buf.len() {
            return Err(malformed("trailing bytes after last tensor"));
        }
        Ok(Self { config_echo, tensors })
    }

    /// Atomic write: a temporary sibling is written, synced, then renamed.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&buf)?)
    }

    /// Adds every parameter, suffixing frozen ones.
    pub fn push_params(&mut self, store: &ParamStore<f32>) {
        for (_, p) in store.iter() {
            let name = if p.frozen {
                format!("{}{FROZEN_SUFFIX}", p.name)
            } else {
                p.name.clone()
            };
            self.push(name, p.value.clone());
        }
    }

    /// Adds the optimizer step counter and moments for parameters that have them.
    pub fn push_optimizer(&mut self, store: &ParamStore<f32>, opt: &AdamW<f32>) -> Result<()> {
        let step = opt.step_count();
        if step > MAX_STEP {
            return Err(Error::Contract(format!("step count {step} is not representable")));
        }
        self.push(STEP_TENSOR, Tensor::scalar(step as f32));
        for (id, p) in store.iter() {
            if let Some((m, v)) = opt.moments(id) {
                self.push(format!("{MOMENT_M}{}", p.name), m.clone());
                self.push(format!("{MOMENT_V}{}", p.name), v.clone());
            }
        }
        Ok(())
    }

    /// Parameters (with frozen flags recovered from names), in file order.
    pub fn params(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if name == STEP_TENSOR
                || name.starts_with(MOMENT_M)
                || name.starts_with(MOMENT_V)
                || name.starts_with(META_PREFIX)
            {
                continue;
            }
            let (base, frozen) = match name.strip_suffix(FROZEN_SUFFIX) {
                Some(base) => (base, true),
                None => (name.as_str(), false),
            };
            store
                .insert(base, t.clone(), frozen)
                .map_err(|_| malformed(&format!("parameter `{base}` stored twice")))?;
        }
        Ok(store)
    }

    /// Optimizer state aligned with `store`, if the checkpoint carries one.
    pub fn optimizer(&self, store: &ParamStore<f32>, config: crate::tensor::AdamWConfig) -> Result<Option<AdamW<f32>>> {
        let Some(step) = self.get(STEP_TENSOR) else {
            return Ok(None);
        };
        let mut moments = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let m = self.get(&format!("{MOMENT_M}{}", p.name));
            let v = self.get(&format!("{MOMENT_V}{}", p.name));
            moments.push(match (m, v) {
                (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => {
                    Some((m.clone(), v.clone()))
                }
                (None, None) => None,
                _ => return Err(malformed(&format!("optimizer moments for `{}` are inconsistent", p.name)).into()),
            });
        }
        let mut opt = AdamW::new(config, store.len());
        opt.restore(step.item() as u64, moments)?;
        Ok(Some(opt))
    }
}

fn malformed(msg: &str) -> CheckpointError {
    CheckpointError::Malformed(msg.to_string())
}

/// Write-to-temp-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
