//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TDRCKPT\0"
//! version      u32
//! depth        u32
//! channels     u32
//! downsampling u32
//! stage        u32 length + UTF-8 bytes
//! step         u64
//! decoder kind u8       0 none, 1 reconstruction, 2 deraining, 3 recognition
//! entry count  u32
//! entries      name (u32 length + UTF-8), ndim u32, dims u32 x ndim,
//!              values f32 x prod(dims)
//! ```
//!
//! Encoder entries are prefixed `encoder.`, decoder entries `decoder.`.

use std::io::{Read, Write};
use std::path::Path;

use super::models::{ArchDescriptor, DecoderKind, DecoderModel, EncoderModel};
use super::params::ParamStore;
use super::{NetError, Result};

const MAGIC: &[u8; 8] = b"TDRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Serialized state of one encoder and, optionally, one decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub stage: String,
    pub step: u64,
    pub encoder: ParamStore<f32>,
    pub decoder: Option<(DecoderKind, ParamStore<f32>)>,
}

fn kind_code(kind: Option<DecoderKind>) -> u8 {
    match kind {
        None => 0,
        Some(DecoderKind::Reconstruction) => 1,
        Some(DecoderKind::Deraining) => 2,
        Some(DecoderKind::Recognition) => 3,
    }
}

fn kind_from_code(code: u8) -> Result<Option<DecoderKind>> {
    Ok(match code {
        0 => None,
        1 => Some(DecoderKind::Reconstruction),
        2 => Some(DecoderKind::Deraining),
        3 => Some(DecoderKind::Recognition),
        other => return Err(NetError::Checkpoint(format!("unknown decoder kind code {other}"))),
    })
}

impl Checkpoint {
    pub fn new(
        stage: impl Into<String>,
        step: u64,
        encoder: &EncoderModel<f32>,
        decoder: Option<&DecoderModel<f32>>,
    ) -> Self {
        Self {
            arch: *encoder.arch(),
            stage: stage.into(),
            step,
            encoder: encoder.params().clone(),
            decoder: decoder.map(|d| (d.kind(), d.params().clone())),
        }
    }

    pub fn encoder_model(&self) -> Result<EncoderModel<f32>> {
        EncoderModel::from_params(self.arch, self.encoder.clone())
    }

    pub fn decoder_model(&self) -> Result<DecoderModel<f32>> {
        let (kind, params) = self
            .decoder
            .as_ref()
            .ok_or_else(|| NetError::Checkpoint(format!("{} checkpoint holds no decoder", self.stage)))?;
        DecoderModel::from_params(*kind, self.arch, params.clone())
    }

    pub fn decoder_kind(&self) -> Option<DecoderKind> {
        self.decoder.as_ref().map(|(k, _)| *k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.arch.depth, self.arch.base_channels, self.arch.downsampling] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        write_str(&mut out, &self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.push(kind_code(self.decoder_kind()));
        let decoder_entries = self.decoder.as_ref().map(|(_, p)| p.len()).unwrap_or(0);
        out.extend_from_slice(&((self.encoder.len() + decoder_entries) as u32).to_le_bytes());
        let mut write_store = |prefix: &str, store: &ParamStore<f32>| {
            for p in store.iter() {
                write_str(&mut out, &format!("{prefix}.{}", p.name));
                out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
                for &d in &p.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in &p.value {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        write_store("encoder", &self.encoder);
        if let Some((_, store)) = &self.decoder {
            write_store("decoder", store);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NetError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let arch = ArchDescriptor {
            depth: r.u32()? as usize,
            base_channels: r.u32()? as usize,
            downsampling: r.u32()? as usize,
        };
        arch.validate()
            .map_err(|e| NetError::Checkpoint(format!("invalid architecture descriptor: {e}")))?;
        let stage = r.string()?;
        let step = r.u64()?;
        let kind = kind_from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        let mut encoder = ParamStore::new();
        let mut decoder = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (store, local) = if let Some(rest) = name.strip_prefix("encoder.") {
                (&mut encoder, rest)
            } else if let Some(rest) = name.strip_prefix("decoder.") {
                (&mut decoder, rest)
            } else {
                return Err(NetError::Checkpoint(format!("entry {name} has no network prefix")));
            };
            store.add(local, shape, values)?;
        }
        if r.pos != bytes.len() {
            return Err(NetError::Checkpoint("trailing bytes after last entry".into()));
        }
        let decoder = match kind {
            Some(k) => Some((k, decoder)),
            None if decoder.is_empty() => None,
            None => return Err(NetError::Checkpoint("decoder entries without a decoder kind".into())),
        };
        let ckpt = Self {
            arch,
            stage,
            step,
            encoder,
            decoder,
        };
        // Architecture check before the weights are accepted.
        ckpt.encoder_model()?;
        if ckpt.decoder.is_some() {
            ckpt.decoder_model()?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| NetError::Io(path.to_path_buf(), e))?;
        f.write_all(&self.to_bytes()).map_err(|e| NetError::Io(path.to_path_buf(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NetError::Io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and rejects checkpoints whose descriptor differs from `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ArchDescriptor) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.arch != expected {
            return Err(NetError::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {expected:?}",
                ckpt.arch
            )));
        }
        Ok(ckpt)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Checkpoint("unexpected end of checkpoint data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NetError::Checkpoint("entry name is not UTF-8".into()))
    }
}
