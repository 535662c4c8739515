//! Binary model container.
//!
//! ```text
//! magic      4 bytes  "MKGE"
//! version    u32
//! input_size u32, in_channels u32, conv_count u32
//! per conv   out_channels u32, kernel u32, stride u32
//! hidden     u32, output_dim u32
//! tag        u32 length + UTF-8 bytes
//! weights    u64 count + count x f32
//! ```
//! All integers and floats little-endian. No trailing bytes.

use std::path::Path;

use super::network::{ArchConfig, ConvSpec};
use super::RegressorModel;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"MKGE";
pub const MODEL_VERSION: u32 = 1;

const MAX_CONVS: u32 = 64;
const MAX_TAG: u32 = 4096;

impl RegressorModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.arch();
        let mut out = Vec::with_capacity(64 + self.n_params() * 4);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(u32::from_le_bytes(MODEL_MAGIC));
        put(MODEL_VERSION);
        put(arch.input_size as u32);
        put(arch.in_channels as u32);
        put(arch.convs.len() as u32);
        for c in &arch.convs {
            put(c.out_channels as u32);
            put(c.kernel as u32);
            put(c.stride as u32);
        }
        put(arch.hidden as u32);
        put(arch.output_dim as u32);
        put(self.tag().len() as u32);
        out.extend_from_slice(self.tag().as_bytes());
        out.extend_from_slice(&(self.n_params() as u64).to_le_bytes());
        for w in self.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let input_size = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let n_convs = r.u32()?;
        if n_convs > MAX_CONVS {
            return Err(Error::CorruptModel(format!("implausible conv count {n_convs}")));
        }
        let convs = (0..n_convs)
            .map(|_| {
                Ok(ConvSpec {
                    out_channels: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                    stride: r.u32()? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = r.u32()? as usize;
        let output_dim = r.u32()? as usize;
        let tag_len = r.u32()?;
        if tag_len > MAX_TAG {
            return Err(Error::CorruptModel(format!("implausible tag length {tag_len}")));
        }
        let tag = String::from_utf8(r.take(tag_len as usize)?.to_vec())
            .map_err(|_| Error::CorruptModel("tag is not UTF-8".into()))?;
        let count = r.u64()?;
        let remaining = (bytes.len() - r.pos) as u64;
        if count.checked_mul(4) != Some(remaining) {
            return Err(Error::CorruptModel(format!(
                "{count} weights declared, {remaining} bytes remain"
            )));
        }
        let weights = r
            .take(remaining as usize)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let arch = ArchConfig {
            input_size,
            in_channels,
            convs,
            hidden,
            output_dim,
        };
        RegressorModel::from_parts(arch, weights, tag).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::CorruptModel(m),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptModel(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_model(model: &RegressorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RegressorModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RegressorModel::from_bytes(&bytes)
}
