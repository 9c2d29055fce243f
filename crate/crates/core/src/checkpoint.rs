//! Binary weight checkpoint format.
//!
//! Layout: magic bytes `MTPV1`, seven little-endian u32 header fields in
//! [`ModelConfig`] declaration order, then one block per tensor as
//! `(name_len: u16, name: UTF-8, count: u64, data: f32 little-endian)`.
//! Weights are stored at 32-bit precision and widened exactly to f64 on
//! load, so load-then-save is a byte identity.

use std::fs;
use std::path::Path;

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::mtp::MtpCascade;

pub const MAGIC: &[u8; 5] = b"MTPV1";

/// A parsed checkpoint: config header plus ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<f64>)>,
}

fn header_fields(c: &ModelConfig) -> [usize; 7] {
    [c.vocab_size, c.dim, c.n_layers, c.n_heads, c.ffn_dim, c.max_seq_len, c.n_mtp_modules]
}

/// Serialize a checkpoint to bytes.
pub fn encode(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for field in header_fields(&cp.config) {
        let v = u32::try_from(field)
            .map_err(|_| Error::Format(format!("config field {field} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (name, data) in &cp.tensors {
        let nb = name.as_bytes();
        let nlen = u16::try_from(nb.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&nlen.to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected {MAGIC:?}")));
    }
    let mut fields = [0usize; 7];
    for f in fields.iter_mut() {
        *f = cur.u32_le()? as usize;
    }
    let config = ModelConfig {
        vocab_size: fields[0],
        dim: fields[1],
        n_layers: fields[2],
        n_heads: fields[3],
        ffn_dim: fields[4],
        max_seq_len: fields[5],
        n_mtp_modules: fields[6],
    };
    let mut tensors = Vec::new();
    while cur.pos < bytes.len() {
        let nlen = cur.u16_le()? as usize;
        let name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let count = cur.u64_le()? as usize;
        let raw = cur.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, data));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    Ok(fs::write(path, encode(cp)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Bundle a backbone (and optionally its cascade) into checkpoint form.
pub fn pack(backbone: &Backbone, cascade: Option<&MtpCascade>) -> Checkpoint {
    let mut tensors: Vec<(String, Vec<f64>)> =
        backbone.params().into_iter().map(|(n, d)| (n, d.to_vec())).collect();
    if let Some(c) = cascade {
        tensors.extend(c.params().into_iter().map(|(n, d)| (n, d.to_vec())));
    }
    Checkpoint { config: backbone.config.clone(), tensors }
}

/// Rebuild models from a checkpoint. The cascade is returned only when
/// `mtp.*` tensors are present, in which case the set must be complete.
pub fn unpack(cp: &Checkpoint) -> Result<(Backbone, Option<MtpCascade>)> {
    cp.config.validate()?;
    let mut backbone = Backbone::zeros_like(&cp.config);
    let has_mtp = cp.tensors.iter().any(|(n, _)| n.starts_with("mtp."));
    let mut cascade = has_mtp.then(|| {
        MtpCascade::init(cp.config.dim, cp.config.ffn_dim, cp.config.n_heads, cp.config.n_mtp_modules, 0)
    });

    let mut expected: Vec<(String, &mut Vec<f64>)> = Vec::new();
    for (name, slot, _) in backbone.params_mut() {
        expected.push((name, slot));
    }
    if let Some(c) = cascade.as_mut() {
        for (name, slot, _) in c.params_mut() {
            expected.push((name, slot));
        }
    }

    if cp.tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model shape wants {}",
            cp.tensors.len(),
            expected.len()
        )));
    }
    for ((got_name, got_data), (want_name, slot)) in cp.tensors.iter().zip(expected) {
        if *got_name != want_name {
            return Err(Error::Format(format!(
                "tensor order mismatch: found {got_name}, expected {want_name}"
            )));
        }
        if got_data.len() != slot.len() {
            return Err(Error::Format(format!(
                "tensor {got_name} has {} elements, expected {}",
                got_data.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(got_data);
    }
    Ok((backbone, cascade))
}

/// Round every weight through 32-bit precision, matching what a save/load
/// cycle would produce. Applied before saving so the in-memory model and the
/// checkpointed one behave identically from then on.
pub fn snap_backbone(b: &mut Backbone) {
    for (_, data, _) in b.params_mut() {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

pub fn snap_cascade(c: &mut MtpCascade) {
    for (_, data, _) in c.params_mut() {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Snap, pack, and write in one step; returns the snapped models' hash pair.
pub fn save_model(path: &Path, backbone: &mut Backbone, cascade: Option<&mut MtpCascade>) -> Result<()> {
    snap_backbone(backbone);
    let cascade = cascade.map(|c| {
        snap_cascade(c);
        &*c
    });
    save_checkpoint(path, &pack(backbone, cascade))
}
