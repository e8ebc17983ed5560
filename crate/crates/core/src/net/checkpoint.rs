//! Binary checkpoints.
//!
//! Layout (little endian): the magic `PUSEG1`, then length-prefixed
//! (`u32`) backbone kind and architecture strings, `u32` feature_dim,
//! `u32` entry count, and per entry a length-prefixed name, a `u64` value
//! count and that many `f64` values.

use std::fs;
use std::path::Path;

use super::{Backbone, MiniUnet, SegModel, MINI_UNET};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PUSEG1";

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

impl SegModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_str(&mut out, self.backbone.kind());
        put_str(&mut out, &self.backbone.architecture());
        out.extend_from_slice(&(self.feature_dim() as u32).to_le_bytes());
        let table = self.backbone.param_table();
        out.extend_from_slice(&(table.len() as u32 + 2).to_le_bytes());
        let params = self.backbone.params();
        for spec in &table {
            let values = params[spec.offset..spec.offset + spec.len].iter().map(|&v| f64::from(v));
            put_entry(&mut out, &format!("backbone.{}", spec.name), spec.len, values);
        }
        put_entry(&mut out, HEAD_WEIGHT, self.head_weights.len(), self.head_weights.iter().copied());
        put_entry(&mut out, HEAD_BIAS, 1, std::iter::once(self.head_bias));
        out
    }

    /// Decodes a checkpoint of the built-in backbone.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_with(bytes, |kind, arch| match kind {
            MINI_UNET => MiniUnet::from_architecture(arch).map(|b| Box::new(b) as Box<dyn Backbone>),
            other => Err(Error::Checkpoint(format!("unknown backbone kind `{other}`"))),
        })
    }

    /// Decodes a checkpoint, building the backbone with `factory(kind, architecture)`.
    pub fn from_bytes_with<F>(bytes: &[u8], factory: F) -> Result<Self>
    where
        F: Fn(&str, &str) -> Result<Box<dyn Backbone>>,
    {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing PUSEG1 header".into()));
        }
        let kind = r.string()?;
        let arch = r.string()?;
        let feature_dim = r.u32()? as usize;
        let mut backbone = factory(&kind, &arch)?;
        if backbone.feature_dim() != feature_dim {
            return Err(Error::Checkpoint(format!(
                "feature_dim {feature_dim} does not match backbone ({})",
                backbone.feature_dim()
            )));
        }
        let table = backbone.param_table();
        let n_entries = r.u32()? as usize;
        let mut head_weights = None;
        let mut head_bias = None;
        let mut filled = vec![false; table.len()];
        for _ in 0..n_entries {
            let name = r.string()?;
            let count = r.u64()? as usize;
            let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            match name.as_str() {
                HEAD_WEIGHT => head_weights = Some(values),
                HEAD_BIAS => head_bias = values.first().copied(),
                _ => {
                    let short = name.strip_prefix("backbone.").unwrap_or(&name);
                    let idx = table
                        .iter()
                        .position(|s| s.name == short)
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected entry `{name}`")))?;
                    let spec = &table[idx];
                    if spec.len != count {
                        return Err(Error::Checkpoint(format!("entry `{name}` has {count} values, expected {}", spec.len)));
                    }
                    let dst = &mut backbone.params_mut()[spec.offset..spec.offset + spec.len];
                    for (d, v) in dst.iter_mut().zip(values) {
                        *d = v as f32;
                    }
                    filled[idx] = true;
                }
            }
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Checkpoint(format!("missing entry `backbone.{}`", table[i].name)));
        }
        let head_weights = head_weights.ok_or_else(|| Error::Checkpoint("missing head.weight".into()))?;
        let head_bias = head_bias.ok_or_else(|| Error::Checkpoint("missing head.bias".into()))?;
        if head_weights.len() != feature_dim {
            return Err(Error::Checkpoint("head width does not match feature_dim".into()));
        }
        let mut model = SegModel::new(backbone);
        model.set_head(head_weights, head_bias);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, len: usize, values: impl Iterator<Item = f64>) {
    put_str(out, name);
    out.extend_from_slice(&(len as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_parameters() {
        let mut model = SegModel::new(Box::new(MiniUnet::with_widths([4, 6, 8], 3)));
        model.set_head(vec![0.5, -0.25, 1.0 / 3.0, 2.0], -0.125);
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..6], b"PUSEG1");
        let back = SegModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.backbone().params(), model.backbone().params());
        assert_eq!(back.head(), model.head());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corrupt_input() {
        let model = SegModel::new(Box::new(MiniUnet::with_widths([2, 2, 2], 0)));
        let bytes = model.to_bytes();
        assert!(SegModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SegModel::from_bytes(&bad).is_err());
    }
}
