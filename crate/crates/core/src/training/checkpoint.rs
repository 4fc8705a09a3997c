//! Binary checkpoints: parameters, vocabulary and a JSON manifest in one file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CTXM" | u32 version | u64 n | n bytes manifest JSON
//! u64 n | n bytes vocabulary text
//! u32 count | count × (u32 n, name bytes, u32 rank, rank × u64 dim, f64 data)
//! ```
//!
//! Floats are stored bit-exactly, so a round trip reproduces predictions to
//! the last bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DevPoint;
use crate::autograd::{ParameterSet, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

const MAGIC: &[u8; 4] = b"CTXM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Extraction,
    Title,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    /// Training configuration as recorded by the trainer.
    pub training: serde_json::Value,
    pub vocab_sha256: String,
    pub step: usize,
    pub history: Vec<DevPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn new(
        kind: ModelKind,
        encoder: &Encoder,
        training: serde_json::Value,
        step: usize,
        history: Vec<DevPoint>,
    ) -> Result<Self> {
        Ok(Self {
            manifest: Manifest {
                format_version: CHECKPOINT_VERSION,
                kind,
                encoder: encoder.config.clone(),
                training,
                vocab_sha256: encoder.vocab.hash(),
                step,
                history,
            },
            vocab: encoder.vocab.clone(),
            params: encoder.params.clone(),
        })
    }

    /// The stored encoder; any extra heads stay in its parameter set.
    pub fn encoder(&self) -> Encoder {
        Encoder {
            config: self.manifest.encoder.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        }
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let vocab = self.vocab.to_text();
        out.extend_from_slice(&(vocab.len() as u64).to_le_bytes());
        out.extend_from_slice(vocab.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len_u64()?;
        let manifest: Manifest = serde_json::from_slice(r.take(n)?)?;
        let n = r.len_u64()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(text)?;
        if vocab.hash() != manifest.vocab_sha256 {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let mut params = ParameterSet::new();
        for _ in 0..r.u32()? {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("parameter {name} is too large")))?;
            if numel.saturating_mul(8) > r.remaining() {
                return Err(Error::Checkpoint(format!("parameter {name} is truncated")));
            }
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        if manifest.encoder.vocab_size != vocab.len() {
            return Err(Error::Checkpoint("vocabulary size disagrees with encoder config".into()));
        }
        Ok(Self { manifest, vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_encoder;
    use crate::encoder::TokenEncoder;

    fn sample() -> Checkpoint {
        let enc = tiny_encoder(5);
        Checkpoint::new(
            ModelKind::Extraction,
            &enc,
            serde_json::json!({"batch_size": 4}),
            7,
            vec![DevPoint { step: 7, rp_at_5: 0.5 }],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = ck.encoder().encode_text("alpha python").unwrap();
        let b = back.encoder().encode_text("alpha python").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn kind_is_checked() {
        let ck = sample();
        assert!(ck.expect_kind(ModelKind::Extraction).is_ok());
        assert!(ck.expect_kind(ModelKind::Title).is_err());
    }
}
