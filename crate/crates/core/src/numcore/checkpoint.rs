//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PDPNCKPT"
//! version    u32
//! d_h        u32
//! layers     u32
//! heads      u32
//! ffn_hidden u32
//! gate_hidden u32
//! clip       f32
//! flags      u8       bit 0 cluster attention, bit 1 dual decoder
//! step       u64
//! count      u32
//! count x { name_len u32, name utf-8, rows u32, cols u32, rows*cols f32 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDPNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub d_h: u32,
    pub layers: u32,
    pub heads: u32,
    pub ffn_hidden: u32,
    pub gate_hidden: u32,
    pub clip: f32,
    pub cluster_attention: bool,
    pub dual_decoder: bool,
    pub step: u64,
}

pub fn encode_checkpoint(meta: &CheckpointMeta, params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.numel() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [meta.version, meta.d_h, meta.layers, meta.heads, meta.ffn_hidden, meta.gate_hidden] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&meta.clip.to_le_bytes());
    out.push(u8::from(meta.cluster_attention) | (u8::from(meta.dual_decoder) << 1));
    out.extend_from_slice(&meta.step.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore<f32>)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let d_h = cur.u32()?;
    let layers = cur.u32()?;
    let heads = cur.u32()?;
    let ffn_hidden = cur.u32()?;
    let gate_hidden = cur.u32()?;
    let clip = cur.f32()?;
    let flags = cur.take(1)?[0];
    let step = cur.u64()?;
    let count = cur.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let data = cur
            .take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params
            .insert(name, Tensor2::from_vec(rows, cols, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    params.set_step_count(step);
    let meta = CheckpointMeta {
        version,
        d_h,
        layers,
        heads,
        ffn_hidden,
        gate_hidden,
        clip,
        cluster_attention: flags & 1 != 0,
        dual_decoder: flags & 2 != 0,
        step,
    };
    Ok((meta, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ParamStore<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(meta, params))?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointMeta, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            d_h: 16,
            layers: 1,
            heads: 2,
            ffn_hidden: 64,
            gate_hidden: 16,
            clip: 10.0,
            cluster_attention: true,
            dual_decoder: false,
            step: 42,
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut st = ParamStore::<f32>::new();
        st.insert("a", Tensor2::filled(2, 2, 1.5)).unwrap();
        let bytes = encode_checkpoint(&meta(), &st);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40), step in any::<u64>()) {
            let mut st = ParamStore::<f32>::new();
            let n = values.len();
            st.insert("encoder.w", Tensor2::from_vec(1, n, values.clone()).unwrap()).unwrap();
            st.insert("gate.b", Tensor2::from_vec(n, 1, values).unwrap()).unwrap();
            let m = CheckpointMeta { step, ..meta() };
            let bytes = encode_checkpoint(&m, &st);
            let (m2, st2) = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(m2, m);
            prop_assert_eq!(encode_checkpoint(&m2, &st2), bytes);
        }
    }
}
