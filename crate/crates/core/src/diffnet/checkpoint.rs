//! Parameter checkpoints.
//!
//! Layout: the 8-byte magic `LEXCKPT1`, a little-endian u64 giving the length
//! of a JSON index, the index itself, then every tensor's values as raw
//! little-endian f32 in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};

use super::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"LEXCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for id in store.ids() {
        let t = store.tensor(id);
        entries.push(Entry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            count: t.numel(),
        });
        for &x in t.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    let index = serde_json::to_vec(&Index { version: 1, entries })?;
    let mut out = Vec::with_capacity(16 + index.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |m: &str| LexError::Contract(format!("malformed checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing LEXCKPT1 header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let index_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("index overruns file"))?;
    let index: Index = serde_json::from_slice(&bytes[16..index_end])?;
    if index.version != 1 {
        return Err(bad(&format!("unknown version {}", index.version)));
    }
    let payload = &bytes[index_end..];
    let mut store = ParamStore::new();
    for e in index.entries {
        let start = e.offset * 4;
        let end = start + e.count * 4;
        if end > payload.len() {
            return Err(bad(&format!("{} overruns payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(store)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?).map_err(|e| LexError::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| LexError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Mlp, MlpSpec, OutputActivation};
    use crate::rng::seeded;

    #[test]
    fn round_trip_preserves_f32_parameters() {
        let mut store = ParamStore::<f32>::new();
        Mlp::init(MlpSpec::new(5, vec![7], 2, OutputActivation::Softmax), "f", &mut store, &mut seeded(9)).unwrap();
        let bytes = encode(&store).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back: ParamStore<f32> = decode(&bytes).unwrap();
        assert_eq!(back.len(), store.len());
        for id in store.ids() {
            assert_eq!(back.name(id), store.name(id));
            assert_eq!(back.tensor(id).data(), store.tensor(id).data());
            assert_eq!(back.tensor(id).shape(), store.tensor(id).shape());
        }
        assert_eq!(back.checksum(""), store.checksum(""));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f32>(b"NOTACKPT\0\0\0\0\0\0\0\0").is_err());
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = encode(&store).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 2]).is_err());
    }
}
