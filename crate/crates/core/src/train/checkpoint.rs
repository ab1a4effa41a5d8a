//! Bit-exact run serialization.
//!
//! Layout: magic `ORSM`, version u32, header length u64, JSON header (run
//! metadata plus a named-tensor directory with byte offsets), then the raw
//! little-endian tensor payload. Loading the same file reproduces every
//! parameter and optimizer moment bitwise.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::costs::Criterion;
use crate::error::{Error, Result};
use crate::train::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ORSM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One rounded subnet mask, as stored in run metadata and masks.json.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskMeta {
    pub tau: f64,
    pub criterion: Criterion,
    pub k: usize,
    pub group_ids: Vec<usize>,
    pub verify_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_split: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub dtype: String,
    pub config_hash: String,
    pub config_toml: String,
    pub step: u64,
    pub opt_t: u64,
    pub learner: String,
    pub masks: Option<Vec<MaskMeta>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<S>,
    opt: &Adam<S>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor<S>, payload: &mut Vec<u8>, entries: &mut Vec<TensorEntry>| {
        entries.push(TensorEntry {
            name,
            rows: t.rows(),
            cols: t.cols(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            v.write_le(payload);
        }
    };
    for (id, name, value) in store.iter() {
        push(name.to_string(), value, &mut payload, &mut entries);
        push(format!("opt/m/{name}"), &opt.m[id.0], &mut payload, &mut entries);
        push(format!("opt/v/{name}"), &opt.v[id.0], &mut payload, &mut entries);
    }
    let header = Header {
        meta: meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut buf = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&payload);

    let tmp = path.with_extension("orsm.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read metadata only (any dtype).
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let (header, _) = read_header_and_payload(path)?;
    Ok(header.meta)
}

/// Read metadata and all tensors; the checkpoint dtype must match `S`.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(CheckpointMeta, BTreeMap<String, Tensor<S>>)> {
    let (header, payload) = read_header_and_payload(path)?;
    if header.meta.dtype != S::DTYPE.name() {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match requested {}",
            header.meta.dtype,
            S::DTYPE.name()
        )));
    }
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let n = e.rows * e.cols;
        let start = e.offset as usize;
        let end = start + n * S::BYTES;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} out of payload bounds", e.name)));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = start + i * S::BYTES;
            data.push(S::read_le(&payload[off..off + S::BYTES]));
        }
        tensors.insert(e.name.clone(), Tensor::new(e.rows, e.cols, data)?);
    }
    Ok((header.meta, tensors))
}

fn read_header_and_payload(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > bytes.len() {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    let payload = bytes[16 + hlen..].to_vec();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            dtype: "f64".into(),
            config_hash: "abc".into(),
            config_toml: "[model]\n".into(),
            step: 7,
            opt_t: 7,
            learner: "orthosoftmax".into(),
            masks: None,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = CounterRng::new(1, &[70]);
        store.register("a/w", Tensor::randn(3, 4, 1.0, &mut rng)).unwrap();
        store.register("b/w", Tensor::randn(1, 5, 0.3, &mut rng)).unwrap();
        let mut opt = Adam::new(&store);
        opt.t = 9;
        for m in &mut opt.m {
            for v in m.data_mut() {
                *v = 0.125;
            }
        }
        let dir = std::env::temp_dir().join("orthosup_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.orsm");
        save_checkpoint(&path, &meta(), &store, &opt).unwrap();
        let (m, tensors) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(tensors["a/w"], *store.value(store.id("a/w").unwrap()));
        assert_eq!(tensors["opt/m/a/w"].data()[0], 0.125);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn wrong_magic_version_and_dtype_are_format_errors() {
        let dir = std::env::temp_dir().join("orthosup_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.orsm");
        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));

        let store: ParamStore<f64> = ParamStore::new();
        let opt = Adam::new(&store);
        save_checkpoint(&path, &meta(), &store, &opt).unwrap();
        // dtype mismatch
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));
        // corrupt version field
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).ok();
    }
}
