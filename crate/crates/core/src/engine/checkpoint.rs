//! Binary checkpoint: `SMCK`, u32 version, u64 header length, JSON header,
//! then every tensor as raw little-endian values in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SmfeaModel};
use crate::real::Real;
use crate::vocab::{CategoryDicts, IdMap, WordVocab};

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// sha256 of the canonical JSON of an architecture config.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canon.as_bytes()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    epoch: usize,
    config_hash: String,
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    fragments: Vec<String>,
    relations: Vec<String>,
    tensors: Vec<TensorEntry>,
    adam_step: Option<u64>,
}

pub struct Checkpoint<F: Real> {
    pub model: SmfeaModel<F>,
    pub optimizer: Option<Adam<F>>,
    pub epoch: usize,
    pub train: TrainConfig,
    pub vocab: WordVocab,
    pub dicts: CategoryDicts,
}

pub fn save_checkpoint<F: Real>(path: &Path, ck: &Checkpoint<F>) -> Result<()> {
    let store = &ck.model.store;
    let mut tensors: Vec<TensorEntry> = Vec::new();
    let mut payloads: Vec<&Array2<F>> = Vec::new();
    let mut push = |name: String, t: &'_ Array2<F>| {
        tensors.push(TensorEntry {
            name,
            rows: t.nrows(),
            cols: t.ncols(),
        });
    };
    for (name, v) in store.names().iter().zip(store.values()) {
        push(name.clone(), v);
    }
    if let Some(opt) = &ck.optimizer {
        for (name, m) in store.names().iter().zip(&opt.m) {
            push(format!("adam.m.{name}"), m);
        }
        for (name, v) in store.names().iter().zip(&opt.v) {
            push(format!("adam.v.{name}"), v);
        }
    }
    payloads.extend(store.values());
    if let Some(opt) = &ck.optimizer {
        payloads.extend(&opt.m);
        payloads.extend(&opt.v);
    }
    let header = Header {
        format_version: VERSION,
        dtype: F::DTYPE.to_string(),
        epoch: ck.epoch,
        config_hash: config_hash(&ck.model.config),
        model: ck.model.config.clone(),
        train: ck.train.clone(),
        vocab: ck.vocab.map().labels().to_vec(),
        fragments: ck.dicts.fragments.labels().to_vec(),
        relations: ck.dicts.relations.labels().to_vec(),
        tensors,
        adam_step: ck.optimizer.as_ref().map(|o| o.step),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + store.n_scalars() * F::BYTES * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payloads {
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREFIX_LEN {
        return Err(format_err(path, bytes.len(), "file shorter than checkpoint prefix"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, 0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREFIX_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(path, bytes.len(), "truncated checkpoint header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..end])
        .map_err(|e| format_err(path, PREFIX_LEN, format!("bad checkpoint header: {e}")))?;
    Ok((header, end))
}

/// Element type recorded in a checkpoint (`f32` or `f64`).
pub fn peek_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(path, &bytes)?.0.dtype)
}

/// Load a checkpoint. With `expect`, refuse one whose architecture hash differs.
pub fn load_checkpoint<F: Real>(path: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut pos) = read_header(path, &bytes)?;
    if header.dtype != F::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors but {} was requested",
            header.dtype,
            F::DTYPE
        )));
    }
    if config_hash(&header.model) != header.config_hash {
        return Err(format_err(path, PREFIX_LEN, "config hash does not match stored config"));
    }
    if let Some(cfg) = expect {
        let want = config_hash(cfg);
        if want != header.config_hash {
            let mut diffs = Vec::new();
            let (a, b) = (serde_json::to_value(&header.model)?, serde_json::to_value(cfg)?);
            if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
                for (k, v) in a {
                    if b.get(k) != Some(v) {
                        diffs.push(format!("{k}: checkpoint {v} vs config {}", b.get(k).unwrap_or(&serde_json::Value::Null)));
                    }
                }
            }
            return Err(Error::ConfigConflict(format!(
                "checkpoint hash {} differs from config hash {want} ({})",
                &header.config_hash[..12],
                diffs.join(", ")
            )));
        }
    }

    let mut model = SmfeaModel::<F>::new(header.model.clone(), 0)?;
    let n_params = model.store.len();
    let expected_tensors = n_params * if header.adam_step.is_some() { 3 } else { 1 };
    if header.tensors.len() != expected_tensors {
        return Err(format_err(path, PREFIX_LEN, format!(
            "{} tensors listed, expected {expected_tensors}",
            header.tensors.len()
        )));
    }
    let mut read_tensor = |entry: &TensorEntry| -> Result<Array2<F>> {
        let n = entry.rows * entry.cols;
        let end = pos + n * F::BYTES;
        if end > bytes.len() {
            return Err(format_err(path, bytes.len(), format!("truncated tensor {}", entry.name)));
        }
        let data: Vec<F> = bytes[pos..end].chunks_exact(F::BYTES).map(F::read_le).collect();
        pos = end;
        Ok(Array2::from_shape_vec((entry.rows, entry.cols), data).expect("length checked"))
    };
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        loaded.push(read_tensor(entry)?);
    }
    if pos != bytes.len() {
        return Err(format_err(path, pos, "trailing bytes after tensors"));
    }
    for (k, entry) in header.tensors[..n_params].iter().enumerate() {
        if model.store.names()[k] != entry.name || model.store.values()[k].dim() != loaded[k].dim() {
            return Err(format_err(path, PREFIX_LEN, format!("tensor {} does not fit the model", entry.name)));
        }
    }
    let mut rest = loaded.split_off(n_params);
    for (slot, t) in model.store.values_mut().iter_mut().zip(loaded) {
        *slot = t;
    }
    let optimizer = header.adam_step.map(|step| {
        let v = rest.split_off(n_params);
        Adam { m: rest, v, step }
    });
    let vocab = WordVocab::from_map(IdMap::from_ordered(header.vocab)?)?;
    let dicts = CategoryDicts {
        fragments: IdMap::from_ordered(header.fragments)?,
        relations: IdMap::from_ordered(header.relations)?,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: header.epoch,
        train: header.train,
        vocab,
        dicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{prepare, PreparedSample};
    use crate::objective::FusionWeights;
    use crate::corpus::{generate_synthetic, Dataset, SyntheticSpec};
    use crate::vocab::{build_category_dicts, build_word_vocab};

    fn fixture<F: Real>() -> (Checkpoint<F>, Vec<PreparedSample>) {
        let spec = SyntheticSpec { n_pairs: 4, d_region: 6, regions_per_image: 4, ..SyntheticSpec::default() };
        let ds = Dataset { samples: generate_synthetic(&spec).unwrap().samples };
        let vocab = build_word_vocab(ds.sentences(), 1).unwrap();
        let dicts = build_category_dicts(ds.trees());
        let train = TrainConfig { d_word: 4, d_v: 6, d_node: 3, ..TrainConfig::default() };
        let model = SmfeaModel::<F>::new(train.model_config(6, &vocab, &dicts), 3).unwrap();
        let mut adam = Adam::new(&model.store);
        adam.step = 5;
        adam.m[0].fill(F::from_f64_lossy(0.25));
        let prepared = prepare(&ds, &vocab, &dicts).unwrap();
        (Checkpoint { model, optimizer: Some(adam), epoch: 2, train, vocab, dicts }, prepared)
    }

    fn fused<F: Real>(m: &SmfeaModel<F>, s: &[PreparedSample]) -> Vec<ndarray::Array1<F>> {
        let (i, t) = m.encode(s, &FusionWeights::default()).unwrap();
        i.into_iter().chain(t).map(|e| e.bundle.fused).collect()
    }

    fn round_trip<F: Real>() {
        let (ck, probe) = fixture::<F>();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint::<F>(&p, Some(&ck.model.config)).unwrap();
        assert_eq!(back.model.store, ck.model.store);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.dicts, ck.dicts);
        assert_eq!(back.epoch, 2);
        assert_eq!(back.train, ck.train);
        let (a, b) = (fused(&ck.model, &probe), fused(&back.model, &probe));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y).all(|(p, q)| p.to_f64().unwrap().to_bits() == q.to_f64().unwrap().to_bits()));
        }
    }

    #[test]
    fn round_trip_is_bitwise_in_both_precisions() {
        round_trip::<f32>();
        round_trip::<f64>();
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let (ck, _) = fixture::<f32>();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint::<f32>(&p, None), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p, None), Err(Error::VersionMismatch { found: 9, expected: 1 })));
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p, None), Err(Error::Config(_))));
        assert_eq!(peek_dtype(&p).unwrap(), "f32");
    }

    #[test]
    fn cell_variant_conflict_is_refused() {
        let (ck, _) = fixture::<f32>();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let mut other = ck.model.config.clone();
        other.cell_variant = "childsum".into();
        assert_ne!(config_hash(&other), config_hash(&ck.model.config));
        let err = load_checkpoint::<f32>(&p, Some(&other)).err().unwrap();
        assert!(matches!(err, Error::ConfigConflict(_)));
        assert!(err.to_string().contains("cell_variant"));
    }
}
