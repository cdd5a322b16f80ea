//! Binary checkpoints and their JSON sidecars.
//!
//! A checkpoint is one flat table of named f64 tensors: every parameter
//! and running statistic of the model, plus reserved `__`-prefixed
//! entries carrying optimizer state (`__adam_m__<param>`,
//! `__adam_v__<param>`, `__step__`) and bookkeeping (`__epoch__`,
//! `__best_dice__`). The format is deliberately dumb — magic, version,
//! then length-prefixed (name, shape, little-endian f64 payload)
//! records — so a checkpoint can be inspected with a hex dump and reread
//! by anything.
//!
//! Restoring into a model requires every live store entry to be present
//! with a matching shape; mismatches fail loudly with the offending
//! name. A human-readable sidecar at `<path>.meta.json` records the
//! config hash, seed, and best validation metrics, making any artifact
//! traceable to the exact run that produced it.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layers::ParamStore;
use crate::optim::{Adam, Moments};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DCNC";
const VERSION: u32 = 1;

/// Reserved-name prefixes/keys inside the flat table.
pub const ADAM_M_PREFIX: &str = "__adam_m__";
pub const ADAM_V_PREFIX: &str = "__adam_v__";
pub const STEP_KEY: &str = "__step__";
pub const EPOCH_KEY: &str = "__epoch__";
pub const BEST_DICE_KEY: &str = "__best_dice__";

/// Sidecar metadata written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    /// Epochs completed when this checkpoint was written.
    pub epoch: usize,
    pub best_val_dice: f64,
}

fn err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

/// Write a flat name→tensor table.
pub fn save_table(path: &Path, table: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, tensor) in table {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(err(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read back a flat name→tensor table.
pub fn load_table(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(err(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let count = r.u64()? as usize;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| err("entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(err(format!("entry {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if table.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(err(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(err(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(table)
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(&[1], vec![v])
}

/// Snapshot model + optimizer + bookkeeping into one table and save it.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: Option<&Adam>,
    epoch: usize,
    best_dice: f64,
) -> Result<()> {
    let mut table = BTreeMap::new();
    for idx in store.indices() {
        table.insert(store.name(idx).to_string(), store.value(idx).clone());
    }
    if let Some(adam) = adam {
        for (name, mom) in adam.moments() {
            let len = mom.m.len();
            table.insert(
                format!("{ADAM_M_PREFIX}{name}"),
                Tensor::from_vec(&[len], mom.m.clone()),
            );
            table.insert(
                format!("{ADAM_V_PREFIX}{name}"),
                Tensor::from_vec(&[len], mom.v.clone()),
            );
        }
        table.insert(STEP_KEY.into(), scalar(adam.step_count() as f64));
    }
    table.insert(EPOCH_KEY.into(), scalar(epoch as f64));
    table.insert(BEST_DICE_KEY.into(), scalar(best_dice));
    save_table(path, &table)
}

/// Restore model values from a loaded table. Every store entry must be
/// present with the exact shape; reserved entries are ignored here.
pub fn restore_store(store: &mut ParamStore, table: &BTreeMap<String, Tensor>) -> Result<()> {
    for idx in store.indices().collect::<Vec<_>>() {
        let name = store.name(idx).to_string();
        let saved = table
            .get(&name)
            .ok_or_else(|| err(format!("missing entry {name} (wrong model or config?)")))?;
        if saved.shape() != store.value(idx).shape() {
            return Err(err(format!(
                "entry {name}: saved shape {:?} vs model shape {:?}",
                saved.shape(),
                store.value(idx).shape()
            )));
        }
        *store.value_mut(idx) = saved.clone();
    }
    Ok(())
}

/// Restore optimizer moments/step from a loaded table.
pub fn restore_adam(adam: &mut Adam, table: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
    for (key, tensor) in table {
        if let Some(param) = key.strip_prefix(ADAM_M_PREFIX) {
            moments.entry(param.to_string()).or_default().m = tensor.data().to_vec();
        } else if let Some(param) = key.strip_prefix(ADAM_V_PREFIX) {
            moments.entry(param.to_string()).or_default().v = tensor.data().to_vec();
        }
    }
    for (name, mom) in &moments {
        if mom.m.len() != mom.v.len() {
            return Err(err(format!(
                "optimizer state for {name}: m has {} entries, v has {}",
                mom.m.len(),
                mom.v.len()
            )));
        }
    }
    let step = table.get(STEP_KEY).map(|t| t.item() as u64).unwrap_or(0);
    adam.restore(moments, step);
    Ok(())
}

/// Reserved bookkeeping scalars `(epoch, best_dice)` from a table.
pub fn bookkeeping(table: &BTreeMap<String, Tensor>) -> (usize, f64) {
    let epoch = table.get(EPOCH_KEY).map(|t| t.item() as usize).unwrap_or(0);
    let best = table.get(BEST_DICE_KEY).map(|t| t.item()).unwrap_or(0.0);
    (epoch, best)
}

/// Sidecar path for a checkpoint's JSON metadata (`<path>.meta.json`).
pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

pub fn save_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| err(format!("serializing metadata: {e}")))?;
    std::fs::write(meta_path(path), json)?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = std::fs::read_to_string(meta_path(path))?;
    serde_json::from_str(&text).map_err(|e| err(format!("parsing metadata: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{init_rng, ConvUnit, ParamKind};
    use crate::ops::ConvSpec;
    use crate::optim::AdamConfig;
    use crate::testutil::{rng_tensor, Rng64};

    fn demo_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = init_rng(9);
        ConvUnit::new(&mut store, &mut rng, "block", 2, 3, ConvSpec::same(3, 1));
        store
    }

    #[test]
    fn table_roundtrip_is_bitwise() {
        let mut rng = Rng64::new(50);
        let mut table = BTreeMap::new();
        table.insert("a".to_string(), rng_tensor(&mut rng, &[2, 3]));
        table.insert("b.nested.name".to_string(), rng_tensor(&mut rng, &[4]));
        table.insert("c".to_string(), Tensor::from_vec(&[2], vec![-0.0, 1e-300]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_table(&path, &table).unwrap();
        let back = load_table(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (name, tensor) in &table {
            let b = &back[name];
            assert_eq!(b.shape(), tensor.shape());
            for (x, y) in b.data().iter().zip(tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} not bitwise equal");
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_table(&path).unwrap_err().to_string().contains("magic"));

        // Valid header, truncated payload.
        let mut table = BTreeMap::new();
        table.insert("w".to_string(), Tensor::filled(&[8], 1.0));
        save_table(&path, &table).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 10]).unwrap();
        assert!(load_table(&path).unwrap_err().to_string().contains("truncated"));

        // Wrong version.
        let mut bytes = full.clone();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_table(&path).unwrap_err().to_string().contains("version"));

        // Trailing garbage.
        let mut bytes = full;
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_table(&path).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn model_and_optimizer_roundtrip() {
        let mut store = demo_store();
        let mut adam = Adam::new(AdamConfig::default());
        // Take two steps so moments and step count are nontrivial.
        for _ in 0..2 {
            store.clear_grads();
            for idx in store.indices().collect::<Vec<_>>() {
                if store.kind(idx) == ParamKind::Weight {
                    let g = Tensor::filled(store.value(idx).shape(), 0.5);
                    store.accumulate_grad(idx, &g);
                }
            }
            adam.step(&mut store).unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &store, Some(&adam), 7, 0.91).unwrap();

        let table = load_table(&path).unwrap();
        let mut store2 = demo_store();
        restore_store(&mut store2, &table).unwrap();
        for (a, b) in store.indices().zip(store2.indices()) {
            assert_eq!(store.value(a).data(), store2.value(b).data());
        }

        let mut adam2 = Adam::new(AdamConfig::default());
        restore_adam(&mut adam2, &table).unwrap();
        assert_eq!(adam2.step_count(), 2);
        assert_eq!(adam.moments(), adam2.moments());
        assert_eq!(bookkeeping(&table), (7, 0.91));
    }

    #[test]
    fn restore_rejects_missing_and_mismatched_entries() {
        let store = demo_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &store, None, 0, 0.0).unwrap();
        let mut table = load_table(&path).unwrap();

        // Different architecture: an extra parameter the table lacks.
        let mut bigger = ParamStore::new();
        let mut rng = init_rng(9);
        ConvUnit::new(&mut bigger, &mut rng, "block", 2, 3, ConvSpec::same(3, 1));
        bigger.add("extra", ParamKind::Weight, Tensor::zeros(&[2]));
        let msg = restore_store(&mut bigger, &table).unwrap_err().to_string();
        assert!(msg.contains("extra"), "got: {msg}");

        // Same names, wrong shape.
        let name = "block.conv.w".to_string();
        assert!(table.contains_key(&name), "fixture drifted: {name} missing");
        table.insert(name.clone(), Tensor::zeros(&[1, 1, 1, 1]));
        let mut store3 = demo_store();
        let msg = restore_store(&mut store3, &table).unwrap_err().to_string();
        assert!(msg.contains(&name), "got: {msg}");
    }

    #[test]
    fn meta_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            config_hash: "abc123".into(),
            seed: 17,
            epoch: 12,
            best_val_dice: 0.875,
        };
        save_meta(&path, &meta).unwrap();
        assert!(dir.path().join("model.ckpt.meta.json").exists());
        assert_eq!(load_meta(&path).unwrap(), meta);
    }
}
