//! Versioned binary checkpoints: string metadata, named tensors and the
//! ensembling store.
//!
//! Layout (little-endian): magic `HKDCKPT\0`, version `u32`, then three
//! count-prefixed sections. Metadata entries are length-prefixed UTF-8 key and
//! value; tensors are name, rank `u32`, dims `u64`, values `f64`; store entries
//! are id `u64`, step `u64`, beta `f64`, gamma `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::ensemble::{StoredWeights, WeightPair, WeightStore};
use crate::error::{Error, Result};
use crate::nn::ModelParams;

const MAGIC: &[u8; 8] = b"HKDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: ModelParams,
    pub store: WeightStore,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing metadata `{key}`")))
    }

    /// Adds every tensor of `params` under `prefix.`.
    pub fn put(&mut self, prefix: &str, params: &ModelParams) {
        self.tensors.extend(params.prefixed(prefix));
    }

    /// Tensors stored under `prefix.`; an error if there are none.
    pub fn take(&self, prefix: &str) -> Result<ModelParams> {
        let p = self.tensors.strip_prefix(prefix);
        if p.is_empty() {
            return Err(Error::CheckpointMismatch(format!("no tensors under `{prefix}`")));
        }
        Ok(p)
    }

    /// Loads `prefix.*` into `target`, requiring identical names and shapes.
    pub fn restore_into(&self, prefix: &str, target: &mut ModelParams) -> Result<()> {
        let stored = self.take(prefix)?;
        let names_match = stored.len() == target.len()
            && stored
                .iter()
                .zip(target.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !names_match {
            return Err(Error::CheckpointMismatch(format!(
                "`{prefix}` parameters do not match the configured architecture"
            )));
        }
        target.set_values(stored.tensors().cloned().collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.meta.len() as u64);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u64(self.tensors.len() as u64);
        for (name, t) in self.tensors.iter() {
            w.str(name);
            w.tensor(t);
        }
        w.u64(self.store.len() as u64);
        for (id, s) in self.store.iter() {
            w.u64(id);
            w.u64(s.step);
            w.f64(s.weights.beta);
            w.f64(s.weights.gamma);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect(MAGIC, "checkpoint magic")?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(path, at, format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u64("metadata count")? {
            let k = r.str("metadata key")?;
            let v = r.str("metadata value")?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u64("tensor count")? {
            let name = r.str("tensor name")?;
            let t = r.tensor("tensor")?;
            ck.tensors.push(name, t);
        }
        for _ in 0..r.u64("store count")? {
            let at = r.offset();
            let id = r.u64("sample id")?;
            let step = r.u64("step")?;
            let beta = r.f64("beta")?;
            let gamma = r.f64("gamma")?;
            ck.store
                .insert(id, StoredWeights { weights: WeightPair { beta, gamma }, step })
                .map_err(|e| Error::parse(path, at, e.to_string()))?;
        }
        if !r.is_at_end() {
            return Err(r.error("trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("mode", "hkd");
        ck.set_meta("epoch", 3);
        let mut p = ModelParams::new();
        p.push("layer0.weight", Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap());
        p.push("layer0.bias", Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        ck.put("student", &p);
        ck.store
            .insert(4, StoredWeights { weights: WeightPair { beta: 1.1, gamma: 0.9 }, step: 2 })
            .unwrap();
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("epoch").unwrap(), "3");
        assert_eq!(back.take("student").unwrap().len(), 2);
        assert!(matches!(back.take("metanet"), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn restore_checks_architecture() {
        let ck = sample();
        let mut target = ck.take("student").unwrap();
        ck.restore_into("student", &mut target).unwrap();
        let mut wrong = ModelParams::new();
        wrong.push("layer0.weight", Tensor::zeros(&[3, 2]));
        wrong.push("layer0.bias", Tensor::zeros(&[1, 2]));
        assert!(matches!(ck.restore_into("student", &mut wrong), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn corrupt_inputs_are_parse_errors() {
        let bytes = sample().to_bytes();
        for cut in [3, 12, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut], Path::new("c")),
                Err(Error::Parse { .. })
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("c")).is_err());
    }

    #[test]
    fn atomic_save_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
