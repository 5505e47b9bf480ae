//! Binary checkpoint: `RLSM`, u32 version, u32-length-prefixed canonical JSON
//! header (config and dropout RNG position), then one record per tensor
//! until end of file: u32-length-prefixed path, u32 rank, u64 extents,
//! little-endian f64 payload. Integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Result};
use crate::tensor::{BnStats, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RLSM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_record(buf: &mut Vec<u8>, path: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(path.len() as u32).to_le_bytes());
    buf.extend_from_slice(path.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn header(model: &Model) -> Result<String> {
    let rng = &model.rng;
    let seed = hex::encode(rng.get_seed());
    let value = json!({
        "config": serde_json::to_value(model.config())?,
        "rng": {
            "seed": seed,
            "stream": rng.get_stream(),
            "word_pos": rng.get_word_pos().to_string(),
        },
    });
    // serde_json's default map is ordered by key, so this is canonical
    Ok(serde_json::to_string(&value)?)
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let head = header(model)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(head.as_bytes());
    for (_, p) in model.params().iter() {
        push_record(&mut buf, &p.name, p.value.shape(), p.value.data());
    }
    for (layer, bn) in model.bn_stats() {
        push_record(&mut buf, &format!("{layer}.running_mean"), &[bn.mean.len()], &bn.mean);
        push_record(&mut buf, &format!("{layer}.running_var"), &[bn.var.len()], &bn.var);
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Parsed {
    config: ModelConfig,
    rng: ChaCha8Rng,
    records: BTreeMap<String, Tensor>,
}

fn bad_header(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Header(msg.into())
}

fn parse_rng(v: &Value) -> Result<ChaCha8Rng, CheckpointError> {
    let hex = v["seed"].as_str().ok_or_else(|| bad_header("rng.seed missing"))?;
    let mut seed = [0u8; 32];
    hex::decode_to_slice(hex, &mut seed).map_err(|e| bad_header(format!("rng.seed: {e}")))?;
    let stream = v["stream"].as_u64().ok_or_else(|| bad_header("rng.stream missing"))?;
    let word_pos: u128 = v["word_pos"]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad_header("rng.word_pos missing"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn parse(bytes: &[u8]) -> Result<Parsed, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(len, "header")?).map_err(|e| bad_header(e.to_string()))?;
    let head: Value = serde_json::from_str(text).map_err(|e| bad_header(e.to_string()))?;
    let config: ModelConfig =
        serde_json::from_value(head["config"].clone()).map_err(|e| bad_header(format!("config: {e}")))?;
    let rng = parse_rng(&head["rng"])?;
    let mut records = BTreeMap::new();
    while !r.done() {
        let n = r.u32("record path length")? as usize;
        let path = String::from_utf8(r.take(n, "record path")?.to_vec()).map_err(|e| bad_header(e.to_string()))?;
        let rank = r.u32("record rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("record extents").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or(CheckpointError::Truncated { what: "record payload" })?;
        let payload = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated { what: "record payload" })?, "record payload")?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad_header(e.to_string()))?;
        if records.insert(path.clone(), t).is_some() {
            return Err(bad_header(format!("duplicate record `{path}`")));
        }
    }
    Ok(Parsed { config, rng, records })
}

fn restore(mut model: Model, parsed: Parsed) -> Result<Model> {
    let mut records = parsed.records;
    let mut take = |name: &str, expected: &[usize]| -> Result<Tensor, CheckpointError> {
        let t = records
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.to_string()))?;
        if t.shape() != expected {
            return Err(CheckpointError::ShapeMismatch {
                path: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let p = model.params().get(id);
        let t = take(&p.name.clone(), &p.value.shape().to_vec())?;
        model.params_mut().set_value(id, t)?;
    }
    let layers: Vec<(&str, usize)> = model.bn_stats().iter().map(|(l, s)| (*l, s.mean.len())).collect();
    for (layer, c) in layers {
        let mean = take(&format!("{layer}.running_mean"), &[c])?.into_data();
        let var = take(&format!("{layer}.running_var"), &[c])?.into_data();
        model.set_bn_stats(layer, BnStats { mean, var })?;
    }
    if let Some(name) = records.keys().next() {
        return Err(CheckpointError::UnknownParameter(name.clone()).into());
    }
    model.rng = parsed.rng;
    Ok(model)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let parsed = parse(bytes)?;
    let model = Model::new(parsed.config.clone())?;
    restore(model, parsed)
}

/// Loads a checkpoint, rebuilding the model from its stored config.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads the tensors of a checkpoint into a model built from `config`;
/// every stored shape must match what `config` implies.
pub fn load_checkpoint_with(path: &Path, config: &ModelConfig) -> Result<Model> {
    let parsed = parse(&std::fs::read(path)?)?;
    let model = Model::new(config.clone())?;
    restore(model, parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::RngCore;

    fn trained_ish() -> Model {
        let mut m = Model::new(ModelConfig::tiny()).unwrap();
        let batch: Vec<_> = m
            .bn_stats()
            .iter()
            .map(|(_, s)| {
                let c = s.mean.len();
                ((0..c).map(|i| 0.1 * i as f64).collect(), (0..c).map(|i| 0.5 + i as f64).collect())
            })
            .collect();
        m.update_bn(&batch).unwrap();
        m.rng.next_u64();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = trained_ish();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        let a = std::fs::read(&p).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), a);
        for ((_, x), (_, y)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(x.name, y.name);
            assert!(x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert_eq!(back.bn_stats(), m.bn_stats());
        let (mut r1, mut r2) = (m.rng.clone(), back.rng.clone());
        assert_eq!(r1.next_u64(), r2.next_u64());
        assert_eq!(&a[..4], b"RLSM");
    }

    #[test]
    fn distinct_errors() {
        let m = trained_ish();
        let good = to_bytes(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::Version { found: 9, .. }))
        ));

        let cut = &good[..good.len() - 3];
        assert!(matches!(from_bytes(cut), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));
        assert!(matches!(from_bytes(&good[..6]), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, &good).unwrap();
        let wider = ModelConfig {
            classes: 5,
            ..ModelConfig::tiny()
        };
        match load_checkpoint_with(&p, &wider) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { path, .. })) => assert_eq!(path, "head.fc.weight"),
            other => panic!("expected shape mismatch, got {:?}", other.err()),
        }
        let local_only = ModelConfig {
            branches: super::super::Branches::Local,
            ..ModelConfig::tiny()
        };
        // the local-only model has a narrower head
        assert!(matches!(
            load_checkpoint_with(&p, &local_only),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
        let local = Model::new(local_only.clone()).unwrap();
        let lp = dir.path().join("local.ckpt");
        save_checkpoint(&local, &lp).unwrap();
        assert!(matches!(
            load_checkpoint_with(&lp, &ModelConfig::tiny()),
            Err(Error::Checkpoint(CheckpointError::MissingParameter(_)))
        ));
        let mut extra = good.clone();
        push_record(&mut extra, "stray", &[1], &[0.0]);
        assert!(matches!(from_bytes(&extra), Err(Error::Checkpoint(CheckpointError::UnknownParameter(_)))));
    }
}
