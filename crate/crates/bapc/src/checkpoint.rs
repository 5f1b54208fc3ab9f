//! Model checkpoints: the full network description plus every named tensor,
//! serialized so a file round-trips bit-exactly.
//!
//! Layout, all little-endian: magic `BAPC`, format version, a length-prefixed
//! `key=value` metadata block (model shape, epoch, objective, seed, and the
//! init hashes of frozen blocks), then a named-tensor table — name length,
//! UTF-8 name, rank, dims, 32-bit values. Batch-norm running moments travel
//! in the same table under their visit names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::{ReadLe, WriteLe};
use crate::error::{Error, Result};
use crate::net::{HeadKind, Model, ModelKind, ModelSpec};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_FIELD: u32 = 1 << 28;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// 1-based epoch that produced this snapshot; 0 = untrained.
    pub epoch: usize,
    /// Objective the run optimized, as its config string (`apc`, `ce`, ...).
    pub objective: String,
    pub seed: u64,
    /// Every named tensor in model visit order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// SHA-256 of frozen tensors at initialization, name → lowercase hex;
    /// the audit command compares these against the stored values.
    pub init_hashes: BTreeMap<String, String>,
}

/// SHA-256 over a tensor's shape and little-endian values.
pub fn tensor_sha256(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        epoch: usize,
        objective: impl Into<String>,
        seed: u64,
        init_hashes: BTreeMap<String, String>,
    ) -> Self {
        Self {
            spec: model.spec.clone(),
            epoch,
            objective: objective.into(),
            seed,
            tensors: model.named_tensors(),
            init_hashes,
        }
    }

    /// Rebuild the model. Every model tensor must be present by name with a
    /// matching shape.
    pub fn to_model(&self) -> Result<Model<f32>> {
        // Values are fully overwritten below; the init draw is discarded.
        let streams = SeedStreams::new(0);
        let mut model = Model::<f32>::init(self.spec.clone(), &mut streams.stream("scratch"))?;
        let expected = model.named_tensors().len();
        if self.tensors.len() != expected {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} tensors, model needs {expected}",
                self.tensors.len()
            )));
        }
        model.load_tensors(&self.tensors, |_| false)?;
        Ok(model)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn metadata_block(&self) -> String {
        let mut s = String::new();
        let kind = match self.spec.kind {
            ModelKind::Uni => "uni",
            ModelKind::Bi => "bi",
        };
        let _ = writeln!(s, "kind={kind}");
        let _ = writeln!(s, "layers={}", self.spec.num_layers);
        let _ = writeln!(s, "hidden={}", self.spec.hidden);
        let _ = writeln!(s, "input_dim={}", self.spec.input_dim);
        let _ = writeln!(s, "dropout={:?}", self.spec.dropout);
        let _ = writeln!(s, "batchnorm={}", self.spec.batchnorm);
        match self.spec.head {
            HeadKind::Prediction => {
                let _ = writeln!(s, "head=prediction");
            }
            HeadKind::Classifier(c) => {
                let _ = writeln!(s, "head=classifier");
                let _ = writeln!(s, "classes={c}");
            }
        }
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "objective={}", self.objective);
        let _ = writeln!(s, "seed={}", self.seed);
        for (name, hex) in &self.init_hashes {
            let _ = writeln!(s, "init_hash.{name}={hex}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.put_u32_le(CHECKPOINT_VERSION)?;
        let meta = self.metadata_block();
        w.put_u32_le(meta.len() as u32)?;
        w.write_all(meta.as_bytes())?;
        w.put_u32_le(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.put_u32_le(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.put_u32_le(t.rank() as u32)?;
            for &d in t.shape() {
                w.put_u32_le(d as u32)?;
            }
            for &v in t.data() {
                w.put_f32_le(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |what: String| Error::Format(format!("{}: {}", path.display(), what));
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!(
                "bad magic {:?}, want BAPC",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.u32_le()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.u32_le()?;
        if meta_len > MAX_FIELD {
            return Err(bad(format!("metadata length {meta_len} is not plausible")));
        }
        let meta_bytes = r.bytes_exact(meta_len as usize)?;
        let meta =
            String::from_utf8(meta_bytes).map_err(|_| bad("metadata is not UTF-8".into()))?;

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in meta.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("metadata line `{line}` is not key=value")))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate metadata key `{k}`")));
            }
        }
        let take = |fields: &mut BTreeMap<&str, &str>, key: &str| -> Result<String> {
            fields
                .remove(key)
                .map(str::to_string)
                .ok_or_else(|| bad(format!("metadata missing `{key}`")))
        };
        let parse = |what: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| bad(format!("bad {what} `{v}`")))
        };

        let kind = match take(&mut fields, "kind")?.as_str() {
            "uni" => ModelKind::Uni,
            "bi" => ModelKind::Bi,
            other => return Err(bad(format!("unknown kind `{other}`"))),
        };
        let num_layers = parse("layers", &take(&mut fields, "layers")?)?;
        let hidden = parse("hidden", &take(&mut fields, "hidden")?)?;
        let input_dim = parse("input_dim", &take(&mut fields, "input_dim")?)?;
        let dropout_s = take(&mut fields, "dropout")?;
        let dropout: f64 =
            dropout_s.parse().map_err(|_| bad(format!("bad dropout `{dropout_s}`")))?;
        let batchnorm = match take(&mut fields, "batchnorm")?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(bad(format!("bad batchnorm `{other}`"))),
        };
        let head = match take(&mut fields, "head")?.as_str() {
            "prediction" => HeadKind::Prediction,
            "classifier" => {
                HeadKind::Classifier(parse("classes", &take(&mut fields, "classes")?)?)
            }
            other => return Err(bad(format!("unknown head `{other}`"))),
        };
        let epoch = parse("epoch", &take(&mut fields, "epoch")?)?;
        let objective = take(&mut fields, "objective")?;
        let seed: u64 = take(&mut fields, "seed")?
            .parse()
            .map_err(|_| bad("bad seed".into()))?;

        let mut init_hashes = BTreeMap::new();
        let leftover: Vec<String> = fields.keys().map(|k| k.to_string()).collect();
        for k in leftover {
            if let Some(name) = k.strip_prefix("init_hash.") {
                let v = fields.remove(k.as_str()).expect("key just listed");
                init_hashes.insert(name.to_string(), v.to_string());
            }
        }
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown metadata key `{k}`")));
        }

        let spec = ModelSpec { kind, num_layers, hidden, input_dim, dropout, batchnorm, head };

        let count = r.u32_le()?;
        if count > MAX_FIELD {
            return Err(bad(format!("tensor count {count} is not plausible")));
        }
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32_le()?;
            if name_len > MAX_FIELD {
                return Err(bad(format!("tensor name length {name_len} is not plausible")));
            }
            let name = String::from_utf8(r.bytes_exact(name_len as usize)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = r.u32_le()? as usize;
            if rank > 8 {
                return Err(bad(format!("tensor `{name}` rank {rank} is not plausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u32_le()?;
                if d > MAX_FIELD {
                    return Err(bad(format!("tensor `{name}` dim {d} is not plausible")));
                }
                shape.push(d as usize);
                numel *= d as usize;
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f32_le()?);
            }
            tensors.push((name, Tensor::new(shape, values)?));
        }

        Ok(Self { spec, epoch, objective, seed, tensors, init_hashes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> Model<f32> {
        let streams = SeedStreams::new(77);
        let spec = ModelSpec {
            kind: ModelKind::Bi,
            num_layers: 2,
            hidden: 3,
            input_dim: 4,
            dropout: 0.2,
            batchnorm: true,
            head: HeadKind::Prediction,
        };
        Model::init(spec, &mut streams.stream("init")).unwrap()
    }

    #[test]
    fn save_load_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bapc");
        let p2 = dir.path().join("b.bapc");
        let model = sample_model();
        let mut hashes = BTreeMap::new();
        for name in model.cross_tensor_names() {
            hashes.insert(name.clone(), tensor_sha256(&model.tensor(&name).unwrap()));
        }
        let ckpt = Checkpoint::from_model(&model, 3, "biapc", 77, hashes);
        ckpt.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.objective, "biapc");
        assert_eq!(back.seed, 77);
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.init_hashes.len(), 2);
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn to_model_restores_every_tensor() {
        let model = sample_model();
        let ckpt = Checkpoint::from_model(&model, 1, "biapc", 77, BTreeMap::new());
        let restored = ckpt.to_model().unwrap();
        for ((n1, t1), (n2, t2)) in model.named_tensors().iter().zip(restored.named_tensors()) {
            assert_eq!(*n1, n2);
            assert_eq!(t1.data(), t2.data(), "tensor `{n1}` changed");
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let model = sample_model();
        let mut ckpt = Checkpoint::from_model(&model, 1, "biapc", 77, BTreeMap::new());
        let pos = ckpt.tensors.iter().position(|(n, _)| n == "layer1.fwd_same.W_rec").unwrap();
        ckpt.tensors[pos].1 = Tensor::zeros(vec![2, 2]);
        let err = ckpt.to_model().unwrap_err();
        assert!(err.to_string().contains("layer1.fwd_same.W_rec"), "{err}");
    }

    #[test]
    fn hash_is_sensitive_to_single_bit() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let mut u = t.clone();
        u.data_mut()[3] = 4.0000005;
        assert_ne!(tensor_sha256(&t), tensor_sha256(&u));
        assert_eq!(tensor_sha256(&t).len(), 64);
    }

    #[test]
    fn unknown_metadata_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.bapc");
        let ckpt = Checkpoint::from_model(&sample_model(), 1, "biapc", 7, BTreeMap::new());
        ckpt.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // Splice an extra key into the metadata block and fix its length.
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut patched = bytes[..12].to_vec();
        let extra = b"mystery=1\n";
        patched[8..12].copy_from_slice(&((meta_len + extra.len()) as u32).to_le_bytes());
        patched.extend_from_slice(&bytes[12..12 + meta_len]);
        patched.extend_from_slice(extra);
        patched.extend_from_slice(&bytes[12 + meta_len..]);
        std::fs::write(&p, patched).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }
}
