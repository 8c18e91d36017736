//! Directory checkpoints: `manifest.json` plus one little-endian blob.
//!
//! ```text
//! <dir>/manifest.json   format, dtype, spec, seed, provenance, tensor index, hashes
//! <dir>/weights.bin     tensors back to back in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HybridLM, HybridModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "hybrid-lm-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub spec: HybridModelSpec,
    pub seed: u64,
    /// Stages that produced the weights, oldest first.
    pub provenance: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    /// sha256 of this manifest serialized with an empty `manifest_hash`.
    pub manifest_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn compute_hash(&self) -> Result<String> {
        let mut m = self.clone();
        m.manifest_hash.clear();
        Ok(sha256_hex(&serde_json::to_vec(&m)?))
    }
}

/// Writes `model` to `dir` (created if missing) and returns the manifest.
pub fn save<T: Scalar>(model: &HybridLM<T>, dir: &Path, seed: u64, provenance: &[String]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.num_params() * T::BYTES);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in &model.params {
        let offset = blob.len();
        for &x in t.data() {
            x.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let mut manifest = Manifest {
        format: FORMAT.to_string(),
        dtype: T::DTYPE.to_string(),
        spec: model.spec.clone(),
        seed,
        provenance: provenance.to_vec(),
        tensors,
        blob_sha256: sha256_hex(&blob),
        manifest_hash: String::new(),
    };
    manifest.manifest_hash = manifest.compute_hash()?;
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", m.format)));
    }
    if m.compute_hash()? != m.manifest_hash {
        return Err(Error::Checkpoint("manifest hash mismatch".into()));
    }
    Ok(m)
}

/// Loads a checkpoint written with the same scalar type.
pub fn load<T: Scalar>(dir: &Path) -> Result<(HybridLM<T>, Manifest)> {
    let m = read_manifest(dir)?;
    if m.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint holds {}, requested {}", m.dtype, T::DTYPE)));
    }
    let blob = fs::read(dir.join(BLOB))?;
    if sha256_hex(&blob) != m.blob_sha256 {
        return Err(Error::Checkpoint("weights blob hash mismatch".into()));
    }
    m.spec.validate()?;
    let expected = m.spec.param_shapes();
    let mut params = std::collections::BTreeMap::new();
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        if e.bytes != n * T::BYTES || e.offset + e.bytes > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} has a bad extent", e.name)));
        }
        let data = blob[e.offset..e.offset + e.bytes].chunks_exact(T::BYTES).map(T::read_le).collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    for (name, shape) in &expected {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            _ => return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen"))),
        }
    }
    Ok((
        HybridLM {
            spec: m.spec.clone(),
            params,
        },
        m,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> HybridLM<f32> {
        let mut s = HybridModelSpec::teacher(19, 8, 2, 2, 1, 12);
        s.layer_kinds = vec![LayerKind::Ssm, LayerKind::Attention];
        s.state_dim = 6;
        HybridLM::init(s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let man = save(&m, dir.path(), 3, &["teacher".into(), "convert".into()]).unwrap();
        let (back, man2) = load::<f32>(dir.path()).unwrap();
        assert_eq!(man, man2);
        assert_eq!(back, m);
        let toks = [1, 5, 2, 7];
        let a = m.logits(&toks).unwrap();
        let b = back.logits(&toks).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tampering_and_dtype_are_detected() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        save(&m, dir.path(), 0, &[]).unwrap();
        assert!(matches!(load::<f64>(dir.path()), Err(Error::Checkpoint(_))));
        let mut blob = fs::read(dir.path().join(BLOB)).unwrap();
        blob[0] ^= 1;
        fs::write(dir.path().join(BLOB), blob).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Checkpoint(_))));
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        fs::write(dir.path().join(MANIFEST), text.replace("\"seed\": 0", "\"seed\": 1")).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Checkpoint(_))));
    }
}
