//! Model container:
//!
//! ```text
//! "IDFM" | version u16 | header length u32 | JSON header
//!        | value count u64 | f64 values in store order | checksum [8]
//! ```
//!
//! All integers are little-endian. The header carries the model config,
//! every permutation (with its seed) and the name, shape and group of each
//! parameter. The checksum is the first 8 bytes of SHA-256 over everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{FlowModel, ModelConfig};
use crate::container::{checksum8, sha256, verify_checksum, ByteReader};
use crate::error::{Error, Result};
use crate::grid::ChannelPermutation;
use crate::nn::ParamGroup;

pub const MODEL_MAGIC: &[u8; 4] = b"IDFM";
pub const MODEL_VERSION: u16 = 1;

/// Which coupling half is transformed: the leading `split` fraction of the
/// channels conditions, the remainder is translated.
const COUPLING_LAYOUT: &str = "condition_leading";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: ModelConfig,
    coupling_layout: String,
    permutations: Vec<Vec<ChannelPermutation>>,
    params: Vec<ParamMeta>,
}

pub fn model_to_bytes(model: &FlowModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        config: model.config().clone(),
        coupling_layout: COUPLING_LAYOUT.into(),
        permutations: model
            .levels()
            .iter()
            .map(|l| l.steps.iter().map(|s| s.perm.clone()).collect())
            .collect(),
        params: model
            .store()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: p.group,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let count: usize = model.store().iter().map(|p| p.value.len()).sum();
    let mut out = Vec::with_capacity(4 + 2 + 4 + json.len() + 8 + 8 * count + 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in model.store().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum8(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FlowModel> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not a model container".into()));
    }
    let body = verify_checksum(bytes, "model container")?;
    let mut r = ByteReader::new(&body[4..], "model container");
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: ModelHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.coupling_layout != COUPLING_LAYOUT {
        return Err(Error::Format(format!(
            "unknown coupling layout {:?}",
            header.coupling_layout
        )));
    }
    let mut model = FlowModel::build(header.config, Some(header.permutations))?;
    if model.store().len() != header.params.len() {
        return Err(Error::ModelMismatch(format!(
            "container lists {} parameters, config builds {}",
            header.params.len(),
            model.store().len()
        )));
    }
    for (p, meta) in model.store().iter().zip(&header.params) {
        if p.name != meta.name || p.value.shape() != &meta.shape[..] || p.group != meta.group {
            return Err(Error::ModelMismatch(format!(
                "parameter {} {:?} does not match stored {} {:?}",
                p.name,
                p.value.shape(),
                meta.name,
                meta.shape
            )));
        }
    }
    let count = r.len_u64(8)?;
    let expected: usize = model.store().iter().map(|p| p.value.len()).sum();
    if count != expected {
        return Err(Error::ModelMismatch(format!(
            "{count} stored values, model has {expected}"
        )));
    }
    for i in 0..model.store().len() {
        for v in model.store_mut().get_mut(i).value.data_mut() {
            *v = r.f64()?;
        }
    }
    r.finish()?;
    Ok(model)
}

pub fn save_model(model: &FlowModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FlowModel> {
    model_from_bytes(&std::fs::read(path)?)
}

/// SHA-256 of the serialized model; streams record it to refuse decoding
/// with a different model.
pub fn model_hash(model: &FlowModel) -> Result<[u8; 32]> {
    Ok(sha256(&model_to_bytes(model)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::model::PermutationKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(cfg: ModelConfig) -> FlowModel {
        let mut m = FlowModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..m.store().len() {
            for v in m.store_mut().get_mut(i).value.data_mut() {
                *v += rng.gen_range(-1.0..1.0) * 1e-3;
            }
        }
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for kind in [PermutationKind::Random, PermutationKind::Reverse] {
            let mut cfg = ModelConfig::tiny_idfpp();
            cfg.permutation = kind;
            let m = perturbed(cfg);
            let bytes = model_to_bytes(&m).unwrap();
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn stored_permutations_win_over_seed() {
        let m = perturbed(ModelConfig::tiny_idf());
        let seeds: Vec<Option<u64>> = m.levels()[0].steps.iter().map(|s| s.perm.seed()).collect();
        assert!(seeds.iter().all(Option::is_some));
        let back = model_from_bytes(&model_to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.levels()[1].steps[1].perm, m.levels()[1].steps[1].perm);
    }

    #[test]
    fn corruption_is_detected() {
        let m = perturbed(ModelConfig::tiny_idf());
        let mut bytes = model_to_bytes(&m).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(model_from_bytes(b"nope"), Err(Error::Format(_))));
        let good = model_to_bytes(&m).unwrap();
        assert!(model_from_bytes(&good[..good.len() - 3]).is_err());
    }

    #[test]
    fn hash_tracks_parameters() {
        let a = perturbed(ModelConfig::tiny_idf());
        let mut b = a.clone();
        assert_eq!(model_hash(&a).unwrap(), model_hash(&b).unwrap());
        b.store_mut().get_mut(0).value.data_mut()[0] += 1e-12;
        assert_ne!(model_hash(&a).unwrap(), model_hash(&b).unwrap());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.idfm");
        let m = perturbed(ModelConfig::toy(8));
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}
