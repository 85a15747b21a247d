//! Binary checkpoints: `"STPS"`, `u32` format version, `u64` manifest
//! length, JSON manifest, little-endian `f64` payloads, trailing CRC-64.

use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Normalizer, RoadGraph, SensingPartition};
use crate::diffcore::{ParamEntry, ParameterStore};
use crate::error::{Result, StpsError};
use crate::pipeline::config::{ModelConfig, Stage};
use crate::pipeline::model::StpsModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STPS";
pub const FORMAT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);
const HEADER: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_count: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    normalizer: Normalizer,
    partition: SensingPartition,
    edges: Vec<(usize, usize)>,
    trained: Vec<Stage>,
    rng: RngState,
    tensors: Vec<TensorRecord>,
}

fn push_tensor<T: Scalar>(records: &mut Vec<TensorRecord>, payload: &mut Vec<u8>, name: String, t: &Tensor<T>, step_count: Option<u64>) {
    records.push(TensorRecord {
        name,
        shape: t.shape().to_vec(),
        offset: payload.len(),
        step_count,
    });
    for v in t.data() {
        payload.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

/// Serialises `model` into checkpoint bytes.
pub fn to_bytes<T: Scalar>(model: &StpsModel<T>) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for (name, e) in model.store.iter() {
        push_tensor(&mut records, &mut payload, format!("param/{name}"), &e.value, Some(e.step_count));
        push_tensor(&mut records, &mut payload, format!("adam_m/{name}"), &e.adam_m, None);
        push_tensor(&mut records, &mut payload, format!("adam_v/{name}"), &e.adam_v, None);
    }
    let manifest = Manifest {
        config: model.config.clone(),
        normalizer: model.normalizer,
        partition: model.partition.clone(),
        edges: model.graph.edges(),
        trained: model.trained.clone(),
        rng: RngState {
            seed: model.rng.get_seed().to_vec(),
            stream: model.rng.get_stream(),
            word_pos: model.rng.get_word_pos().to_string(),
        },
        tensors: records,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let sum = CRC64.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn read_tensor<T: Scalar>(payload: &[u8], r: &TensorRecord) -> Result<Tensor<T>> {
    let n: usize = r.shape.iter().product();
    let end = r.offset.checked_add(n * 8).filter(|&e| e <= payload.len()).ok_or_else(|| {
        StpsError::Corrupt(format!("tensor `{}` extends past the payload", r.name))
    })?;
    let data = payload[r.offset..end]
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Tensor::new(r.shape.clone(), data)
}

/// Parses checkpoint bytes.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<StpsModel<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(StpsError::Corrupt("missing STPS magic".into()));
    }
    if bytes.len() < HEADER + 8 {
        return Err(StpsError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(StpsError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if CRC64.checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(StpsError::Checksum);
    }
    let json_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = HEADER
        .checked_add(json_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| StpsError::Corrupt("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&body[HEADER..json_end])
        .map_err(|e| StpsError::Corrupt(format!("manifest: {e}")))?;
    let payload = &body[json_end..];

    let n = manifest.partition.n();
    let graph = RoadGraph::from_edges(n, &manifest.edges)?;
    let mut model = StpsModel::<T>::with_store(
        manifest.config.clone(),
        graph,
        manifest.partition.clone(),
        manifest.normalizer,
        ParameterStore::new(),
    )?;
    let find = |name: &str| manifest.tensors.iter().find(|r| r.name == name);
    let expected = model.param_names();
    let mut store = ParameterStore::new();
    for name in &expected {
        let rec = find(&format!("param/{name}")).ok_or_else(|| StpsError::MissingParameter(name.clone()))?;
        let value = read_tensor::<T>(payload, rec)?;
        let moment = |kind: &str| -> Result<Tensor<T>> {
            let r = find(&format!("{kind}/{name}"))
                .ok_or_else(|| StpsError::Corrupt(format!("no {kind} moment for `{name}`")))?;
            let t = read_tensor::<T>(payload, r)?;
            if t.shape() != value.shape() {
                return Err(StpsError::Corrupt(format!("{kind} moment shape of `{name}`")));
            }
            Ok(t)
        };
        let entry = ParamEntry {
            adam_m: moment("adam_m")?,
            adam_v: moment("adam_v")?,
            step_count: rec.step_count.unwrap_or(0),
            grad: None,
            value,
        };
        store.insert_entry(name.clone(), entry);
    }
    if let Some(extra) = manifest
        .tensors
        .iter()
        .filter_map(|r| r.name.strip_prefix("param/"))
        .find(|name| !expected.iter().any(|e| e == name))
    {
        return Err(StpsError::UnknownParameter(extra.to_string()));
    }
    // Shapes must match what the configuration would initialise.
    let fresh = StpsModel::<T>::new(manifest.config.clone(), model.graph.clone(), model.partition.clone(), model.normalizer)?;
    for (name, e) in fresh.store.iter() {
        let got = store.value(name).expect("all expected names loaded").shape();
        if got != e.value.shape() {
            return Err(StpsError::Corrupt(format!(
                "parameter `{name}` has shape {got:?}, expected {:?}",
                e.value.shape()
            )));
        }
    }
    model.store = store;
    model.trained = manifest.trained;
    let seed: [u8; 32] = manifest
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| StpsError::Corrupt("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| StpsError::Corrupt("rng word position".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);
    model.rng = rng;
    Ok(model)
}

pub fn checkpoint_save<T: Scalar>(model: &StpsModel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn checkpoint_load<T: Scalar>(path: impl AsRef<Path>) -> Result<StpsModel<T>> {
    from_bytes(&std::fs::read(path)?)
}
