use super::{Adam, AdamConfig, Monitor, Moments, Result, TrainError};
use crate::net::{DenseNetConfig, MetadataSpec, Model, NamedTensor, TensorRole};
use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const FORMAT: &str = "sahnet-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryRole {
    Parameter,
    Buffer,
    AdamM,
    AdamV,
}

/// Location of one tensor inside the blob. Offsets and lengths are in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub role: EntryRole,
    pub offset: u64,
    pub length: u64,
}

/// Training state stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub monitor: Option<Monitor>,
    pub best_metric: Option<f64>,
    pub seed: u64,
}

/// Human-readable half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub blob_bytes: u64,
    pub model: DenseNetConfig,
    pub metadata: Option<MetadataSpec>,
    pub meta: CheckpointMeta,
    pub adam: Option<AdamState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
}

/// A model with optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub meta: CheckpointMeta,
}

/// Blob file stored alongside `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn moment_name(param: &str, role: EntryRole) -> String {
    match role {
        EntryRole::AdamM => format!("{param}.adam_m"),
        _ => format!("{param}.adam_v"),
    }
}

impl Checkpoint {
    /// Serializes into a manifest and blob bytes.
    pub fn encode(&self, blob_name: &str) -> Result<(Manifest, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role: EntryRole, bytes: Vec<u8>, dtype: DType| {
            entries.push(TensorEntry {
                name,
                shape,
                dtype,
                role,
                offset: blob.len() as u64,
                length: bytes.len() as u64,
            });
            blob.extend(bytes);
        };
        for t in self.model.tensors() {
            let mut bytes = vec![0u8; t.data.len() * 4];
            LittleEndian::write_f32_into(&t.data, &mut bytes);
            let role = match t.role {
                TensorRole::Parameter => EntryRole::Parameter,
                TensorRole::Buffer => EntryRole::Buffer,
            };
            push(t.name.clone(), t.shape.clone(), role, bytes, DType::F32);
        }
        if let Some(opt) = &self.optimizer {
            for m in &opt.moments {
                let shape = self.model.tensor(&m.name)?.shape.clone();
                for (role, values) in [(EntryRole::AdamM, &m.m), (EntryRole::AdamV, &m.v)] {
                    let mut bytes = vec![0u8; values.len() * 8];
                    LittleEndian::write_f64_into(values, &mut bytes);
                    push(moment_name(&m.name, role), shape.clone(), role, bytes, DType::F64);
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            blob: blob_name.into(),
            blob_bytes: blob.len() as u64,
            model: self.model.config().clone(),
            metadata: self.model.metadata_spec().cloned(),
            meta: self.meta.clone(),
            adam: self.optimizer.as_ref().map(|o| AdamState { config: o.config, step: o.step }),
            tensors: entries,
        };
        Ok((manifest, blob))
    }

    /// Rebuilds a checkpoint from a manifest and blob bytes.
    pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(TrainError::ManifestCorrupt(format!("format {} v{}", manifest.format, manifest.version)));
        }
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(TrainError::BlobLengthMismatch { expected: manifest.blob_bytes, actual: blob.len() as u64 });
        }
        let mut cursor = 0u64;
        let mut tensors = Vec::new();
        let mut moments: Vec<Moments> = Vec::new();
        for e in &manifest.tensors {
            let count: usize = e.shape.iter().product();
            if e.offset != cursor || e.length != (count * e.dtype.width()) as u64 {
                return Err(TrainError::ManifestCorrupt(format!("entry '{}' has inconsistent extent", e.name)));
            }
            cursor += e.length;
            if cursor > blob.len() as u64 {
                return Err(TrainError::BlobLengthMismatch { expected: cursor, actual: blob.len() as u64 });
            }
            let bytes = &blob[e.offset as usize..cursor as usize];
            match (e.role, e.dtype) {
                (EntryRole::Parameter | EntryRole::Buffer, DType::F32) => {
                    let mut data = vec![0f32; count];
                    LittleEndian::read_f32_into(bytes, &mut data);
                    let role = if e.role == EntryRole::Parameter { TensorRole::Parameter } else { TensorRole::Buffer };
                    tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), role, data });
                }
                (EntryRole::AdamM | EntryRole::AdamV, DType::F64) => {
                    let suffix = if e.role == EntryRole::AdamM { ".adam_m" } else { ".adam_v" };
                    let param = e
                        .name
                        .strip_suffix(suffix)
                        .ok_or_else(|| TrainError::ManifestCorrupt(format!("moment entry '{}'", e.name)))?;
                    let mut data = vec![0f64; count];
                    LittleEndian::read_f64_into(bytes, &mut data);
                    if e.role == EntryRole::AdamM {
                        moments.push(Moments { name: param.to_string(), m: data, v: vec![] });
                    } else {
                        match moments.last_mut() {
                            Some(last) if last.name == param && last.v.is_empty() => last.v = data,
                            _ => return Err(TrainError::ManifestCorrupt(format!("unpaired moment '{}'", e.name))),
                        }
                    }
                }
                _ => return Err(TrainError::ManifestCorrupt(format!("entry '{}' has wrong element type", e.name))),
            }
        }
        if cursor != manifest.blob_bytes {
            return Err(TrainError::ManifestCorrupt("entries do not cover the blob".into()));
        }
        let model = Model::from_tensors(manifest.model.clone(), manifest.metadata.clone(), tensors).map_err(|e| match e {
            crate::net::NetError::UnknownTensorName(n) => TrainError::UnknownTensorName(n),
            other => TrainError::Net(other),
        })?;
        let optimizer = match manifest.adam {
            None if moments.is_empty() => None,
            None => return Err(TrainError::ManifestCorrupt("moments without optimizer state".into())),
            Some(state) => {
                let names = model.parameter_names();
                if moments.len() != names.len() || moments.iter().zip(&names).any(|(m, n)| m.name != *n) {
                    return Err(TrainError::ManifestCorrupt("optimizer moments do not match parameters".into()));
                }
                Some(Adam { config: state.config, step: state.step, moments })
            }
        };
        Ok(Self { model, optimizer, meta: manifest.meta.clone() })
    }

    /// Writes `path` (JSON manifest) and its blob next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_file = blob_path(path);
        let blob_name = blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| TrainError::ConfigInvalid(format!("checkpoint path {}", path.display())))?
            .to_string();
        let (manifest, blob) = self.encode(&blob_name)?;
        fs::write(&blob_file, blob)?;
        fs::write(path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| TrainError::ManifestCorrupt(e.to_string()))?;
        let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(blob_file)?;
        Self::decode(&manifest, &blob)
    }
}
