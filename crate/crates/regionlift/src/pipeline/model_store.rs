//! Versioned model container: a binary envelope (magic, version, payload
//! length, SHA-256 trailer) around a JSON payload. JSON floats use the
//! shortest round-trip form, so every score survives save/load bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bow::{Codebook, PyramidConfig, SamplingConfig};
use crate::svm::{KernelSpec, SupportVector, SvmModel};

use super::config::RunConfig;
use super::PipelineError;

const MAGIC: [u8; 4] = *b"RGLM";
pub const MODEL_VERSION: u32 = 1;

/// Linear region classifier for one category, referencing a codebook slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryModel {
    pub codebook_idx: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Persisted per-category rescorer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RescorerState {
    Model(SvmModelDto),
    /// Training was degenerate; the cascade falls back to simple fusion.
    Fallback { reason: String },
}

/// The full trained artifact: codebooks, per-category linear classifiers,
/// optional rescorers, and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub codebooks: Vec<Codebook<f64>>,
    pub categories: BTreeMap<u32, CategoryModel>,
    pub rescorers: BTreeMap<u32, RescorerState>,
}

impl ModelBundle {
    pub fn pyramid(&self) -> PyramidConfig {
        self.config.pyramid.clone()
    }

    pub fn sampling(&self) -> SamplingConfig {
        self.config.sampling_config()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModelDto {
    pub kernel: KernelDto,
    pub support_vectors: Vec<(f64, usize, Vec<f64>)>,
    pub bias: f64,
    pub dim: usize,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum KernelDto {
    Linear,
    Rbf { gamma: f64 },
}

impl SvmModelDto {
    pub fn from_model(model: &SvmModel<f64>) -> Self {
        let kernel = match model.kernel() {
            KernelSpec::Linear => KernelDto::Linear,
            KernelSpec::Rbf { gamma } => KernelDto::Rbf { gamma: *gamma },
        };
        Self {
            kernel,
            support_vectors: model
                .support_vectors()
                .iter()
                .map(|sv| (sv.coeff, sv.index, sv.x.clone()))
                .collect(),
            bias: model.bias(),
            dim: model.dim(),
            c: model.box_constraint(),
        }
    }

    pub fn into_model(self) -> SvmModel<f64> {
        let kernel = match self.kernel {
            KernelDto::Linear => KernelSpec::Linear,
            KernelDto::Rbf { gamma } => KernelSpec::Rbf { gamma },
        };
        let svs = self
            .support_vectors
            .into_iter()
            .map(|(coeff, index, x)| SupportVector { coeff, index, x })
            .collect();
        SvmModel::from_parts(kernel, svs, self.bias, self.dim, self.c)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleDto {
    config: RunConfig,
    codebooks: Vec<CodebookDto>,
    categories: BTreeMap<u32, CategoryModel>,
    rescorers: BTreeMap<u32, RescorerState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookDto {
    dim: usize,
    centers: Vec<Vec<f64>>,
}

pub fn save_model(path: &Path, bundle: &ModelBundle) -> Result<(), PipelineError> {
    let dto = BundleDto {
        config: bundle.config.clone(),
        codebooks: bundle
            .codebooks
            .iter()
            .map(|cb| CodebookDto { dim: cb.dim(), centers: cb.centers().to_vec() })
            .collect(),
        categories: bundle.categories.clone(),
        rescorers: bundle.rescorers.clone(),
    };
    let payload = serde_json::to_vec(&dto).expect("bundle serializes");
    let digest = Sha256::digest(&payload);

    let io_err = |source| PipelineError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&MAGIC).map_err(io_err)?;
    f.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io_err)?;
    f.write_all(&(payload.len() as u64).to_le_bytes()).map_err(io_err)?;
    f.write_all(&payload).map_err(io_err)?;
    f.write_all(&digest).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<ModelBundle, PipelineError> {
    let io_err = |source| PipelineError::Io { path: path.display().to_string(), source };
    let model_err = |message: String| PipelineError::ModelStore {
        path: path.display().to_string(),
        message,
    };
    let mut f = std::fs::File::open(path).map_err(io_err)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| model_err("truncated header".into()))?;
    if head[0..4] != MAGIC {
        return Err(model_err("bad magic; not a model file".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(model_err(format!(
            "unsupported model version {version} (supported: {MODEL_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; len];
    f.read_exact(&mut payload)
        .map_err(|_| model_err("truncated payload".into()))?;
    let mut digest = [0u8; 32];
    f.read_exact(&mut digest)
        .map_err(|_| model_err("truncated checksum".into()))?;
    if Sha256::digest(&payload)[..] != digest {
        return Err(model_err("checksum mismatch; file is corrupt".into()));
    }
    let dto: BundleDto = serde_json::from_slice(&payload)
        .map_err(|e| model_err(format!("payload does not parse: {e}")))?;

    let codebooks = dto
        .codebooks
        .into_iter()
        .map(|cb| Codebook::from_centers(cb.centers))
        .collect::<Result<Vec<_>, _>>()?;
    for cat in dto.categories.values() {
        if cat.codebook_idx >= codebooks.len() {
            return Err(model_err("category references a missing codebook".into()));
        }
    }
    Ok(ModelBundle {
        config: dto.config,
        codebooks,
        categories: dto.categories,
        rescorers: dto.rescorers,
    })
}
