//! Model checkpoints: a JSON manifest plus a blob of little-endian `f32`
//! values holding every tensor in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::DatasetBounds;
use crate::model::{ArchitectureConfig, ModelError, ModelState};
use crate::nn::{Scalar, TensorKind, Tensors};
use crate::privacy::PrivacyBudget;
use crate::rng::Seeds;

const FORMAT: &str = "spatialgan-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Run information stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub epsilon: PrivacyBudget,
    pub seeds: Seeds,
    /// Training batch size; generation pushes noise through in chunks of
    /// this size.
    pub batch_size: usize,
    /// Source-unit extent used to map generated points back.
    pub bounds: Option<DatasetBounds>,
    /// Source column names, used as the header of generated CSVs.
    #[serde(default)]
    pub columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub architecture: ArchitectureConfig,
    pub step: u64,
    pub run: RunInfo,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Short identifier of the stored parameters.
    pub fn id(&self) -> &str {
        &self.blob_sha256[..12]
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest
/// path. Values are stored as `f32`.
pub fn save<T: Scalar>(
    dir: &Path,
    name: &str,
    state: &ModelState<T>,
    run: &RunInfo,
) -> Result<PathBuf, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    state.visit("", &mut |t| {
        for v in t.data {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: t.name,
            kind: t.kind,
            shape: t.shape,
            offset,
            len: t.data.len(),
        });
        offset += t.data.len();
    });
    let blob_name = format!("{name}.bin");
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        architecture: state.config.clone(),
        step: state.step,
        run: run.clone(),
        blob: blob_name.clone(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<(ModelState<f32>, Manifest), CheckpointError> {
    let manifest = read_manifest(path)?;
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(CheckpointError::Corrupt("blob digest mismatch".into()));
    }
    if blob.len() % 4 != 0 {
        return Err(CheckpointError::Corrupt("blob length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    // the seed is irrelevant: every tensor is overwritten below
    let mut state = ModelState::<f32>::init(manifest.architecture.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    state.step = manifest.step;
    let mut entries = manifest.tensors.iter();
    let mut problem = None;
    let mut seen = 0;
    state.visit_mut("", &mut |name, kind, data| {
        seen += 1;
        if problem.is_some() {
            return;
        }
        let Some(e) = entries.next() else {
            problem = Some(format!("manifest lacks tensor {name}"));
            return;
        };
        if e.name != name || e.kind != kind || e.len != data.len() {
            problem = Some(format!("tensor {} does not match {name}", e.name));
            return;
        }
        match values.get(e.offset..e.offset + e.len) {
            Some(src) => data.copy_from_slice(src),
            None => problem = Some(format!("tensor {} runs past the blob", e.name)),
        }
    });
    if let Some(p) = problem {
        return Err(CheckpointError::Corrupt(p));
    }
    if seen != manifest.tensors.len() {
        return Err(CheckpointError::Corrupt("manifest lists extra tensors".into()));
    }
    state.check_finite()?;
    Ok((state, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_info() -> RunInfo {
        RunInfo {
            epsilon: PrivacyBudget::finite(0.25).unwrap(),
            seeds: Seeds::from_master(9),
            batch_size: 16,
            bounds: None,
            columns: vec!["x".into(), "y".into()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = ModelState::<f32>::init(ArchitectureConfig::tiny(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        state.step = 1234;
        let path = save(dir.path(), "ckpt", &state, &run_info()).unwrap();
        let (back, manifest) = load(&path).unwrap();
        assert_eq!(back, state);
        assert_eq!(manifest.run, run_info());
        let bits = |s: &ModelState<f32>| -> Vec<u32> {
            let mut v = s.flatten(TensorKind::Param);
            v.extend(s.flatten(TensorKind::Buffer));
            v.iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&back), bits(&state));
    }

    #[test]
    fn detects_tampered_blob() {
        let dir = tempfile::tempdir().unwrap();
        let state = ModelState::<f32>::init(ArchitectureConfig::tiny(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let path = save(dir.path(), "c", &state, &run_info()).unwrap();
        let blob = dir.path().join("c.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load(&dir.path().join("none.json")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
