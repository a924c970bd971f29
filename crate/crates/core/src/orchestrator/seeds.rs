use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFile {
    pub path: PathBuf,
    pub size: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub files: Vec<SeedFile>,
    pub rng_seed: u64,
    pub excluded_oversize: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SeedSet {
    /// Digest over the selected files' contents, identical for every
    /// trial that shares this seed set.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.files {
            hasher.update(f.sha256.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Drops files larger than `max_bytes`, then samples `count` of the rest
/// uniformly without replacement. Reproducible from `rng_seed`.
pub fn select_seeds(
    corpus_dir: &Path,
    count: usize,
    max_bytes: u64,
    rng_seed: u64,
) -> Result<SeedSet, OrchestratorError> {
    let mut candidates = Vec::new();
    let mut excluded_oversize = Vec::new();
    let entries = std::fs::read_dir(corpus_dir).map_err(|e| OrchestratorError::Io {
        path: corpus_dir.to_path_buf(),
        source: e,
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| OrchestratorError::Io {
            path: corpus_dir.to_path_buf(),
            source: e,
        })?;
        let meta = entry.metadata().map_err(|e| OrchestratorError::Io {
            path: entry.path(),
            source: e,
        })?;
        if !meta.is_file() {
            continue;
        }
        if meta.len() > max_bytes {
            excluded_oversize.push(entry.path());
        } else {
            candidates.push((entry.path(), meta.len()));
        }
    }
    if candidates.is_empty() {
        return Err(OrchestratorError::EmptyCorpus(corpus_dir.to_path_buf()));
    }
    candidates.sort();
    excluded_oversize.sort();

    let mut warning = None;
    let chosen: Vec<(PathBuf, u64)> = if candidates.len() <= count {
        if candidates.len() < count {
            let msg = format!(
                "only {} usable seeds in {} (wanted {count}); taking all",
                candidates.len(),
                corpus_dir.display()
            );
            log::warn!("{msg}");
            warning = Some(msg);
        }
        candidates
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut idx = sample(&mut rng, candidates.len(), count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i].clone()).collect()
    };

    let files = chosen
        .into_iter()
        .map(|(path, size)| {
            let bytes = std::fs::read(&path).map_err(|e| OrchestratorError::Io {
                path: path.clone(),
                source: e,
            })?;
            Ok(SeedFile {
                sha256: hex::encode(Sha256::digest(&bytes)),
                path,
                size,
            })
        })
        .collect::<Result<Vec<_>, OrchestratorError>>()?;
    Ok(SeedSet {
        files,
        rng_seed,
        excluded_oversize,
        warning,
    })
}
