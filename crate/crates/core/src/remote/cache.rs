use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use sha2::{Digest, Sha256};

use super::transport::Transport;
use super::wire::{CompletionRequest, CompletionResponse};
use crate::error::Result;

/// On-disk response cache in front of another transport.
///
/// One JSON file per key, key = SHA-256 of `model_name`, a NUL byte and the
/// serialized request body. Scoring requests are always cached; sampling
/// requests only when they carry a seed. Entries are written to a temporary
/// file and renamed into place. Cache I/O failures fall back to the inner
/// transport with a warning.
pub struct CachedTransport<T> {
    inner: T,
    dir: PathBuf,
    model_name: String,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<T: Transport> CachedTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>, model_name: impl Into<String>) -> Self {
        Self { inner, dir: dir.into(), model_name: model_name.into(), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn key(&self, request: &CompletionRequest) -> Result<String> {
        let body = serde_json::to_vec(request)?;
        let mut h = Sha256::new();
        h.update(self.model_name.as_bytes());
        h.update([0u8]);
        h.update(&body);
        Ok(hex::encode(h.finalize()))
    }

    pub fn path_for(&self, request: &CompletionRequest) -> Result<PathBuf> {
        Ok(self.dir.join(format!("{}.json", self.key(request)?)))
    }

    fn cacheable(request: &CompletionRequest) -> bool {
        request.is_scoring() || request.seed.is_some()
    }

    fn load(path: &Path) -> Option<CompletionResponse> {
        match std::fs::read(path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(resp) => Some(resp),
                Err(e) => {
                    warn!("corrupted cache entry {}: {e}; refetching", path.display());
                    None
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => {
                warn!("cache read failed for {}: {e}", path.display());
                None
            }
        }
    }

    fn store(&self, path: &Path, resp: &CompletionResponse) {
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(&self.dir)?;
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            tmp.write_all(&serde_json::to_vec(resp)?)?;
            tmp.persist(path).map_err(|e| e.error)?;
            Ok(())
        };
        if let Err(e) = write() {
            warn!("cache write failed for {}: {e}", path.display());
        }
    }
}

impl<T: Transport> Transport for CachedTransport<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        if !Self::cacheable(request) {
            return self.inner.complete(request);
        }
        let path = self.path_for(request)?;
        if let Some(hit) = Self::load(&path) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let resp = self.inner.complete(request)?;
        self.store(&path, &resp);
        Ok(resp)
    }
}
