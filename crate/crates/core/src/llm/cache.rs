//! Content-addressed response cache keyed on (model, temperature, prompt).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{CompletionRequest, LlmBackend, LlmError};
use crate::hashing::sha256_hex;

pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

pub fn cache_key(model: &str, temperature: f64, prompt: &str) -> String {
    let mut buf = Vec::with_capacity(prompt.len() + 64);
    for part in [model.as_bytes(), &temperature.to_bits().to_le_bytes(), prompt.as_bytes()] {
        buf.extend_from_slice(&(part.len() as u64).to_le_bytes());
        buf.extend_from_slice(part);
    }
    sha256_hex(&buf)
}

impl<B: LlmBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Cache { path: dir.clone(), source })?;
        Ok(Self {
            inner,
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Number of calls that reached the wrapped backend.
    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.txt"))
    }
}

fn write_atomic(path: &Path, body: &str) -> std::io::Result<()> {
    let parent = path.parent().expect("cache entries live in a shard dir");
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile_in(parent)?;
    tmp.1.write_all(body.as_bytes())?;
    tmp.1.sync_all()?;
    fs::rename(&tmp.0, path)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    let file = fs::File::create(&path)?;
    Ok((path, file))
}

impl<B: LlmBackend> LlmBackend for CachedBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let key = cache_key(self.inner.model(), self.inner.temperature(), &request.prompt);
        let path = self.path_for(&key);
        match fs::read_to_string(&path) {
            Ok(body) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(body);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => return Err(LlmError::Cache { path, source }),
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let body = self.inner.complete(request)?;
        write_atomic(&path, &body).map_err(|source| LlmError::Cache { path, source })?;
        Ok(body)
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }
}
