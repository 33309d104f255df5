//! Content-addressed on-disk query cache.
//!
//! One JSON record per [`QueryCacheKey`], named `<key>.json`. Records are
//! written to a temporary file and hard-linked into place, so a record is
//! either absent or complete and the first writer wins.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, LabelLogProbs, QueryCacheKey, QueryRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: QueryCacheKey,
    backend: BackendDescriptor,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    system: Option<String>,
    prompt: String,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wire: Option<String>,
    result: LabelLogProbs,
}

#[derive(Debug)]
pub struct CacheStore {
    dir: PathBuf,
    memory: RwLock<HashMap<QueryCacheKey, LabelLogProbs>>,
}

impl CacheStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            memory: RwLock::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &QueryCacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &QueryCacheKey) -> Result<Option<LabelLogProbs>> {
        if let Some(hit) = self.memory.read().unwrap_or_else(|e| e.into_inner()).get(key) {
            return Ok(Some(hit.clone()));
        }
        let path = self.path(key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let record: CacheRecord = serde_json::from_str(&text)?;
        self.memory
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.clone(), record.result.clone());
        Ok(Some(record.result))
    }

    fn put(&self, record: CacheRecord) -> Result<()> {
        let path = self.path(&record.key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{:?}.tmp",
            record.key,
            std::process::id(),
            std::thread::current().id()
        ));
        let body = serde_json::to_vec_pretty(&record)?;
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        let linked = std::fs::hard_link(&tmp, &path);
        let _ = std::fs::remove_file(&tmp);
        match linked {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        self.memory
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(record.key, record.result);
        Ok(())
    }
}

/// Serves repeated queries from a [`CacheStore`].
pub struct CachedBackend<B> {
    inner: B,
    store: CacheStore,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, store: CacheStore) -> Self {
        Self {
            inner,
            store,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }

    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs> {
        let descriptor = self.inner.descriptor();
        let key = QueryCacheKey::compute(&descriptor, request);
        if let Some(hit) = self.store.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let (result, wire) = self.inner.query_with_wire(request)?;
        self.store.put(CacheRecord {
            key,
            backend: descriptor,
            question: request.question.to_string(),
            system: request.prompt.system.clone(),
            prompt: request.prompt.text.clone(),
            labels: request.labels(),
            wire,
            result: result.clone(),
        })?;
        Ok(result)
    }

    fn query_with_wire(&self, request: &QueryRequest<'_>) -> Result<(LabelLogProbs, Option<String>)> {
        self.query(request).map(|r| (r, None))
    }

    fn network_calls(&self) -> u64 {
        self.inner.network_calls()
    }
}
