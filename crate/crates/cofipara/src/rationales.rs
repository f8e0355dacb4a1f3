//! Persistent rationale cache and bounded-concurrency generation.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use cofipara_core::rationale::{CacheRecord, RationaleCache, RationaleClient, RationaleGenerator, RetryPolicy};
use cofipara_core::{Phase, RationaleSet, Sample};
use rayon::prelude::*;

use crate::dataset::read_jsonl;
use crate::error::{Error, Result};

/// Append-only JSONL cache. Later lines win when a key repeats.
pub struct JsonlCache {
    path: PathBuf,
    inner: Mutex<(BTreeMap<String, CacheRecord>, File)>,
}

impl JsonlCache {
    pub fn open(path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        if path.exists() {
            for r in read_jsonl::<CacheRecord>(path)? {
                map.insert(r.key.clone(), r);
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), inner: Mutex::new((map, file)) })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<CacheRecord> {
        self.inner.lock().unwrap().0.values().cloned().collect()
    }
}

impl RationaleCache for JsonlCache {
    fn get(&self, key: &str) -> Option<String> {
        self.inner.lock().unwrap().0.get(key).map(|r| r.rationale.clone())
    }

    fn put(&self, mut record: CacheRecord) -> cofipara_core::Result<()> {
        record.created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let line = serde_json::to_string(&record).expect("cache records serialise");
        let mut guard = self.inner.lock().unwrap();
        writeln!(guard.1, "{line}")
            .and_then(|_| guard.1.flush())
            .map_err(|e| cofipara_core::Error::Contract(format!("{}: {e}", self.path.display())))?;
        guard.0.insert(record.key.clone(), record);
        Ok(())
    }
}

/// Which rationales a record receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Phase(Phase),
    /// Competing rationales for label-only records, the sarcastic one for
    /// records with targets.
    Auto,
}

impl Mode {
    pub fn phase_for(self, s: &Sample) -> Phase {
        match self {
            Mode::Phase(p) => p,
            Mode::Auto if s.has_targets() => Phase::Finetune,
            Mode::Auto => Phase::Pretrain,
        }
    }
}

/// Generates rationales for every sample on at most `jobs` threads. Output
/// order follows input order.
pub fn generate_all<C, K>(
    samples: &[Sample],
    client: &C,
    cache: &K,
    mode: Mode,
    retry: RetryPolicy,
    jobs: usize,
) -> Result<Vec<RationaleSet>>
where
    C: RationaleClient + Sync + ?Sized,
    K: RationaleCache + Sync + ?Sized,
{
    let generator = RationaleGenerator::new(client, cache).with_retry(retry);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    let results: Vec<cofipara_core::Result<RationaleSet>> = pool.install(|| {
        samples.par_iter().map(|s| generator.generate_for_phase(s, mode.phase_for(s))).collect()
    });
    results.into_iter().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cofipara_core::rationale::MockClient;
    use cofipara_core::{Raster, Stance};

    #[test]
    fn cache_survives_reopen_and_stamps_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample::new(&format!("s{i}"), "hello there world", Raster::solid(4, 4, [0; 3])).with_label(Stance::Sarcastic))
            .collect();
        let client = MockClient::new();
        {
            let cache = JsonlCache::open(&path).unwrap();
            generate_all(&samples, &client, &cache, Mode::Auto, RetryPolicy::default(), 3).unwrap();
            assert_eq!(client.calls(), 8);
            assert!(cache.records().iter().all(|r| r.created_at > 0));
        }
        let cache = JsonlCache::open(&path).unwrap();
        assert_eq!(cache.len(), 8);
        let again = generate_all(&samples, &client, &cache, Mode::Auto, RetryPolicy::default(), 2).unwrap();
        assert_eq!(client.calls(), 8);
        assert_eq!(again[0].r_pos, MockClient::render(Stance::Sarcastic, "hello there world"));
    }
}
