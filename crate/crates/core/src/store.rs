//! Append-only record store with prompt-hash cache keys.
//!
//! Layout of a store directory:
//!
//! ```text
//! rationales.train.log   stage-1 rationales
//! rationales.test.log    stage-2 rationales
//! predictions.log        stage-3 predictions
//! run_manifest           config snapshot and dataset hash of the last run
//! .lock                  held while a writer has the store open
//! ```
//!
//! Each log line is one JSON object `{"key": CacheKey, "record": ...}`. A
//! record is visible to [`Store::get`] once its line, newline included, has
//! been handed to the OS. Unparseable lines (a torn final write after a crash)
//! are skipped with a warning. Re-putting a key appends again; the last line wins.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{PredictionRecord, RationaleRecord, RationaleStage, SampleId};
use crate::prompting::PromptStage;

pub const TRAIN_LOG: &str = "rationales.train.log";
pub const TEST_LOG: &str = "rationales.test.log";
pub const PREDICTIONS_LOG: &str = "predictions.log";
pub const MANIFEST: &str = "run_manifest";
const LOCK: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("store {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("record does not match key: {0}")]
    Mismatch(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub sample_id: SampleId,
    pub stage: PromptStage,
    pub prompt_hash: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoredRecord {
    Rationale(RationaleRecord),
    Prediction(PredictionRecord),
}

impl StoredRecord {
    pub fn as_rationale(&self) -> Option<&RationaleRecord> {
        match self {
            StoredRecord::Rationale(r) => Some(r),
            StoredRecord::Prediction(_) => None,
        }
    }

    pub fn as_prediction(&self) -> Option<&PredictionRecord> {
        match self {
            StoredRecord::Prediction(p) => Some(p),
            StoredRecord::Rationale(_) => None,
        }
    }

    fn check(&self, key: &CacheKey) -> Result<(), StoreError> {
        let (sample_id, prompt_hash, model_id, stage) = match self {
            StoredRecord::Rationale(r) => (
                &r.sample_id,
                &r.prompt_hash,
                &r.model_id,
                match r.stage {
                    RationaleStage::TrainRationale => PromptStage::Stage1Rationale,
                    RationaleStage::TestRationale => PromptStage::Stage2Rationale,
                },
            ),
            StoredRecord::Prediction(p) => (
                &p.sample_id,
                &p.prompt_hash,
                &p.model_id,
                PromptStage::Stage3Answer,
            ),
        };
        if *sample_id != key.sample_id {
            return Err(StoreError::Mismatch("sample_id"));
        }
        if *prompt_hash != key.prompt_hash {
            return Err(StoreError::Mismatch("prompt_hash"));
        }
        if *model_id != key.model_id {
            return Err(StoreError::Mismatch("model_id"));
        }
        if stage != key.stage {
            return Err(StoreError::Mismatch("stage"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    key: CacheKey,
    record: StoredRecord,
}

fn log_name(stage: PromptStage) -> &'static str {
    match stage {
        PromptStage::Stage1Rationale => TRAIN_LOG,
        PromptStage::Stage2Rationale => TEST_LOG,
        PromptStage::Stage3Answer => PREDICTIONS_LOG,
    }
}

const STAGES: [PromptStage; 3] = [
    PromptStage::Stage1Rationale,
    PromptStage::Stage2Rationale,
    PromptStage::Stage3Answer,
];

/// Single-writer handle on a store directory.
pub struct Store {
    dir: PathBuf,
    _lock: File,
    index: HashMap<CacheKey, StoredRecord>,
    /// keys in first-appearance order, per stage
    order: HashMap<PromptStage, Vec<CacheKey>>,
    logs: HashMap<PromptStage, File>,
    corrupt_lines: usize,
}

impl Store {
    /// Opens (creating if needed) and locks `dir`, replaying every log.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let err = |path: &Path| {
            let path = path.to_owned();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(&dir).map_err(err(&dir))?;
        let lock_path = dir.join(LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(err(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(dir)),
            Err(fs::TryLockError::Error(e)) => return Err(err(&lock_path)(e)),
        }
        let mut store = Self {
            dir,
            _lock: lock,
            index: HashMap::new(),
            order: HashMap::new(),
            logs: HashMap::new(),
            corrupt_lines: 0,
        };
        for stage in STAGES {
            store.replay(stage)?;
        }
        Ok(store)
    }

    fn io(&self, name: &str) -> impl FnOnce(io::Error) -> StoreError {
        let path = self.dir.join(name);
        move |source| StoreError::Io { path, source }
    }

    fn replay(&mut self, stage: PromptStage) -> Result<(), StoreError> {
        let name = log_name(stage);
        let path = self.dir.join(name);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(self.io(name))?;
        let len = file.metadata().map_err(self.io(name))?.len();
        if len > 0 {
            // a torn last line must not swallow the next append
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1)).map_err(self.io(name))?;
            file.read_exact(&mut last).map_err(self.io(name))?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(self.io(name))?;
            }
            file.seek(SeekFrom::Start(0)).map_err(self.io(name))?;
        }
        let reader = BufReader::new(file.try_clone().map_err(self.io(name))?);
        for (i, line) in reader.split(b'\n').enumerate() {
            let line = line.map_err(self.io(name))?;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match serde_json::from_slice::<LogLine>(&line) {
                Ok(entry) if entry.key.stage == stage && entry.record.check(&entry.key).is_ok() => {
                    self.remember(entry.key, entry.record);
                }
                Ok(_) => {
                    log::warn!("{}:{}: record inconsistent with key, skipped", path.display(), i + 1);
                    self.corrupt_lines += 1;
                }
                Err(e) => {
                    log::warn!("{}:{}: corrupted line skipped: {e}", path.display(), i + 1);
                    self.corrupt_lines += 1;
                }
            }
        }
        self.logs.insert(stage, file);
        Ok(())
    }

    fn remember(&mut self, key: CacheKey, record: StoredRecord) {
        if !self.index.contains_key(&key) {
            self.order.entry(key.stage).or_default().push(key.clone());
        }
        self.index.insert(key, record);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Lines skipped during replay.
    pub fn corrupt_lines(&self) -> usize {
        self.corrupt_lines
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Appends `record` under `key` and flushes it to the OS.
    pub fn put(&mut self, key: CacheKey, record: StoredRecord) -> Result<(), StoreError> {
        record.check(&key)?;
        let name = log_name(key.stage);
        let mut line = serde_json::to_vec(&LogLine {
            key: key.clone(),
            record: record.clone(),
        })
        .expect("records serialize");
        line.push(b'\n');
        let err = self.io(name);
        let file = self.logs.get_mut(&key.stage).expect("log opened for every stage");
        file.write_all(&line).and_then(|_| file.flush()).map_err(err)?;
        self.remember(key, record);
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Option<&StoredRecord> {
        self.index.get(key)
    }

    /// Latest record per key for `stage`, in first-appearance order.
    pub fn records(&self, stage: PromptStage) -> impl Iterator<Item = (&CacheKey, &StoredRecord)> {
        self.order
            .get(&stage)
            .into_iter()
            .flatten()
            .map(|k| (k, &self.index[k]))
    }

    /// Rewrites each log keeping only the latest line per key.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        for stage in STAGES {
            let name = log_name(stage);
            let tmp = self.dir.join(format!("{name}.compact"));
            let mut body = Vec::new();
            for (key, record) in self.records(stage) {
                serde_json::to_writer(
                    &mut body,
                    &LogLine {
                        key: key.clone(),
                        record: record.clone(),
                    },
                )
                .expect("records serialize");
                body.push(b'\n');
            }
            write_synced(&tmp, &body).map_err(self.io(name))?;
            fs::rename(&tmp, self.dir.join(name)).map_err(self.io(name))?;
            let file = OpenOptions::new()
                .read(true)
                .append(true)
                .open(self.dir.join(name))
                .map_err(self.io(name))?;
            self.logs.insert(stage, file);
        }
        Ok(())
    }

    /// Atomically replaces a file in the store directory.
    pub fn write_artifact(&self, name: &str, contents: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        write_synced(&tmp, contents).map_err(self.io(name))?;
        fs::rename(&tmp, &path).map_err(self.io(name))?;
        Ok(path)
    }

    pub fn read_artifact(&self, name: &str) -> Option<String> {
        fs::read_to_string(self.dir.join(name)).ok()
    }
}

fn write_synced(path: &Path, contents: &[u8]) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(contents)?;
    f.sync_all()
}
