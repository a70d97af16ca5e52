//! Character records and job metadata in one JSON file; images on disk under
//! their content hash. Reads run concurrently, writes are serialized and
//! persisted with write-then-rename.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use image::RgbImage;
use panelforge_core::diffusion::PanelSpecDoc;
use panelforge_core::imaging::encode_png;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ApiError;

pub const STORE_FILE: &str = "store.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterRecord {
    pub id: String,
    pub name: String,
    /// URL of the square-padded crop.
    pub image: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    /// Milliseconds since the Unix epoch.
    pub submitted_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub id: String,
    pub spec: PanelSpecDoc,
    pub state: JobState,
    /// Image URL, present iff `state` is done.
    pub result: Option<String>,
    /// Inline PNG, only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_base64: Option<String>,
    pub error: Option<String>,
    pub timings: Timings,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Data {
    characters: BTreeMap<String, CharacterRecord>,
    jobs: BTreeMap<String, GenerationJob>,
    next_job: u64,
}

pub struct Store {
    dir: PathBuf,
    data: RwLock<Data>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn image_url(hash: &str) -> String {
    format!("/images/{hash}.png")
}

impl Store {
    /// Open or create a store under `dir`. Jobs left queued or running by a
    /// previous process are marked failed.
    pub fn open(dir: &Path) -> Result<Self, ApiError> {
        std::fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(ApiError::internal)?;
        let path = dir.join(STORE_FILE);
        let mut data: Data = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(ApiError::internal)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Data::default(),
            Err(e) => return Err(ApiError::internal(e)),
        };
        for job in data.jobs.values_mut() {
            if !job.state.is_terminal() {
                job.state = JobState::Failed;
                job.error = Some("interrupted by a service restart".into());
                job.timings.finished_ms = Some(now_ms());
            }
        }
        let store = Store {
            dir: dir.to_path_buf(),
            data: RwLock::new(data),
        };
        store.persist(&store.data.read().expect("store lock"))?;
        Ok(store)
    }

    fn persist(&self, data: &Data) -> Result<(), ApiError> {
        let tmp = self.dir.join(format!("{STORE_FILE}.tmp"));
        let bytes = serde_json::to_vec_pretty(data).map_err(ApiError::internal)?;
        std::fs::write(&tmp, bytes).map_err(ApiError::internal)?;
        std::fs::rename(&tmp, self.dir.join(STORE_FILE)).map_err(ApiError::internal)
    }

    fn write<T>(&self, f: impl FnOnce(&mut Data) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let mut data = self.data.write().expect("store lock");
        let out = f(&mut data)?;
        self.persist(&data)?;
        Ok(out)
    }

    /// Write a PNG under its content hash; returns the hash.
    pub fn put_image(&self, img: &RgbImage) -> Result<String, ApiError> {
        let bytes = encode_png(img);
        let hash = hex::encode(Sha256::digest(&bytes));
        let path = self.image_path(&hash);
        if !path.exists() {
            std::fs::write(&path, &bytes).map_err(ApiError::internal)?;
        }
        Ok(hash)
    }

    pub fn image_path(&self, hash: &str) -> PathBuf {
        self.dir.join(IMAGE_DIR).join(format!("{hash}.png"))
    }

    /// PNG bytes for a hash from an image URL, if present.
    pub fn image_bytes(&self, hash: &str) -> Option<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        std::fs::read(self.image_path(hash)).ok()
    }

    /// Insert a character; the id is derived from name and payload, so the
    /// same upload twice returns the existing record. Second value is true
    /// when a record was created.
    pub fn add_character(&self, name: &str, payload: &[u8], crop: &RgbImage) -> Result<(CharacterRecord, bool), ApiError> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(payload);
        let id = format!("chr-{}", &hex::encode(h.finalize())[..16]);
        if let Some(r) = self.character(&id) {
            return Ok((r, false));
        }
        let hash = self.put_image(crop)?;
        self.write(|d| {
            let rec = d.characters.entry(id.clone()).or_insert_with(|| CharacterRecord {
                id: id.clone(),
                name: name.to_string(),
                image: image_url(&hash),
                created_at: now_ms() / 1000,
            });
            Ok((rec.clone(), true))
        })
    }

    pub fn character(&self, id: &str) -> Option<CharacterRecord> {
        self.data.read().expect("store lock").characters.get(id).cloned()
    }

    pub fn characters(&self) -> Vec<CharacterRecord> {
        self.data.read().expect("store lock").characters.values().cloned().collect()
    }

    pub fn delete_character(&self, id: &str) -> Result<bool, ApiError> {
        self.write(|d| Ok(d.characters.remove(id).is_some()))
    }

    /// Crop image of a stored character.
    pub fn character_image(&self, id: &str) -> Result<RgbImage, ApiError> {
        let rec = self
            .character(id)
            .ok_or_else(|| ApiError::not_found(format!("character {id} does not exist")))?;
        let hash = rec.image.trim_start_matches("/images/").trim_end_matches(".png");
        let path = self.image_path(hash);
        Ok(image::open(&path).map_err(ApiError::internal)?.to_rgb8())
    }

    pub fn new_job(&self, spec: PanelSpecDoc) -> Result<GenerationJob, ApiError> {
        self.write(|d| {
            d.next_job += 1;
            let job = GenerationJob {
                id: format!("job-{:06}", d.next_job),
                spec,
                state: JobState::Queued,
                result: None,
                result_base64: None,
                error: None,
                timings: Timings {
                    submitted_ms: now_ms(),
                    ..Timings::default()
                },
            };
            d.jobs.insert(job.id.clone(), job.clone());
            Ok(job)
        })
    }

    pub fn drop_job(&self, id: &str) -> Result<(), ApiError> {
        self.write(|d| {
            d.jobs.remove(id);
            Ok(())
        })
    }

    pub fn job(&self, id: &str) -> Option<GenerationJob> {
        self.data.read().expect("store lock").jobs.get(id).cloned()
    }

    /// Move a job forward. Transitions out of a terminal state, or backwards,
    /// are refused.
    pub fn transition(&self, id: &str, to: JobState, result: Option<String>, error: Option<String>) -> Result<GenerationJob, ApiError> {
        self.write(|d| {
            let job = d
                .jobs
                .get_mut(id)
                .ok_or_else(|| ApiError::not_found(format!("job {id} does not exist")))?;
            if job.state.is_terminal() || to.rank() <= job.state.rank() {
                return Err(ApiError::internal(format!("job {id}: illegal transition {:?} -> {to:?}", job.state)));
            }
            job.state = to;
            match to {
                JobState::Running => job.timings.started_ms = Some(now_ms()),
                JobState::Done | JobState::Failed => job.timings.finished_ms = Some(now_ms()),
                JobState::Queued => {}
            }
            job.result = if to == JobState::Done { result.map(|h| image_url(&h)) } else { None };
            job.error = error;
            Ok(job.clone())
        })
    }
}
