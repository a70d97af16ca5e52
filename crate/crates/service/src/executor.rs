//! The single model lane: one thread owns the generator and runs jobs in
//! FIFO order from a bounded queue.

use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;

use panelforge_core::adapter::AdapterModel;
use panelforge_core::checkpoint::CheckpointArchive;
use panelforge_core::diffusion::{generate_panel, FeatureAdapter, Model, PanelSpecDoc};
use panelforge_core::training::load_pipeline;

use crate::error::ApiError;
use crate::store::{JobState, Store};

/// What the HTTP layer needs to know about the loaded model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub n_c: usize,
    pub size_multiple: u32,
    pub adapter: bool,
}

pub struct Executor {
    tx: Option<SyncSender<String>>,
    handle: Option<JoinHandle<()>>,
}

pub enum Submit {
    Queued,
    Full,
}

impl Executor {
    /// Load the checkpoint and start the worker. `depth` bounds the number
    /// of jobs waiting behind the running one.
    pub fn start(store: Arc<Store>, archive: &CheckpointArchive, depth: usize) -> Result<(Executor, ModelInfo), ApiError> {
        let (_ps, model, adapter) = load_pipeline(archive)?;
        let info = ModelInfo {
            n_c: model.n_c(),
            size_multiple: model.config.size_multiple(),
            adapter: adapter.is_some(),
        };
        let (tx, rx) = sync_channel::<String>(depth);
        let handle = std::thread::Builder::new()
            .name("panelforge-executor".into())
            .spawn(move || {
                for id in rx {
                    run_job(&store, &model, adapter.as_ref(), &id);
                }
            })
            .map_err(ApiError::internal)?;
        Ok((
            Executor {
                tx: Some(tx),
                handle: Some(handle),
            },
            info,
        ))
    }

    pub fn submit(&self, id: String) -> Submit {
        match self.tx.as_ref().map(|tx| tx.try_send(id)) {
            Some(Ok(())) => Submit::Queued,
            Some(Err(TrySendError::Full(_))) | Some(Err(TrySendError::Disconnected(_))) | None => Submit::Full,
        }
    }
}

impl Drop for Executor {
    /// Close the queue and let the worker finish what it holds.
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn run_job(store: &Store, model: &Model, adapter: Option<&AdapterModel>, id: &str) {
    let Some(job) = store.job(id) else { return };
    if store.transition(id, JobState::Running, None, None).is_err() {
        return;
    }
    let outcome = generate(store, model, adapter, &job.spec);
    let result = match outcome {
        Ok(hash) => store.transition(id, JobState::Done, Some(hash), None),
        Err(e) => {
            log::warn!("job {id} failed: {}", e.message);
            store.transition(id, JobState::Failed, None, Some(e.message))
        }
    };
    if let Err(e) = result {
        log::error!("job {id}: {}", e.message);
    }
}

fn generate(store: &Store, model: &Model, adapter: Option<&AdapterModel>, doc: &PanelSpecDoc) -> Result<String, ApiError> {
    let spec = doc.resolve(|_, cid| store.character_image(cid).map_err(|e| panelforge_core::Error::Config(e.message)))?;
    let img = generate_panel(model, adapter.map(|a| a as &dyn FeatureAdapter), &spec)?;
    store.put_image(&img)
}
