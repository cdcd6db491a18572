//! Filter-synthesis jobs executed by a bounded worker pool.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nanolens::viz::{filter_atlas, filter_csv, filter_png, visualize_filter, GradientAscentConfig};
use nanolens::ModelSpec;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::store::{ArtifactKind, ArtifactStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Only forward moves are allowed: queued -> running -> done | failed.
    pub fn can_advance_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
                | (JobState::Queued, JobState::Failed)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Lens,
    Filter,
    Atlas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRequest {
    pub model_id: String,
    pub layer: usize,
    /// A single filter; the whole layer's atlas when absent.
    #[serde(default)]
    pub filter: Option<usize>,
    #[serde(flatten)]
    pub ascent: GradientAscentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobArtifacts {
    pub png: String,
    pub csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub request: FilterRequest,
    pub state: JobState,
    pub artifacts: Option<JobArtifacts>,
    pub error: Option<String>,
}

#[derive(Clone)]
pub struct JobQueue {
    jobs: Arc<Mutex<HashMap<String, JobRecord>>>,
    next_id: Arc<AtomicU64>,
    permits: Arc<Semaphore>,
    store: ArtifactStore,
}

impl JobQueue {
    pub fn new(workers: usize, store: ArtifactStore) -> Self {
        Self {
            jobs: Arc::default(),
            next_id: Arc::new(AtomicU64::new(1)),
            permits: Arc::new(Semaphore::new(workers.max(1))),
            store,
        }
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().expect("job table lock").get(id).cloned()
    }

    fn advance(&self, id: &str, next: JobState, f: impl FnOnce(&mut JobRecord)) {
        let mut jobs = self.jobs.lock().expect("job table lock");
        let job = jobs.get_mut(id).expect("jobs are never removed");
        assert!(
            job.state.can_advance_to(next),
            "job {id}: illegal transition {:?} -> {next:?}",
            job.state
        );
        job.state = next;
        f(job);
    }

    /// Record a validated request and schedule it. Returns the queued record.
    pub fn submit(&self, request: FilterRequest, model: Arc<ModelSpec<f32>>) -> JobRecord {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("job-{n:06}");
        let record = JobRecord {
            id: id.clone(),
            kind: if request.filter.is_some() {
                JobKind::Filter
            } else {
                JobKind::Atlas
            },
            request,
            state: JobState::Queued,
            artifacts: None,
            error: None,
        };
        self.jobs
            .lock()
            .expect("job table lock")
            .insert(id.clone(), record.clone());

        let queue = self.clone();
        tokio::spawn(async move {
            let _permit = queue.permits.clone().acquire_owned().await.expect("semaphore open");
            queue.advance(&id, JobState::Running, |_| {});
            let request = queue.get(&id).expect("job exists").request;
            let store = queue.store.clone();
            let result =
                tokio::task::spawn_blocking(move || run_filter_job(&model, &request, &store)).await;
            match result {
                Ok(Ok(artifacts)) => queue.advance(&id, JobState::Done, |j| {
                    j.artifacts = Some(artifacts);
                }),
                Ok(Err(e)) => queue.advance(&id, JobState::Failed, |j| j.error = Some(e)),
                Err(e) => queue.advance(&id, JobState::Failed, |j| {
                    j.error = Some(format!("worker panicked: {e}"))
                }),
            }
        });
        record
    }
}

fn run_filter_job(
    model: &ModelSpec<f32>,
    req: &FilterRequest,
    store: &ArtifactStore,
) -> Result<JobArtifacts, String> {
    let (png, csv) = match req.filter {
        Some(f) => {
            let v = visualize_filter(model, req.layer, f, &req.ascent).map_err(|e| e.to_string())?;
            let csv = filter_csv(std::slice::from_ref(&v));
            (filter_png(&v).map_err(|e| e.to_string())?, csv)
        }
        None => {
            let atlas = filter_atlas(model, req.layer, &req.ascent).map_err(|e| e.to_string())?;
            (atlas.png().map_err(|e| e.to_string())?, atlas.csv())
        }
    };
    Ok(JobArtifacts {
        png: store.put(&png, ArtifactKind::Png).map_err(|e| e.to_string())?,
        csv: store
            .put(csv.as_bytes(), ArtifactKind::Csv)
            .map_err(|e| e.to_string())?,
    })
}
