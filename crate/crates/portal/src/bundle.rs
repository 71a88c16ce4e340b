//! Offline server for an unpacked standalone bundle: evaluates archives
//! against the bundled ground truth and serves per-sample overlays.

use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rrc_core::evalcore::{gt_regions, report_json, EvalReport};
use rrc_core::evalservice::report_files;
use rrc_core::fsutil;
use rrc_core::ingest::{parse_archive, ResultFile, ValidationReport};
use rrc_core::taskdef::{evaluate_submission, read_snapshot, sha256_hex, GtSnapshot, PipelineError, ResearchTask};
use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::{json, Value};

use crate::error::{ApiError, ApiResult};

/// A bundle directory with its task descriptor and snapshot loaded.
pub struct Bundle {
    pub dir: PathBuf,
    pub task: ResearchTask,
    task_bytes: Vec<u8>,
    pub snapshot: GtSnapshot,
}

pub enum BundleOutcome {
    Evaluated { id: String, report: EvalReport },
    Invalid(ValidationReport),
}

impl Bundle {
    pub fn open(dir: &FsPath) -> anyhow::Result<Bundle> {
        let task_bytes = std::fs::read(dir.join("task.json")).with_context(|| format!("{}: not a bundle", dir.display()))?;
        let task: ResearchTask = serde_json::from_slice(&task_bytes).context("task.json")?;
        anyhow::ensure!(!task.evaluations.is_empty(), "bundle task has no evaluation");
        let snapshot = read_snapshot(&std::fs::read(dir.join("gt/snapshot.zip"))?)?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            task,
            task_bytes,
            snapshot,
        })
    }

    fn results_dir(&self, rid: &str) -> PathBuf {
        self.dir.join("results").join(rid)
    }

    /// Scores `archive` with the bundle's evaluation and stores the result
    /// files under `results/<id>/`, where the id is derived from the archive
    /// bytes.
    pub fn evaluate(&self, archive: &[u8]) -> anyhow::Result<BundleOutcome> {
        let protocol = &self.task.evaluations[self.task.default_evaluation.min(self.task.evaluations.len() - 1)];
        let report = match evaluate_submission(&self.snapshot, &self.task.input_format, protocol, archive) {
            Ok((_, report)) => report,
            Err(PipelineError::Invalid(r)) => return Ok(BundleOutcome::Invalid(r)),
            Err(PipelineError::Eval(e)) => return Err(e.into()),
        };
        let id = sha256_hex(archive)[..16].to_string();
        let dir = self.results_dir(&id);
        for (name, bytes) in report_files(&report, protocol.per_sample) {
            let path = dir.join(&name);
            std::fs::create_dir_all(path.parent().expect("joined path"))?;
            fsutil::write_atomic(&path, &bytes)?;
        }
        fsutil::write_atomic(&dir.join("archive.zip"), archive)?;
        Ok(BundleOutcome::Evaluated { id, report })
    }
}

fn valid_rid(rid: &str) -> bool {
    rid.len() == 16 && rid.bytes().all(|b| b.is_ascii_hexdigit())
}

pub fn router(bundle: Arc<Bundle>, max_upload: usize) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/task", get(task))
        .route("/api/evaluate", post(evaluate))
        .route("/api/results/{rid}/overall.json", get(overall))
        .route("/api/results/{rid}/samples/{image}", get(sample))
        .layer(DefaultBodyLimit::max(max_upload))
        .with_state(bundle)
}

type St = State<Arc<Bundle>>;

async fn index(State(b): St) -> ApiResult<Response> {
    let html = std::fs::read_to_string(b.dir.join("ui/index.html"))?;
    Ok(Html(html).into_response())
}

async fn task(State(b): St) -> Response {
    ([(CONTENT_TYPE, "application/json")], b.task_bytes.clone()).into_response()
}

async fn evaluate(State(b): St, body: Bytes) -> ApiResult<Response> {
    let outcome = tokio::task::spawn_blocking(move || b.evaluate(&body))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    match outcome {
        BundleOutcome::Invalid(r) => Err(ApiError::invalid_submission(&r)),
        BundleOutcome::Evaluated { id, report } => {
            let overall = raw(report_json(&report.overall))?;
            let samples: Vec<Value> = report
                .samples
                .iter()
                .map(|s| {
                    json!({
                        "image": s.image,
                        "precision": s.precision,
                        "recall": s.recall,
                        "hmean": s.hmean,
                    })
                })
                .collect();
            Ok((StatusCode::OK, Json(EvaluateBody { id, overall, samples })).into_response())
        }
    }
}

async fn overall(State(b): St, Path(rid): Path<String>) -> ApiResult<Response> {
    if !valid_rid(&rid) {
        return Err(ApiError::not_found("no such result"));
    }
    match fsutil::read_opt(&b.results_dir(&rid).join("overall.json"))? {
        Some(bytes) => Ok(([(CONTENT_TYPE, "application/json")], bytes).into_response()),
        None => Err(ApiError::not_found("no such result")),
    }
}

/// Result JSON is passed through as raw values so the fixed number
/// formatting survives.
fn raw(bytes: Vec<u8>) -> ApiResult<Box<RawValue>> {
    let s = String::from_utf8(bytes).map_err(ApiError::internal)?;
    RawValue::from_string(s.trim_end().to_string()).map_err(ApiError::internal)
}

#[derive(Serialize)]
struct EvaluateBody {
    id: String,
    overall: Box<RawValue>,
    samples: Vec<Value>,
}

#[derive(Serialize)]
struct SampleBody {
    image: String,
    gt: Vec<Value>,
    detections: Vec<Value>,
    sample: Option<Box<RawValue>>,
}

async fn sample(State(b): St, Path((rid, image)): Path<(String, String)>) -> ApiResult<Json<SampleBody>> {
    if !valid_rid(&rid) {
        return Err(ApiError::not_found("no such result"));
    }
    let ann = b
        .snapshot
        .annotations
        .get(&image)
        .ok_or_else(|| ApiError::not_found(format!("no image {image}")))?;
    let dir = b.results_dir(&rid);
    let archive = fsutil::read_opt(&dir.join("archive.zip"))?.ok_or_else(|| ApiError::not_found("no such result"))?;
    let protocol = &b.task.evaluations[b.task.default_evaluation.min(b.task.evaluations.len() - 1)];
    let params = protocol.resolve().map_err(ApiError::internal)?;
    let gt: Vec<Value> = gt_regions(&ann.tree, params.granularity)
        .into_iter()
        .map(|g| json!({ "id": g.id, "quad": g.quad, "care": g.care, "transcription": g.transcription }))
        .collect();
    let parsed = parse_archive(&archive, &b.task.input_format, &b.snapshot.image_ids());
    let detections: Vec<Value> = match parsed.samples.get(&image) {
        Some(ResultFile::Detections(d)) => d
            .iter()
            .enumerate()
            .map(|(i, d)| json!({ "index": i, "quad": d.quad, "transcription": d.transcription }))
            .collect(),
        _ => Vec::new(),
    };
    let sample = match fsutil::read_opt(&dir.join("per_sample").join(format!("{image}.json")))? {
        Some(bytes) => Some(raw(bytes)?),
        None => None,
    };
    Ok(Json(SampleBody { image, gt, detections, sample }))
}
