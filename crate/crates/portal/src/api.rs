//! The `/api` HTTP surface.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, FromRequestParts, Multipart, Path, Query, Request, State};
use axum::middleware::{self, Next};
use axum::http::header::{AUTHORIZATION, CONTENT_DISPOSITION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use chrono::{DateTime, TimeDelta, Utc};
use rrc_core::datastore::{AnnotationTree, Datastore, Role, Subset};
use rrc_core::evalcore::{gt_regions, EvaluationProtocol};
use rrc_core::evalservice::{Queue, SubmissionRecord, SubmissionStore, Visibility};
use rrc_core::geometry::Quad;
use rrc_core::ingest::{parse_archive, ResultFile};
use rrc_core::taskdef::{GtSnapshot, GtSource, ResearchTask, TaskStore};
use rrc_core::workflow::{
    DashboardFilter, ReviewAction, Stage, Verdict, VerificationVerdict, Workflow,
};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Value};

use crate::auth::{AccountRole, UserAccount, UserStore, UserView};
use crate::error::{ApiError, ApiResult};
use crate::preview;

pub const DEFAULT_MAX_UPLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct PortalConfig {
    pub max_upload: usize,
    /// `rrc` binary embedded into downloaded bundles.
    pub bundle_exe: Option<PathBuf>,
}

impl Default for PortalConfig {
    fn default() -> Self {
        PortalConfig {
            max_upload: DEFAULT_MAX_UPLOAD,
            bundle_exe: None,
        }
    }
}

pub struct AppState {
    pub ds: Datastore,
    pub tasks: TaskStore,
    pub subs: SubmissionStore,
    pub queue: Queue,
    pub users: UserStore,
    pub workflow: Workflow,
    pub config: PortalConfig,
}

impl AppState {
    pub fn open(store: impl Into<PathBuf>, config: PortalConfig) -> anyhow::Result<AppState> {
        let store = store.into();
        let ds = Datastore::open(&store)?;
        Ok(AppState {
            tasks: TaskStore::new(ds.clone()),
            subs: SubmissionStore::new(&store),
            queue: Queue::new(&store),
            users: UserStore::new(&store),
            workflow: Workflow::new(ds.clone()),
            ds,
            config,
        })
    }
}

type St = State<Arc<AppState>>;

/// Runs store IO off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

/// The authenticated account, if any. A missing header is anonymous; a
/// malformed, unknown or expired token is rejected with 401.
#[derive(Clone)]
pub struct Caller(pub Option<UserAccount>);

impl Caller {
    fn require(&self) -> ApiResult<&UserAccount> {
        self.0.as_ref().ok_or_else(ApiError::unauthorized)
    }

    fn id(&self) -> Option<&str> {
        self.0.as_ref().map(|u| u.id.as_str())
    }
}

impl FromRequestParts<Arc<AppState>> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        if let Some(c) = parts.extensions.get::<Caller>() {
            return Ok(c.clone());
        }
        let Some(h) = parts.headers.get(AUTHORIZATION) else {
            return Ok(Caller(None));
        };
        let token = h
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|t| t.trim().to_string())
            .ok_or_else(ApiError::unauthorized)?;
        let st = state.clone();
        let user = blocking(move || Ok(st.users.authenticate(&token)?)).await?;
        user.map(|u| Caller(Some(u))).ok_or_else(ApiError::unauthorized)
    }
}

/// Rejects bad credentials on every route, including ones open to anonymous
/// callers, and caches the resolved caller for handlers.
async fn resolve_caller(State(st): St, req: Request, next: Next) -> Response {
    let (mut parts, body) = req.into_parts();
    match Caller::from_request_parts(&mut parts, &st).await {
        Ok(c) => {
            parts.extensions.insert(c);
            next.run(Request::from_parts(parts, body)).await
        }
        Err(e) => e.into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload;
    let api = Router::new()
        .route("/users", post(register))
        .route("/sessions", post(login))
        .route("/me", get(me))
        .route("/tasks", get(list_tasks).post(define_task))
        .route("/tasks/{t}", get(get_task))
        .route("/tasks/{t}/freeze", post(freeze_task))
        .route("/tasks/{t}/submissions", post(upload_submission))
        .route("/tasks/{t}/rankings", get(rankings))
        .route("/tasks/{t}/sota", get(sota))
        .route("/tasks/{t}/compare", get(compare))
        .route("/tasks/{t}/bundle", get(bundle))
        .route("/submissions/{s}", get(get_submission))
        .route("/submissions/{s}/visibility", put(set_visibility))
        .route("/submissions/{s}/results/{p}", get(submission_overall))
        .route("/submissions/{s}/samples/{i}", get(submission_sample))
        .route("/collections", post(create_collection))
        .route("/collections/{c}", get(get_collection))
        .route("/collections/{c}/members/{u}", put(set_member))
        .route("/collections/{c}/subsets", post(assign_subset))
        .route("/collections/{c}/images", get(list_images).post(import_images))
        .route("/collections/{c}/images/{i}/reserve", post(reserve).delete(release))
        .route("/collections/{c}/images/{i}/annotation", get(get_annotation).put(save_annotation))
        .route("/collections/{c}/images/{i}/submit", post(submit_for_review))
        .route("/collections/{c}/images/{i}/review", post(review))
        .route("/collections/{c}/dashboard", get(dashboard))
        .route(
            "/collections/{c}/images/{i}/verification/in-context",
            get(in_context_board).post(apply_board),
        )
        .route("/collections/{c}/verification/queue", get(verification_queue))
        .route("/verification/verdicts", post(record_verdict))
        .route("/preview/rectify", post(preview_rectify))
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(state.clone(), resolve_caller))
        .with_state(state);
    Router::new().nest("/api", api)
}

// ---- users -----------------------------------------------------------------

#[derive(Deserialize)]
struct RegisterBody {
    email: String,
    display_name: String,
    password: String,
}

async fn register(State(st): St, Json(b): Json<RegisterBody>) -> ApiResult<Response> {
    blocking(move || {
        let u = st.users.register(&b.email, &b.display_name, &b.password, AccountRole::User)?;
        Ok((StatusCode::CREATED, Json(UserView::from(&u))).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct LoginBody {
    email: String,
    password: String,
}

async fn login(State(st): St, Json(b): Json<LoginBody>) -> ApiResult<Response> {
    blocking(move || {
        let (token, u, expires_at) = st.users.login(&b.email, &b.password)?;
        Ok((
            StatusCode::CREATED,
            Json(json!({ "token": token, "user": UserView::from(&u), "expires_at": expires_at })),
        )
            .into_response())
    })
    .await
}

async fn me(caller: Caller) -> ApiResult<Json<UserView>> {
    Ok(Json(UserView::from(caller.require()?)))
}

// ---- tasks -----------------------------------------------------------------

#[derive(Serialize)]
struct TaskView {
    challenge_id: String,
    task_id: String,
    title: String,
    public_gt: bool,
    frozen: bool,
    input_format: rrc_core::ingest::FormatSpec,
    evaluations: Vec<EvaluationProtocol>,
    default_evaluation: String,
}

impl From<&ResearchTask> for TaskView {
    fn from(t: &ResearchTask) -> Self {
        TaskView {
            challenge_id: t.challenge_id.clone(),
            task_id: t.task_id.clone(),
            title: t.title.clone(),
            public_gt: t.is_public(),
            frozen: t.snapshot.is_some(),
            input_format: t.input_format.clone(),
            evaluations: t.evaluations.clone(),
            default_evaluation: t.evaluations.get(t.default_evaluation).map(|e| e.id.clone()).unwrap_or_default(),
        }
    }
}

fn require_organizer(caller: &Caller) -> ApiResult<&UserAccount> {
    let u = caller.require()?;
    if !u.role.organizes() {
        return Err(ApiError::forbidden("organizer role required"));
    }
    Ok(u)
}

async fn list_tasks(State(st): St) -> ApiResult<Json<Vec<TaskView>>> {
    blocking(move || Ok(Json(st.tasks.list_tasks()?.iter().map(TaskView::from).collect()))).await
}

async fn get_task(State(st): St, Path(t): Path<String>) -> ApiResult<Json<TaskView>> {
    blocking(move || Ok(Json(TaskView::from(&st.tasks.task(&t)?)))).await
}

async fn define_task(State(st): St, caller: Caller, Json(t): Json<ResearchTask>) -> ApiResult<Response> {
    require_organizer(&caller)?;
    if !matches!(t.gt_source, GtSource::Internal { .. }) {
        return Err(ApiError::bad_request(
            "UnresolvableGT",
            "tasks defined over HTTP must take ground truth from a collection",
        ));
    }
    blocking(move || {
        let t = st.tasks.define_task(t)?;
        Ok((StatusCode::CREATED, Json(TaskView::from(&t))).into_response())
    })
    .await
}

async fn freeze_task(State(st): St, caller: Caller, Path(t): Path<String>) -> ApiResult<Json<Value>> {
    require_organizer(&caller)?;
    blocking(move || Ok(Json(json!({ "snapshot": st.tasks.freeze_gt(&t)? })))).await
}

/// Resolves `?protocol=`, defaulting to the task's default evaluation.
fn protocol_of<'a>(t: &'a ResearchTask, requested: Option<&str>) -> ApiResult<&'a EvaluationProtocol> {
    match requested {
        Some(p) => t
            .evaluation(p)
            .ok_or_else(|| ApiError::not_found(format!("task {} has no protocol {p:?}", t.task_id))),
        None => t
            .evaluations
            .get(t.default_evaluation)
            .ok_or_else(|| ApiError::not_found("task has no evaluations")),
    }
}

fn job_status(st: &AppState, sid: &str, protocol: &str) -> ApiResult<&'static str> {
    Ok(match st.queue.state_of(sid, protocol)? {
        Some((state, _)) => state.dir(),
        None if st.subs.has_results(sid, protocol) => "done",
        None => "unknown",
    })
}

async fn upload_submission(
    State(st): St,
    caller: Caller,
    Path(tid): Path<String>,
    mut form: Multipart,
) -> ApiResult<Response> {
    let owner = caller.require()?.id.clone();
    let mut archive = None;
    let mut method = String::new();
    let mut description = String::new();
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        match field.name().unwrap_or("") {
            "archive" => archive = Some(field.bytes().await.map_err(multipart_error)?),
            "method" => method = field.text().await.map_err(multipart_error)?,
            "description" => description = field.text().await.map_err(multipart_error)?,
            _ => {}
        }
    }
    let archive = archive.ok_or_else(|| ApiError::bad_request("MissingArchive", "multipart field `archive` is required"))?;
    let method = method.trim().to_string();
    if method.is_empty() || method.chars().count() > 200 {
        return Err(ApiError::bad_request("InvalidMethod", "method name must be 1 to 200 characters"));
    }
    blocking(move || {
        let task = st.tasks.task(&tid)?;
        let hash = task.snapshot.clone().ok_or(rrc_core::taskdef::TaskError::NotFrozen)?;
        let snapshot = st.tasks.snapshot(&task)?;
        let parsed = parse_archive(&archive, &task.input_format, &snapshot.image_ids());
        if !parsed.report.ok {
            return Err(ApiError::invalid_submission(&parsed.report));
        }
        let rec = SubmissionRecord {
            id: SubmissionStore::new_id(),
            task: task.task_id.clone(),
            owner,
            method,
            description: description.trim().to_string(),
            uploaded_at: Utc::now(),
            visibility: Visibility::Private,
            snapshot: hash,
            protocols: task.evaluations.iter().map(|e| e.id.clone()).collect(),
            validation: parsed.report,
        };
        st.subs.create(&rec, &archive)?;
        st.queue.enqueue(&rec)?;
        let status: BTreeMap<_, _> = rec.protocols.iter().map(|p| (p.clone(), "pending")).collect();
        Ok((
            StatusCode::ACCEPTED,
            Json(json!({ "id": rec.id, "status": status, "warnings": rec.validation.warnings })),
        )
            .into_response())
    })
    .await
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "PayloadTooLarge", "upload exceeds the size limit")
    } else {
        ApiError::new(status, "BadMultipart", e.body_text())
    }
}

#[derive(Deserialize)]
struct ProtocolQuery {
    protocol: Option<String>,
}

/// Scores of an overall.json, kept as the stored tokens so API values match
/// the file to the digit.
#[derive(Deserialize)]
struct StoredScores {
    precision: Box<RawValue>,
    recall: Box<RawValue>,
    hmean: Box<RawValue>,
}

impl StoredScores {
    fn hmean(&self) -> f64 {
        self.hmean.get().parse().unwrap_or(0.0)
    }
}

fn stored_scores(st: &AppState, sid: &str, protocol: &str) -> ApiResult<Option<StoredScores>> {
    match st.subs.overall_bytes(sid, protocol)? {
        None => Ok(None),
        Some(b) => serde_json::from_slice(&b).map(Some).map_err(ApiError::internal),
    }
}

#[derive(Serialize)]
struct RankingRow {
    rank: usize,
    submission: String,
    method: String,
    owner: String,
    uploaded_at: DateTime<Utc>,
    date: String,
    precision: Box<RawValue>,
    recall: Box<RawValue>,
    hmean: Box<RawValue>,
    private: bool,
}

fn display_name(st: &AppState, uid: &str) -> String {
    match st.users.get(uid) {
        Ok(Some(u)) => u.display_name,
        _ => uid.to_string(),
    }
}

fn visible(rec: &SubmissionRecord, caller: Option<&str>) -> bool {
    rec.visibility == Visibility::Public || caller == Some(rec.owner.as_str())
}

/// Evaluated submissions of a task visible to `caller` with their scores,
/// ordered by hmean, then upload time, then id.
fn ranked(st: &AppState, tid: &str, protocol: &str, caller: Option<&str>) -> ApiResult<Vec<(SubmissionRecord, StoredScores)>> {
    let mut rows = Vec::new();
    for rec in st.subs.list()? {
        if rec.task != tid || !visible(&rec, caller) {
            continue;
        }
        if let Some(s) = stored_scores(st, &rec.id, protocol)? {
            rows.push((rec, s));
        }
    }
    rows.sort_by(|(a, sa), (b, sb)| {
        sb.hmean()
            .total_cmp(&sa.hmean())
            .then(a.uploaded_at.cmp(&b.uploaded_at))
            .then(a.id.cmp(&b.id))
    });
    Ok(rows)
}

async fn rankings(
    State(st): St,
    caller: Caller,
    Path(tid): Path<String>,
    Query(q): Query<ProtocolQuery>,
) -> ApiResult<Json<Value>> {
    let me = caller.id().map(str::to_string);
    blocking(move || {
        let task = st.tasks.task(&tid)?;
        let protocol = protocol_of(&task, q.protocol.as_deref())?.id.clone();
        let rows: Vec<RankingRow> = ranked(&st, &tid, &protocol, me.as_deref())?
            .into_iter()
            .enumerate()
            .map(|(i, (rec, s))| RankingRow {
                rank: i + 1,
                owner: display_name(&st, &rec.owner),
                date: rec.uploaded_at.format("%Y-%m-%d").to_string(),
                private: rec.visibility == Visibility::Private,
                submission: rec.id,
                method: rec.method,
                uploaded_at: rec.uploaded_at,
                precision: s.precision,
                recall: s.recall,
                hmean: s.hmean,
            })
            .collect();
        Ok(Json(json!({ "task": tid, "protocol": protocol, "rows": rows })))
    })
    .await
}

#[derive(Serialize)]
struct SotaPoint {
    date: String,
    hmean: Box<RawValue>,
    method: String,
    submission: String,
}

async fn sota(State(st): St, Path(tid): Path<String>, Query(q): Query<ProtocolQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let task = st.tasks.task(&tid)?;
        let protocol = protocol_of(&task, q.protocol.as_deref())?.id.clone();
        let mut public = ranked(&st, &tid, &protocol, None)?;
        public.sort_by(|(a, _), (b, _)| a.uploaded_at.cmp(&b.uploaded_at).then(a.id.cmp(&b.id)));
        // Daily maximum first (earliest upload wins ties), then running max.
        let mut days: Vec<(String, SubmissionRecord, StoredScores)> = Vec::new();
        for (rec, s) in public {
            let day = rec.uploaded_at.format("%Y-%m-%d").to_string();
            match days.last_mut() {
                Some((d, r, best)) if *d == day => {
                    if s.hmean() > best.hmean() {
                        *r = rec;
                        *best = s;
                    }
                }
                _ => days.push((day, rec, s)),
            }
        }
        let mut series: Vec<SotaPoint> = Vec::new();
        let mut best: Option<(f64, SotaPoint)> = None;
        for (day, rec, s) in days {
            let h = s.hmean();
            if best.as_ref().is_none_or(|(b, _)| h > *b) {
                best = Some((
                    h,
                    SotaPoint {
                        date: day.clone(),
                        hmean: s.hmean,
                        method: rec.method,
                        submission: rec.id,
                    },
                ));
            }
            let (_, p) = best.as_ref().expect("set above");
            series.push(SotaPoint {
                date: day,
                hmean: p.hmean.clone(),
                method: p.method.clone(),
                submission: p.submission.clone(),
            });
        }
        Ok(Json(json!({ "task": tid, "protocol": protocol, "series": series })))
    })
    .await
}

#[derive(Deserialize)]
struct CompareQuery {
    #[serde(default)]
    ids: String,
    image: String,
    protocol: Option<String>,
}

// Stored result JSON is embedded as raw values: going through `Value` would
// reorder keys and drop the fixed number formatting.

#[derive(Serialize)]
struct MethodSample {
    submission: String,
    method: String,
    sample: Box<RawValue>,
}

#[derive(Serialize)]
struct CompareBody {
    image: String,
    protocol: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<GtView>>,
    methods: Vec<MethodSample>,
}

#[derive(Serialize)]
struct SubmissionBody {
    submission: SubmissionRecord,
    owner_name: String,
    status: BTreeMap<String, &'static str>,
    results: BTreeMap<String, Box<RawValue>>,
}

#[derive(Serialize)]
struct SampleBody {
    submission: String,
    method: String,
    protocol: String,
    image: String,
    sample: Box<RawValue>,
    gt: Vec<GtView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detections: Option<Vec<DetView>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    predictions: Option<Value>,
}

fn raw(bytes: Vec<u8>) -> ApiResult<Box<RawValue>> {
    let s = String::from_utf8(bytes).map_err(ApiError::internal)?;
    RawValue::from_string(s.trim_end().to_string()).map_err(ApiError::internal)
}

fn require_public_gt(task: &ResearchTask) -> ApiResult<()> {
    if task.is_public() {
        Ok(())
    } else {
        Err(ApiError::forbidden("per-sample results are not available for sequestered ground truth"))
    }
}

#[derive(Serialize)]
struct GtView {
    id: String,
    quad: Quad,
    care: bool,
    transcription: String,
}

fn gt_view(snapshot: &GtSnapshot, task: &ResearchTask, protocol: &EvaluationProtocol, image: &str) -> ApiResult<Vec<GtView>> {
    let ann = snapshot
        .annotations
        .get(image)
        .ok_or_else(|| ApiError::not_found(format!("image {image} is not part of task {}", task.task_id)))?;
    let params = protocol.resolve().map_err(|e| ApiError::bad_request("BadParams", e.to_string()))?;
    Ok(gt_regions(&ann.tree, params.granularity)
        .into_iter()
        .map(|g| GtView {
            id: g.id,
            quad: g.quad,
            care: g.care,
            transcription: g.transcription,
        })
        .collect())
}

async fn compare(
    State(st): St,
    caller: Caller,
    Path(tid): Path<String>,
    Query(q): Query<CompareQuery>,
) -> ApiResult<Json<CompareBody>> {
    let me = caller.id().map(str::to_string);
    blocking(move || {
        let task = st.tasks.task(&tid)?;
        let protocol = protocol_of(&task, q.protocol.as_deref())?.clone();
        let ids: Vec<&str> = q.ids.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let mut recs = Vec::with_capacity(ids.len());
        for id in &ids {
            let rec = get_record(&st, id)?;
            if rec.task != tid {
                return Err(ApiError::not_found(format!("submission {id} does not belong to task {tid}")));
            }
            if !visible(&rec, me.as_deref()) {
                return Err(ApiError::forbidden(format!("submission {id} is private")));
            }
            recs.push(rec);
        }
        if ids.is_empty() {
            return Ok(Json(CompareBody { image: q.image, protocol: protocol.id, gt: None, methods: Vec::new() }));
        }
        require_public_gt(&task)?;
        let gt = gt_view(&st.tasks.snapshot(&task)?, &task, &protocol, &q.image)?;
        let mut methods = Vec::with_capacity(recs.len());
        for rec in recs {
            let sample = st
                .subs
                .sample_bytes(&rec.id, &protocol.id, &q.image)?
                .ok_or_else(|| ApiError::not_found(format!("submission {} has no result for {}", rec.id, q.image)))?;
            methods.push(MethodSample { submission: rec.id, method: rec.method, sample: raw(sample)? });
        }
        Ok(Json(CompareBody { image: q.image, protocol: protocol.id, gt: Some(gt), methods }))
    })
    .await
}

#[derive(Deserialize)]
struct BundleQuery {
    evaluation: Option<String>,
}

async fn bundle(State(st): St, Path(tid): Path<String>, Query(q): Query<BundleQuery>) -> ApiResult<Response> {
    blocking(move || {
        let bytes = st
            .tasks
            .export_standalone_bundle(&tid, q.evaluation.as_deref(), st.config.bundle_exe.as_deref())?;
        Ok((
            [
                (CONTENT_TYPE, "application/zip".to_string()),
                (CONTENT_DISPOSITION, format!("attachment; filename=\"{tid}-bundle.zip\"")),
            ],
            bytes,
        )
            .into_response())
    })
    .await
}

// ---- submissions -------------------------------------------------------------

fn get_record(st: &AppState, sid: &str) -> ApiResult<SubmissionRecord> {
    if !rrc_core::datastore::is_slug(sid) {
        return Err(ApiError::not_found(format!("no such submission {sid}")));
    }
    Ok(st.subs.get(sid)?)
}

fn visible_record(st: &AppState, sid: &str, caller: Option<&str>) -> ApiResult<SubmissionRecord> {
    let rec = get_record(st, sid)?;
    if !visible(&rec, caller) {
        return Err(ApiError::forbidden(format!("submission {sid} is private")));
    }
    Ok(rec)
}

async fn get_submission(State(st): St, caller: Caller, Path(sid): Path<String>) -> ApiResult<Json<SubmissionBody>> {
    let me = caller.id().map(str::to_string);
    blocking(move || {
        let rec = visible_record(&st, &sid, me.as_deref())?;
        let mut status = BTreeMap::new();
        let mut results = BTreeMap::new();
        for p in &rec.protocols {
            status.insert(p.clone(), job_status(&st, &rec.id, p)?);
            if let Some(b) = st.subs.overall_bytes(&rec.id, p)? {
                results.insert(p.clone(), raw(b)?);
            }
        }
        Ok(Json(SubmissionBody {
            owner_name: display_name(&st, &rec.owner),
            submission: rec,
            status,
            results,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct VisibilityBody {
    visibility: Visibility,
}

async fn set_visibility(
    State(st): St,
    caller: Caller,
    Path(sid): Path<String>,
    Json(b): Json<VisibilityBody>,
) -> ApiResult<Json<SubmissionRecord>> {
    let me = caller.require()?.id.clone();
    blocking(move || {
        let rec = get_record(&st, &sid)?;
        if rec.owner != me {
            return Err(ApiError::forbidden("only the owner can change visibility"));
        }
        Ok(Json(st.subs.update(&sid, |r| r.visibility = b.visibility)?))
    })
    .await
}

async fn submission_overall(State(st): St, caller: Caller, Path((sid, p)): Path<(String, String)>) -> ApiResult<Response> {
    let me = caller.id().map(str::to_string);
    blocking(move || {
        let rec = visible_record(&st, &sid, me.as_deref())?;
        if !rec.protocols.contains(&p) {
            return Err(ApiError::not_found(format!("submission {sid} has no protocol {p:?}")));
        }
        let bytes = st
            .subs
            .overall_bytes(&sid, &p)?
            .ok_or_else(|| ApiError::not_found(format!("submission {sid} is not evaluated under {p}")))?;
        Ok(([(CONTENT_TYPE, "application/json")], bytes).into_response())
    })
    .await
}

#[derive(Serialize)]
struct DetView {
    index: usize,
    quad: Quad,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    transcription: Option<String>,
}

async fn submission_sample(
    State(st): St,
    caller: Caller,
    Path((sid, image)): Path<(String, String)>,
    Query(q): Query<ProtocolQuery>,
) -> ApiResult<Json<SampleBody>> {
    let me = caller.id().map(str::to_string);
    blocking(move || {
        let rec = visible_record(&st, &sid, me.as_deref())?;
        let task = st.tasks.task(&rec.task)?;
        let protocol = protocol_of(&task, q.protocol.as_deref())?.clone();
        require_public_gt(&task)?;
        let sample = st
            .subs
            .sample_bytes(&sid, &protocol.id, &image)?
            .ok_or_else(|| ApiError::not_found(format!("no per-sample result for {image}")))?;
        let snapshot = st.tasks.snapshot(&task)?;
        let gt = gt_view(&snapshot, &task, &protocol, &image)?;
        let archive = std::fs::read(st.subs.archive_path(&sid))?;
        let parsed = parse_archive(&archive, &task.input_format, &snapshot.image_ids());
        let mut body = SampleBody {
            submission: sid,
            method: rec.method,
            protocol: protocol.id,
            sample: raw(sample)?,
            gt,
            detections: None,
            predictions: None,
            image,
        };
        match parsed.samples.get(&body.image) {
            Some(ResultFile::Transcriptions(t)) => body.predictions = Some(json!(t)),
            Some(ResultFile::Detections(d)) => {
                let dets: Vec<DetView> = d
                    .iter()
                    .enumerate()
                    .map(|(index, d)| DetView {
                        index,
                        quad: d.quad,
                        confidence: d.confidence,
                        transcription: d.transcription.clone(),
                    })
                    .collect();
                body.detections = Some(dets);
            }
            None => body.detections = Some(Vec::new()),
        }
        Ok(Json(body))
    })
    .await
}

// ---- collections and workflow -------------------------------------------------

/// Role of the caller in collection `cid`; non-members get 403.
fn member(st: &AppState, cid: &str, user: &UserAccount) -> ApiResult<Role> {
    st.ds
        .collection(cid)?
        .role_of(&user.id)
        .ok_or_else(|| ApiError::forbidden(format!("not a member of {cid}")))
}

#[derive(Deserialize)]
struct CollectionBody {
    id: String,
    title: String,
}

async fn create_collection(State(st): St, caller: Caller, Json(b): Json<CollectionBody>) -> ApiResult<Response> {
    let u = require_organizer(&caller)?.id.clone();
    blocking(move || {
        let c = st.ds.create_collection(&b.id, &b.title, &u)?;
        Ok((StatusCode::CREATED, Json(c)).into_response())
    })
    .await
}

async fn get_collection(State(st): St, caller: Caller, Path(cid): Path<String>) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.ds.collection(&cid)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct MemberBody {
    role: Option<Role>,
}

async fn set_member(
    State(st): St,
    caller: Caller,
    Path((cid, user)): Path<(String, String)>,
    Json(b): Json<MemberBody>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        if b.role.is_some() && st.users.get(&user)?.is_none() {
            return Err(ApiError::not_found(format!("no such user {user}")));
        }
        Ok(Json(st.ds.set_member(&cid, &u.id, &user, b.role)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct SubsetBody {
    images: Vec<String>,
    subset: Subset,
}

async fn assign_subset(
    State(st): St,
    caller: Caller,
    Path(cid): Path<String>,
    Json(b): Json<SubsetBody>,
) -> ApiResult<Json<Value>> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        let n = st.ds.assign_subset(&cid, &b.images, b.subset, &u.id)?;
        Ok(Json(json!({ "assigned": n })))
    })
    .await
}

async fn list_images(State(st): St, caller: Caller, Path(cid): Path<String>) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.ds.images(&cid)?).into_response())
    })
    .await
}

async fn import_images(
    State(st): St,
    caller: Caller,
    Path(cid): Path<String>,
    mut form: Multipart,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    let mut files = Vec::new();
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.file_name().unwrap_or("upload").to_string();
        files.push((name, field.bytes().await.map_err(multipart_error)?));
    }
    blocking(move || {
        if !member(&st, &cid, &u)?.can_manage() {
            return Err(ApiError::forbidden("only collection owners and admins import images"));
        }
        let mut out = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let imp = st.ds.import_image(&cid, &bytes, &name, &u.id)?;
            out.push(json!({ "record": imp.record, "duplicate": imp.duplicate }));
        }
        Ok((StatusCode::CREATED, Json(out)).into_response())
    })
    .await
}

#[derive(Deserialize, Default)]
struct ReserveBody {
    duration_secs: Option<f64>,
}

async fn reserve(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
    body: Option<Json<ReserveBody>>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    let b = body.map(|Json(b)| b).unwrap_or_default();
    blocking(move || {
        let duration = match b.duration_secs {
            Some(s) if s.is_finite() && s > 0.0 && s < 1e9 => Some(TimeDelta::milliseconds((s * 1000.0) as i64)),
            Some(_) => return Err(ApiError::bad_request("InvalidDuration", "duration must be positive")),
            None => None,
        };
        member(&st, &cid, &u)?;
        Ok(Json(st.workflow.reserve(&cid, &iid, &u.id, duration)?).into_response())
    })
    .await
}

async fn release(State(st): St, caller: Caller, Path((cid, iid)): Path<(String, String)>) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.workflow.release(&cid, &iid, &u.id)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct AnnotationBody {
    tree: AnnotationTree,
    expected_head: u32,
    #[serde(default)]
    note: String,
}

async fn save_annotation(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
    Json(b): Json<AnnotationBody>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        let v = st.workflow.save_annotation(&cid, &iid, &u.id, b.tree, b.expected_head, &b.note)?;
        Ok((StatusCode::CREATED, Json(v)).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct RevisionQuery {
    revision: Option<u32>,
}

async fn get_annotation(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
    Query(q): Query<RevisionQuery>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.ds.load_annotation(&cid, &iid, q.revision)?).into_response())
    })
    .await
}

async fn submit_for_review(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.workflow.submit_for_review(&cid, &iid, &u.id)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct ReviewBody {
    action: ReviewAction,
    rating: Option<u8>,
    comment: Option<String>,
}

async fn review(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
    Json(b): Json<ReviewBody>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        let item = st.workflow.review(&cid, &iid, &u.id, b.action, b.rating, b.comment.as_deref())?;
        Ok(Json(item).into_response())
    })
    .await
}

async fn dashboard(
    State(st): St,
    caller: Caller,
    Path(cid): Path<String>,
    Query(f): Query<DashboardFilter>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.workflow.dashboard(&cid, &f)?).into_response())
    })
    .await
}

async fn in_context_board(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.workflow.in_context_board(&cid, &iid)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct Move {
    node: String,
    care: bool,
}

#[derive(Deserialize)]
struct BoardBody {
    moves: Vec<Move>,
}

async fn apply_board(
    State(st): St,
    caller: Caller,
    Path((cid, iid)): Path<(String, String)>,
    Json(b): Json<BoardBody>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        let moves: Vec<(String, bool)> = b.moves.into_iter().map(|m| (m.node, m.care)).collect();
        Ok(Json(st.workflow.apply_board(&cid, &iid, &u.id, &moves)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct SeedQuery {
    #[serde(default)]
    seed: u64,
}

async fn verification_queue(
    State(st): St,
    caller: Caller,
    Path(cid): Path<String>,
    Query(q): Query<SeedQuery>,
) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &cid, &u)?;
        Ok(Json(st.workflow.out_of_context_queue(&cid, q.seed)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct VerdictBody {
    collection: String,
    image: String,
    node: String,
    stage: Stage,
    verdict: Verdict,
}

async fn record_verdict(State(st): St, caller: Caller, Json(b): Json<VerdictBody>) -> ApiResult<Response> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &b.collection, &u)?;
        let v = VerificationVerdict {
            image: b.image,
            node: b.node,
            stage: b.stage,
            verdict: b.verdict,
            verifier: u.id.clone(),
            timestamp: Utc::now(),
        };
        Ok(Json(st.workflow.record_verdict(&b.collection, &v)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct RectifyBody {
    collection: String,
    image: String,
    quad: Vec<f64>,
}

async fn preview_rectify(State(st): St, caller: Caller, Json(b): Json<RectifyBody>) -> ApiResult<Json<Value>> {
    let u = caller.require()?.clone();
    blocking(move || {
        member(&st, &b.collection, &u)?;
        let quad = Quad::from_coords(&b.quad)?;
        let bytes = st.ds.image_bytes(&b.collection, &b.image)?;
        let src = image::load_from_memory(&bytes)
            .map_err(|e| ApiError::internal(format!("stored image {} does not decode: {e}", b.image)))?
            .to_rgb8();
        let crop = preview::rectify(&src, &quad)?;
        let png = preview::encode_png(&crop.image);
        Ok(Json(json!({
            "width": crop.width,
            "height": crop.height,
            "homography": crop.homography,
            "png_base64": base64::engine::general_purpose::STANDARD.encode(png),
        })))
    })
    .await
}
