//! HTTP interface for the triage UI.
//!
//! Reads are served straight from the run store. Lesson and taxonomy edits
//! are stored as new content-addressed versions; `HEAD` files point at the
//! current one. Completed runs are never touched: a rerun with edited
//! lessons produces a new run whose manifest cites the new lesson hash.
//! Reviewer tags are versioned the same way, per run and reviewer, and a
//! submission edited from a stale version is refused with 409.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clonebench_core::bias::Taxonomy;
use clonebench_core::corpus::ClonePair;
use clonebench_core::digest::json_hash;
use clonebench_core::gateway::{BackendConfig, Gateway, GatewayError};
use clonebench_core::pipeline::{
    list_runs, mine_bias, mining_id, run_ablation, run_eval, Experiment, ExperimentConfig, PipelineError, StoredRun,
};
use clonebench_core::prompt::{Lesson, LessonSet};
use clonebench_core::stats::cohen_kappa;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::OnceCell;

pub const TOKEN_VAR: &str = "CPL_SERVICE_TOKEN";

type GatewayFactory = dyn Fn(&BackendConfig) -> Result<Gateway, GatewayError> + Send + Sync;

pub struct ServiceState {
    base: ExperimentConfig,
    token: Option<String>,
    gateways: Box<GatewayFactory>,
    lessons: VersionStore,
    taxonomy: VersionStore,
    inflight: Mutex<HashMap<String, Arc<OnceCell<Value>>>>,
    tag_writes: tokio::sync::Mutex<()>,
}

impl ServiceState {
    /// Version stores live under `<output_dir>/versions/`. They are seeded
    /// from the experiment's lesson set and taxonomy on first start.
    pub fn new(exp: &Experiment, token: Option<String>) -> anyhow::Result<Self> {
        let root = exp.config.output_dir.join("versions");
        let lessons = VersionStore::open(root.join("lessons"), &exp.lessons.version_hash(), &exp.lessons.to_json())?;
        let taxonomy = VersionStore::open(root.join("taxonomy"), &exp.taxonomy.version_hash(), &exp.taxonomy.to_json())?;
        Ok(ServiceState {
            base: exp.config.clone(),
            token: token.filter(|t| !t.is_empty()),
            gateways: Box::new(|cfg| Gateway::from_config(cfg.clone())),
            lessons,
            taxonomy,
            inflight: Mutex::new(HashMap::new()),
            tag_writes: tokio::sync::Mutex::new(()),
        })
    }

    pub fn with_gateway_factory(
        mut self,
        f: impl Fn(&BackendConfig) -> Result<Gateway, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        self.gateways = Box::new(f);
        self
    }

    fn output_dir(&self) -> &Path {
        &self.base.output_dir
    }

    fn current_lessons(&self) -> Result<(String, LessonSet), ApiError> {
        let (hash, text) = self.lessons.head()?;
        Ok((hash, LessonSet::from_json(&text).map_err(ApiError::internal)?))
    }

    fn tag_store(&self, run_id: &str, reviewer: &str) -> VersionStore {
        VersionStore::at(self.output_dir().join("versions").join("tags").join(run_id).join(reviewer))
    }

    fn current_taxonomy(&self) -> Result<(String, Taxonomy), ApiError> {
        let (hash, text) = self.taxonomy.head()?;
        Ok((hash, Taxonomy::from_json(&text).map_err(ApiError::internal)?))
    }
}

/// Append-only directory of JSON documents named by content hash.
struct VersionStore {
    dir: PathBuf,
    write: tokio::sync::Mutex<()>,
}

impl VersionStore {
    fn open(dir: PathBuf, hash: &str, initial: &str) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&dir)?;
        let store = VersionStore::at(dir);
        if !store.dir.join("HEAD").is_file() {
            store.put(hash, initial)?;
            std::fs::write(store.dir.join("HEAD"), hash)?;
        }
        Ok(store)
    }

    /// A store that may not have any version yet.
    fn at(dir: PathBuf) -> Self {
        VersionStore {
            dir,
            write: tokio::sync::Mutex::new(()),
        }
    }

    fn put(&self, hash: &str, text: &str) -> std::io::Result<()> {
        let path = self.dir.join(format!("{hash}.json"));
        if !path.exists() {
            std::fs::write(&path, text)?;
        }
        Ok(())
    }

    fn head(&self) -> Result<(String, String), ApiError> {
        self.try_head()?.ok_or_else(|| ApiError::internal(format!("{} has no HEAD", self.dir.display())))
    }

    fn try_head(&self) -> Result<Option<(String, String)>, ApiError> {
        let hash = match std::fs::read_to_string(self.dir.join("HEAD")) {
            Ok(h) => h.trim().to_string(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(ApiError::internal(e)),
        };
        let text = self.get(&hash)?.ok_or_else(|| ApiError::internal(format!("HEAD names missing version {hash}")))?;
        Ok(Some((hash, text)))
    }

    fn get(&self, hash: &str) -> Result<Option<String>, ApiError> {
        if hash.is_empty() || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Ok(None);
        }
        match std::fs::read_to_string(self.dir.join(format!("{hash}.json"))) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ApiError::internal(e)),
        }
    }

    async fn commit(&self, hash: &str, text: &str) -> Result<(), ApiError> {
        let _guard = self.write.lock().await;
        self.write_head(hash, text)
    }

    fn write_head(&self, hash: &str, text: &str) -> Result<(), ApiError> {
        std::fs::create_dir_all(&self.dir).map_err(ApiError::internal)?;
        self.put(hash, text).map_err(ApiError::internal)?;
        std::fs::write(self.dir.join("HEAD"), hash).map_err(ApiError::internal)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.to_string())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::RunNotFound(_) => StatusCode::NOT_FOUND,
            PipelineError::Config(_) | PipelineError::Prompt(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

pub fn router(state: ServiceState) -> Router {
    let state = Arc::new(state);
    Router::new()
        .route("/runs", get(list).post(trigger_run))
        .route("/runs/{id}", get(run_detail))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/mistakes", get(mistakes))
        .route("/runs/{id}/prevalence", get(prevalence))
        .route("/runs/{id}/mine", post(mine))
        .route("/runs/{id}/pairs/{pair_id}", get(pair))
        .route("/runs/{id}/tags", get(get_tags).post(post_tags))
        .route("/runs/{id}/agreement", get(agreement))
        .route("/lessons", get(get_lessons).post(post_lessons))
        .route("/taxonomy", get(get_taxonomy).post(post_taxonomy))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): State<Arc<ServiceState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

fn open_run(state: &ServiceState, id: &str) -> Result<StoredRun, ApiError> {
    Ok(StoredRun::open(state.output_dir(), id)?)
}

async fn list(State(state): State<Arc<ServiceState>>) -> ApiResult {
    Ok(Json(list_runs(state.output_dir())?).into_response())
}

async fn run_detail(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let run = open_run(&state, &id)?;
    let report: Value = serde_json::from_str(&run.report_json()?).map_err(ApiError::internal)?;
    Ok(Json(json!({
        "manifest": run.manifest,
        "report": report,
        "minings": run.mining_ids()?,
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

async fn report(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult {
    let run = open_run(&state, &id)?;
    match q.format.as_deref() {
        None | Some("json") => Ok(([(header::CONTENT_TYPE, "application/json")], run.report_json()?).into_response()),
        Some("text") => Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], run.report_text()?).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    }
}

#[derive(Debug, Deserialize)]
struct MiningQuery {
    mining: Option<String>,
}

/// The requested mining pass, or the one for the current taxonomy.
fn find_mining(state: &ServiceState, run: &StoredRun, q: &MiningQuery) -> Result<clonebench_core::pipeline::StoredMining, ApiError> {
    let id = match &q.mining {
        Some(id) => id.clone(),
        None => {
            let (_, taxonomy) = state.current_taxonomy()?;
            mining_id(run.run_id(), &taxonomy, &state.base.mining, &state.base.backend)
        }
    };
    if !id.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(ApiError::bad_request("malformed mining id"));
    }
    run.mining(&id)?.ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            format!("run {} has no mining pass {id}; POST /runs/{}/mine first", run.run_id(), run.run_id()),
        )
    })
}

async fn mistakes(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MiningQuery>,
) -> ApiResult {
    let run = open_run(&state, &id)?;
    let mining = find_mining(&state, &run, &q)?;
    Ok(Json(json!({
        "run_id": run.run_id(),
        "mining_id": mining.report.mining_id,
        "taxonomy_version": mining.report.taxonomy_version,
        "mistakes": mining.mistakes()?,
        "assignments": mining.assignments()?,
    }))
    .into_response())
}

async fn prevalence(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MiningQuery>,
) -> ApiResult {
    let run = open_run(&state, &id)?;
    let mining = find_mining(&state, &run, &q)?;
    Ok(Json(mining.report).into_response())
}

async fn mine(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let run = open_run(&state, &id)?;
    let (version, taxonomy) = state.current_taxonomy()?;
    let st = state.clone();
    let mined = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let gateway = (st.gateways)(&st.base.backend).map_err(ApiError::internal)?;
        Ok(mine_bias(&run, &taxonomy, &st.base.mining, &gateway)?)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(json!({
        "mining_id": mined.report.mining_id,
        "version": version,
        "status": mined.report.status,
    }))
    .into_response())
}

async fn get_lessons(State(state): State<Arc<ServiceState>>) -> ApiResult {
    let (version, lessons) = state.current_lessons()?;
    Ok(Json(json!({ "version": version, "lessons": lessons.lessons() })).into_response())
}

/// Either a whole lesson set (`{"lesson": [...]}`) or one lesson to add or
/// replace (`{"id": 7, "text": "..."}`).
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LessonEdit {
    Set(LessonSet),
    One(Lesson),
}

async fn post_lessons(State(state): State<Arc<ServiceState>>, body: String) -> ApiResult {
    let edit: LessonEdit = serde_json::from_str(&body).map_err(ApiError::bad_request)?;
    let next = match edit {
        LessonEdit::Set(set) => LessonSet::new(set.lessons().to_vec()),
        LessonEdit::One(lesson) => {
            let (_, current) = state.current_lessons()?;
            let mut all: Vec<Lesson> = current.lessons().iter().filter(|l| l.id != lesson.id).cloned().collect();
            all.push(lesson);
            LessonSet::new(all)
        }
    }
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let version = next.version_hash();
    state.lessons.commit(&version, &next.to_json()).await?;
    Ok((StatusCode::CREATED, Json(json!({ "version": version }))).into_response())
}

async fn get_taxonomy(State(state): State<Arc<ServiceState>>) -> ApiResult {
    let (version, taxonomy) = state.current_taxonomy()?;
    Ok(Json(json!({ "version": version, "categories": taxonomy.categories() })).into_response())
}

async fn post_taxonomy(State(state): State<Arc<ServiceState>>, body: String) -> ApiResult {
    let taxonomy = Taxonomy::from_json(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let version = taxonomy.version_hash();
    state.taxonomy.commit(&version, &taxonomy.to_json()).await?;
    Ok((StatusCode::CREATED, Json(json!({ "version": version }))).into_response())
}

#[derive(Debug, Deserialize)]
struct PairQuery {
    comments: Option<String>,
}

/// One pair of a run, with or without comments, for side-by-side review.
async fn pair(
    State(state): State<Arc<ServiceState>>,
    UrlPath((id, pair_id)): UrlPath<(String, String)>,
    Query(q): Query<PairQuery>,
) -> ApiResult {
    let run = open_run(&state, &id)?;
    let found: ClonePair = run
        .pairs()?
        .into_iter()
        .find(|p| p.id == pair_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("run {id} has no pair {pair_id:?}")))?;
    let shown = match q.comments.as_deref() {
        None | Some("with") => found,
        Some("without") => found.without_comments().map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?,
        Some(other) => return Err(ApiError::bad_request(format!("comments must be with or without, not {other:?}"))),
    };
    Ok(Json(shown).into_response())
}

/// One reviewer's category tags for a run's mistakes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagSheet {
    taxonomy_version: String,
    /// Pair id to category ids.
    tags: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    skipped: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagSubmission {
    reviewer: String,
    /// Version this submission was edited from; absent for a first submission.
    base_version: Option<String>,
    #[serde(flatten)]
    sheet: TagSheet,
}

fn valid_reviewer(r: &str) -> bool {
    !r.is_empty() && r.len() <= 64 && r.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn reviewers(state: &ServiceState, run_id: &str) -> Result<BTreeMap<String, (String, TagSheet)>, ApiError> {
    let dir = state.output_dir().join("versions").join("tags").join(run_id);
    let mut out = BTreeMap::new();
    let entries = match std::fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(ApiError::internal(e)),
    };
    for entry in entries {
        let name = entry.map_err(ApiError::internal)?.file_name().to_string_lossy().into_owned();
        if !valid_reviewer(&name) {
            continue;
        }
        if let Some((version, text)) = state.tag_store(run_id, &name).try_head()? {
            let sheet: TagSheet = serde_json::from_str(&text).map_err(ApiError::internal)?;
            out.insert(name, (version, sheet));
        }
    }
    Ok(out)
}

async fn get_tags(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let run = open_run(&state, &id)?;
    let sessions: BTreeMap<String, Value> = reviewers(&state, run.run_id())?
        .into_iter()
        .map(|(name, (version, sheet))| (name, json!({ "version": version, "sheet": sheet })))
        .collect();
    Ok(Json(json!({ "run_id": run.run_id(), "reviewers": sessions })).into_response())
}

/// Stores a new version of a reviewer's tags. A stale `base_version` is a
/// conflict, never a silent overwrite.
async fn post_tags(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>, body: String) -> ApiResult {
    let run = open_run(&state, &id)?;
    let sub: TagSubmission = serde_json::from_str(&body).map_err(ApiError::bad_request)?;
    if !valid_reviewer(&sub.reviewer) {
        return Err(ApiError::bad_request("reviewer ids use letters, digits, '-' and '_' only"));
    }
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    let taxonomy_text = state
        .taxonomy
        .get(&sub.sheet.taxonomy_version)?
        .ok_or_else(|| unprocessable(format!("unknown taxonomy version {:?}", sub.sheet.taxonomy_version)))?;
    let taxonomy = Taxonomy::from_json(&taxonomy_text).map_err(ApiError::internal)?;
    let known: BTreeSet<&str> = taxonomy.categories().iter().map(|c| c.id.as_str()).collect();
    let pairs: BTreeSet<String> = run.pairs()?.into_iter().map(|p| p.id).collect();
    for (pair_id, cats) in &sub.sheet.tags {
        if !pairs.contains(pair_id) {
            return Err(unprocessable(format!("run {id} has no pair {pair_id:?}")));
        }
        if let Some(bad) = cats.iter().find(|c| !known.contains(c.as_str())) {
            return Err(unprocessable(format!("unknown category {bad:?}")));
        }
        if sub.sheet.skipped.contains(pair_id) {
            return Err(unprocessable(format!("pair {pair_id:?} is both tagged and skipped")));
        }
    }
    if let Some(bad) = sub.sheet.skipped.iter().find(|p| !pairs.contains(*p)) {
        return Err(unprocessable(format!("run {id} has no pair {bad:?}")));
    }

    let store = state.tag_store(run.run_id(), &sub.reviewer);
    let _guard = state.tag_writes.lock().await;
    let head = store.try_head()?.map(|(v, _)| v);
    if head != sub.base_version {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("tags for {} are at version {:?}, not {:?}", sub.reviewer, head, sub.base_version),
        ));
    }
    let version = json_hash(&sub.sheet);
    let text = serde_json::to_string_pretty(&sub.sheet).map_err(ApiError::internal)?;
    store.write_head(&version, &text)?;
    Ok((StatusCode::CREATED, Json(json!({ "version": version }))).into_response())
}

#[derive(Debug, Deserialize)]
struct AgreementQuery {
    a: Option<String>,
    b: Option<String>,
}

/// Cohen's kappa between two reviewers over the pairs both of them tagged.
/// Each pair's label is its whole category set.
async fn agreement(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AgreementQuery>,
) -> ApiResult {
    let run = open_run(&state, &id)?;
    let sessions = reviewers(&state, run.run_id())?;
    let (a, b) = match (q.a, q.b) {
        (Some(a), Some(b)) => (a, b),
        (None, None) if sessions.len() == 2 => {
            let mut names = sessions.keys().cloned();
            (names.next().unwrap_or_default(), names.next().unwrap_or_default())
        }
        _ => return Err(ApiError::bad_request("name reviewers a and b unless exactly two have tagged this run")),
    };
    let sheet = |name: &str| {
        sessions
            .get(name)
            .map(|(_, s)| s)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no tags from reviewer {name:?}")))
    };
    let (sa, sb) = (sheet(&a)?, sheet(&b)?);
    let items: Vec<&String> = sa.tags.keys().filter(|p| sb.tags.contains_key(*p)).collect();
    if items.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "the reviewers share no tagged pairs"));
    }
    let la: Vec<&BTreeSet<String>> = items.iter().map(|p| &sa.tags[*p]).collect();
    let lb: Vec<&BTreeSet<String>> = items.iter().map(|p| &sb.tags[*p]).collect();
    let kappa = cohen_kappa(&la, &lb).map_err(ApiError::internal)?;
    Ok(Json(json!({ "a": a, "b": b, "items": items.len(), "kappa": kappa })).into_response())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RunRequestKind {
    Eval,
    #[default]
    Ablation,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    #[serde(default)]
    kind: RunRequestKind,
    /// Lesson selection for `eval`; defaults to the configured one.
    lessons: Option<Vec<u8>>,
    #[serde(default)]
    mine: bool,
}

/// Starts an eval or ablation with the current lesson and taxonomy
/// versions. Identical concurrent requests share one execution.
async fn trigger_run(State(state): State<Arc<ServiceState>>, body: String) -> ApiResult {
    let req: RunRequest = if body.trim().is_empty() {
        RunRequest::default()
    } else {
        serde_json::from_str(&body).map_err(ApiError::bad_request)?
    };
    let (lesson_version, lessons) = state.current_lessons()?;
    let (taxonomy_version, taxonomy) = state.current_taxonomy()?;
    let mut config = state.base.clone();
    if let Some(sel) = &req.lessons {
        config.prompt.lessons = sel.clone();
    }
    let key = json_hash(&json!({
        "kind": req.kind,
        "lessons": config.prompt.lessons,
        "lesson_version": lesson_version,
        "taxonomy_version": taxonomy_version,
        "mine": req.mine,
    }));
    let exp = Experiment::new(config, lessons, taxonomy).map_err(ApiError::from)?;
    let cell = state
        .inflight
        .lock()
        .expect("inflight map")
        .entry(key.clone())
        .or_insert_with(|| Arc::new(OnceCell::new()))
        .clone();
    let st = state.clone();
    let result = cell
        .get_or_try_init(|| async move {
            tokio::task::spawn_blocking(move || execute(&st, &exp, req.kind, req.mine))
                .await
                .map_err(ApiError::internal)?
        })
        .await
        .cloned();
    // later requests start afresh and find the stored run
    {
        let mut inflight = state.inflight.lock().expect("inflight map");
        if inflight.get(&key).is_some_and(|c| Arc::ptr_eq(c, &cell)) {
            inflight.remove(&key);
        }
    }
    Ok((StatusCode::CREATED, Json(result?)).into_response())
}

fn execute(state: &ServiceState, exp: &Experiment, kind: RunRequestKind, mine: bool) -> Result<Value, ApiError> {
    let gateway = (state.gateways)(&exp.config.backend).map_err(ApiError::internal)?;
    let (run_id, dir, reused) = match kind {
        RunRequestKind::Eval => {
            let out = run_eval(exp, &gateway)?;
            (out.run_id, out.dir, out.reused)
        }
        RunRequestKind::Ablation => {
            let out = run_ablation(exp, &gateway)?;
            (out.run_id, out.dir, out.reused)
        }
    };
    let mining = if mine {
        let run = StoredRun::open_dir(&dir)?;
        Some(mine_bias(&run, &exp.taxonomy, &exp.config.mining, &gateway)?.report.mining_id)
    } else {
        None
    };
    Ok(json!({
        "run_id": run_id,
        "version": run_id,
        "reused": reused,
        "lesson_set_version": exp.lessons.version_hash(),
        "taxonomy_version": exp.taxonomy.version_hash(),
        "mining_id": mining,
    }))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: ServiceState, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
