//! HTTP API over a workspace, consumed by the triage front end.
//!
//! Manifests and runs are indexed once at start-up; triage tags are read and
//! written through a single in-process lock so concurrent posts serialize.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use scenario_core::dataset::{class_stats, load_manifest, manifest_dir, ClassStats, DatasetManifest, ManifestEntry};
use scenario_core::evaluate::{case_detail_for, CaseDetail};
use scenario_core::modelrun::{load_run, ModelRunManifest};
use scenario_core::triage::{Tag, TriageEntry, TriageFile};
use scenario_core::Layout;

use crate::commands::RUN_FILE;
use crate::CliError;

/// A manifest found under `manifests/`.
#[derive(Debug)]
pub struct IndexedManifest {
    pub name: String,
    pub path: PathBuf,
    pub manifest: DatasetManifest,
    pub fingerprint: String,
}

impl IndexedManifest {
    fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        manifest_dir(&self.path).join(&entry.image.path)
    }
}

/// A run under `runs/<id>/run.json`, bound to the manifest it was made on.
#[derive(Debug)]
pub struct IndexedRun {
    pub id: String,
    pub run: ModelRunManifest,
    pub manifest: usize,
}

#[derive(Debug)]
pub struct AppState {
    pub layout: Layout,
    pub ui_dir: Option<PathBuf>,
    pub tau: f64,
    pub manifests: Vec<IndexedManifest>,
    pub runs: Vec<IndexedRun>,
    triage_lock: Mutex<()>,
}

fn json_files(dir: &Path) -> Vec<(String, PathBuf)> {
    let Ok(read) = fs::read_dir(dir) else { return Vec::new() };
    let mut out: Vec<(String, PathBuf)> = read
        .filter_map(Result::ok)
        .filter_map(|e| {
            let path = e.path();
            let name = if path.is_dir() { path.file_name() } else { path.file_stem() }?.to_str()?.to_string();
            if path.is_dir() {
                let inner = path.join("manifest.json");
                inner.is_file().then_some((name, inner))
            } else if path.extension().is_some_and(|x| x == "json") {
                Some((name, path))
            } else {
                None
            }
        })
        .collect();
    out.sort();
    out
}

impl AppState {
    /// Indexes the workspace; it must hold at least one manifest and one run
    /// bound to it.
    pub fn load(layout: Layout, ui_dir: Option<PathBuf>, tau: f64) -> Result<Self, CliError> {
        let mut manifests = Vec::new();
        for (name, path) in json_files(&layout.manifests()) {
            match load_manifest(&path) {
                Ok(manifest) => {
                    let fingerprint = manifest.fingerprint();
                    manifests.push(IndexedManifest { name, path, manifest, fingerprint });
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        let mut runs = Vec::new();
        if let Ok(read) = fs::read_dir(layout.runs()) {
            let mut dirs: Vec<PathBuf> = read.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect();
            dirs.sort();
            for dir in dirs {
                let path = dir.join(RUN_FILE);
                if !path.is_file() {
                    continue;
                }
                let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                match load_run(&path) {
                    Ok(run) => match manifests.iter().position(|m| m.fingerprint == run.dataset.fingerprint) {
                        Some(manifest) => runs.push(IndexedRun { id, run, manifest }),
                        None => log::warn!("run {id} matches no manifest in the workspace"),
                    },
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
        }
        if manifests.is_empty() || runs.is_empty() {
            return Err(CliError::Domain(format!(
                "workspace {} needs at least one manifest under manifests/ and one run under runs/<model>/{RUN_FILE}",
                layout.root.display()
            )));
        }
        Ok(AppState { layout, ui_dir, tau, manifests, runs, triage_lock: Mutex::new(()) })
    }

    fn find_image(&self, id: &str) -> Option<(&IndexedManifest, &ManifestEntry)> {
        self.manifests.iter().find_map(|m| m.manifest.get(id).map(|e| (m, e)))
    }

    fn find_run(&self, id: &str) -> Option<&IndexedRun> {
        self.runs.iter().find(|r| r.id == id)
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what.into())
}

fn bad_request(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, what.into())
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/manifests", get(list_manifests))
        .route("/api/runs", get(list_runs))
        .route("/api/cases", get(list_cases))
        .route("/api/image/{id}", get(image))
        .route("/api/case/{run}/{id}", get(case))
        .route("/api/tags", post(post_tag).get(get_tags))
        .route("/api/reports/{name}", get(report))
        .fallback(get(static_asset))
        .with_state(state)
}

#[derive(Serialize)]
struct ManifestSummary<'a> {
    name: &'a str,
    path: String,
    fingerprint: &'a str,
    images: usize,
    class_set: &'a [String],
    scenarios: BTreeMap<&'a str, usize>,
    class_stats: ClassStats,
}

async fn list_manifests(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<ManifestSummary> = s
        .manifests
        .iter()
        .map(|m| {
            let mut scenarios = BTreeMap::new();
            for e in &m.manifest.images {
                *scenarios.entry(e.provenance.scenario.as_str()).or_insert(0) += 1;
            }
            ManifestSummary {
                name: &m.name,
                path: m.path.display().to_string(),
                fingerprint: &m.fingerprint,
                images: m.manifest.len(),
                class_set: &m.manifest.class_set,
                scenarios,
                class_stats: class_stats(&m.manifest),
            }
        })
        .collect();
    Json(serde_json::to_value(list).expect("summaries serialize"))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    id: &'a str,
    model_id: &'a str,
    manifest: &'a str,
    dataset_fingerprint: &'a str,
    images: usize,
    detections: usize,
}

async fn list_runs(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<RunSummary> = s
        .runs
        .iter()
        .map(|r| RunSummary {
            id: &r.id,
            model_id: &r.run.model_id,
            manifest: &s.manifests[r.manifest].name,
            dataset_fingerprint: &r.run.dataset.fingerprint,
            images: r.run.predictions.len(),
            detections: r.run.predictions.iter().map(|p| p.detections.len()).sum(),
        })
        .collect();
    Json(serde_json::to_value(list).expect("summaries serialize"))
}

/// A case with the URL of its image.
#[derive(Debug, Serialize, Deserialize)]
pub struct CaseView {
    #[serde(flatten)]
    pub detail: CaseDetail,
    pub image_url: String,
}

impl CaseView {
    fn new(detail: CaseDetail) -> Self {
        let image_url = format!("/api/image/{}", detail.image_id);
        CaseView { detail, image_url }
    }

    fn failing(&self) -> bool {
        self.detail.false_positives + self.detail.misses > 0
    }

    fn touches_class(&self, class: &str) -> bool {
        self.detail.ground_truth.iter().any(|a| a.class.as_str() == class)
            || self.detail.predictions.iter().any(|d| d.class.as_str() == class)
    }
}

#[derive(Debug, Deserialize)]
pub struct CaseQuery {
    pub run: Option<String>,
    pub scenario: Option<String>,
    pub verdict: Option<String>,
    pub class: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseList {
    pub run: String,
    pub verdict: String,
    pub total: usize,
    pub cases: Vec<CaseView>,
}

async fn list_cases(State(s): State<Arc<AppState>>, Query(q): Query<CaseQuery>) -> ApiResult<Json<CaseList>> {
    let run = match &q.run {
        Some(id) => s.find_run(id).ok_or_else(|| not_found(format!("no run {id:?}")))?,
        None if s.runs.len() == 1 => &s.runs[0],
        None => return Err(bad_request("several runs available; pass ?run=<id>")),
    };
    let fail_only = match q.verdict.as_deref().unwrap_or("all") {
        "fail" => true,
        "all" => false,
        other => return Err(bad_request(format!("verdict must be fail or all, got {other:?}"))),
    };
    let im = &s.manifests[run.manifest];
    let by_image = run.run.by_image();
    let mut cases: Vec<CaseView> = im
        .manifest
        .images
        .iter()
        .filter(|e| q.scenario.as_ref().is_none_or(|sc| e.provenance.scenario.eq_ignore_ascii_case(sc)))
        .map(|e| {
            let dets = by_image.get(e.image.id.as_str()).copied().unwrap_or_default();
            CaseView::new(case_detail_for(e, &im.manifest.class_set, dets, s.tau))
        })
        .filter(|c| !fail_only || c.failing())
        .filter(|c| q.class.as_ref().is_none_or(|cl| c.touches_class(cl)))
        .collect();
    cases.sort_by(|a, b| {
        let wa = a.detail.false_positives + a.detail.misses;
        let wb = b.detail.false_positives + b.detail.misses;
        wb.cmp(&wa).then_with(|| a.detail.image_id.cmp(&b.detail.image_id))
    });
    Ok(Json(CaseList {
        run: run.id.clone(),
        verdict: if fail_only { "fail" } else { "all" }.to_string(),
        total: cases.len(),
        cases,
    }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("json") => "application/json",
        Some("html" | "htm") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("svg") => "image/svg+xml",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn file_response(path: &Path) -> ApiResult<Response> {
    let bytes = tokio::fs::read(path).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => not_found(format!("missing file {}", path.display())),
        _ => ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())),
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(path))], Body::from(bytes)).into_response())
}

async fn image(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (m, e) = s.find_image(&id).ok_or_else(|| not_found(format!("no image {id:?}")))?;
    file_response(&m.image_path(e)).await
}

async fn case(State(s): State<Arc<AppState>>, UrlPath((run, id)): UrlPath<(String, String)>) -> ApiResult<Json<CaseView>> {
    let r = s.find_run(&run).ok_or_else(|| not_found(format!("no run {run:?}")))?;
    let m = &s.manifests[r.manifest].manifest;
    let entry = m.get(&id).ok_or_else(|| not_found(format!("no image {id:?} in run {run:?}")))?;
    let dets = r.run.by_image().get(id.as_str()).copied().unwrap_or_default();
    Ok(Json(CaseView::new(case_detail_for(entry, &m.class_set, dets, s.tau))))
}

#[derive(Debug, Deserialize)]
pub struct TagRequest {
    pub image_id: String,
    #[serde(default)]
    pub annotation_index: Option<usize>,
    pub tag: String,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub author: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TagResponse {
    pub added: bool,
    pub entry: TriageEntry,
}

async fn post_tag(State(s): State<Arc<AppState>>, Json(req): Json<TagRequest>) -> ApiResult<Json<TagResponse>> {
    let tag: Tag = req.tag.parse().map_err(|e| bad_request(format!("{e}")))?;
    let (_, entry) = s.find_image(&req.image_id).ok_or_else(|| not_found(format!("no image {:?}", req.image_id)))?;
    if let Some(i) = req.annotation_index {
        let len = entry.image.annotations.len();
        if i >= len {
            return Err(bad_request(format!("image {:?} has {len} annotations, no index {i}", req.image_id)));
        }
    }
    let mut new = TriageEntry::new(req.image_id, req.annotation_index, tag);
    new.note = req.note;
    new.author = req.author;
    let new = new.stamped();

    let path = s.layout.triage_file();
    let _guard = s.triage_lock.lock().await;
    let internal = |e: scenario_core::triage::TriageError| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let mut triage = TriageFile::load_or_default(&path).map_err(internal)?;
    let added = triage.add(new.clone());
    if added {
        triage.save_atomic(&path).map_err(internal)?;
    }
    Ok(Json(TagResponse { added, entry: new }))
}

async fn get_tags(State(s): State<Arc<AppState>>) -> ApiResult<Json<TriageFile>> {
    let _guard = s.triage_lock.lock().await;
    TriageFile::load_or_default(&s.layout.triage_file())
        .map(Json)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

/// Joins `rel` under `base` if it names a plain relative path.
fn confined(base: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    rel.components().all(|c| matches!(c, Component::Normal(_))).then(|| base.join(rel))
}

async fn report(State(s): State<Arc<AppState>>, UrlPath(name): UrlPath<String>) -> ApiResult<Response> {
    let path = confined(&s.layout.reports(), &name).ok_or_else(|| bad_request(format!("bad report name {name:?}")))?;
    file_response(&path).await
}

const PLACEHOLDER_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>scenario triage</title></head>\n<body><h1>scenario triage API</h1>\n<p>No UI assets configured; start with <code>serve --ui &lt;dir&gt;</code>.</p>\n<ul><li><a href=\"/api/manifests\">/api/manifests</a></li><li><a href=\"/api/runs\">/api/runs</a></li>\n<li><a href=\"/api/cases?verdict=fail\">/api/cases?verdict=fail</a></li><li><a href=\"/api/tags\">/api/tags</a></li></ul>\n</body></html>\n";

async fn static_asset(State(s): State<Arc<AppState>>, uri: axum::http::Uri) -> ApiResult<Response> {
    let rel = uri.path().trim_start_matches('/');
    if rel.starts_with("api/") {
        return Err(not_found(format!("no endpoint {}", uri.path())));
    }
    let Some(ui) = &s.ui_dir else {
        if rel.is_empty() || rel == "index.html" {
            return Ok(([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER_INDEX).into_response());
        }
        return Err(not_found(uri.path().to_string()));
    };
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let path = confined(ui, rel).ok_or_else(|| bad_request(format!("bad path {}", uri.path())))?;
    if path.is_file() {
        file_response(&path).await
    } else {
        // client-side routes fall back to the single page
        file_response(&ui.join("index.html")).await
    }
}

/// Indexes the workspace, binds `host:port` and serves until interrupted.
pub fn serve_blocking(layout: Layout, ui_dir: Option<PathBuf>, host: &str, port: u16, tau: f64) -> Result<(), CliError> {
    let state = Arc::new(AppState::load(layout, ui_dir, tau)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| CliError::Io { path: PathBuf::from("<runtime>"), source })?;
    runtime.block_on(async move {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Domain(format!("cannot listen on {addr}: {e}")))?;
        let local: SocketAddr = listener.local_addr().map_err(|e| CliError::Domain(e.to_string()))?;
        println!(
            "serving {} manifests and {} runs on http://{local}",
            state.manifests.len(),
            state.runs.len()
        );
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Domain(format!("server error: {e}")))
    })
}
