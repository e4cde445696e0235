//! HTTP annotation service.
//!
//! Source clouds are read once at startup and never written; label edits
//! live in one JSON session file per cloud. Writes to a session are
//! serialized and guarded by its revision counter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use shootseg::cloud::{load_cloud, voxel_downsample, write_xyzl, CloudFormat, LEAF, STEM, UNLABELED};
use shootseg::cluster::region_grow;
use shootseg::PointCloud;

/// Clouds above this many points are decimated unless the client asks otherwise.
pub const DEFAULT_BUDGET: usize = 300_000;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown cloud '{0}'")]
    NotFound(String),
    #[error("stale revision {sent}; current revision is {current}")]
    Conflict { sent: u64, current: u64 },
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let msg = self.to_string();
        let (status, body) = match self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, json!({ "error": msg })),
            ApiError::Conflict { current, .. } => (StatusCode::CONFLICT, json!({ "error": msg, "revision": current })),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, json!({ "error": msg })),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": msg })),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub sem: i32,
    pub inst: i32,
}

/// Sparse label edits of one cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSession {
    pub cloud_id: String,
    pub revision: u64,
    pub author: String,
    pub created: u64,
    pub updated: u64,
    pub edits: BTreeMap<usize, Edit>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct CloudEntry {
    cloud: PointCloud,
    session: Mutex<LabelSession>,
    session_path: PathBuf,
}

impl CloudEntry {
    /// Original labels overlaid with session edits.
    fn merged_labels(&self, session: &LabelSession) -> (Vec<i32>, Vec<i32>) {
        let n = self.cloud.len();
        let mut sem = self.cloud.semantic().map_or(vec![UNLABELED; n], <[i32]>::to_vec);
        let mut inst = self.cloud.instance().map_or(vec![UNLABELED; n], <[i32]>::to_vec);
        for (&i, e) in &session.edits {
            sem[i] = e.sem;
            inst[i] = e.inst;
        }
        (sem, inst)
    }
}

pub struct AppState {
    clouds: BTreeMap<String, CloudEntry>,
}

impl AppState {
    /// Loads every `.xyzl`/`.ply` file of `data_dir`; the id of a cloud is
    /// its file stem. Existing session files in `session_dir` are resumed.
    pub fn open(data_dir: &Path, session_dir: &Path) -> shootseg::Result<Self> {
        let io = |p: &Path, e| shootseg::Error::Io {
            path: p.to_path_buf(),
            source: e,
        };
        std::fs::create_dir_all(session_dir).map_err(|e| io(session_dir, e))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(data_dir)
            .map_err(|e| io(data_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyzl" | "ply")))
            .collect();
        files.sort();
        let mut clouds = BTreeMap::new();
        for f in files {
            let cloud = load_cloud(&f, CloudFormat::from_path(&f))?;
            let id = cloud.source_id().to_string();
            let session_path = session_dir.join(format!("{id}.json"));
            let session = if session_path.exists() {
                let text = std::fs::read_to_string(&session_path).map_err(|e| io(&session_path, e))?;
                let s: LabelSession = serde_json::from_str(&text)
                    .map_err(|e| shootseg::Error::InvalidArgument(format!("{}: {e}", session_path.display())))?;
                if s.edits.keys().any(|&i| i >= cloud.len()) {
                    return Err(shootseg::Error::InvalidArgument(format!(
                        "{}: edit index out of range",
                        session_path.display()
                    )));
                }
                s
            } else {
                let t = now();
                LabelSession {
                    cloud_id: id.clone(),
                    revision: 0,
                    author: String::new(),
                    created: t,
                    updated: t,
                    edits: BTreeMap::new(),
                }
            };
            clouds.insert(
                id,
                CloudEntry {
                    cloud,
                    session: Mutex::new(session),
                    session_path,
                },
            );
        }
        Ok(Self { clouds })
    }

    fn entry(&self, id: &str) -> Result<&CloudEntry, ApiError> {
        self.clouds.get(id).ok_or_else(|| ApiError::NotFound(id.to_string()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/clouds", get(list_clouds))
        .route("/api/clouds/{id}", get(get_cloud))
        .route("/api/clouds/{id}/labels", post(post_labels))
        .route("/api/clouds/{id}/region", post(post_region))
        .route("/api/clouds/{id}/export", get(export))
        .route("/api/schema", get(schema))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving {} clouds on http://{}", state.clouds.len(), listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

fn lock(entry: &CloudEntry) -> std::sync::MutexGuard<'_, LabelSession> {
    entry.session.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Serialize)]
struct CloudSummary {
    id: String,
    points: usize,
    labeled: usize,
}

async fn list_clouds(State(state): State<Arc<AppState>>) -> Json<Vec<CloudSummary>> {
    let list = state
        .clouds
        .iter()
        .map(|(id, e)| {
            let (sem, _) = e.merged_labels(&lock(e));
            CloudSummary {
                id: id.clone(),
                points: e.cloud.len(),
                labeled: sem.iter().filter(|&&s| s != UNLABELED).count(),
            }
        })
        .collect();
    Json(list)
}

#[derive(Deserialize)]
struct ViewQuery {
    budget: Option<usize>,
}

#[derive(Serialize)]
struct CloudView {
    id: String,
    points: usize,
    coords: Vec<f64>,
    colors: Vec<f64>,
    /// Original index of each displayed point.
    index_map: Vec<usize>,
    semantic: Vec<i32>,
    instance: Vec<i32>,
    revision: u64,
}

/// Indices of the displayed points: all of them within budget, otherwise
/// one representative per voxel with the voxel grown until the budget fits.
fn decimate(cloud: &PointCloud, budget: usize) -> Result<Vec<usize>, ApiError> {
    if cloud.len() <= budget {
        return Ok((0..cloud.len()).collect());
    }
    let internal = |e: shootseg::Error| ApiError::Internal(e.to_string());
    let (lo, hi) = cloud.coords().iter().fold(
        ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]),
        |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        },
    );
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-6);
    let mut voxel = extent / (budget as f64).cbrt() / 4.0;
    loop {
        let (_, mut index) = voxel_downsample(cloud, voxel).map_err(internal)?;
        if index.len() <= budget {
            index.sort_unstable();
            return Ok(index);
        }
        voxel *= 1.25;
    }
}

async fn get_cloud(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ViewQuery>,
) -> Result<Json<CloudView>, ApiError> {
    let entry = state.entry(&id)?;
    let budget = q.budget.unwrap_or(DEFAULT_BUDGET);
    if budget == 0 {
        return Err(ApiError::BadRequest("budget must be positive".into()));
    }
    let (sem, inst, revision) = {
        let s = lock(entry);
        let (sem, inst) = entry.merged_labels(&s);
        (sem, inst, s.revision)
    };
    let index_map = decimate(&entry.cloud, budget)?;
    let coords = entry.cloud.coords();
    let colors = entry.cloud.colors();
    Ok(Json(CloudView {
        id,
        points: entry.cloud.len(),
        coords: index_map.iter().flat_map(|&i| [coords[i].x, coords[i].y, coords[i].z]).collect(),
        colors: index_map.iter().flat_map(|&i| colors[i]).collect(),
        semantic: index_map.iter().map(|&i| sem[i]).collect(),
        instance: index_map.iter().map(|&i| inst[i]).collect(),
        index_map,
        revision,
    }))
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

#[derive(Deserialize)]
struct EditIn {
    index: usize,
    sem: i32,
    inst: i32,
}

#[derive(Deserialize)]
struct LabelPost {
    revision: u64,
    edits: Vec<EditIn>,
    #[serde(default)]
    author: Option<String>,
}

async fn post_labels(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let entry = state.entry(&id)?;
    let post: LabelPost = parse_body(&body)?;
    for e in &post.edits {
        if e.index >= entry.cloud.len() {
            return Err(ApiError::BadRequest(format!("index {} out of range", e.index)));
        }
        if e.sem < UNLABELED || e.inst < UNLABELED {
            return Err(ApiError::BadRequest(format!("invalid label at index {}", e.index)));
        }
    }
    let mut session = lock(entry);
    if post.revision != session.revision {
        return Err(ApiError::Conflict {
            sent: post.revision,
            current: session.revision,
        });
    }
    let mut next = session.clone();
    for e in &post.edits {
        next.edits.insert(e.index, Edit { sem: e.sem, inst: e.inst });
    }
    next.revision += 1;
    next.updated = now();
    if let Some(a) = post.author {
        next.author = a;
    }
    let text = serde_json::to_string_pretty(&next).map_err(|e| ApiError::Internal(e.to_string()))?;
    let tmp = entry.session_path.with_extension("json.tmp");
    std::fs::write(&tmp, text)
        .and_then(|_| std::fs::rename(&tmp, &entry.session_path))
        .map_err(|e| ApiError::Internal(format!("saving session: {e}")))?;
    *session = next;
    Ok(Json(json!({ "revision": session.revision })))
}

#[derive(Deserialize)]
struct RegionPost {
    seed_index: usize,
    radius_mm: f64,
    max_points: usize,
}

async fn post_region(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let entry = state.entry(&id)?;
    let q: RegionPost = parse_body(&body)?;
    let indices = region_grow(entry.cloud.coords(), q.seed_index, q.radius_mm, q.max_points)
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(Json(json!({ "indices": indices })))
}

async fn export(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = state.entry(&id)?;
    let (sem, inst) = entry.merged_labels(&lock(entry));
    let cloud = entry
        .cloud
        .clone()
        .with_labels(Some(sem), Some(inst))
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], write_xyzl(&cloud)).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaLabel {
    pub name: String,
    pub sem: i32,
    pub inst: i32,
    pub color: [u8; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// `stem` plus `leaf_01`..`leaf_69`, leaf hues spaced by the golden ratio.
pub fn default_schema() -> Vec<SchemaLabel> {
    let mut labels = vec![SchemaLabel {
        name: "stem".into(),
        sem: STEM,
        inst: UNLABELED,
        color: [139, 90, 43],
    }];
    for k in 0..69 {
        let hue = (0.25 + k as f64 * 0.618_033_988_749_895).fract();
        labels.push(SchemaLabel {
            name: format!("leaf_{:02}", k + 1),
            sem: LEAF,
            inst: k,
            color: hsv(hue, 0.65, 0.9),
        });
    }
    labels
}

async fn schema() -> Json<serde_json::Value> {
    Json(json!({ "labels": default_schema() }))
}
