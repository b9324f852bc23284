//! HTTP service behind the annotation tool.
//!
//! Every response is JSON except the raw PNG templates and gallery images.
//! Images travel as base64 PNG. The checkpoint is read-only after load and
//! the templates are built before the listener opens, so handlers share no
//! mutable state.

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State as AxState};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use gangealing::correspond::{composite, decide_flip, transfer_points, Aligner, Alignment};
use gangealing::datapipe::{decode_image, decode_overlay, encode_png, load_dir, smoothness_score};
use gangealing::generator::Generator;
use gangealing::keypoints::{Keypoint, KeypointSet};
use gangealing::par::{self, Execution};
use gangealing::tensor::Tensor;
use gangealing::trainer::Model;
use gangealing::Error;
use serde::{Deserialize, Serialize};

/// Seed offset for the template sample set, away from the training streams.
const TEMPLATE_SEED: u64 = 7_000_000;

pub struct State {
    pub model: Model,
    pub manifest: serde_json::Value,
    pub gallery: Vec<(String, Tensor)>,
    /// PNG bytes of the average congealed image per cluster.
    pub templates: Vec<Vec<u8>>,
    pub exec: Execution,
}

impl State {
    pub fn load(checkpoint: &Path, gallery: Option<&Path>, template_samples: usize, exec: Execution) -> anyhow::Result<Self> {
        let model = crate::load_model(checkpoint)?;
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(checkpoint.join("manifest.json")).context("reading manifest.json")?,
        )?;
        let gallery = match gallery {
            Some(dir) => load_dir(dir, model.config.network.resolution, exec)?,
            None => Vec::new(),
        };
        Self::new(model, manifest, gallery, template_samples, exec)
    }

    pub fn new(
        model: Model,
        manifest: serde_json::Value,
        gallery: Vec<(String, Tensor)>,
        template_samples: usize,
        exec: Execution,
    ) -> anyhow::Result<Self> {
        let templates = build_templates(&model, template_samples.max(1), exec)?;
        Ok(Self { model, manifest, gallery, templates, exec })
    }

    fn aligner(&self) -> Aligner<'_> {
        Aligner::from_model(&self.model)
    }

    fn resolution(&self) -> usize {
        self.model.config.network.resolution
    }
}

/// Mean congealed image of each cluster over a seeded set of generator
/// samples. A cluster no sample chooses averages every sample forced
/// through its head instead, so each template is always defined.
fn build_templates(model: &Model, n: usize, exec: Execution) -> anyhow::Result<Vec<Vec<u8>>> {
    let aligner = Aligner::from_model(model);
    let g = &model.generator;
    let images: Vec<Tensor> =
        par::map_range(exec, n, |i| g.synthesize(&g.sample_latent(TEMPLATE_SEED + i as u64))).into_iter().collect::<Result<_, _>>()?;
    let aligned: Vec<Alignment> = par::map(exec, &images, |x| aligner.align(x)).into_iter().collect::<Result<_, _>>()?;
    let r = model.config.network.resolution;
    let mut out = Vec::new();
    for k in 0..model.network.clusters() {
        let mut members: Vec<Tensor> = aligned.iter().filter(|a| a.cluster() == k).map(|a| a.congealed().clone()).collect();
        if members.is_empty() {
            members = par::map(exec, &images, |x| aligner.align_with(x, k, false).map(|a| a.congealed().clone()))
                .into_iter()
                .collect::<Result<_, _>>()?;
        }
        let mut mean = Tensor::zeros(3, r, r);
        for m in &members {
            mean.add_assign(m);
        }
        mean.scale(1.0 / members.len() as f64);
        out.push(encode_png(&mean)?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: msg.into() }
    }
}

/// Input the client got wrong maps to 400; everything else is ours.
impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::Format(_) | Error::Image(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<State>;

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request body: {e}")))
}

fn decode_b64(s: &str) -> ApiResult<Vec<u8>> {
    B64.decode(s.trim()).map_err(|e| ApiError::bad(format!("invalid base64: {e}")))
}

/// Run blocking work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
    })?
}

/// A gallery image by id, or an uploaded base64 PNG.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub id: Option<String>,
    pub png: Option<String>,
}

fn resolve(state: &State, r: &ImageRef) -> ApiResult<(String, Tensor)> {
    match (&r.id, &r.png) {
        (Some(id), None) => state
            .gallery
            .iter()
            .find(|(g, _)| g == id)
            .cloned()
            .ok_or_else(|| ApiError::bad(format!("unknown image id {id:?}"))),
        (None, Some(b)) => Ok(("upload".into(), decode_image(&decode_b64(b)?, Some(state.resolution()))?)),
        _ => Err(ApiError::bad("an image needs exactly one of id or png")),
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/template", get(template))
        .route("/api/images", get(images))
        .route("/api/images/:id", get(image))
        .route("/api/propagate", post(propagate))
        .route("/api/transfer", post(transfer))
        .route("/api/score", post(score))
        .with_state(state)
}

pub fn run(state: State, host: &str, port: u16) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await.with_context(|| format!("binding {host}:{port}"))?;
        log::info!("serving on {}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(state))).await?;
        Ok(())
    })
}

async fn meta(AxState(s): AxState<Shared>) -> Json<serde_json::Value> {
    Json(s.manifest.clone())
}

#[derive(Deserialize)]
struct TemplateQuery {
    cluster: Option<usize>,
}

async fn template(AxState(s): AxState<Shared>, q: Option<Query<TemplateQuery>>) -> ApiResult<Response> {
    let Some(Query(q)) = q else {
        return Err(ApiError::bad("cluster must be a non-negative integer"));
    };
    let k = q.cluster.unwrap_or(0);
    let png = s.templates.get(k).ok_or_else(|| ApiError::bad(format!("cluster {k} out of range")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.clone()).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct ImageList {
    pub ids: Vec<String>,
    pub resolution: usize,
}

async fn images(AxState(s): AxState<Shared>) -> Json<ImageList> {
    Json(ImageList { ids: s.gallery.iter().map(|(id, _)| id.clone()).collect(), resolution: s.resolution() })
}

async fn image(AxState(s): AxState<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (_, x) = resolve(&s, &ImageRef { id: Some(id), png: None })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], encode_png(&x)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateRequest {
    pub overlay: String,
    #[serde(default)]
    pub ids: Vec<String>,
    #[serde(default)]
    pub images: Vec<String>,
    pub cluster: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Propagated {
    pub id: String,
    pub png: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PropagateResponse {
    pub results: Vec<Propagated>,
}

async fn propagate(AxState(s): AxState<Shared>, body: Bytes) -> ApiResult<Json<PropagateResponse>> {
    let req: PropagateRequest = parse(&body)?;
    blocking(move || {
        let overlay = decode_overlay(&decode_b64(&req.overlay)?)?;
        let mut targets = Vec::new();
        for id in &req.ids {
            targets.push(resolve(&s, &ImageRef { id: Some(id.clone()), png: None })?);
        }
        for (i, b) in req.images.iter().enumerate() {
            let (_, x) = resolve(&s, &ImageRef { id: None, png: Some(b.clone()) })?;
            targets.push((format!("upload-{i}"), x));
        }
        if targets.is_empty() {
            return Err(ApiError::bad("no target images"));
        }
        if let Some(k) = req.cluster {
            if k >= s.model.network.clusters() {
                return Err(ApiError::bad(format!("cluster {k} out of range")));
            }
        }
        let aligner = s.aligner();
        let results = par::map(s.exec, &targets, |(id, x)| -> ApiResult<Propagated> {
            let a = match req.cluster {
                Some(k) => {
                    let flip = aligner.flips && decide_flip(&aligner, x, k)?;
                    aligner.align_with(x, k, flip)?
                }
                None => aligner.align(x)?,
            };
            let out = composite(&overlay, x, &a.grid)?;
            Ok(Propagated { id: id.clone(), png: B64.encode(encode_png(&out)?) })
        });
        Ok(Json(PropagateResponse { results: results.into_iter().collect::<ApiResult<_>>()? }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRequest {
    pub source: ImageRef,
    pub target: ImageRef,
    pub points: Vec<Keypoint>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TransferResponse {
    pub points: Vec<Keypoint>,
}

async fn transfer(AxState(s): AxState<Shared>, body: Bytes) -> ApiResult<Json<TransferResponse>> {
    let req: TransferRequest = parse(&body)?;
    blocking(move || {
        let (_, a) = resolve(&s, &req.source)?;
        let (_, b) = resolve(&s, &req.target)?;
        let moved = transfer_points(&s.aligner(), &a, &b, &KeypointSet::new(req.points))?;
        Ok(Json(TransferResponse { points: moved.points }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub image: ImageRef,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub flip: bool,
}

async fn score(AxState(s): AxState<Shared>, body: Bytes) -> ApiResult<Json<ScoreResponse>> {
    let req: ScoreRequest = parse(&body)?;
    blocking(move || {
        let (id, x) = resolve(&s, &req.image)?;
        let r = smoothness_score(&s.aligner(), &id, &x)?;
        Ok(Json(ScoreResponse { score: r.score, flip: r.flip_used }))
    })
    .await
}
