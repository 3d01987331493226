use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use sim_core::gradcore::Tensor;
use sim_core::probes::{decode_frames, delta_from_waves, importance_scores, interpolate, partial_swap, rank_importance};
use sim_core::syllabgen::encode_wav;

use crate::error::ApiError;
use crate::session::{Session, TOP_DIMS};

pub const LAYER_HEADER: &str = "x-latent-layer";
pub const DELTA_PREVIEW_HEADER: &str = "x-delta-preview";
pub const DELTA_HEADER: &str = "x-delta";

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/clips", get(clips))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/interpolate", post(interp))
        .route("/traverse", post(traverse))
        .route("/partial_swap", post(swap))
        .route("/audio/{clip_id}", get(audio))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint", "") })
        .with_state(session)
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        if e.is_data() {
            ApiError::invalid("request does not match the endpoint schema", e.to_string())
        } else {
            ApiError::bad_request(e.to_string())
        }
    })
}

/// `?sample=seed` switches encodings from the posterior mean to a seeded sample.
fn sample_seed(query: Option<String>) -> ApiResult<Option<u64>> {
    let Some(q) = query else { return Ok(None) };
    let mut seed = None;
    for pair in q.split('&').filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("sample", v)) => {
                seed = Some(v.parse().map_err(|_| ApiError::bad_request(format!("sample must be an unsigned integer, got `{v}`")))?)
            }
            _ => return Err(ApiError::bad_request(format!("unknown query parameter `{pair}`"))),
        }
    }
    Ok(seed)
}

async fn blocking<F>(f: F) -> Response
where
    F: FnOnce() -> ApiResult<Response> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "worker failed", e.to_string()).into_response(),
    }
}

fn wav_response(session: &Session, layer: usize, wave: &Tensor, extra: &[(&'static str, String)]) -> ApiResult<Response> {
    let bytes = encode_wav(wave.data())?;
    let mut resp = (StatusCode::OK, bytes).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("audio/wav"));
    h.insert(HeaderName::from_static(LAYER_HEADER), HeaderValue::from(layer));
    h.insert(
        HeaderName::from_static("x-checkpoint"),
        HeaderValue::from_str(&session.checkpoint_id).unwrap_or(HeaderValue::from_static("unknown")),
    );
    for (name, value) in extra {
        let v = HeaderValue::from_str(value)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "bad header", e.to_string()))?;
        h.insert(HeaderName::from_static(name), v);
    }
    Ok(resp)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

#[derive(Serialize)]
struct ClipEntry {
    id: String,
    word: String,
    vowels: Vec<String>,
    split: &'static str,
}

async fn clips(State(s): State<Arc<Session>>) -> Json<Vec<ClipEntry>> {
    Json(
        s.corpus
            .clips
            .iter()
            .map(|c| ClipEntry {
                id: c.id.clone(),
                word: c.word(),
                vowels: c.vowels().iter().map(|v| v.letter().to_string()).collect(),
                split: c.split.as_str(),
            })
            .collect(),
    )
}

fn rows(z: &Tensor) -> Vec<Vec<f32>> {
    z.data().chunks(z.dim(1)).map(<[f32]>::to_vec).collect()
}

fn from_rows(latent: &[Vec<f32>]) -> ApiResult<Tensor> {
    let d = latent.first().map(Vec::len).unwrap_or(0);
    if d == 0 || latent.iter().any(|r| r.len() != d) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "shape_mismatch",
            "latent must be a non-empty T × D array with equal rows",
            format!("row lengths {:?}", latent.iter().map(Vec::len).collect::<Vec<_>>()),
        ));
    }
    if latent.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ApiError::invalid("latent contains non-finite values", ""));
    }
    Ok(Tensor::new(vec![latent.len(), d], latent.concat())?)
}

#[derive(Deserialize)]
struct EncodeReq {
    clip_id: String,
    layer: usize,
}

async fn encode(State(s): State<Arc<Session>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    blocking(move || {
        let req: EncodeReq = parse(&body)?;
        let sample = sample_seed(q)?;
        let clip = s.clip_index(&req.clip_id)?;
        let z = s.latent(clip, req.layer, sample)?;
        let hint = s.importance_hint(req.layer)?;
        Ok(Json(json!({
            "clip_id": req.clip_id,
            "layer": req.layer,
            "frames": z.dim(0),
            "dims": z.dim(1),
            "mu": rows(&z),
            "importance_hint": hint,
        }))
        .into_response())
    })
    .await
}

#[derive(Deserialize)]
struct DecodeReq {
    layer: usize,
    latent: Vec<Vec<f32>>,
}

async fn decode(State(s): State<Arc<Session>>, body: Bytes) -> Response {
    blocking(move || {
        let req: DecodeReq = parse(&body)?;
        let dec = s.decoder(req.layer)?;
        let z = from_rows(&req.latent)?;
        let wave = decode_frames(dec, &z)?;
        wav_response(&s, req.layer, &wave, &[])
    })
    .await
}

#[derive(Deserialize)]
struct InterpReq {
    clip_a: String,
    clip_b: String,
    layer: usize,
    alpha: f64,
}

async fn interp(State(s): State<Arc<Session>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    blocking(move || {
        let req: InterpReq = parse(&body)?;
        let sample = sample_seed(q)?;
        let dec = s.decoder(req.layer)?;
        let za = s.latent(s.clip_index(&req.clip_a)?, req.layer, sample)?;
        let zb = s.latent(s.clip_index(&req.clip_b)?, req.layer, sample)?;
        let wave = decode_frames(dec, &interpolate(&za, &zb, req.alpha)?)?;
        let scores = importance_scores(&za, &zb)?;
        let preview: Vec<_> = rank_importance(&za, &zb)?
            .into_iter()
            .take(TOP_DIMS)
            .map(|d| json!({"dim": d, "score": scores[d]}))
            .collect();
        let preview = serde_json::to_string(&preview).map_err(sim_core::Error::from)?;
        wav_response(&s, req.layer, &wave, &[(DELTA_PREVIEW_HEADER, preview)])
    })
    .await
}

#[derive(Deserialize)]
struct Edit {
    dim: usize,
    value: f32,
}

#[derive(Deserialize)]
struct TraverseReq {
    clip_id: String,
    layer: usize,
    #[serde(default)]
    edits: Vec<Edit>,
}

async fn traverse(State(s): State<Arc<Session>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    blocking(move || {
        let req: TraverseReq = parse(&body)?;
        let sample = sample_seed(q)?;
        let dec = s.decoder(req.layer)?;
        let mut z = s.latent(s.clip_index(&req.clip_id)?, req.layer, sample)?;
        let d = z.dim(1);
        for e in &req.edits {
            if e.dim >= d {
                return Err(ApiError::invalid("edit dimension out of range", format!("dim {} of {d}", e.dim)));
            }
            if !e.value.is_finite() {
                return Err(ApiError::invalid("edit value must be finite", format!("dim {}", e.dim)));
            }
            for row in z.data_mut().chunks_mut(d) {
                row[e.dim] = e.value;
            }
        }
        let wave = decode_frames(dec, &z)?;
        wav_response(&s, req.layer, &wave, &[])
    })
    .await
}

#[derive(Deserialize)]
struct SwapReq {
    clip_a: String,
    clip_b: String,
    layer: usize,
    n: usize,
}

async fn swap(State(s): State<Arc<Session>>, RawQuery(q): RawQuery, body: Bytes) -> Response {
    blocking(move || {
        let req: SwapReq = parse(&body)?;
        let sample = sample_seed(q)?;
        let dec = s.decoder(req.layer)?;
        let za = s.latent(s.clip_index(&req.clip_a)?, req.layer, sample)?;
        let zb = s.latent(s.clip_index(&req.clip_b)?, req.layer, sample)?;
        let ranking = rank_importance(&za, &zb)?;
        let swapped = partial_swap(&za, &zb, &ranking, req.n)?;
        let wave = decode_frames(dec, &swapped)?;
        let delta = delta_from_waves(&decode_frames(dec, &za)?, &decode_frames(dec, &zb)?, &wave)?;
        let delta = delta.map_or_else(|| "null".to_string(), |d| d.to_string());
        wav_response(&s, req.layer, &wave, &[(DELTA_HEADER, delta)])
    })
    .await
}

async fn audio(State(s): State<Arc<Session>>, Path(id): Path<String>) -> Response {
    blocking(move || {
        let clip = s.clip_index(&id)?;
        let bytes = s.clip_wav(clip)?;
        let mut resp = (StatusCode::OK, bytes).into_response();
        resp.headers_mut()
            .insert(header::CONTENT_TYPE, HeaderValue::from_static("audio/wav"));
        Ok(resp)
    })
    .await
}
