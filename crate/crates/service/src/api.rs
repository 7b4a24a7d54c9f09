//! Request handlers and wire types.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::Json;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use morphscope_core::data::{DatasetName, Image, Split, IMAGE_SIDE};
use morphscope_core::latent::LatentVector;
use morphscope_core::neighborhood::{Exploration, NeighborhoodSpec};
use morphscope_core::render::{encode_png, MorphRecord, NeighborhoodRecord};
use morphscope_core::workbench::Workbench;

use crate::error::ServiceError;
use crate::store::{now_ms, HistoryEntry, PoiRecord, Session};
use crate::AppState;

pub const DEFAULT_MISPREDICTION_LIMIT: usize = 20;

fn png_base64(image: &Image) -> String {
    BASE64.encode(encode_png(image))
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    body.map(|Json(v)| v).map_err(|e| ServiceError::Argument(e.body_text()))
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}

pub async fn healthz() -> Json<Health> {
    Json(Health { status: "ok".into() })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: DatasetName,
    pub latent_dim: usize,
    pub class_names: Vec<String>,
    pub checkpoints_available: bool,
}

pub async fn list_datasets(State(state): State<AppState>) -> Json<Vec<DatasetInfo>> {
    Json(
        DatasetName::ALL
            .iter()
            .map(|&name| DatasetInfo {
                name,
                latent_dim: name.latent_dim(),
                class_names: name.class_names().iter().map(|s| s.to_string()).collect(),
                checkpoints_available: state.checkpoints_present(name),
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub dataset: String,
}

pub async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Session>), ServiceError> {
    let request = json_body(body)?;
    let name: DatasetName = request
        .dataset
        .parse()
        .map_err(|_| ServiceError::Dependency(format!("no checkpoints for unknown dataset {:?}", request.dataset)))?;
    let bench = state.workbench(name).await?;
    let session = Session {
        id: crate::store::SessionStore::new_id(),
        dataset: name,
        vae_checkpoint: bench.vae_ref.clone(),
        classifier_checkpoint: bench.classifier_ref.clone(),
        created_ms: now_ms(),
        poi: None,
        history: Vec::new(),
    };
    state.store().save(&session)?;
    log::info!("created session {} for {name}", session.id);
    Ok((StatusCode::CREATED, Json(session)))
}

pub async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(state.store().load(&id)?))
}

/// Loads the session's workbench and checks its checkpoints have not been replaced.
async fn session_bench(state: &AppState, session: &Session) -> Result<Arc<Workbench>, ServiceError> {
    let bench = state.workbench(session.dataset).await?;
    if bench.vae_ref.sha256 != session.vae_checkpoint.sha256
        || bench.classifier_ref.sha256 != session.classifier_checkpoint.sha256
    {
        return Err(ServiceError::Dependency(format!(
            "checkpoints for {} changed since session {} was created",
            session.dataset, session.id
        )));
    }
    Ok(bench)
}

#[derive(Debug, Deserialize)]
pub struct LimitQuery {
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MispredictionItem {
    pub dataset_index: usize,
    pub true_label: usize,
    pub predicted_label: usize,
    pub true_name: String,
    pub predicted_name: String,
    pub thumbnail_png: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MispredictionList {
    pub dataset: DatasetName,
    pub split: Split,
    pub items: Vec<MispredictionItem>,
}

pub async fn list_mispredictions(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<LimitQuery>, QueryRejection>,
) -> Result<Json<MispredictionList>, ServiceError> {
    let Query(query) = query.map_err(|e| ServiceError::Argument(e.body_text()))?;
    let limit = query.limit.unwrap_or(DEFAULT_MISPREDICTION_LIMIT);
    let session = state.store().load(&id)?;
    let bench = session_bench(&state, &session).await?;
    let list = blocking(move || {
        let names = bench.dataset.class_names();
        let items = bench
            .mispredictions(limit)
            .into_iter()
            .map(|m| MispredictionItem {
                dataset_index: m.dataset_index,
                true_label: m.true_label,
                predicted_label: m.predicted_label,
                true_name: names[m.true_label].to_string(),
                predicted_name: names[m.predicted_label].to_string(),
                thumbnail_png: m.image.as_ref().map(png_base64).unwrap_or_default(),
            })
            .collect();
        Ok(MispredictionList {
            dataset: bench.dataset,
            split: bench.poi_data.split(),
            items,
        })
    })
    .await?;
    Ok(Json(list))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SetPoi {
    pub dataset_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoiResponse {
    pub dataset_index: usize,
    pub split: Split,
    pub true_label: usize,
    pub predicted_label: usize,
    pub reconstruction_label: usize,
    pub true_name: String,
    pub predicted_name: String,
    pub reconstruction_name: String,
    pub mispredicted: bool,
    pub latent: LatentVector,
    pub image_png: String,
    pub reconstruction_png: String,
}

pub async fn set_poi(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<SetPoi>, JsonRejection>,
) -> Result<Json<PoiResponse>, ServiceError> {
    let request = json_body(body)?;
    let lock = state.session_lock(&id);
    let _guard = lock.lock().await;
    let mut session = state.store().load(&id)?;
    let bench = session_bench(&state, &session).await?;
    let index = request.dataset_index;
    let response = blocking(move || {
        let poi = bench.point_of_interest(index)?;
        let reconstruction = bench.vae.vae.decode(&poi.latent)?;
        let names = bench.dataset.class_names();
        Ok(PoiResponse {
            dataset_index: index,
            split: bench.poi_data.split(),
            true_label: poi.true_label,
            predicted_label: poi.predicted_label,
            reconstruction_label: poi.reconstruction_label,
            true_name: names[poi.true_label].to_string(),
            predicted_name: names[poi.predicted_label].to_string(),
            reconstruction_name: names[poi.reconstruction_label].to_string(),
            mispredicted: poi.is_mispredicted(),
            latent: poi.latent,
            image_png: png_base64(&poi.image),
            reconstruction_png: png_base64(&reconstruction),
        })
    })
    .await?;
    session.poi = Some(PoiRecord {
        dataset_index: response.dataset_index,
        split: response.split,
        true_label: response.true_label,
        predicted_label: response.predicted_label,
        reconstruction_label: response.reconstruction_label,
        mispredicted: response.mispredicted,
        latent: response.latent.clone(),
    });
    state.store().save(&session)?;
    Ok(Json(response))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: usize,
    pub png: String,
}

/// Result of an explain request. Contains nothing time- or order-dependent,
/// so identical requests against identical checkpoints serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub dataset: DatasetName,
    pub poi_index: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub neighborhood: NeighborhoodRecord,
    pub cells: Vec<Cell>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub morph: Option<MorphRecord>,
}

pub async fn explain(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<NeighborhoodSpec>, JsonRejection>,
) -> Result<Json<ExplainResponse>, ServiceError> {
    let spec = json_body(body)?;
    let lock = state.session_lock(&id);
    let _guard = lock.lock().await;
    let mut session = state.store().load(&id)?;
    let poi_index = session
        .poi
        .as_ref()
        .map(|p| p.dataset_index)
        .ok_or_else(|| ServiceError::State(format!("session {id} has no point-of-interest; PUT /sessions/{id}/poi first")))?;
    spec.validate(session.dataset.latent_dim())?;
    let bench = session_bench(&state, &session).await?;
    let issued = spec.clone();
    let response = blocking(move || {
        let poi = bench.point_of_interest(poi_index)?;
        let exploration = bench.explain(&poi, &spec)?;
        let n = exploration.neighborhood();
        Ok(ExplainResponse {
            dataset: bench.dataset,
            poi_index,
            image_width: IMAGE_SIDE,
            image_height: IMAGE_SIDE,
            neighborhood: NeighborhoodRecord::new(n, bench.dataset.class_names()),
            cells: n
                .images
                .iter()
                .zip(&n.labels)
                .map(|(img, &label)| Cell {
                    label,
                    png: png_base64(img),
                })
                .collect(),
            morph: match &exploration {
                Exploration::Morph(m) => Some(MorphRecord::new(m)),
                Exploration::Neighborhood(_) => None,
            },
        })
    })
    .await?;
    session.history.push(HistoryEntry {
        seq: session.history.len(),
        timestamp_ms: now_ms(),
        poi_index,
        spec: issued,
    });
    state.store().save(&session)?;
    Ok(Json(response))
}
