//! Request handlers.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use softcbm_core::annotation::MAX_MASS;
use softcbm_core::model::Interventions;
use softcbm_core::SoftGroupAnnotation;

use crate::error::{Result, ServiceError};
use crate::image::render_png;
use crate::journal::{Appended, AnnotationRecord};
use crate::state::AppState;

/// Mass shown on a freshly selected attribute.
pub const DEFAULT_MASS: u32 = 50;

pub fn routes(state: AppState) -> Router {
    Router::new()
        .route("/api/models", get(list_models))
        .route("/api/stimuli", get(list_stimuli))
        .route("/api/stimuli/{id}/image", get(stimulus_image))
        .route("/api/session", post(create_session))
        .route("/api/session/{sid}/next", get(next_stimulus))
        .route("/api/annotations", post(post_annotation))
        .route("/api/intervene", post(intervene))
        .with_state(state)
}

/// Syntax errors are 400; well-formed JSON of the wrong shape is 422 naming the field.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        ServiceError::invalid(if field == "." { "body".into() } else { field }, e.into_inner().to_string())
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))?
}

async fn list_models(State(state): State<AppState>) -> Json<Value> {
    let list: Vec<Value> = state
        .models()
        .iter()
        .map(|(id, m)| {
            let cfg = m.config();
            json!({
                "id": id,
                "variant": cfg.variant,
                "k": cfg.k,
                "n_classes": cfg.n_classes,
                "alpha": cfg.alpha,
                "provenance": m.provenance,
            })
        })
        .collect();
    Json(Value::Array(list))
}

async fn list_stimuli(State(state): State<AppState>) -> Json<Value> {
    let ds = state.stimuli();
    Json(json!({
        "ids": ds.ids,
        "schema": ds.schema,
        "n_classes": ds.n_classes,
        "input_shape": ds.input_shape,
    }))
}

async fn stimulus_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let i = state.stimulus_index(&id).ok_or_else(|| ServiceError::NotFound(format!("stimulus `{id}`")))?;
    let ds = state.stimuli();
    let png = render_png(&ds.input_shape, ds.input(i))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

#[derive(Debug, Deserialize)]
struct NewSession {
    annotator_id: String,
    /// Defaults to every stimulus.
    #[serde(default)]
    stimulus_ids: Option<Vec<String>>,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>> {
    let req: NewSession = parse_body(&body)?;
    let ds = state.stimuli();
    let ids = req.stimulus_ids.unwrap_or_else(|| ds.ids.clone());
    if let Some((i, bad)) = ids.iter().enumerate().find(|(_, id)| state.stimulus_index(id).is_none()) {
        return Err(ServiceError::invalid(format!("stimulus_ids[{i}]"), format!("unknown stimulus `{bad}`")));
    }
    let schedule: Vec<(String, String)> = ids
        .iter()
        .flat_map(|id| ds.schema.groups().iter().map(move |g| (id.clone(), g.name.clone())))
        .collect();
    let total = schedule.len();
    let st = state.clone();
    let sid = blocking(move || Ok(st.recorder().sessions.create(req.annotator_id, schedule)?.session_id.clone())).await?;
    Ok(Json(json!({ "session_id": sid, "total": total })))
}

/// Next unannotated `(stimulus, group)` pair, or `{"done": true}` once the schedule is exhausted.
async fn next_stimulus(State(state): State<AppState>, Path(sid): Path<String>) -> Result<Json<Value>> {
    let rec = state.recorder();
    let s = rec.sessions.get(&sid)?;
    let total = s.schedule.len();
    let Some(idx) = s.next_index() else {
        return Ok(Json(json!({ "done": true, "session_id": sid, "total": total, "annotated": s.n_done() })));
    };
    let (stimulus, group) = &s.schedule[idx];
    let schema = &state.stimuli().schema;
    let g = schema.group_index(group).expect("schedule built from the schema");
    Ok(Json(json!({
        "done": false,
        "session_id": sid,
        "index": idx,
        "total": total,
        "stimulus_id": stimulus,
        "image_url": format!("/api/stimuli/{stimulus}/image"),
        "group_id": group,
        "attributes": schema.group(g).attributes,
        "default_mass": DEFAULT_MASS,
    })))
}

#[derive(Debug, Deserialize)]
struct AnnotationPost {
    record_id: String,
    #[serde(default)]
    session_id: Option<String>,
    annotation: SoftGroupAnnotation,
}

#[derive(Debug, Serialize)]
struct AnnotationAck {
    record_id: String,
    duplicate: bool,
    total_mass: u32,
    /// Total mass above 100; recorded as given.
    over_assigned: bool,
}

async fn post_annotation(State(state): State<AppState>, body: Bytes) -> Result<Json<AnnotationAck>> {
    let req: AnnotationPost = parse_body(&body)?;
    uuid::Uuid::parse_str(&req.record_id).map_err(|e| ServiceError::invalid("record_id", e.to_string()))?;
    req.annotation
        .validate(Some(&state.stimuli().schema))
        .map_err(|(field, msg)| ServiceError::invalid(format!("annotation.{field}"), msg))?;
    if state.stimulus_index(&req.annotation.stimulus_id).is_none() {
        return Err(ServiceError::invalid("annotation.stimulus_id", format!("unknown stimulus `{}`", req.annotation.stimulus_id)));
    }
    let total_mass = req.annotation.total_mass();
    let received_at_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let record = AnnotationRecord {
        record_id: req.record_id.clone(),
        session_id: req.session_id,
        annotation: req.annotation,
        received_at_ms,
    };
    let st = state.clone();
    let appended = blocking(move || {
        let mut rec = st.recorder();
        if let Some(sid) = record.session_id.as_deref() {
            if rec.sessions.get(sid).is_err() {
                return Err(ServiceError::invalid("session_id", format!("unknown session `{sid}`")));
            }
        }
        let out = rec.journal.append(&record)?;
        if out == Appended::Written {
            rec.sessions.apply(&record);
        }
        Ok(out)
    })
    .await?;
    Ok(Json(AnnotationAck {
        record_id: req.record_id,
        duplicate: appended == Appended::Duplicate,
        total_mass,
        over_assigned: total_mass > MAX_MASS,
    }))
}

#[derive(Debug, Deserialize)]
pub struct InterveneRequest {
    pub model_id: String,
    pub sample_id: String,
    /// When set, mass keys are attribute names of this group and the group's
    /// unlisted attributes count as mass 0. Otherwise keys are `group::attribute`.
    #[serde(default)]
    pub group_id: Option<String>,
    #[serde(default)]
    pub masses: BTreeMap<String, u32>,
    #[serde(default)]
    pub not_visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub concept_probs: Vec<f64>,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneResponse {
    pub model_id: String,
    pub sample_id: String,
    /// Concept name → value actually substituted.
    pub interventions: BTreeMap<String, f64>,
    pub before: Prediction,
    pub after: Prediction,
    pub over_assigned: bool,
}

/// Concept values for a request: mass / 100 per resolved concept. A group whose
/// masses are all zero, or a not-visible request, intervenes on nothing.
pub fn resolve_masses(schema: &softcbm_core::ConceptGroupSchema, req: &InterveneRequest) -> Result<(Interventions, bool)> {
    let mut ivs = Interventions::new();
    let mut group_totals: BTreeMap<usize, u32> = BTreeMap::new();
    let group = match &req.group_id {
        Some(name) => Some(
            schema
                .group_index(name)
                .ok_or_else(|| ServiceError::invalid("group_id", format!("unknown concept group `{name}`")))?,
        ),
        None => None,
    };
    for (key, &m) in &req.masses {
        if m > MAX_MASS {
            return Err(ServiceError::invalid(format!("masses.{key}"), format!("mass {m} exceeds {MAX_MASS}")));
        }
        let idx = match group {
            Some(g) => schema.concept_index(&schema.group(g).name, key),
            None => schema.index_of(key),
        }
        .ok_or_else(|| ServiceError::invalid(format!("masses.{key}"), format!("unknown concept `{key}`")))?;
        *group_totals.entry(schema.group_of(idx)).or_default() += m;
        ivs.insert(idx, f64::from(m) / f64::from(MAX_MASS));
    }
    if let Some(g) = group {
        group_totals.entry(g).or_default();
        for j in schema.group_range(g) {
            ivs.entry(j).or_insert(0.0);
        }
    }
    let over = group_totals.values().any(|&t| t > MAX_MASS);
    ivs.retain(|j, _| group_totals[&schema.group_of(*j)] > 0);
    if req.not_visible {
        ivs.clear();
    }
    Ok((ivs, over))
}

async fn intervene(State(state): State<AppState>, body: Bytes) -> Result<Json<InterveneResponse>> {
    let req: InterveneRequest = parse_body(&body)?;
    state.model(&req.model_id)?;
    let i = state
        .stimulus_index(&req.sample_id)
        .ok_or_else(|| ServiceError::NotFound(format!("sample `{}`", req.sample_id)))?;
    let schema = &state.stimuli().schema;
    let (ivs, over_assigned) = resolve_masses(schema, &req)?;
    let interventions = ivs.iter().map(|(&j, &v)| (schema.concept_name(j), v)).collect();
    let st = state.clone();
    let resp = blocking(move || {
        let model = st.model(&req.model_id)?;
        let x = st.stimuli().batch_inputs(&[i]);
        let prediction = |f: softcbm_core::model::Forward| Prediction {
            class_probs: f.class_probs(0),
            concept_probs: f.concept_probs.row(0).to_vec(),
            predicted_class: f.predicted_class(0),
        };
        let before = prediction(model.forward(&x, &[])?);
        let after = prediction(model.forward(&x, &[ivs])?);
        Ok(InterveneResponse {
            model_id: req.model_id,
            sample_id: req.sample_id,
            interventions,
            before,
            after,
            over_assigned,
        })
    })
    .await?;
    Ok(Json(resp))
}
