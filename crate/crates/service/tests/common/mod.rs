#![allow(dead_code)]

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use softcbm_core::datagen::{default_toy_schema, gen_categorical_toy, gen_umnist, MnistStore, ToyConfig, UmnistConfig};
use softcbm_core::{BottleneckConfig, ConceptDataset, ConceptModel, SeedStream, Variant};
use softcbm_service::{router, AppState};
use softcbm_tensor::Tensor;

/// Random 8-bit images, so rendered pixels round-trip exactly.
pub fn fake_mnist(per_digit: usize) -> MnistStore {
    let mut rng = SeedStream::new(9);
    let n = 2 * per_digit;
    let data = (0..n * 784).map(|_| rng.below(256) as f64 / 255.0).collect();
    MnistStore::new(Tensor::new(vec![n, 28, 28], data).unwrap(), (0..n).map(|i| (i % 2) as u8).collect()).unwrap()
}

pub fn umnist_parts() -> (ConceptDataset, Vec<(String, ConceptModel)>) {
    let ds = gen_umnist(&fake_mnist(5), &UmnistConfig { n: 6, p: 2, delta: 0.0, seed: 1, mask_fraction: 0.0 }).unwrap();
    let mut cbm = ConceptModel::new(BottleneckConfig::umnist(Variant::Cbm, 2), 1).unwrap();
    cbm.provenance.insert("delta".into(), 0.2.into());
    let cem = ConceptModel::new(BottleneckConfig::umnist(Variant::Cem, 2), 2).unwrap();
    (ds, vec![("cbm".into(), cbm), ("cem".into(), cem)])
}

pub fn toy_parts() -> (ConceptDataset, Vec<(String, ConceptModel)>) {
    let schema = default_toy_schema();
    let toy = gen_categorical_toy(&schema, &ToyConfig { n: 20, ..ToyConfig::default() }).unwrap();
    let cbm = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, schema.k(), schema.k(), 6), 3).unwrap();
    let cem = ConceptModel::new(BottleneckConfig::dense(Variant::Cem, schema.k(), schema.k(), 6), 4).unwrap();
    (toy.data, vec![("cbm".into(), cbm), ("cem".into(), cem)])
}

pub fn app(parts: (ConceptDataset, Vec<(String, ConceptModel)>), log: &Path) -> Router {
    let (ds, models) = parts;
    router(AppState::from_parts(models, ds, log).unwrap(), None).unwrap()
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn send_json(app: &Router, method: &str, uri: &str, body: Option<&Value>) -> (StatusCode, Value) {
    let text = body.map(|b| b.to_string());
    let (status, bytes) = send(app, method, uri, text.as_deref()).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub fn log_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect()
}
