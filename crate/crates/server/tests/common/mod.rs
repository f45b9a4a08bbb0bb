#![allow(dead_code)]

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dpexplore::demo;
use dpexplore::schema::Dataset;
use dpexplore_server::api::{router, AppState};
use dpexplore_server::store::Store;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Harness {
    pub dir: TempDir,
    pub store: Store,
    pub app: Router,
}

pub fn write_dataset(dir: &Path, name: &str, data: &Dataset) -> (std::path::PathBuf, std::path::PathBuf) {
    let csv = dir.join(format!("{name}.csv"));
    let schema = dir.join(format!("{name}.schema.json"));
    data.write_csv(std::fs::File::create(&csv).unwrap()).unwrap();
    std::fs::write(&schema, serde_json::to_vec(data.schema()).unwrap()).unwrap();
    (csv, schema)
}

/// Store with the `health` (7,824 records) and `insurance` demo tables.
pub fn harness(seed: u64) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    for (name, data) in [
        ("health", demo::synthetic_health(demo::HEALTH_RECORDS, seed)),
        ("insurance", demo::synthetic_insurance(2000, seed)),
    ] {
        let (csv, schema) = write_dataset(dir.path(), name, &data);
        store.ingest(name, &csv, &schema).unwrap();
    }
    let app = router(AppState::new(store.clone(), Some(seed)));
    Harness { dir, store, app }
}

impl Harness {
    /// Fresh service over the same store, as after a restart.
    pub fn restart(&self, seed: u64) -> Router {
        router(AppState::new(self.store.clone(), Some(seed)))
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub async fn new_session(app: &Router, dataset: &str, epsilon_total: f64) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(json!({"dataset": dataset, "epsilon_total": epsilon_total}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

pub fn finest_request(schema: &dpexplore::Schema, attrs: &[&str], epsilon: f64) -> Value {
    let div = dpexplore::schema::finest_division(attrs, schema).unwrap();
    json!({"division": div, "epsilon": epsilon})
}

/// Polls a recommendation job until it leaves the pending/running states.
pub async fn wait_job(app: &Router, sid: &str, job: &str) -> Value {
    for _ in 0..2400 {
        let (status, body) = call(app, "GET", &format!("/sessions/{sid}/jobs/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        match body["status"].as_str().unwrap() {
            "pending" | "running" => tokio::time::sleep(std::time::Duration::from_millis(50)).await,
            _ => return body,
        }
    }
    panic!("job {job} did not finish");
}

/// All arrays of numbers anywhere in a JSON value.
pub fn numeric_arrays(v: &Value, out: &mut Vec<Vec<f64>>) {
    match v {
        Value::Array(items) => {
            if !items.is_empty() && items.iter().all(Value::is_number) {
                out.push(items.iter().map(|x| x.as_f64().unwrap()).collect());
            } else {
                items.iter().for_each(|x| numeric_arrays(x, out));
            }
        }
        Value::Object(map) => map.values().for_each(|x| numeric_arrays(x, out)),
        _ => {}
    }
}

/// Payload arrays that reproduce an exact count vector recorded by the curator.
pub fn leaks(payloads: &[Value], exact: &[(String, Vec<u64>)]) -> usize {
    let mut arrays = Vec::new();
    payloads.iter().for_each(|p| numeric_arrays(p, &mut arrays));
    arrays
        .iter()
        .filter(|a| {
            exact.iter().any(|(_, counts)| {
                counts.len() == a.len() && counts.iter().zip(a.iter()).all(|(&c, &x)| c as f64 == x)
            })
        })
        .count()
}

/// Cells of a response whose value equals its exact count.
pub fn unnoised_cells(response: &Value, exact: &[u64]) -> usize {
    response["values"]
        .as_array()
        .unwrap()
        .iter()
        .zip(exact)
        .filter(|(v, &c)| v.as_f64().unwrap() == c as f64)
        .count()
}

/// Star intent around the hepatitis B answer.
pub fn star_intent() -> Value {
    json!({"edges": [
        ["hepatitis_B", "family_c"], ["hepatitis_B", "children_c"],
        ["hepatitis_B", "teenager_c"], ["hepatitis_B", "elder_c"]
    ]})
}

/// Roughly one yes per ten no answers.
pub fn who_priors() -> Value {
    json!({"marginals": {"hepatitis_B": [0.0833, 0.8334, 0.0833]}})
}
