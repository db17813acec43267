use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hitlseg::data::{generate_dataset, BiasProfile, Mask};
use hitlseg::model::{Hyper, ModelParams};
use hitlseg_server::{serve, AppState, ServerOptions};
use serde_json::{json, Value};

struct TestServer {
    addr: SocketAddr,
    state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    agent: ureq::Agent,
}

impl TestServer {
    fn start(test_per_concept: usize, ttl: Duration) -> Self {
        let mut profile = BiasProfile::default();
        profile.image_size = (32, 32);
        let (_, test) = generate_dataset(&profile, 4, test_per_concept).unwrap();
        let params = ModelParams::<f32>::init(Hyper::default(), 17).unwrap();
        let state = Arc::new(AppState::new(params, test, ServerOptions { session_ttl: ttl, static_dir: None }));
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let st = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(st, listener, async {
                    rx.await.ok();
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { addr, state, stop: Some(tx), thread: Some(thread), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(&self.url(path)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self.agent.post(&self.url(path)).send_json(&body).unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            tx.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

fn pt(x: i64, y: i64, pos: bool) -> Value {
    json!({ "x": x, "y": y, "polarity": if pos { "positive" } else { "negative" } })
}

#[test]
fn health_samples_and_images() {
    let srv = TestServer::start(2, Duration::from_secs(3600));
    assert_eq!(srv.get("/api/health"), (200, json!({ "status": "ok" })));
    let (code, list) = srv.get("/api/samples");
    assert_eq!(code, 200);
    let list = list.as_array().unwrap();
    // three concepts in the default profile, two test samples each
    assert_eq!(list.len(), 6);
    assert_eq!(list[0], json!({ "id": "test_00000", "concept": "circle", "modality": "plain", "attribute": "dark", "group": "head" }));
    assert_eq!(list[5]["group"], "tail");

    let (code, img) = srv.get("/api/sample/test_00003/image");
    assert_eq!(code, 200);
    assert_eq!((img["w"].as_u64(), img["h"].as_u64()), (Some(32), Some(32)));
    assert_eq!(B64.decode(img["gray_b64"].as_str().unwrap()).unwrap().len(), 32 * 32);
    assert_eq!(srv.get("/api/sample/nope/image"), (404, json!({ "error": "unknown_sample" })));
}

#[test]
fn empty_split_lists_nothing() {
    let srv = TestServer::start(0, Duration::from_secs(3600));
    assert_eq!(srv.get("/api/samples"), (200, json!([])));
}

#[test]
fn predict_contract() {
    let srv = TestServer::start(2, Duration::from_secs(3600));
    let (code, a) = srv.post("/api/predict", json!({ "sample_id": "test_00001" }));
    assert_eq!(code, 200);
    assert!(!a["session_id"].as_str().unwrap().is_empty());
    let u = a["u_vl"].as_f64().unwrap();
    assert!((0.0..=2.0).contains(&u));
    let packed = B64.decode(a["mask_b64"].as_str().unwrap()).unwrap();
    assert_eq!(packed.len(), (32 * 32usize).div_ceil(8));
    let mask = Mask::unpack_bits(32, 32, &packed).unwrap();
    assert_eq!(mask.count() as u64, a["fg_pixels"].as_u64().unwrap());

    let (_, b) = srv.post("/api/predict", json!({ "sample_id": "test_00001" }));
    assert_eq!(a["mask_b64"], b["mask_b64"]);
    assert_ne!(a["session_id"], b["session_id"]);

    assert_eq!(srv.post("/api/predict", json!({ "sample_id": "missing" })), (404, json!({ "error": "unknown_sample" })));
    let (code, e) = srv.post("/api/predict", json!({ "sample_id": "test_00001", "concept": "hexagon" }));
    assert_eq!((code, &e["error"]), (400, &json!("unknown_concept")));
    let (code, e) = srv.post("/api/predict", json!({ "sample_id": "test_00001", "points": [pt(40, 3, true)] }));
    assert_eq!((code, &e["error"], &e["x"], &e["y"]), (400, &json!("invalid_point"), &json!(40), &json!(3)));

    let upload = json!({ "image": { "w": 16, "h": 16, "gray_b64": B64.encode(vec![90u8; 256]) }, "concept": "ring" });
    assert_eq!(srv.post("/api/predict", upload).0, 200);
    let bad = json!({ "image": { "w": 16, "h": 16, "gray_b64": B64.encode(vec![90u8; 10]) }, "concept": "ring" });
    assert_eq!(srv.post("/api/predict", bad).1["error"], "malformed_image");
    let garbage = json!({ "image": { "w": 16, "h": 16, "gray_b64": "***" }, "concept": "ring" });
    assert_eq!(srv.post("/api/predict", garbage).0, 400);
}

#[test]
fn refine_and_reset_contract() {
    let srv = TestServer::start(2, Duration::from_secs(3600));
    let (_, first) = srv.post("/api/predict", json!({ "sample_id": "test_00004" }));
    let id = first["session_id"].as_str().unwrap().to_string();
    let refine = |pts: Vec<Value>| srv.post(&format!("/api/session/{id}/refine"), json!({ "points": pts }));

    let (code, same) = refine(vec![]);
    assert_eq!(code, 200);
    assert_eq!(same["mask_b64"], first["mask_b64"]);

    let (_, one) = refine(vec![pt(3, 4, false)]);
    let (_, two) = refine(vec![pt(20, 21, true)]);
    assert_eq!(two["point_count"], 3);

    let (_, fresh) = srv.post("/api/predict", json!({ "sample_id": "test_00004" }));
    let fid = fresh["session_id"].as_str().unwrap();
    let (_, both) = srv.post(&format!("/api/session/{fid}/refine"), json!({ "points": [pt(3, 4, false), pt(20, 21, true)] }));
    assert_eq!(both["mask_b64"], two["mask_b64"]);
    assert_eq!(both["u_vl"], two["u_vl"]);

    let (code, e) = refine(vec![pt(1, 32, true)]);
    assert_eq!((code, &e["x"], &e["y"]), (400, &json!(1), &json!(32)));
    let (_, unchanged) = refine(vec![]);
    assert_eq!(unchanged["point_count"], 3);

    let (code, r1) = srv.post(&format!("/api/session/{id}/reset"), json!({}));
    assert_eq!(code, 200);
    assert_eq!(r1["mask_b64"], first["mask_b64"]);
    assert_eq!(r1["point_count"], 1);
    let (_, r2) = srv.post(&format!("/api/session/{id}/reset"), json!({}));
    assert_eq!(r1, r2);
    let (_, replay) = refine(vec![pt(3, 4, false)]);
    assert_eq!(replay["mask_b64"], one["mask_b64"]);

    assert_eq!(srv.post("/api/session/zzz/refine", json!({ "points": [] })), (404, json!({ "error": "unknown_session" })));
    assert_eq!(srv.post("/api/session/zzz/reset", json!({})), (404, json!({ "error": "unknown_session" })));
    assert_eq!(srv.state.current_fingerprint(), srv.state.startup_fingerprint());
}

#[test]
fn expired_sessions_are_gone() {
    let srv = TestServer::start(1, Duration::ZERO);
    let (_, first) = srv.post("/api/predict", json!({ "sample_id": "test_00000" }));
    std::thread::sleep(Duration::from_millis(20));
    let id = first["session_id"].as_str().unwrap();
    assert_eq!(srv.post(&format!("/api/session/{id}/reset"), json!({})).0, 404);
    assert_eq!(srv.state.session_count(), 0);
}
