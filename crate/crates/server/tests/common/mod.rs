#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use adventure_server::accounts::AccountStore;
use adventure_server::api::{open_app, router, AppState};
use adventure_server::config::{LlmConfig, ServiceConfig};

pub const ROSTER: &str = "username,password,mode,locale,role
ada,pw-ada,adaptive,en,
gus,pw-gus,genai,th,
hal,pw-hal,hybrid,en,
root,pw-root,,,admin
";

pub fn config(dir: &Path, llm: LlmConfig) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        llm,
        ..ServiceConfig::default()
    }
}

pub fn seed_accounts(cfg: &ServiceConfig) {
    let mut store = AccountStore::load(&cfg.paths().accounts).unwrap();
    if store.accounts().is_empty() {
        store.import_csv(ROSTER.as_bytes()).unwrap();
        store.save().unwrap();
    }
}

pub struct TestApp {
    pub state: Arc<AppState>,
    pub router: Router,
}

impl TestApp {
    pub fn open(cfg: &ServiceConfig) -> Self {
        seed_accounts(cfg);
        let state = open_app(cfg).unwrap();
        Self {
            router: router(state.clone()),
            state,
        }
    }

    pub async fn call(
        &self,
        method: &str,
        uri: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let mut req = Request::builder()
            .method(Method::from_bytes(method.as_bytes()).unwrap())
            .uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, value)
    }

    pub async fn login(&self, user: &str) -> String {
        let (status, body) = self
            .call(
                "POST",
                "/api/login",
                None,
                Some(json!({ "username": user, "password": format!("pw-{user}") })),
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["token"].as_str().unwrap().to_string()
    }

    pub async fn phase(&self, token: &str) -> String {
        let (status, body) = self
            .call("GET", "/api/session/current", Some(token), None)
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["session"]["phase"].as_str().unwrap().to_string()
    }

    /// Starts the first concept and fails the whole pretest.
    pub async fn start_and_fail_pretest(&self, token: &str) -> Value {
        let (status, body) = self
            .call(
                "POST",
                "/api/concepts/py_variables/start",
                Some(token),
                None,
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let (status, body) = self
            .call(
                "POST",
                "/api/pretest/submit",
                Some(token),
                Some(json!({ "codes": ["print(0)", "print(0)", "print(0)"] })),
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body
    }
}

/// Reads input and prints, so it has the required constructs but the wrong output.
pub const WRONG: &str = "x = input()\nprint('nope')\n";
