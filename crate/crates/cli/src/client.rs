//! Blocking client for the controller's HTTP/JSON API.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::Value;
use ureq::Agent;

#[derive(Debug)]
pub enum ClientError {
    /// The controller's identifier table is full; dump and clear it.
    StateFull(String),
    Api {
        status: u16,
        message: String,
    },
    Transport(String),
    Decode(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::StateFull(m) => write!(f, "controller state table is full: {m}"),
            ClientError::Api { status, message } => write!(f, "controller answered {status}: {message}"),
            ClientError::Transport(m) => write!(f, "cannot reach controller: {m}"),
            ClientError::Decode(m) => write!(f, "unexpected response: {m}"),
        }
    }
}

impl std::error::Error for ClientError {}

pub struct Client {
    base: String,
    token: Option<String>,
    agent: Agent,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Client { base: base.trim_end_matches('/').to_owned(), token, agent }
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let mut req = self.agent.get(&self.url(path));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", &a);
        }
        finish(req.call())
    }

    pub fn put<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, ClientError> {
        let mut req = self.agent.put(&self.url(path));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", &a);
        }
        finish(req.send_json(body))
    }

    pub fn post<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", &a);
        }
        finish(req.send_empty())
    }
}

fn finish<T: DeserializeOwned>(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<T, ClientError> {
    let mut resp = resp.map_err(|e| ClientError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| ClientError::Transport(e.to_string()))?;
    if status != 200 {
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        let message = body["error"].as_str().map_or_else(|| text.trim().to_owned(), str::to_owned);
        if body["state_full"] == true {
            return Err(ClientError::StateFull(body["hint"].as_str().unwrap_or(&message).to_owned()));
        }
        return Err(ClientError::Api { status, message });
    }
    serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
}
