//! Blocking HTTP clients for the external services: chat-completion
//! paraphraser and tagger, the feature service and the token scorer.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::metrics::{FeatureProvider, FeatureSource, SparseFeatureVector};
use crate::paraphrase::Paraphraser;
use crate::redaction::Tagger;
use crate::retry::RetryPolicy;
use crate::scoring::{TokenScore, TokenScorer};

pub const DEFAULT_TAGGER_PROMPT: &str = "\
List every factual anchor in the user's document: named entities, numbers and dates. \
Reply with a JSON array only, each element {\"value\": <exact substring>, \"type\": \"entity\" | \"number\" | \"date\"}. \
Copy values byte-for-byte from the document.";

/// Where a service lives and how to authenticate. The key is resolved by
/// the caller (normally from an environment variable) and never logged.
#[derive(Clone)]
pub struct HttpEndpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
}

impl std::fmt::Debug for HttpEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpEndpoint")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: None,
            timeout: Duration::from_secs(120),
        }
    }

    fn join(&self, path: &str) -> String {
        format!("{}/{}", self.url.trim_end_matches('/'), path.trim_start_matches('/'))
    }
}

struct Client {
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl Client {
    fn new(timeout: Duration, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, retry }
    }

    fn post<T: DeserializeOwned>(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<T> {
        self.retry.run(|| {
            let mut req = self.agent.post(url);
            if let Some(k) = api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let mut resp = req
                .send_json(body)
                .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| Error::Transport(format!("POST {url}: reading body: {e}")))?;
            match status {
                200..=299 => Ok(serde_json::from_str(&text)?),
                429 | 500..=599 => Err(Error::Transport(format!("POST {url}: HTTP {status}"))),
                _ => Err(Error::Remote {
                    status,
                    message: text.chars().take(500).collect(),
                }),
            }
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Any OpenAI-style `/chat/completions` endpoint. `endpoint.url` is the
/// full completions URL.
pub struct ChatCompletion {
    endpoint: HttpEndpoint,
    client: Client,
    pub temperature: Option<f64>,
    calls: AtomicUsize,
}

impl ChatCompletion {
    pub fn new(endpoint: HttpEndpoint, retry: RetryPolicy) -> Self {
        Self {
            client: Client::new(endpoint.timeout, retry),
            endpoint,
            temperature: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Completions requested; retries of one request count once.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn chat(&self, system: &str, user: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut body = json!({
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        if let Some(m) = &self.endpoint.model {
            body["model"] = json!(m);
        }
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        let resp: ChatResponse = self
            .client
            .post(&self.endpoint.url, self.endpoint.api_key.as_deref(), &body)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Remote {
                status: 200,
                message: "completion has no choices".into(),
            })
    }
}

/// Sends the prompt as the system message and the rendered markup as the
/// user message.
impl Paraphraser for ChatCompletion {
    fn complete(&self, prompt: &str, source: &Document) -> Result<String> {
        self.chat(prompt, &source.render())
    }
}

/// A chat endpoint used as an anchor tagger.
pub struct ChatTagger {
    pub chat: ChatCompletion,
    pub prompt: String,
}

impl ChatTagger {
    pub fn new(chat: ChatCompletion) -> Self {
        Self {
            chat,
            prompt: DEFAULT_TAGGER_PROMPT.to_owned(),
        }
    }
}

impl Tagger for ChatTagger {
    fn tag(&self, doc: &Document) -> Result<String> {
        self.chat.chat(&self.prompt, &doc.render())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeaturesBody {
    Bare(Vec<SparseFeatureVector>),
    Wrapped { features: Vec<SparseFeatureVector> },
}

/// Client for `POST /features`. Texts are sent in batches, with at most
/// `max_in_flight` requests outstanding; results come back in input order.
pub struct ServiceFeatureProvider {
    endpoint: HttpEndpoint,
    client: Client,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_tokens: Option<usize>,
    requests: AtomicUsize,
}

impl ServiceFeatureProvider {
    pub fn new(endpoint: HttpEndpoint, retry: RetryPolicy) -> Self {
        Self {
            client: Client::new(endpoint.timeout, retry),
            endpoint,
            batch_size: 16,
            max_in_flight: 4,
            max_tokens: None,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn fetch_batch(&self, offset: usize, texts: &[&str]) -> Result<Vec<SparseFeatureVector>> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut body = json!({ "texts": texts });
        if let Some(m) = self.max_tokens {
            body["max_tokens"] = json!(m);
        }
        let url = self.endpoint.join("features");
        let vectors = match self.client.post(&url, self.endpoint.api_key.as_deref(), &body) {
            Ok(FeaturesBody::Bare(v) | FeaturesBody::Wrapped { features: v }) => v,
            Err(Error::Json(e)) => {
                return Err(Error::Provider {
                    index: offset,
                    message: format!("malformed /features response: {e}"),
                })
            }
            Err(e) => return Err(e),
        };
        if vectors.len() != texts.len() {
            return Err(Error::Provider {
                index: offset,
                message: format!("asked for {} vectors, got {}", texts.len(), vectors.len()),
            });
        }
        Ok(vectors)
    }
}

impl FeatureProvider for ServiceFeatureProvider {
    fn fetch(&self, texts: &[&str]) -> Result<Vec<SparseFeatureVector>> {
        let chunks: Vec<&[&str]> = texts.chunks(self.batch_size.max(1)).collect();
        let results: Mutex<Vec<Option<Result<Vec<SparseFeatureVector>>>>> =
            Mutex::new((0..chunks.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let step = self.batch_size.max(1);
        std::thread::scope(|s| {
            for _ in 0..self.max_in_flight.clamp(1, chunks.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(chunk) = chunks.get(i) else { break };
                    let r = self.fetch_batch(i * step, chunk);
                    results.lock().expect("result slots poisoned")[i] = Some(r);
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results.into_inner().expect("result slots poisoned") {
            out.extend(r.expect("every chunk is fetched")?);
        }
        Ok(out)
    }

    fn source(&self) -> FeatureSource {
        FeatureSource::ServiceBacked
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    prefix: Option<&'a str>,
    want_moments: bool,
}

#[derive(Deserialize)]
struct ScoreResponse {
    tokens: Vec<TokenScore>,
}

/// Client for `POST /score`.
pub struct ServiceTokenScorer {
    endpoint: HttpEndpoint,
    client: Client,
    requests: AtomicUsize,
}

impl ServiceTokenScorer {
    pub fn new(endpoint: HttpEndpoint, retry: RetryPolicy) -> Self {
        Self {
            client: Client::new(endpoint.timeout, retry),
            endpoint,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }
}

impl TokenScorer for ServiceTokenScorer {
    fn score(&self, text: &str, prefix: Option<&str>, want_moments: bool) -> Result<Vec<TokenScore>> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let body = serde_json::to_value(ScoreRequest {
            text,
            prefix,
            want_moments,
        })?;
        let resp: ScoreResponse =
            self.client
                .post(&self.endpoint.join("score"), self.endpoint.api_key.as_deref(), &body)?;
        if want_moments && resp.tokens.iter().any(|t| t.mu.is_none() || t.sigma.is_none()) {
            return Err(Error::Remote {
                status: 200,
                message: "moments requested but missing from /score response".into(),
            });
        }
        Ok(resp.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves `handler(path, body) -> (status, body)` on a local port, one
    /// request per connection, until the test process exits.
    fn serve<F>(handler: F) -> String
    where
        F: Fn(&str, &Value) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handler = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let path = line.split_whitespace().nth(1).unwrap_or("").to_owned();
                    let mut len = 0;
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        if h.trim().is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                len = v.trim().parse().unwrap();
                            }
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                    let (status, out) = handler(&path, &body);
                    write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                        out.len()
                    )
                    .unwrap();
                });
            }
        });
        format!("http://{addr}")
    }

    fn endpoint(url: String) -> HttpEndpoint {
        HttpEndpoint {
            timeout: Duration::from_secs(5),
            ..HttpEndpoint::new(url)
        }
    }

    #[test]
    fn features_come_back_in_input_order() {
        // Each text is "t<i>"; the service encodes i as the single active index.
        let url = serve(|path, body| {
            assert_eq!(path, "/features");
            let texts = body["texts"].as_array().unwrap();
            let idx: Vec<usize> = texts
                .iter()
                .map(|t| t.as_str().unwrap()[1..].parse().unwrap())
                .collect();
            std::thread::sleep(Duration::from_millis(10 * (idx[0] % 3) as u64));
            let v: Vec<Value> = idx
                .iter()
                .map(|i| json!({"dim": 64, "indices": [i], "values": [1.0]}))
                .collect();
            (200, json!({ "features": v }).to_string())
        });
        let mut p = ServiceFeatureProvider::new(endpoint(url), RetryPolicy::immediate(1));
        p.batch_size = 3;
        let texts: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let out = p.fetch(&refs).unwrap();
        assert_eq!(p.requests(), 7);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(v.indices(), &[i]);
        }
    }

    #[test]
    fn bare_array_and_bad_vectors() {
        let url = serve(|_, body| {
            let n = body["texts"].as_array().unwrap().len();
            if n == 1 {
                (200, r#"[{"dim": 4, "indices": [2], "values": [0.5]}]"#.into())
            } else {
                (200, r#"[{"dim": 4, "indices": [2, 1], "values": [0.5, 1.0]}, {"dim": 4, "indices": [], "values": []}]"#.into())
            }
        });
        let p = ServiceFeatureProvider::new(endpoint(url), RetryPolicy::immediate(1));
        assert_eq!(p.fetch(&["a"]).unwrap()[0].nnz(), 1);
        assert!(matches!(p.fetch(&["a", "b"]), Err(Error::Provider { index: 0, .. })));
    }

    #[test]
    fn status_mapping_and_retry() {
        let hits = Arc::new(AtomicUsize::new(0));
        let h = Arc::clone(&hits);
        let url = serve(move |path, _| match path {
            "/flaky/score" => {
                if h.fetch_add(1, Ordering::SeqCst) == 0 {
                    (503, "{}".into())
                } else {
                    (200, r#"{"tokens": [{"logprob": -1.5}]}"#.into())
                }
            }
            _ => (400, "bad request".into()),
        });
        let s = ServiceTokenScorer::new(endpoint(format!("{url}/flaky")), RetryPolicy::immediate(3));
        let t = s.score("x", None, false).unwrap();
        assert_eq!(t, vec![TokenScore::plain(-1.5)]);
        assert_eq!(hits.load(Ordering::SeqCst), 2);

        let bad = ServiceTokenScorer::new(endpoint(format!("{url}/nope")), RetryPolicy::immediate(3));
        assert!(matches!(bad.score("x", None, false), Err(Error::Remote { status: 400, .. })));
    }

    #[test]
    fn chat_request_shape() {
        let url = serve(|_, body| {
            let sys = body["messages"][0]["content"].as_str().unwrap();
            let user = body["messages"][1]["content"].as_str().unwrap();
            assert_eq!(body["model"], "m");
            let reply = format!("{sys}|{user}");
            (200, json!({"choices": [{"message": {"role": "assistant", "content": reply}}]}).to_string())
        });
        let chat = ChatCompletion::new(
            HttpEndpoint {
                model: Some("m".into()),
                api_key: Some("k".into()),
                ..endpoint(url)
            },
            RetryPolicy::immediate(1),
        );
        let doc = crate::corpus::parse_sectioned_document("d", "plain").unwrap();
        assert_eq!(Paraphraser::complete(&chat, "P", &doc).unwrap(), "P|plain");
        assert_eq!(chat.calls(), 1);
        assert!(!format!("{:?}", HttpEndpoint { api_key: Some("secret".into()), ..HttpEndpoint::new("u") }).contains("secret"));
    }

    #[test]
    fn connection_refused_is_transport() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", l.local_addr().unwrap());
        drop(l);
        let s = ServiceTokenScorer::new(endpoint(url), RetryPolicy::immediate(1));
        assert!(matches!(s.score("x", None, false), Err(Error::Transport(_))));
    }
}
