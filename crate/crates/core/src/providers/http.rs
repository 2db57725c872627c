//! Remote provider speaking `POST {"task", "inputs"} -> {"outputs"}`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Embedder, Embedding, Generator, ProviderConfig, Reranker};
use crate::corpus::ImageInput;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(100),
        }
    }
}

/// Counting gate bounding the number of outstanding requests.
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            limit,
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct Request<'a> {
    task: &'a str,
    inputs: &'a [Value],
}

#[derive(Deserialize)]
struct Response {
    outputs: Vec<Value>,
}

pub struct HttpProvider {
    endpoint: String,
    agent: ureq::Agent,
    gate: InFlightGate,
    batch_size: usize,
    dimension: usize,
    retry: RetryPolicy,
    name: String,
}

impl HttpProvider {
    pub fn new(config: &ProviderConfig) -> Result<Self> {
        config.validate()?;
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::invalid("provider.endpoint", "required for the http provider"))?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .max_idle_connections(config.max_in_flight)
            .build();
        Ok(HttpProvider {
            name: format!("http({endpoint})"),
            endpoint,
            agent,
            gate: InFlightGate::new(config.max_in_flight),
            batch_size: config.batch_size,
            dimension: config.dimension,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn send_once(&self, task: &str, inputs: &[Value]) -> std::result::Result<Vec<Value>, String> {
        let _permit = self.gate.acquire();
        let response = self
            .agent
            .post(&self.endpoint)
            .send_json(Request { task, inputs })
            .map_err(|e| e.to_string())?;
        if response.status() != 200 {
            return Err(format!("status {}", response.status()));
        }
        let body: Response = response.into_json().map_err(|e| e.to_string())?;
        if body.outputs.len() != inputs.len() {
            return Err(format!(
                "expected {} outputs, got {}",
                inputs.len(),
                body.outputs.len()
            ));
        }
        Ok(body.outputs)
    }

    fn send_batch(&self, task: &str, inputs: &[Value]) -> Result<Vec<Value>> {
        let mut backoff = self.retry.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts {
            match self.send_once(task, inputs) {
                Ok(out) => return Ok(out),
                Err(message) => {
                    log::debug!("{task} attempt {attempt} failed: {message}");
                    last = message;
                    if attempt < self.retry.attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: self.retry.attempts,
            message: last,
        })
    }

    /// Sends `inputs` in batches of at most `batch_size`.
    pub fn call(&self, task: &str, inputs: Vec<Value>) -> Result<Vec<Value>> {
        let mut outputs = Vec::with_capacity(inputs.len());
        for batch in inputs.chunks(self.batch_size) {
            outputs.extend(self.send_batch(task, batch)?);
        }
        Ok(outputs)
    }

    fn to_embedding(&self, value: Value) -> Result<Embedding> {
        let values: Vec<f64> = serde_json::from_value(value)?;
        if values.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: values.len(),
            });
        }
        Embedding::normalized(values)
    }
}

impl Embedder for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let mut out = self.embed_texts(&[text])?;
        Ok(out.remove(0))
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let inputs = texts.iter().map(|t| json!(t)).collect();
        self.call("embed_text", inputs)?
            .into_iter()
            .map(|v| self.to_embedding(v))
            .collect()
    }

    fn embed_image_ref(&self, reference: &str) -> Result<Embedding> {
        let out = self.call("embed_image", vec![json!(reference)])?;
        self.to_embedding(out.into_iter().next().unwrap_or(Value::Null))
    }
}

impl Reranker for HttpProvider {
    fn rerank(&self, question: &str, chunk_text: &str) -> Result<f64> {
        let mut out = self.rerank_batch(question, &[chunk_text.to_owned()])?;
        Ok(out.remove(0))
    }

    fn rerank_batch(&self, question: &str, chunks: &[String]) -> Result<Vec<f64>> {
        let inputs = chunks
            .iter()
            .map(|c| json!({"query": question, "text": c}))
            .collect();
        self.call("rerank", inputs)?
            .into_iter()
            .map(|v| {
                let s: f64 = serde_json::from_value(v)?;
                if !s.is_finite() {
                    return Err(Error::invalid("rerank output", "must be finite"));
                }
                Ok(s.clamp(0.0, 1.0))
            })
            .collect()
    }
}

impl Generator for HttpProvider {
    fn generate(&self, prompt: &str, image: Option<&ImageInput>) -> Result<String> {
        let image = match image {
            Some(ImageInput::Vector(v)) => json!(v),
            Some(ImageInput::Reference(r)) => json!(r),
            None => Value::Null,
        };
        let out = self.call("generate", vec![json!({"prompt": prompt, "image": image})])?;
        Ok(serde_json::from_value(out.into_iter().next().unwrap_or(Value::Null))?)
    }
}
