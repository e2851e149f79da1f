use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatRequest};
use crate::jsonl::{write_jsonl, JsonlError};
use crate::seed::sha256_hex;

/// One model call. Prompt and response text are kept only when the transport
/// allows verbatim logging (the mock); otherwise only their hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub tag: String,
    pub prompt_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
}

impl TranscriptRecord {
    pub(crate) fn new(
        req: &ChatRequest,
        outcome: &Result<String, BackendError>,
        latency: Duration,
        attempts: u32,
        verbatim: bool,
    ) -> Self {
        let (response, error) = match outcome {
            Ok(text) => (Some(text.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            tag: req.tag.clone(),
            prompt_hash: req.prompt_hash(),
            prompt: verbatim.then(|| req.last_user().to_string()),
            response_hash: response.as_deref().map(sha256_hex),
            response: response.filter(|_| verbatim),
            error,
            // Mock latency is scheduling noise; zero it so transcripts replay.
            latency_ms: if verbatim { 0 } else { latency.as_millis() as u64 },
            attempts,
        }
    }
}

/// Thread-safe in-memory call log, written sorted so concurrent runs produce
/// identical files.
#[derive(Debug, Default)]
pub struct Transcript {
    records: Mutex<Vec<TranscriptRecord>>,
}

impl Transcript {
    pub fn record(&self, r: TranscriptRecord) {
        self.records.lock().unwrap().push(r);
    }

    /// Records in call order.
    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sorted(&self) -> Vec<TranscriptRecord> {
        let mut recs = self.records();
        recs.sort_by(|a, b| {
            (&a.tag, &a.prompt_hash, &a.response_hash, &a.error)
                .cmp(&(&b.tag, &b.prompt_hash, &b.response_hash, &b.error))
        });
        recs
    }

    /// Hash of the order-independent record set.
    pub fn content_hash(&self) -> String {
        let bytes = crate::jsonl::to_jsonl(&self.sorted()).expect("records serialize");
        sha256_hex(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), JsonlError> {
        write_jsonl(path, &self.sorted())
    }
}
