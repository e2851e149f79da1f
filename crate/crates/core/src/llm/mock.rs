//! Scripted chat backend for offline runs.
//!
//! A script is a JSON Lines file. Each non-blank line (lines starting with
//! `#` are comments) is one of:
//!
//! * `{"seed": 7}`: seed mixed into every generated reply.
//! * `{"reply": "...", "tag": "cst", "match": "substring"}`: a queue entry,
//!   consumed once by the first request whose tag and prompt match.
//! * `{"error": "transient" | "permanent", ...}`: a queue entry that fails.
//! * `{"rule": "...", "tag": ..., "match": ...}`: a standing rule, used when
//!   no queue entry matches. Rules are `splitter`, `fixed` (reply text in `template`),
//!   `template` (with `template`, placeholders `{question}`, `{context}`,
//!   `{hash}`) and `choice` (with `replies`, picked by prompt hash).
//!
//! Queue entries are tried before rules, both in file order. A request that
//! matches nothing fails with [`TransportError::Exhausted`].
//!
//! The splitter rule answers a CST prompt the way an ideal model would under
//! the sentence-atomic assumption: the context's sentences are split at
//! ⌈n/2⌉; a single sentence comes back with an empty `Context 2`.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ChatRequest, Transport, TransportError};
use crate::corpus::sentence_ranges;

#[derive(Debug, Error)]
#[error("mock script line {line}: {message}")]
pub struct MockScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    seed: Option<u64>,
    reply: Option<String>,
    error: Option<String>,
    rule: Option<String>,
    tag: Option<String>,
    #[serde(rename = "match")]
    needle: Option<String>,
    template: Option<String>,
    replies: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
enum Action {
    Reply(String),
    Fail(TransportError),
    Splitter,
    Template(String),
    Choice(Vec<String>),
}

#[derive(Debug, Clone)]
struct Entry {
    tag: Option<String>,
    needle: Option<String>,
    action: Action,
}

impl Entry {
    fn matches(&self, req: &ChatRequest) -> bool {
        self.tag.as_ref().map_or(true, |t| *t == req.tag)
            && self
                .needle
                .as_ref()
                .map_or(true, |n| req.last_user().contains(n.as_str()))
    }
}

/// Counters observed by the mock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockStats {
    pub calls: usize,
    pub peak_in_flight: usize,
}

pub struct MockBackend {
    seed: u64,
    queue: Mutex<Vec<Option<Entry>>>,
    rules: Vec<Entry>,
    delay: Option<Duration>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    fn from_entries(seed: u64, queue: Vec<Entry>, rules: Vec<Entry>) -> Self {
        Self {
            seed,
            queue: Mutex::new(queue.into_iter().map(Some).collect()),
            rules,
            delay: None,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    /// Canned replies handed out in order.
    pub fn queue<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = replies
            .into_iter()
            .map(|r| Entry {
                tag: None,
                needle: None,
                action: Action::Reply(r.into()),
            })
            .collect();
        Self::from_entries(0, entries, Vec::new())
    }

    /// Answers every request with the balanced sentence split.
    pub fn splitter(seed: u64) -> Self {
        Self::from_entries(
            seed,
            Vec::new(),
            vec![Entry {
                tag: None,
                needle: None,
                action: Action::Splitter,
            }],
        )
    }

    /// Hold each request for `delay` so concurrency becomes observable.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn parse_script(text: &str) -> Result<Self, MockScriptError> {
        let mut seed = 0;
        let mut queue = Vec::new();
        let mut rules = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| MockScriptError { line, message };
            let sl: ScriptLine = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
            let kinds = [sl.reply.is_some(), sl.error.is_some(), sl.rule.is_some()]
                .iter()
                .filter(|b| **b)
                .count();
            if kinds == 0 {
                if let Some(s) = sl.seed {
                    seed = s;
                    continue;
                }
                return Err(err("expected one of `seed`, `reply`, `error`, `rule`".into()));
            }
            if kinds > 1 {
                return Err(err("`reply`, `error` and `rule` are exclusive".into()));
            }
            let (tag, needle) = (sl.tag.clone(), sl.needle.clone());
            if let Some(reply) = sl.reply {
                queue.push(Entry {
                    tag,
                    needle,
                    action: Action::Reply(reply),
                });
            } else if let Some(kind) = sl.error {
                let e = match kind.as_str() {
                    "transient" => TransportError::Transient("scripted transient failure".into()),
                    "permanent" => TransportError::Permanent("scripted permanent failure".into()),
                    other => return Err(err(format!("unknown error kind `{other}`"))),
                };
                queue.push(Entry {
                    tag,
                    needle,
                    action: Action::Fail(e),
                });
            } else if let Some(rule) = sl.rule {
                let action = match rule.as_str() {
                    "splitter" => Action::Splitter,
                    "fixed" => Action::Reply(
                        sl.template
                            .clone()
                            .ok_or_else(|| err("`fixed` rule needs `template`".into()))?,
                    ),
                    "template" => Action::Template(
                        sl.template
                            .ok_or_else(|| err("`template` rule needs `template`".into()))?,
                    ),
                    "choice" => {
                        let replies = sl.replies.unwrap_or_default();
                        if replies.is_empty() {
                            return Err(err("`choice` rule needs non-empty `replies`".into()));
                        }
                        Action::Choice(replies)
                    }
                    other => return Err(err(format!("unknown rule `{other}`"))),
                };
                rules.push(Entry {
                    tag,
                    needle,
                    action,
                });
            }
        }
        Ok(Self::from_entries(seed, queue, rules))
    }

    pub fn load_script(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| MockScriptError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse_script(&text)
    }

    pub fn stats(&self) -> MockStats {
        MockStats {
            calls: self.calls.load(Ordering::SeqCst),
            peak_in_flight: self.peak.load(Ordering::SeqCst),
        }
    }

    /// Unconsumed queue entries.
    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().iter().filter(|e| e.is_some()).count()
    }

    fn digest(&self, req: &ChatRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.params.seed.unwrap_or(0).to_le_bytes());
        h.update(req.last_user().as_bytes());
        h.finalize().into()
    }

    fn act(&self, action: &Action, req: &ChatRequest) -> Result<String, TransportError> {
        let digest = self.digest(req);
        match action {
            Action::Reply(r) => Ok(r.clone()),
            Action::Fail(e) => Err(e.clone()),
            Action::Splitter => Ok(split_reply(req.last_user(), &digest)),
            Action::Template(t) => {
                let prompt = req.last_user();
                Ok(t.replace("{question}", last_field(prompt, "Question:").unwrap_or(""))
                    .replace("{context}", last_field(prompt, "Context:").unwrap_or(""))
                    .replace("{hash}", &hex::encode(&digest[..4])))
            }
            Action::Choice(replies) => {
                let k = u64::from_le_bytes(digest[..8].try_into().unwrap());
                Ok(replies[(k % replies.len() as u64) as usize].clone())
            }
        }
    }

    fn answer(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let queued = {
            let mut q = self.queue.lock().unwrap();
            q.iter_mut()
                .find(|slot| slot.as_ref().is_some_and(|e| e.matches(req)))
                .and_then(Option::take)
        };
        if let Some(entry) = queued {
            return self.act(&entry.action, req);
        }
        match self.rules.iter().find(|r| r.matches(req)) {
            Some(rule) => self.act(&rule.action, req),
            None => Err(TransportError::Exhausted),
        }
    }
}

impl Transport for MockBackend {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let out = self.answer(req);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn verbatim_transcripts(&self) -> bool {
        true
    }
}

/// Body of the last line starting with `label`.
fn last_field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
}

/// The context a CST prompt asks about: the last `Context:` line.
fn prompt_context(prompt: &str) -> &str {
    last_field(prompt, "Context:").unwrap_or("")
}

fn split_reply(prompt: &str, digest: &[u8; 32]) -> String {
    let ctx = prompt_context(prompt);
    let sentences: Vec<&str> = sentence_ranges(ctx)
        .into_iter()
        .map(|(s, e)| &ctx[s..e])
        .collect();
    let question = format!(
        "What is k{} k{}?",
        hex::encode(&digest[..4]),
        hex::encode(&digest[4..8])
    );
    let (c1, c2) = if sentences.len() <= 1 {
        (ctx.to_string(), String::new())
    } else {
        let k = sentences.len().div_ceil(2);
        (sentences[..k].join(" "), sentences[k..].join(" "))
    };
    format!("Question: {question}\nContext 1: {c1}\nContext 2: {c2}")
}
