//! Context-Split-Tree: derive a query from a context, split it in two, and
//! recurse until the pieces stop shrinking or fall below the minimum length.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{measure_length, Context, LengthUnit};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::llm::{BackendError, ChatRequest, GenerationParams, LlmClient};
use crate::metrics::rouge_l_text;
use crate::seed::derive_seed;

pub const CST_TAG: &str = "cst";
const SECTION_SEP: &str = "\n\n---\n\n";

const DEFAULT_INSTRUCTION: &str = include_str!("../assets/cst_en/instruction.txt");
const DEFAULT_FEWSHOT: &str = include_str!("../assets/cst_en/fewshot.jsonl");

/// One worked example in the CST prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub context: String,
    pub question: String,
    pub context1: String,
    pub context2: String,
}

impl FewShotExample {
    fn render(&self) -> String {
        format!(
            "Context: {}\nQuestion: {}\nContext 1: {}\nContext 2: {}",
            self.context, self.question, self.context1, self.context2
        )
    }
}

/// Instruction plus worked examples for the CST prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CstPromptAssets {
    pub instruction: String,
    pub fewshot: Vec<FewShotExample>,
}

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("instruction is empty")]
    EmptyInstruction,
}

impl CstPromptAssets {
    /// The bundled English instruction and its three worked examples.
    pub fn english_default() -> Self {
        let fewshot = DEFAULT_FEWSHOT
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("bundled few-shot asset is valid"))
            .collect();
        Self {
            instruction: DEFAULT_INSTRUCTION.trim_end().to_string(),
            fewshot,
        }
    }

    /// Load `instruction.txt` and `fewshot.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, AssetError> {
        let path = dir.join("instruction.txt");
        let instruction = std::fs::read_to_string(&path)
            .map_err(|source| AssetError::Io {
                path: path.display().to_string(),
                source,
            })?
            .trim_end()
            .to_string();
        if instruction.trim().is_empty() {
            return Err(AssetError::EmptyInstruction);
        }
        let fewshot = read_jsonl(&dir.join("fewshot.jsonl"))?;
        Ok(Self {
            instruction,
            fewshot,
        })
    }

    pub fn with_instruction(&self, instruction: &str) -> Self {
        Self {
            instruction: instruction.to_string(),
            fewshot: self.fewshot.clone(),
        }
    }

    /// Keep only the first `n` worked examples.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            instruction: self.instruction.clone(),
            fewshot: self.fewshot.iter().take(n).cloned().collect(),
        }
    }
}

/// Prompt text: instruction, each worked example, then the open slot.
pub fn render_cst_text(assets: &CstPromptAssets, context_text: &str) -> String {
    let mut parts = Vec::with_capacity(assets.fewshot.len() + 2);
    parts.push(assets.instruction.clone());
    parts.extend(assets.fewshot.iter().map(FewShotExample::render));
    parts.push(format!("Context: {context_text}\nQuestion: "));
    parts.join(SECTION_SEP)
}

pub fn render_cst_prompt(
    assets: &CstPromptAssets,
    ctx: &Context,
    params: GenerationParams,
) -> ChatRequest {
    ChatRequest::user(CST_TAG, render_cst_text(assets, &ctx.text), params)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSplit {
    pub question: String,
    pub context1: String,
    pub context2: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("reply has no `Question:` field")]
    MissingQuestion,
    #[error("`Question:` field is empty")]
    EmptyQuestion,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    Question,
    Context1,
    Context2,
    Other,
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(?:\*\*)?\b(question|context\s*1|context\s*2|context|answer)\s*(?:\*\*)?\s*:(?:\*\*)?")
            .expect("label regex compiles")
    })
}

/// Extract the first `Question:`, `Context 1:` and `Context 2:` bodies.
///
/// Labels are case-insensitive and may be wrapped in `**`. A field's body
/// runs to the next recognised label. A missing or blank `Context 2` is
/// returned as the empty string.
pub fn parse_split(reply: &str) -> Result<ParsedSplit, ParseError> {
    let labels: Vec<(Label, usize, usize)> = label_regex()
        .captures_iter(reply)
        .map(|c| {
            let whole = c.get(0).unwrap();
            let name: String = c[1]
                .to_lowercase()
                .chars()
                .filter(|ch| !ch.is_whitespace())
                .collect();
            let label = match name.as_str() {
                "question" => Label::Question,
                "context1" => Label::Context1,
                "context2" => Label::Context2,
                _ => Label::Other,
            };
            (label, whole.start(), whole.end())
        })
        .collect();

    let body = |want: Label| -> Option<String> {
        let i = labels.iter().position(|(l, _, _)| *l == want)?;
        let start = labels[i].2;
        let end = labels.get(i + 1).map_or(reply.len(), |l| l.1);
        Some(reply[start..end].trim().to_string())
    };

    let question = body(Label::Question).ok_or(ParseError::MissingQuestion)?;
    if question.is_empty() {
        return Err(ParseError::EmptyQuestion);
    }
    Ok(ParsedSplit {
        question,
        context1: body(Label::Context1).unwrap_or_default(),
        context2: body(Label::Context2).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CstConfig {
    /// Contexts shorter than this are not queried.
    pub lambda: usize,
    /// Extra attempts after a reply fails to parse.
    pub parse_retries: u32,
    pub unit: LengthUnit,
    /// Minimum ROUGE-L precision of the children against the parent.
    pub hallucination_threshold: f64,
    pub params: GenerationParams,
    /// Build sibling subtrees on separate threads.
    pub parallel: bool,
}

impl Default for CstConfig {
    fn default() -> Self {
        Self {
            lambda: 50,
            parse_retries: 3,
            unit: LengthUnit::Words,
            hallucination_threshold: 0.7,
            params: GenerationParams::for_queries(),
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    BelowLambda,
    NoShrink,
    Hallucination,
    EmptyChild,
    ParseFailed,
    SplitOk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CstNode {
    /// `/` for the root, then child indices: `/0`, `/0/1`, ...
    pub path: String,
    pub context: Context,
    pub query: Option<String>,
    pub children: Vec<CstNode>,
    pub depth: usize,
    pub terminal: TerminalReason,
}

impl CstNode {
    /// Pre-order iterator over the subtree.
    pub fn iter(&self) -> impl Iterator<Item = &CstNode> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }
}

#[derive(Debug, Error)]
pub enum CstError {
    #[error("CST node {path} of `{root_id}`: {source}")]
    Backend {
        root_id: String,
        path: String,
        #[source]
        source: BackendError,
    },
    #[error("lambda must be >= 1")]
    InvalidLambda,
}

fn child_path(parent: &str, i: usize) -> String {
    if parent == "/" {
        format!("/{i}")
    } else {
        format!("{parent}/{i}")
    }
}

struct Builder<'a> {
    assets: &'a CstPromptAssets,
    cfg: &'a CstConfig,
    client: &'a LlmClient,
    root_id: &'a str,
}

impl Builder<'_> {
    fn ask(&self, ctx: &Context, path: &str) -> Result<Option<ParsedSplit>, CstError> {
        request_split(ctx, self.assets, self.cfg, self.client).map_err(|source| CstError::Backend {
            root_id: self.root_id.to_string(),
            path: path.to_string(),
            source,
        })
    }

    fn child_context(&self, parent: &Context, i: usize, text: &str) -> Context {
        Context::from_text(
            format!("{}/{}", parent.id, i),
            parent.doc_id.clone(),
            text,
            self.cfg.unit,
        )
    }

    fn build(&self, ctx: Context, path: String, depth: usize) -> Result<CstNode, CstError> {
        let leaf = |ctx: Context, path: String, query: Option<String>, terminal| CstNode {
            path,
            context: ctx,
            query,
            children: Vec::new(),
            depth,
            terminal,
        };

        if ctx.length < self.cfg.lambda {
            return Ok(leaf(ctx, path, None, TerminalReason::BelowLambda));
        }
        let Some(split) = self.ask(&ctx, &path)? else {
            return Ok(leaf(ctx, path, None, TerminalReason::ParseFailed));
        };
        let query = Some(split.question);
        if split.context2.trim().is_empty() {
            return Ok(leaf(ctx, path, query, TerminalReason::EmptyChild));
        }
        let unit = self.cfg.unit;
        let (len1, len2) = (
            measure_length(&split.context1, unit),
            measure_length(&split.context2, unit),
        );
        if len1 >= ctx.length || len2 >= ctx.length {
            return Ok(leaf(ctx, path, query, TerminalReason::NoShrink));
        }
        let joined = format!("{} {}", split.context1, split.context2);
        if rouge_l_text(&joined, &ctx.text, unit).precision < self.cfg.hallucination_threshold {
            return Ok(leaf(ctx, path, query, TerminalReason::Hallucination));
        }

        let c0 = self.child_context(&ctx, 0, &split.context1);
        let c1 = self.child_context(&ctx, 1, &split.context2);
        let (p0, p1) = (child_path(&path, 0), child_path(&path, 1));
        let (left, right) = if self.cfg.parallel {
            std::thread::scope(|s| {
                let handle = s.spawn(|| self.build(c0, p0, depth + 1));
                let right = self.build(c1, p1, depth + 1);
                (handle.join().expect("CST worker panicked"), right)
            })
        } else {
            (self.build(c0, p0, depth + 1), self.build(c1, p1, depth + 1))
        };
        Ok(CstNode {
            path,
            context: ctx,
            query,
            children: vec![left?, right?],
            depth,
            terminal: TerminalReason::SplitOk,
        })
    }
}

/// Ask the model to question and split `ctx`, re-asking up to
/// `cfg.parse_retries` more times while the reply does not parse. Each retry
/// uses a fresh sampling seed. `None` means every attempt was unparseable.
pub fn request_split(
    ctx: &Context,
    assets: &CstPromptAssets,
    cfg: &CstConfig,
    client: &LlmClient,
) -> Result<Option<ParsedSplit>, BackendError> {
    for attempt in 0..=cfg.parse_retries {
        let mut params = cfg.params;
        if attempt > 0 {
            params.seed = Some(derive_seed(
                params.seed.unwrap_or(0),
                &format!("parse-retry-{attempt}"),
            ));
        }
        let reply = client.complete(&render_cst_prompt(assets, ctx, params))?;
        match parse_split(&reply) {
            Ok(split) => return Ok(Some(split)),
            Err(e) => log::warn!(
                "[{}] unparseable CST reply (attempt {}): {e}",
                ctx.id,
                attempt + 1
            ),
        }
    }
    Ok(None)
}

/// Build the Context-Split-Tree rooted at `root`.
///
/// Checks run in this order at every node: below λ (no model call), parse
/// with retries, empty second child, no shrink, hallucination (ROUGE-L
/// precision of the joined children against the parent), then recursion.
/// A root whose reply never parses comes back as a query-less
/// `ParseFailed` node, so it contributes nothing.
pub fn build_tree(
    root: &Context,
    assets: &CstPromptAssets,
    cfg: &CstConfig,
    client: &LlmClient,
) -> Result<CstNode, CstError> {
    if cfg.lambda == 0 {
        return Err(CstError::InvalidLambda);
    }
    let builder = Builder {
        assets,
        cfg,
        client,
        root_id: &root.id,
    };
    builder.build(root.clone(), "/".to_string(), 0)
}

/// A query together with the exact context it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectedQuery {
    pub root_id: String,
    pub context: Context,
    pub node_path: String,
    pub depth: usize,
    pub query: String,
    pub terminal: TerminalReason,
}

/// Pre-order list of every node that carries a query.
pub fn collect_queries(root: &CstNode) -> Vec<CollectedQuery> {
    let root_id = root.context.id.clone();
    root.iter()
        .filter_map(|n| {
            n.query.as_ref().map(|q| CollectedQuery {
                root_id: root_id.clone(),
                context: n.context.clone(),
                node_path: n.path.clone(),
                depth: n.depth,
                query: q.clone(),
                terminal: n.terminal,
            })
        })
        .collect()
}

/// Identifier of a query derived in a given CST round.
pub fn query_id(context_id: &str, round: u32) -> String {
    format!("{context_id}@{round}")
}

/// One line of `queries.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub root_context_id: String,
    pub context_id: String,
    pub node_path: String,
    pub depth: usize,
    pub query: String,
    pub node_context_text: String,
    pub terminal_reason: TerminalReason,
}

impl QueryRecord {
    pub fn from_collected(q: &CollectedQuery, round: u32) -> Self {
        Self {
            query_id: query_id(&q.context.id, round),
            root_context_id: q.root_id.clone(),
            context_id: q.context.id.clone(),
            node_path: q.node_path.clone(),
            depth: q.depth,
            query: q.query.clone(),
            node_context_text: q.context.text.clone(),
            terminal_reason: q.terminal,
        }
    }
}
