//! Response generation: few-shot selection by seeded random search with
//! model self-grading, then one answer per filtered query with only the
//! bare query/response pair kept.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::ScoredQuery;
use crate::llm::{parallel_map, BackendError, ChatRequest, GenerationParams, LlmClient, PromptBudget};
use crate::seed::{derive_seed, rng};

pub const RESPONSE_TAG: &str = "respond";
pub const SEARCH_GEN_TAG: &str = "fewshot-gen";
pub const SEARCH_EVAL_TAG: &str = "fewshot-eval";

pub const RESPONSE_INSTRUCTION: &str = "Answer the question using the context. \
Follow every principle listed below. Reply with the answer only.";

const SELF_EVAL_INSTRUCTION: &str = "Grade the candidate answer from 1 (poor) to 5 (excellent). \
Compare it with the reference answer and check it against the principles. \
Reply with a single integer.";

const SECTION_SEP: &str = "\n\n---\n\n";

/// Grading attempts before a cell falls back to the lowest score.
pub const SELF_EVAL_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("prompt for query `{query}` exceeds the budget even without examples")]
    PromptTooLong { query: String },
    #[error("no grade in {attempts} replies")]
    EvalParse { attempts: u32 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("search failed: every evaluation errored")]
    Search,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrincipleSet {
    pub principles: Vec<String>,
}

impl PrincipleSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(items: I) -> Self {
        Self {
            principles: items.into_iter().map(Into::into).collect(),
        }
    }

    /// One principle per non-blank line.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self, ResponseError> {
        let text = std::fs::read_to_string(path).map_err(|e| ResponseError::Input {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::parse(&text))
    }

    pub fn is_empty(&self) -> bool {
        self.principles.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub context: String,
    pub query: String,
    pub response: String,
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedExample>, ResponseError> {
    let items: Vec<AnnotatedExample> = crate::jsonl::read_jsonl(path).map_err(|e| ResponseError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for (i, ex) in items.iter().enumerate() {
        if ex.context.trim().is_empty() || ex.query.trim().is_empty() || ex.response.trim().is_empty() {
            return Err(ResponseError::Input {
                path: path.display().to_string(),
                message: format!("line {}: empty field", i + 1),
            });
        }
    }
    Ok(items)
}

/// Seeded shuffle, then `round(frac * n)` training examples, clamped so both
/// sides are non-empty.
pub fn split_annotations(
    examples: &[AnnotatedExample],
    frac: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>), ResponseError> {
    let n = examples.len();
    if n < 2 {
        return Err(ResponseError::Config(format!("need at least 2 annotated examples, got {n}")));
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(ResponseError::Config(format!("split fraction {frac} not in (0, 1)")));
    }
    let mut shuffled = examples.to_vec();
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng(derive_seed(seed, "split")));
    let n_train = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

fn render_triplet(context: &str, query: &str, answer: Option<&str>) -> String {
    match answer {
        Some(a) => format!("Context: {context}\nQuestion: {query}\nAnswer: {a}"),
        None => format!("Context: {context}\nQuestion: {query}\nAnswer: "),
    }
}

fn principles_block(principles: &PrincipleSet) -> Option<String> {
    if principles.is_empty() {
        return None;
    }
    let lines: Vec<String> = principles
        .principles
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {p}", i + 1))
        .collect();
    Some(format!("Principles:\n{}", lines.join("\n")))
}

/// Prompt text: instruction, principles, worked examples, then the open
/// triplet for `ctx_text`/`query`. Empty sections are left out.
pub fn render_response_text(
    principles: &PrincipleSet,
    fewshot: &[AnnotatedExample],
    ctx_text: &str,
    query: &str,
) -> String {
    let mut sections = vec![RESPONSE_INSTRUCTION.to_string()];
    sections.extend(principles_block(principles));
    sections.extend(
        fewshot
            .iter()
            .map(|ex| render_triplet(&ex.context, &ex.query, Some(&ex.response))),
    );
    sections.push(render_triplet(ctx_text, query, None));
    sections.join(SECTION_SEP)
}

/// A rendered response prompt and how many trailing examples were dropped to
/// fit the budget.
#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub request: ChatRequest,
    pub dropped_examples: usize,
}

pub fn render_response_prompt(
    principles: &PrincipleSet,
    fewshot: &[AnnotatedExample],
    ctx_text: &str,
    query: &str,
    params: GenerationParams,
    budget: PromptBudget,
    tag: &str,
) -> Result<RenderedPrompt, ResponseError> {
    for keep in (0..=fewshot.len()).rev() {
        let request = ChatRequest::user(
            tag,
            render_response_text(principles, &fewshot[..keep], ctx_text, query),
            params,
        );
        if budget.fits(&request) {
            let dropped = fewshot.len() - keep;
            if dropped > 0 {
                log::warn!("dropped {dropped} few-shot example(s) to fit prompt for `{query}`");
            }
            return Ok(RenderedPrompt {
                request,
                dropped_examples: dropped,
            });
        }
    }
    Err(ResponseError::PromptTooLong {
        query: query.to_string(),
    })
}

/// First integer in `reply` that lies in 1..=5.
pub fn parse_grade(reply: &str) -> Option<u8> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .filter_map(|d| d.parse::<u64>().ok())
        .find(|v| (1..=5).contains(v))
        .map(|v| v as u8)
}

pub fn render_self_eval_text(
    principles: &PrincipleSet,
    reference: &AnnotatedExample,
    candidate: &str,
) -> String {
    let mut sections = vec![SELF_EVAL_INSTRUCTION.to_string()];
    sections.extend(principles_block(principles));
    sections.push(format!(
        "Context: {}\nQuestion: {}\nReference answer: {}\nCandidate answer: {candidate}\nGrade: ",
        reference.context, reference.query, reference.response
    ));
    sections.join(SECTION_SEP)
}

/// Grade `candidate` against the reference answer of `reference`, asking up
/// to [`SELF_EVAL_ATTEMPTS`] times.
pub fn self_evaluate(
    candidate: &str,
    reference: &AnnotatedExample,
    principles: &PrincipleSet,
    params: GenerationParams,
    client: &LlmClient,
) -> Result<u8, ResponseError> {
    let text = render_self_eval_text(principles, reference, candidate);
    for attempt in 0..SELF_EVAL_ATTEMPTS {
        let mut p = params;
        if attempt > 0 {
            p.seed = Some(derive_seed(p.seed.unwrap_or(0), &format!("eval-retry-{attempt}")));
        }
        let reply = client.complete(&ChatRequest::user(SEARCH_EVAL_TAG, text.clone(), p))?;
        if let Some(g) = parse_grade(&reply) {
            return Ok(g);
        }
    }
    Err(ResponseError::EvalParse {
        attempts: SELF_EVAL_ATTEMPTS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k: usize,
    pub iterations: usize,
    /// Redraws allowed per iteration when the sampled subset was already tried.
    pub max_redraws: usize,
    pub params: GenerationParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 3,
            iterations: 16,
            max_redraws: 64,
            params: GenerationParams::for_responses(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchIteration {
    pub iteration: usize,
    /// Indices into the training split, in sampled order.
    pub subset: Vec<usize>,
    pub cell_scores: Vec<u8>,
    pub fitness: f64,
}

/// Contents of `fewshot_selection.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotSelection {
    pub chosen: Vec<AnnotatedExample>,
    pub mean_self_eval: f64,
    pub iterations_run: usize,
    pub seed: u64,
    pub trace: Vec<SearchIteration>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FewshotSelection {
    /// No few-shot examples, as used when self-alignment is switched off.
    pub fn empty(seed: u64) -> Self {
        Self {
            chosen: Vec::new(),
            mean_self_eval: 0.0,
            iterations_run: 0,
            seed,
            trace: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

enum Cell {
    Graded(u8),
    Degraded(String),
    Failed(String),
}

fn evaluate_cell(
    subset: &[AnnotatedExample],
    test: &AnnotatedExample,
    principles: &PrincipleSet,
    client: &LlmClient,
    params: GenerationParams,
    seed: u64,
) -> Cell {
    let gen_params = params.with_seed(derive_seed(seed, "gen"));
    let prompt = match render_response_prompt(
        principles,
        subset,
        &test.context,
        &test.query,
        gen_params,
        client.budget(),
        SEARCH_GEN_TAG,
    ) {
        Ok(p) => p,
        Err(e) => return Cell::Failed(e.to_string()),
    };
    let answer = match client.complete(&prompt.request) {
        Ok(a) => a,
        Err(e) => return Cell::Failed(e.to_string()),
    };
    let eval_params = params.with_seed(derive_seed(seed, "eval"));
    match self_evaluate(answer.trim(), test, principles, eval_params, client) {
        Ok(g) => Cell::Graded(g),
        Err(e @ ResponseError::EvalParse { .. }) => Cell::Degraded(e.to_string()),
        Err(e) => Cell::Failed(e.to_string()),
    }
}

/// Seeded random search over size-`k` subsets of `train`, graded on `test`.
///
/// A subset's fitness is the mean self-evaluation over all test examples;
/// cells that fail score 1. Subsets already tried are re-drawn. The best
/// subset wins, ties going to the earliest iteration.
pub fn random_search_fewshot(
    train: &[AnnotatedExample],
    test: &[AnnotatedExample],
    cfg: &SearchConfig,
    principles: &PrincipleSet,
    client: &LlmClient,
    seed: u64,
) -> Result<FewshotSelection, ResponseError> {
    if cfg.k == 0 || train.len() < cfg.k {
        return Err(ResponseError::Config(format!(
            "few-shot size {} needs at least that many training examples, got {}",
            cfg.k,
            train.len()
        )));
    }
    if test.is_empty() || cfg.iterations == 0 {
        return Err(ResponseError::Config("search needs test examples and iterations".into()));
    }
    let mut draw_rng = rng(derive_seed(seed, "subsets"));
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut any_answered = false;

    'outer: for iteration in 1..=cfg.iterations {
        let mut subset = Vec::new();
        for _ in 0..=cfg.max_redraws {
            let cand = sample(&mut draw_rng, train.len(), cfg.k).into_vec();
            let mut key = cand.clone();
            key.sort_unstable();
            if seen.insert(key) {
                subset = cand;
                break;
            }
        }
        if subset.is_empty() {
            warnings.push(format!("no unseen subset after {} redraws; stopping at iteration {}", cfg.max_redraws, iteration - 1));
            break 'outer;
        }
        let examples: Vec<AnnotatedExample> = subset.iter().map(|&i| train[i].clone()).collect();
        let test_idx: Vec<usize> = (0..test.len()).collect();
        let cells = parallel_map(&test_idx, client.max_in_flight(), |&j| {
            evaluate_cell(
                &examples,
                &test[j],
                principles,
                client,
                cfg.params,
                derive_seed(seed, &format!("iter-{iteration}/test-{j}")),
            )
        });
        let mut scores = Vec::with_capacity(cells.len());
        for (j, cell) in cells.into_iter().enumerate() {
            match cell {
                Cell::Graded(g) => {
                    any_answered = true;
                    scores.push(g);
                }
                Cell::Degraded(msg) => {
                    any_answered = true;
                    let w = format!("iteration {iteration}, test {j}: {msg}; scored 1");
                    log::warn!("{w}");
                    warnings.push(w);
                    scores.push(1);
                }
                Cell::Failed(msg) => {
                    let w = format!("iteration {iteration}, test {j}: {msg}; scored 1");
                    log::warn!("{w}");
                    warnings.push(w);
                    scores.push(1);
                }
            }
        }
        let fitness = scores.iter().map(|&s| f64::from(s)).sum::<f64>() / scores.len() as f64;
        trace.push(SearchIteration {
            iteration,
            subset,
            cell_scores: scores,
            fitness,
        });
    }
    if !any_answered {
        return Err(ResponseError::Search);
    }
    let best = trace
        .iter()
        .fold(None::<&SearchIteration>, |best, it| match best {
            Some(b) if b.fitness >= it.fitness => Some(b),
            _ => Some(it),
        })
        .expect("at least one iteration ran");
    Ok(FewshotSelection {
        chosen: best.subset.iter().map(|&i| train[i].clone()).collect(),
        mean_self_eval: best.fitness,
        iterations_run: trace.len(),
        seed,
        trace,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub root_context_id: String,
    pub context_id: String,
    pub score: f64,
    pub depth: usize,
}

/// One line of `sft.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftPair {
    pub query: String,
    pub response: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResponseRun {
    pub pairs: Vec<SftPair>,
    pub failures: Vec<ResponseFailure>,
    pub warnings: Vec<String>,
}

/// Answer every filtered query from its own node context, keeping only the
/// query, the trimmed answer and provenance metadata.
pub fn generate_responses(
    filtered: &[ScoredQuery],
    fewshot: &[AnnotatedExample],
    principles: &PrincipleSet,
    params: GenerationParams,
    client: &LlmClient,
    seed: u64,
) -> ResponseRun {
    let results = parallel_map(filtered, client.max_in_flight(), |q| {
        let params = params.with_seed(derive_seed(seed, &q.query_id));
        let rendered = render_response_prompt(
            principles,
            fewshot,
            &q.context_text,
            &q.query,
            params,
            client.budget(),
            RESPONSE_TAG,
        )?;
        Ok::<_, ResponseError>(client.complete(&rendered.request)?)
    });
    let mut run = ResponseRun::default();
    for (q, result) in filtered.iter().zip(results) {
        match result {
            Ok(reply) if reply.trim().is_empty() => {
                let w = format!("empty response for `{}` dropped", q.query_id);
                log::warn!("{w}");
                run.warnings.push(w);
            }
            Ok(reply) => run.pairs.push(SftPair {
                query: q.query.clone(),
                response: reply.trim().to_string(),
                meta: SftMeta {
                    root_context_id: q.root_context_id.clone(),
                    context_id: q.context_id.clone(),
                    score: q.score,
                    depth: q.depth,
                },
            }),
            Err(e) => {
                log::warn!("response for `{}` failed: {e}", q.query_id);
                run.failures.push(ResponseFailure {
                    query_id: q.query_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    run
}
