//! Contrastive query pairs and the pairwise-ranking scorer.
//!
//! Negatives are regenerated for a sampled positive's context under a
//! deliberately weakened prompt. The reference scorer is linear over
//! hand-built features and is trained on the pairwise logistic loss
//! `-log σ(s⁺ - s⁻)`.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Context, LengthUnit};
use crate::cst::{request_split, CstConfig, CstPromptAssets};
use crate::llm::{parallel_map, BackendError, LlmClient};
use crate::metrics::{rouge_l, tokenize};
use crate::seed::{derive_seed, rng};

/// Instruction used for the weakened prompt.
pub const WEAK_INSTRUCTION: &str =
    "Given a context, generate a question and split context into two sub-contexts";

pub const FEATURE_VERSION: &str = "v1";
pub const FEATURE_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegKind {
    WeakInstruction,
    OneShot,
    Both,
}

impl NegKind {
    pub const ALL: [NegKind; 3] = [NegKind::WeakInstruction, NegKind::OneShot, NegKind::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            NegKind::WeakInstruction => "weak_instruction",
            NegKind::OneShot => "one_shot",
            NegKind::Both => "both",
        }
    }

    /// The prompt assets with this kind's manipulation applied.
    pub fn manipulate(self, assets: &CstPromptAssets) -> CstPromptAssets {
        match self {
            NegKind::WeakInstruction => assets.with_instruction(WEAK_INSTRUCTION),
            NegKind::OneShot => assets.truncated(1),
            NegKind::Both => assets.with_instruction(WEAK_INSTRUCTION).truncated(1),
        }
    }
}

/// A query derived under the full prompt, with its node context.
#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub context: Context,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub context: Context,
    pub q_pos: String,
    pub q_neg: String,
    pub neg_kind: NegKind,
}

/// One line of `scorer_pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub context_id: String,
    pub context_text: String,
    pub q_pos: String,
    pub q_neg: String,
    pub neg_kind: NegKind,
}

impl PairRecord {
    pub fn from_pair(p: &ContrastivePair) -> Self {
        Self {
            context_id: p.context.id.clone(),
            context_text: p.context.text.clone(),
            q_pos: p.q_pos.clone(),
            q_neg: p.q_neg.clone(),
            neg_kind: p.neg_kind,
        }
    }

    pub fn into_pair(self, unit: LengthUnit) -> ContrastivePair {
        let doc_id = self.context_id.split('#').next().unwrap_or("").to_string();
        ContrastivePair {
            context: Context::from_text(self.context_id, doc_id, &self.context_text, unit),
            q_pos: self.q_pos,
            q_neg: self.q_neg,
            neg_kind: self.neg_kind,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("pool of {available} positives cannot supply {needed} pairs of kind {kind}")]
    InsufficientPool {
        kind: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("regenerating negative for `{context_id}`: {source}")]
    Backend {
        context_id: String,
        #[source]
        source: BackendError,
    },
    #[error("model features `{model}` do not match featurizer `{expected}`")]
    Version { model: String, expected: String },
    #[error("training needs at least one pair")]
    NoPairs,
    #[error("non-finite value at pair {pair}: {what}")]
    NonFinite { pair: usize, what: String },
    #[error("model file: {0}")]
    Io(String),
}

/// Sample `per_kind` positives for each manipulation and regenerate a
/// negative query for the same context under the weakened prompt.
///
/// Positives are drawn without replacement within a kind. A positive whose
/// regeneration never parses, or parses to the same query, is replaced by
/// the next draw.
pub fn build_contrastive_pairs(
    pool: &[Positive],
    assets: &CstPromptAssets,
    per_kind: usize,
    cst: &CstConfig,
    client: &LlmClient,
    seed: u64,
) -> Result<Vec<ContrastivePair>, ScorerError> {
    let mut out = Vec::with_capacity(per_kind * 3);
    for kind in NegKind::ALL {
        if pool.len() < per_kind {
            return Err(ScorerError::InsufficientPool {
                kind: kind.as_str(),
                needed: per_kind,
                available: pool.len(),
            });
        }
        let weak = kind.manipulate(assets);
        let kind_seed = derive_seed(seed, kind.as_str());
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng(kind_seed));

        let mut cursor = 0;
        let mut accepted = 0;
        while accepted < per_kind {
            let need = per_kind - accepted;
            if cursor >= order.len() {
                return Err(ScorerError::InsufficientPool {
                    kind: kind.as_str(),
                    needed: per_kind,
                    available: accepted,
                });
            }
            let batch = &order[cursor..(cursor + need).min(order.len())];
            cursor += batch.len();
            let replies = parallel_map(batch, client.max_in_flight(), |&idx| {
                let cfg = CstConfig {
                    params: cst.params.with_seed(derive_seed(kind_seed, &format!("neg/{idx}"))),
                    ..*cst
                };
                request_split(&pool[idx].context, &weak, &cfg, client)
            });
            for (&idx, reply) in batch.iter().zip(replies) {
                let positive = &pool[idx];
                let split = reply.map_err(|source| ScorerError::Backend {
                    context_id: positive.context.id.clone(),
                    source,
                })?;
                match split {
                    Some(s) if s.question != positive.query => {
                        out.push(ContrastivePair {
                            context: positive.context.clone(),
                            q_pos: positive.query.clone(),
                            q_neg: s.question,
                            neg_kind: kind,
                        });
                        accepted += 1;
                    }
                    _ => log::warn!(
                        "no usable {} negative for `{}`; resampling",
                        kind.as_str(),
                        positive.context.id
                    ),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub version: String,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "by", "for", "with",
    "from", "as", "is", "are", "was", "were", "be", "been", "being", "it", "its", "this",
    "that", "these", "those", "their", "there", "they", "he", "she", "his", "her", "we", "you",
    "i", "do", "does", "did", "has", "have", "had", "not", "no", "so", "if", "then", "than",
    "into", "out", "up", "about", "which", "what", "why", "how", "when", "where", "who",
];

const WH_WORDS: &[&str] = &["what", "why", "how", "when", "where", "who", "whom", "whose", "which"];
const CJK_INTERROGATIVES: &[&str] = &["什么", "为什么", "怎么", "如何", "哪", "谁", "吗", "多少"];

/// Features of a (context, query) pair, in order:
///
/// 0. query length
/// 1. query length / context length
/// 2. ROUGE-L recall of the query against the context
/// 3. ROUGE-L precision of the query against the context
/// 4. 1 if the query contains an interrogative word
/// 5. 1 if the query ends with a question mark
/// 6. type-token ratio of the query
/// 7. share of query tokens that are context content words
pub fn featurize(ctx: &Context, query: &str, unit: LengthUnit) -> FeatureVector {
    let q = tokenize(query, unit);
    let mut values = vec![0.0; FEATURE_COUNT];
    if !q.is_empty() {
        let c = tokenize(&ctx.text, unit);
        let qlen = q.len() as f64;
        let rouge = rouge_l(&q, &c);
        let words = tokenize(query, LengthUnit::Words);
        let interrogative = words.0.iter().any(|w| WH_WORDS.contains(&w.as_str()))
            || CJK_INTERROGATIVES.iter().any(|w| query.contains(w));
        let trimmed = query.trim_end();
        let distinct: HashSet<&str> = q.0.iter().map(String::as_str).collect();
        let ctx_content: HashSet<&str> = c
            .0
            .iter()
            .map(String::as_str)
            .filter(|t| !STOPWORDS.contains(t))
            .collect();
        let overlap = q.0.iter().filter(|t| ctx_content.contains(t.as_str())).count();

        values[0] = qlen;
        values[1] = if c.is_empty() { 0.0 } else { qlen / c.len() as f64 };
        values[2] = rouge.recall;
        values[3] = rouge.precision;
        values[4] = f64::from(u8::from(interrogative));
        values[5] = f64::from(u8::from(trimmed.ends_with('?') || trimmed.ends_with('？')));
        values[6] = distinct.len() as f64 / qlen;
        values[7] = overlap as f64 / qlen;
    }
    FeatureVector {
        values,
        version: FEATURE_VERSION.to_string(),
    }
}

/// `-log σ(s_pos - s_neg)` in the overflow-free softplus form.
pub fn pairwise_loss(s_pos: f64, s_neg: f64) -> f64 {
    softplus(s_neg - s_pos)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Mean pairwise loss of a linear scorer and its gradient in
/// `(weights, bias)`. Each pair is `(positive features, negative features)`.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> (f64, Vec<f64>, f64) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (pos, neg) in pairs {
        let margin = (dot(weights, pos) + bias) - (dot(weights, neg) + bias);
        loss += softplus(-margin);
        // d/dmargin softplus(-margin) = -σ(-margin)
        let g = -sigmoid(-margin);
        for ((gj, p), n) in grad.iter_mut().zip(pos).zip(neg) {
            *gj += g * (p - n);
        }
    }
    let n = pairs.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    // The bias enters both scores and cancels in the margin.
    (loss / n, grad, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub unit: LengthUnit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 500,
            holdout_fraction: 0.2,
            seed: 0,
            unit: LengthUnit::Words,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub feature_version: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(default)]
    pub unit: LengthUnit,
    pub training_meta: Option<TrainingMeta>,
}

impl ScorerModel {
    pub fn zeros(unit: LengthUnit) -> Self {
        Self {
            feature_version: FEATURE_VERSION.to_string(),
            weights: vec![0.0; FEATURE_COUNT],
            bias: 0.0,
            unit,
            training_meta: None,
        }
    }

    pub fn score_features(&self, features: &FeatureVector) -> Result<f64, ScorerError> {
        if features.version != self.feature_version || features.values.len() != self.weights.len() {
            return Err(ScorerError::Version {
                model: self.feature_version.clone(),
                expected: features.version.clone(),
            });
        }
        Ok(dot(&self.weights, &features.values) + self.bias)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        crate::jsonl::write_atomic(path, self.to_json().as_bytes())
            .map_err(|e| ScorerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ScorerError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| ScorerError::Io(format!("{}: {e}", path.display())))
    }
}

/// Anything that ranks a query against the context it came from.
pub trait Scorer: Send + Sync {
    fn score(&self, ctx: &Context, query: &str) -> Result<f64, ScorerError>;
}

impl Scorer for ScorerModel {
    fn score(&self, ctx: &Context, query: &str) -> Result<f64, ScorerError> {
        self.score_features(&featurize(ctx, query, self.unit))
    }
}

/// Split indices into (train, held-out) with a seeded shuffle; the training
/// side always keeps at least one pair.
fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive_seed(seed, "holdout")));
    let held = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    let heldout = idx.split_off(n - held);
    (idx, heldout)
}

/// Train a linear scorer on `(positive, negative)` feature pairs by
/// full-batch gradient descent from zero weights.
///
/// Each feature is rescaled by the RMS of its pairwise differences while
/// optimizing, and the scale is folded back into the returned weights. The
/// bias receives no gradient from a pairwise loss and stays at zero.
pub fn train_on_features(
    pairs: &[(Vec<f64>, Vec<f64>)],
    cfg: &TrainConfig,
) -> Result<ScorerModel, ScorerError> {
    if pairs.is_empty() {
        return Err(ScorerError::NoPairs);
    }
    let dim = pairs[0].0.len();
    for (i, (p, n)) in pairs.iter().enumerate() {
        if p.len() != dim || n.len() != dim {
            return Err(ScorerError::NonFinite {
                pair: i,
                what: format!("expected {dim} features"),
            });
        }
        if p.iter().chain(n).any(|v| !v.is_finite()) {
            return Err(ScorerError::NonFinite {
                pair: i,
                what: "feature".into(),
            });
        }
    }

    let (train_idx, held_idx) = holdout_split(pairs.len(), cfg.holdout_fraction, cfg.seed);
    let train: Vec<(Vec<f64>, Vec<f64>)> = train_idx.iter().map(|&i| pairs[i].clone()).collect();

    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let ms = train.iter().map(|(p, n)| (p[j] - n[j]).powi(2)).sum::<f64>()
                / train.len() as f64;
            if ms > 0.0 {
                ms.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled: Vec<(Vec<f64>, Vec<f64>)> = train
        .iter()
        .map(|(p, n)| {
            (
                p.iter().zip(&scale).map(|(v, s)| v / s).collect(),
                n.iter().zip(&scale).map(|(v, s)| v / s).collect(),
            )
        })
        .collect();

    let mut u = vec![0.0; dim];
    let (initial_loss, _, _) = loss_and_gradient(&u, 0.0, &scaled);
    for _ in 0..cfg.epochs {
        let (loss, grad, _) = loss_and_gradient(&u, 0.0, &scaled);
        if !loss.is_finite() {
            let worst = scaled
                .iter()
                .position(|(p, n)| !pairwise_loss(dot(&u, p), dot(&u, n)).is_finite())
                .map_or(0, |k| train_idx[k]);
            return Err(ScorerError::NonFinite {
                pair: worst,
                what: "loss".into(),
            });
        }
        for (w, g) in u.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    let weights: Vec<f64> = u.iter().zip(&scale).map(|(w, s)| w / s).collect();
    let (final_loss, _, _) = loss_and_gradient(&weights, 0.0, &train);

    let heldout_accuracy = (!held_idx.is_empty()).then(|| {
        let correct = held_idx
            .iter()
            .filter(|&&i| dot(&weights, &pairs[i].0) > dot(&weights, &pairs[i].1))
            .count();
        correct as f64 / held_idx.len() as f64
    });

    Ok(ScorerModel {
        feature_version: FEATURE_VERSION.to_string(),
        weights,
        bias: 0.0,
        unit: cfg.unit,
        training_meta: Some(TrainingMeta {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            initial_loss,
            final_loss,
            train_pairs: train_idx.len(),
            heldout_pairs: held_idx.len(),
            heldout_accuracy,
        }),
    })
}

/// Featurize contrastive pairs and train on them.
pub fn train_scorer(pairs: &[ContrastivePair], cfg: &TrainConfig) -> Result<ScorerModel, ScorerError> {
    let features: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|p| {
            (
                featurize(&p.context, &p.q_pos, cfg.unit).values,
                featurize(&p.context, &p.q_neg, cfg.unit).values,
            )
        })
        .collect();
    train_on_features(&features, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;

    fn ctx(text: &str) -> Context {
        Context::from_text("d#0", "d", text, LengthUnit::Words)
    }

    #[test]
    fn loss_values() {
        assert!((pairwise_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        // ln(1 + e^-1), evaluated with mpmath at 30 digits.
        assert!((pairwise_loss(1.0, 0.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
        let tiny = pairwise_loss(50.0, 0.0);
        assert!(tiny > 0.0 && tiny <= 1e-20);
        assert!((pairwise_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn loss_is_translation_invariant() {
        for (a, b) in [(0.1, 2.0), (-3.0, 4.5), (10.0, 9.0)] {
            assert!((pairwise_loss(a, b) - pairwise_loss(a + 7.25, b + 7.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_query_features_are_zero() {
        let f = featurize(&ctx("Some context here."), "", LengthUnit::Words);
        assert_eq!(f.values, vec![0.0; FEATURE_COUNT]);
        assert_eq!(f.version, "v1");
    }

    #[test]
    fn identical_query_has_full_overlap() {
        let text = "The cat sat on the mat.";
        let f = featurize(&ctx(text), text, LengthUnit::Words);
        assert_eq!(f.values[2], 1.0);
        assert_eq!(f.values[3], 1.0);
        assert_eq!(f.values[1], 1.0);
    }

    #[test]
    fn scores_are_linear() {
        let c = ctx("whatever context");
        assert_eq!(ScorerModel::zeros(LengthUnit::Words).score(&c, "any query").unwrap(), 0.0);
        let mut m = ScorerModel::zeros(LengthUnit::Words);
        m.weights[0] = 1.0;
        assert_eq!(m.score(&c, "one two three four five six seven").unwrap(), 7.0);
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let mut m = ScorerModel::zeros(LengthUnit::Words);
        m.feature_version = "v0".into();
        assert!(matches!(m.score(&ctx("a"), "b"), Err(ScorerError::Version { .. })));
    }

    #[test]
    fn zero_model_has_ln2_loss_everywhere() {
        let pairs = vec![(vec![1.0, 2.0], vec![3.0, -1.0]), (vec![0.0, 0.5], vec![9.0, 9.0])];
        let (loss, _, _) = loss_and_gradient(&[0.0, 0.0], 0.0, &pairs);
        assert_eq!(loss, std::f64::consts::LN_2);
    }

    #[test]
    fn single_pair_descends_below_ln2() {
        let pairs = vec![(vec![2.0, 1.0], vec![1.0, 1.0])];
        let short = train_on_features(&pairs, &TrainConfig { epochs: 10, ..TrainConfig::default() }).unwrap();
        let long = train_on_features(&pairs, &TrainConfig { epochs: 200, ..TrainConfig::default() }).unwrap();
        let (ls, ll) = (
            short.training_meta.unwrap().final_loss,
            long.training_meta.as_ref().unwrap().final_loss,
        );
        assert!(ls < std::f64::consts::LN_2);
        assert!(ll < ls);
        assert_eq!(long.training_meta.unwrap().heldout_pairs, 0);
    }

    #[test]
    fn non_finite_features_name_the_pair() {
        let pairs = vec![(vec![1.0], vec![0.0]), (vec![f64::NAN], vec![0.0])];
        match train_on_features(&pairs, &TrainConfig::default()) {
            Err(ScorerError::NonFinite { pair, .. }) => assert_eq!(pair, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(train_on_features(&[], &TrainConfig::default()), Err(ScorerError::NoPairs)));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let pairs: Vec<_> = (0..40)
            .map(|i| {
                let x = i as f64 * 0.1;
                (vec![x + 1.0, x.sin()], vec![x, x.cos()])
            })
            .collect();
        let a = train_on_features(&pairs, &TrainConfig::default()).unwrap();
        let b = train_on_features(&pairs, &TrainConfig::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn holdout_split_sizes() {
        let (t, h) = holdout_split(10, 0.2, 1);
        assert_eq!((t.len(), h.len()), (8, 2));
        let (t, h) = holdout_split(1, 0.5, 1);
        assert_eq!((t.len(), h.len()), (1, 0));
    }

    fn pool(n: usize) -> Vec<Positive> {
        (0..n)
            .map(|i| Positive {
                context: Context::from_text(format!("d#{i}"), "d", &format!("Fact {i} one. Fact {i} two."), LengthUnit::Words),
                query: format!("What about fact {i}?"),
            })
            .collect()
    }

    #[test]
    fn minimal_run_with_queue_mock() {
        let client = LlmClient::mock(MockBackend::queue([
            "Question: neg one\nContext 1: a\nContext 2: b",
            "Question: neg two\nContext 1: a\nContext 2: b",
            "Question: neg three\nContext 1: a\nContext 2: b",
        ]));
        let pairs = build_contrastive_pairs(
            &pool(1),
            &CstPromptAssets::english_default(),
            1,
            &CstConfig::default(),
            &client,
            5,
        )
        .unwrap();
        assert_eq!(pairs.len(), 3);
        let kinds: Vec<NegKind> = pairs.iter().map(|p| p.neg_kind).collect();
        assert_eq!(kinds, NegKind::ALL);
        assert_eq!(pairs[0].q_neg, "neg one");
        assert_eq!(pairs[2].q_neg, "neg three");
    }

    #[test]
    fn manipulated_prompts_are_sent() {
        let assets = CstPromptAssets::english_default();
        let weak = NegKind::WeakInstruction.manipulate(&assets);
        assert_eq!(weak.instruction, WEAK_INSTRUCTION);
        assert_eq!(weak.fewshot.len(), 3);
        let one = NegKind::OneShot.manipulate(&assets);
        assert_eq!(one.instruction, assets.instruction);
        assert_eq!(one.fewshot, assets.fewshot[..1]);
        let both = NegKind::Both.manipulate(&assets);
        assert_eq!((both.instruction.as_str(), both.fewshot.len()), (WEAK_INSTRUCTION, 1));
    }

    #[test]
    fn sampling_is_seeded_and_without_replacement() {
        let run = |seed| {
            let client = LlmClient::mock(MockBackend::splitter(1));
            build_contrastive_pairs(&pool(12), &CstPromptAssets::english_default(), 4, &CstConfig::default(), &client, seed)
                .unwrap()
        };
        let (a, b, c) = (run(9), run(9), run(10));
        assert_eq!(a, b);
        assert_ne!(
            a.iter().map(|p| &p.context.id).collect::<Vec<_>>(),
            c.iter().map(|p| &p.context.id).collect::<Vec<_>>()
        );
        for kind in NegKind::ALL {
            let ids: HashSet<&String> =
                a.iter().filter(|p| p.neg_kind == kind).map(|p| &p.context.id).collect();
            assert_eq!(ids.len(), 4);
        }
        assert!(a.iter().all(|p| p.q_pos != p.q_neg));
    }

    #[test]
    fn unparseable_negative_is_resampled() {
        // Positive 0 never parses (4 junk replies), positive 1 does.
        let mut replies = vec!["junk"; 4];
        replies.extend(["Question: n1\nContext 1: a\nContext 2:"; 3]);
        let client = LlmClient::mock(MockBackend::queue(replies));
        let cst = CstConfig::default();
        let pairs = build_contrastive_pairs(&pool(2), &CstPromptAssets::english_default(), 1, &cst, &client, 0);
        // Kind order and shuffle decide which positive meets the junk first;
        // either way every kind ends with exactly one pair.
        let pairs = pairs.unwrap();
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn small_pool_is_rejected() {
        let client = LlmClient::mock(MockBackend::splitter(0));
        assert!(matches!(
            build_contrastive_pairs(&pool(2), &CstPromptAssets::english_default(), 3, &CstConfig::default(), &client, 0),
            Err(ScorerError::InsufficientPool { .. })
        ));
    }
}
