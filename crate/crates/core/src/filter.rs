//! Per-root query selection: pool queries from successive CST rounds, score
//! them, and keep a high-scoring set whose members are pairwise dissimilar
//! under ROUGE-L.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Context, LengthUnit};
use crate::cst::{build_tree, collect_queries, query_id, CollectedQuery, CstConfig, CstError, CstPromptAssets};
use crate::llm::LlmClient;
use crate::metrics::{rouge_l, tokenize, RougeScore, TokenSeq};
use crate::scorer::{Scorer, ScorerError};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricField {
    #[default]
    F1,
    Precision,
}

impl MetricField {
    pub fn pick(self, s: &RougeScore) -> f64 {
        match self {
            MetricField::F1 => s.f1,
            MetricField::Precision => s.precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Length units of root context per retained query.
    pub quota_ratio: usize,
    pub rouge_threshold: f64,
    pub metric_field: MetricField,
    pub max_rounds: u32,
    pub unit: LengthUnit,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            quota_ratio: 35,
            rouge_threshold: 0.7,
            metric_field: MetricField::F1,
            max_rounds: 5,
            unit: LengthUnit::Words,
        }
    }
}

impl FilterConfig {
    /// `ceil(root_len / quota_ratio)`, at least 1.
    pub fn quota(&self, root_len: usize) -> usize {
        root_len.div_ceil(self.quota_ratio.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.quota_ratio < 1 {
            return Err("filter.quota_ratio must be >= 1".into());
        }
        if !(self.rouge_threshold > 0.0 && self.rouge_threshold <= 1.0) {
            return Err("filter.rouge_threshold must lie in (0, 1]".into());
        }
        if self.max_rounds < 1 {
            return Err("filter.max_rounds must be >= 1".into());
        }
        Ok(())
    }
}

/// One line of `filtered.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub query_id: String,
    pub root_context_id: String,
    pub context_id: String,
    pub query: String,
    pub score: f64,
    pub depth: usize,
    pub round: u32,
    /// Text of the node context the query was derived from.
    pub context_text: String,
}

/// Scan order: score descending, then shallower first, then query id.
pub fn scan_order(a: &ScoredQuery, b: &ScoredQuery) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.depth.cmp(&b.depth))
        .then_with(|| a.query_id.cmp(&b.query_id))
}

/// Greedy diversity selection of at most `n` queries.
///
/// Candidates are visited in [`scan_order`]; a candidate is kept iff its
/// ROUGE-L (configured field, candidate against each kept query) is below
/// the threshold for every query kept so far.
pub fn greedy_select(scored: &[ScoredQuery], n: usize, cfg: &FilterConfig) -> Vec<ScoredQuery> {
    let mut order: Vec<&ScoredQuery> = scored.iter().collect();
    order.sort_by(|a, b| scan_order(a, b));
    let mut kept: Vec<(&ScoredQuery, TokenSeq)> = Vec::with_capacity(n.min(scored.len()));
    for cand in order {
        if kept.len() >= n {
            break;
        }
        let toks = tokenize(&cand.query, cfg.unit);
        let diverse = kept
            .iter()
            .all(|(_, k)| cfg.metric_field.pick(&rouge_l(&toks, k)) < cfg.rouge_threshold);
        if diverse {
            kept.push((cand, toks));
        }
    }
    kept.into_iter().map(|(q, _)| q.clone()).collect()
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("round {round}: {source}")]
    Cst {
        round: u32,
        #[source]
        source: CstError,
    },
    #[error("scoring `{query_id}`: {source}")]
    Score {
        query_id: String,
        #[source]
        source: ScorerError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub root_context_id: String,
    pub quota: usize,
    pub selected: Vec<ScoredQuery>,
    pub rounds: u32,
    /// Set when the round cap was hit before the quota was met.
    pub warning: Option<String>,
}

/// Sampling seed for CST round `round` (1-based) of a root.
pub fn round_seed(seed: u64, root_id: &str, round: u32) -> u64 {
    derive_seed(seed, &format!("{root_id}/round-{round}"))
}

pub fn score_collected<S: Scorer + ?Sized>(
    queries: &[CollectedQuery],
    round: u32,
    scorer: &S,
) -> Result<Vec<ScoredQuery>, FilterError> {
    queries
        .iter()
        .map(|q| {
            let id = query_id(&q.context.id, round);
            let score = scorer.score(&q.context, &q.query).map_err(|source| FilterError::Score {
                query_id: id.clone(),
                source,
            })?;
            Ok(ScoredQuery {
                query_id: id,
                root_context_id: q.root_id.clone(),
                context_id: q.context.id.clone(),
                query: q.query.clone(),
                score,
                depth: q.depth,
                round,
                context_text: q.context.text.clone(),
            })
        })
        .collect()
}

/// Run CST rounds on `root` until `quota` diverse queries are selected or the
/// round cap is reached. `first_round`, when given, stands in for round 1.
#[allow(clippy::too_many_arguments)]
pub fn filter_root<S: Scorer + ?Sized>(
    root: &Context,
    assets: &CstPromptAssets,
    scorer: &S,
    cfg: &FilterConfig,
    cst: &CstConfig,
    client: &LlmClient,
    seed: u64,
    first_round: Option<Vec<CollectedQuery>>,
) -> Result<FilterOutcome, FilterError> {
    let quota = cfg.quota(root.length);
    let mut pool: Vec<ScoredQuery> = Vec::new();
    let mut selected = Vec::new();
    let mut first_round = first_round;
    let mut rounds = 0;
    for round in 1..=cfg.max_rounds {
        rounds = round;
        let collected = match first_round.take() {
            Some(q) if round == 1 => q,
            _ => {
                let round_cfg = CstConfig {
                    params: cst.params.with_seed(round_seed(seed, &root.id, round)),
                    ..*cst
                };
                let tree = build_tree(root, assets, &round_cfg, client)
                    .map_err(|source| FilterError::Cst { round, source })?;
                collect_queries(&tree)
            }
        };
        pool.extend(score_collected(&collected, round, scorer)?);
        selected = greedy_select(&pool, quota, cfg);
        if selected.len() >= quota {
            break;
        }
    }
    let warning = (selected.len() < quota).then(|| {
        let msg = format!(
            "root `{}`: selected {} of {} queries after {} rounds",
            root.id,
            selected.len(),
            quota,
            rounds
        );
        log::warn!("{msg}");
        msg
    });
    Ok(FilterOutcome {
        root_context_id: root.id.clone(),
        quota,
        selected,
        rounds,
        warning,
    })
}

/// Concatenate per-root selections ordered by root id, keeping each root's
/// retention order. No deduplication across roots.
pub fn consolidate(per_root: Vec<Vec<ScoredQuery>>) -> Vec<ScoredQuery> {
    let mut groups: Vec<Vec<ScoredQuery>> = per_root.into_iter().filter(|g| !g.is_empty()).collect();
    groups.sort_by(|a, b| a[0].root_context_id.cmp(&b[0].root_context_id));
    groups.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;
    use crate::scorer::ScorerModel;

    fn sq(id: &str, query: &str, score: f64, depth: usize) -> ScoredQuery {
        ScoredQuery {
            query_id: id.into(),
            root_context_id: "r".into(),
            context_id: id.into(),
            query: query.into(),
            score,
            depth,
            round: 1,
            context_text: String::new(),
        }
    }

    fn ids(v: &[ScoredQuery]) -> Vec<&str> {
        v.iter().map(|q| q.query_id.as_str()).collect()
    }

    #[test]
    fn quota_rule() {
        let cfg = FilterConfig::default();
        assert_eq!(cfg.quota(0), 1);
        assert_eq!(cfg.quota(10), 1);
        assert_eq!(cfg.quota(35), 1);
        assert_eq!(cfg.quota(36), 2);
        assert_eq!(cfg.quota(500), 15);
    }

    #[test]
    fn identical_queries_keep_one() {
        let pool: Vec<_> = (0..5).map(|i| sq(&format!("q{i}"), "same words here", i as f64, 0)).collect();
        let out = greedy_select(&pool, 3, &FilterConfig::default());
        assert_eq!(ids(&out), ["q4"]);
    }

    #[test]
    fn disjoint_queries_keep_top_n() {
        let words = ["alpha", "beta", "gamma", "delta", "epsilon"];
        let pool: Vec<_> = words.iter().enumerate().map(|(i, w)| sq(w, w, i as f64, 0)).collect();
        let out = greedy_select(&pool, 3, &FilterConfig::default());
        assert_eq!(ids(&out), ["epsilon", "delta", "gamma"]);
    }

    #[test]
    fn hand_traced_overlap_structure() {
        // F1 values computed by hand from LCS over word tokens:
        //   a vs b: lcs 4 of 5/5 -> 0.8 (reject b)
        //   a vs c: lcs 2 of 5/4 -> 0.444 (keep c)
        //   d vs a: lcs 2 of 4/5 -> 0.444, d vs c: 0 -> keep d
        //   e vs c: lcs 3 of 4/4 -> 0.75 (reject e)
        //   f vs a, c, d: all 0 -> keep f, quota reached
        let pool = vec![
            sq("a", "how do plants make food", 0.9, 0),
            sq("b", "how do plants make sugar", 0.8, 1),
            sq("c", "why is sky blue", 0.7, 1),
            sq("d", "how do animals eat", 0.6, 2),
            sq("e", "why is sea blue", 0.5, 2),
            sq("f", "name one noble gas", 0.4, 2),
        ];
        let out = greedy_select(&pool, 4, &FilterConfig::default());
        assert_eq!(ids(&out), ["a", "c", "d", "f"]);
    }

    #[test]
    fn precision_field_is_configurable() {
        // "blue sky" vs "why is the sky blue today": P of the short one = 1/2.
        let pool = vec![sq("a", "why is the sky blue today", 1.0, 0), sq("b", "sky blue", 0.5, 0)];
        let f1 = greedy_select(&pool, 2, &FilterConfig::default());
        assert_eq!(f1.len(), 2);
        let precision = FilterConfig { metric_field: MetricField::Precision, ..FilterConfig::default() };
        assert_eq!(greedy_select(&pool, 2, &precision).len(), 1);
    }

    #[test]
    fn ties_prefer_shallow_then_id() {
        let pool = vec![sq("z", "one", 1.0, 2), sq("y", "two", 1.0, 1), sq("x", "three", 1.0, 1)];
        let out = greedy_select(&pool, 3, &FilterConfig::default());
        assert_eq!(ids(&out), ["x", "y", "z"]);
    }

    #[test]
    fn selection_is_idempotent() {
        let pool = vec![
            sq("a", "how do plants make food", 0.9, 0),
            sq("b", "how do plants make sugar", 0.8, 1),
            sq("c", "why is sky blue", 0.7, 1),
        ];
        let cfg = FilterConfig::default();
        let once = greedy_select(&pool, 3, &cfg);
        assert_eq!(greedy_select(&once, 3, &cfg), once);
    }

    fn root(sentences: usize) -> Context {
        let text: Vec<String> = (0..sentences).map(|i| format!("Sentence number {i} is here.")).collect();
        Context::from_text("doc#0", "doc", &text.join(" "), LengthUnit::Words)
    }

    fn small_lambda() -> CstConfig {
        CstConfig { lambda: 1, ..CstConfig::default() }
    }

    #[test]
    fn one_round_fills_quota_with_splitter() {
        // 4 sentences of 5 words: 20 words, ratio 5 -> N = 4 <= 7 queries.
        let client = LlmClient::mock(MockBackend::splitter(3));
        let cfg = FilterConfig { quota_ratio: 5, ..FilterConfig::default() };
        let model = ScorerModel::zeros(LengthUnit::Words);
        let out = filter_root(&root(4), &CstPromptAssets::english_default(), &model, &cfg, &small_lambda(), &client, 1, None)
            .unwrap();
        assert_eq!(out.quota, 4);
        assert_eq!(out.selected.len(), 4);
        assert_eq!(out.rounds, 1);
        assert!(out.warning.is_none());
    }

    #[test]
    fn short_root_keeps_one() {
        let client = LlmClient::mock(MockBackend::splitter(3));
        let model = ScorerModel::zeros(LengthUnit::Words);
        let out = filter_root(&root(2), &CstPromptAssets::english_default(), &model, &FilterConfig::default(), &small_lambda(), &client, 1, None)
            .unwrap();
        assert_eq!(out.quota, 1);
        assert_eq!(out.selected.len(), 1);
        assert_eq!(out.selected[0].depth, 0);
    }

    #[test]
    fn saturated_mock_hits_round_cap() {
        let mock = MockBackend::parse_script(
            r#"{"rule":"fixed","template":"Question: Same question?\nContext 1: x\nContext 2:"}"#,
        )
        .unwrap();
        let client = LlmClient::mock(mock);
        let cfg = FilterConfig { quota_ratio: 5, ..FilterConfig::default() };
        let model = ScorerModel::zeros(LengthUnit::Words);
        let out = filter_root(&root(4), &CstPromptAssets::english_default(), &model, &cfg, &small_lambda(), &client, 1, None)
            .unwrap();
        assert_eq!(out.rounds, 5);
        assert_eq!(out.selected.len(), 1);
        assert!(out.warning.is_some());
    }

    #[test]
    fn consolidate_orders_by_root_and_keeps_duplicates() {
        let mut a: Vec<_> = (0..3).map(|i| sq(&format!("b{i}"), "dup", 1.0, 0)).collect();
        a.iter_mut().for_each(|q| q.root_context_id = "b".into());
        let mut b: Vec<_> = (0..4).map(|i| sq(&format!("a{i}"), "dup", 1.0, 0)).collect();
        b.iter_mut().for_each(|q| q.root_context_id = "a".into());
        let out = consolidate(vec![a, b]);
        assert_eq!(ids(&out), ["a0", "a1", "a2", "a3", "b0", "b1", "b2"]);
        assert!(consolidate(vec![]).is_empty());
    }
}
