//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use augcon::filter::ScoredQuery;
use augcon::llm::{BackendConfig, LlmClient, MockBackend};
use augcon::scorer::{Scorer, ScorerError};
use augcon::Context;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// A client that sends one request at a time, so queue mocks are consumed in
/// call order.
pub fn serial_client(mock: MockBackend) -> LlmClient {
    let cfg = BackendConfig {
        max_in_flight: 1,
        retry_backoff_ms: 0,
        ..BackendConfig::default()
    };
    LlmClient::new(std::sync::Arc::new(mock), cfg)
}

// ---------------------------------------------------------------------------
// Worked example: one context split into an eight-node tree, with scores and
// final answers.

pub const DEMO_LAMBDA: usize = 15;

pub const N1: &str = "The profits of the contemporary global value chains (GVC) form a V-shape, also known as the “smile curve”. At one end of this curve are research and development (R&D) and design, and at the other end are services and marketing, with processing and production situated in the middle. Typically, the profit margin for industries at both ends ranges from 20% to 25%, whereas the profit margin for the production processes in the middle stands at merely 5%.";
pub const N2: &str = "The profits of the contemporary global value chains (GVC) form a V-shape, also known as the “smile curve”. At one end of this curve are research and development (R&D) and design, and at the other end are services and marketing, with processing and production situated in the middle.";
pub const N3: &str = "Typically, the profit margin for industries at both ends of the global value chains ranges from 20% to 25%, whereas the profit margin for the production processes in the middle stands at merely 5%.";
pub const N4: &str = "The profits of the contemporary global value chains (GVC) form a V-shape, also known as the “smile curve”.";
pub const N5: &str = "At one end of the smile curve are research and development (R&D) and design, and at the other end are services and marketing, with processing and production situated in the middle.";
pub const N5_C1: &str = "At one end of the smile curve are research and development (R&D) and design.";
pub const N6: &str = "The other end of the smile curve are services and marketing, with processing and production situated in the middle.";
pub const N6_C1: &str = "The other end of the smile curve are services and marketing.";
pub const N6_C2: &str = "The processing and production are situated in the middle.";
pub const N7: &str = "Typically, the profit margin for industries at both ends of the global value chains ranges from 20% to 25%.";
pub const N8: &str = "Whereas the profit margin for the production processes in the middle stands at merely 5%.";

pub const Q1: &str = "Why do entrepreneurs worldwide strive to move up the value chain?";
pub const Q2: &str = "What are the key components of the contemporary global value chains?";
pub const Q3: &str = "Which type of industry has the lowest profit margin?";
pub const Q4: &str = "What does the global value curve look like?";
pub const Q5: &str = "What is the structure of the smile curve?";
pub const Q6: &str = "What lies in the middle of the smile curve?";
pub const Q7: &str = "How high can the profit margin go for industries at two ends of the global value chains?";
pub const Q8: &str = "What is the profit margin for the production processes?";

/// (node context, question, context 1, context 2) for every model call.
pub fn demo_replies() -> Vec<(&'static str, &'static str, &'static str, &'static str)> {
    vec![
        (N1, Q1, N2, N3),
        (N2, Q2, N4, N5),
        (N4, Q4, N4, ""),
        (N5, Q5, N5_C1, N6),
        (N6, Q6, N6_C1, N6_C2),
        (N3, Q3, N7, N8),
        (N7, Q7, N7, ""),
        (N8, Q8, N8, ""),
    ]
}

/// Queue mock answering each node's prompt by matching its context line.
pub fn demo_cst_mock() -> MockBackend {
    let mut script = String::new();
    for (ctx, q, c1, c2) in demo_replies() {
        let reply = format!("Question: {q}\nContext 1: {c1}\nContext 2: {c2}");
        let line = serde_json::json!({"reply": reply, "tag": "cst", "match": format!("Context: {ctx}\nQuestion: ")});
        script.push_str(&line.to_string());
        script.push('\n');
    }
    MockBackend::parse_script(&script).expect("demo script parses")
}

/// Scores in ranking-table order.
pub const DEMO_SCORES: [(&str, f64); 8] = [
    (Q1, 0.95),
    (Q2, 0.91),
    (Q7, 0.88),
    (Q4, 0.83),
    (Q3, 0.74),
    (Q5, 0.67),
    (Q8, 0.64),
    (Q6, 0.59),
];

pub const DEMO_SELECTED: [&str; 4] = [Q1, Q2, Q7, Q4];

pub struct TableScorer;

impl Scorer for TableScorer {
    fn score(&self, _ctx: &Context, query: &str) -> Result<f64, ScorerError> {
        Ok(DEMO_SCORES
            .iter()
            .find(|(q, _)| *q == query)
            .map(|(_, s)| *s)
            .expect("query present in score table"))
    }
}

pub const A1: &str = "Entrepreneurs worldwide strive to move up the value chain because the profit margins are significantly higher at the ends of the curve, ranging from 20% to 25%, compared to the middle, which has a profit margin of only 5%. By moving up the value chain, entrepreneurs can increase their profit margins and gain a competitive advantage in the market.";
pub const A2: &str = "The key components of the contemporary global value chains are:\n\n1. Research and Development (R&D) and Design (at one end of the curve)\n\n2. Processing and Production (at the other end of the curve)\n\n3. Services and Marketing (in the middle of the curve)";
pub const A3: &str = "The profit margin for industries at both ends of the global value chains can go up to 25%.";
pub const A4: &str = "It looks like a V-shape, also known as the “smile curve”.";

pub const DEMO_SFT: [(&str, &str); 4] = [(Q1, A1), (Q2, A2), (Q7, A3), (Q4, A4)];

pub fn demo_answer_mock() -> MockBackend {
    let mut script = String::new();
    for (q, a) in DEMO_SFT {
        let line = serde_json::json!({"reply": a, "tag": "respond", "match": format!("Question: {q}\nAnswer: ")});
        script.push_str(&line.to_string());
        script.push('\n');
    }
    MockBackend::parse_script(&script).expect("answer script parses")
}

// ---------------------------------------------------------------------------
// LCS by exhaustive enumeration over short sequences.

/// All sequences over `0..alphabet` of length `0..=max_len`, ordered by
/// length then lexicographically.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut layer: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(layer.len() * alphabet as usize);
        for s in &layer {
            for c in 0..alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Index of `s` in [`all_sequences`] order.
pub fn sequence_index(s: &[u8], alphabet: u8) -> usize {
    let a = alphabet as usize;
    let offset: usize = (0..s.len()).map(|l| a.pow(l as u32)).sum();
    offset + s.iter().fold(0usize, |acc, &c| acc * a + c as usize)
}

/// Distinct subsequences of every sequence, as indices sorted by length
/// descending.
pub fn subsequence_table(seqs: &[Vec<u8>], alphabet: u8) -> Vec<Vec<u32>> {
    seqs.iter()
        .map(|s| {
            let n = s.len();
            let mut ids: Vec<(usize, u32)> = (0u32..(1 << n))
                .map(|mask| {
                    let sub: Vec<u8> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| s[i]).collect();
                    (sub.len(), sequence_index(&sub, alphabet) as u32)
                })
                .collect();
            ids.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            ids.dedup();
            ids.into_iter().map(|(_, id)| id).collect()
        })
        .collect()
}

/// Plain full-table LCS, written independently of the library.
pub fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn f1_oracle(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let l = lcs_table(a, b) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / a.len() as f64;
    let r = l / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Word tokens: lowercase, split on whitespace, trim non-alphanumerics.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Independent replay of the greedy selection. `cap` of `None` scans the
/// whole pool.
pub fn greedy_oracle(pool: &[ScoredQuery], cap: Option<usize>, threshold: f64) -> Vec<String> {
    let mut order: Vec<&ScoredQuery> = pool.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.depth.cmp(&b.depth))
            .then(a.query_id.cmp(&b.query_id))
    });
    let mut kept: Vec<&ScoredQuery> = Vec::new();
    for q in order {
        if cap.is_some_and(|n| kept.len() >= n) {
            break;
        }
        let qt = word_tokens(&q.query);
        if kept
            .iter()
            .all(|k| f1_oracle(&qt, &word_tokens(&k.query)) < threshold)
        {
            kept.push(q);
        }
    }
    kept.into_iter().map(|q| q.query_id.clone()).collect()
}

/// Random query pool with deliberate overlaps and score ties.
pub fn random_pool(rng: &mut ChaCha8Rng) -> Vec<ScoredQuery> {
    const VOCAB: [&str; 10] = ["what", "is", "the", "river", "stone", "why", "does", "market", "grow", "light"];
    let n = rng.gen_range(1..40);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..7);
            let query: Vec<&str> = (0..len).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
            ScoredQuery {
                query_id: format!("q{i:02}"),
                root_context_id: "r".into(),
                context_id: format!("r/{i}"),
                query: query.join(" "),
                score: f64::from(rng.gen_range(0..12u8)) / 4.0,
                depth: rng.gen_range(0..4),
                round: 1,
                context_text: String::new(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pairwise loss gradient by central differences.

pub fn mean_loss(w: &[f64], b: f64, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    pairs
        .iter()
        .map(|(p, n)| {
            let sp: f64 = w.iter().zip(p).map(|(a, x)| a * x).sum::<f64>() + b;
            let sn: f64 = w.iter().zip(n).map(|(a, x)| a * x).sum::<f64>() + b;
            // -ln σ(sp - sn), direct form
            (1.0 + (-(sp - sn)).exp()).ln()
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Central-difference gradient in (weights, bias) with step `h`.
pub fn fd_gradient(w: &[f64], b: f64, pairs: &[(Vec<f64>, Vec<f64>)], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(w.len() + 1);
    for j in 0..w.len() {
        let mut up = w.to_vec();
        let mut dn = w.to_vec();
        up[j] += h;
        dn[j] -= h;
        g.push((mean_loss(&up, b, pairs) - mean_loss(&dn, b, pairs)) / (2.0 * h));
    }
    g.push((mean_loss(w, b + h, pairs) - mean_loss(w, b - h, pairs)) / (2.0 * h));
    g
}

pub struct GradConfig {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn random_grad_config(rng: &mut ChaCha8Rng) -> GradConfig {
    let dim = rng.gen_range(1..=8);
    let n = rng.gen_range(1..=20);
    let mut v = |k: usize, s: f64| (0..k).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
    let weights = v(dim, 1.0);
    let pairs = (0..n).map(|_| (v(dim, 2.0), v(dim, 2.0))).collect();
    let bias = rng.gen_range(-1.0..1.0);
    GradConfig { weights, bias, pairs }
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

// ---------------------------------------------------------------------------
// Linearly separable synthetic pairs.

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Positive and negative share a random base point; the positive is shifted
/// by +1 on feature 0. Both get independent N(0, 0.1²) noise.
pub fn separable_pairs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let base: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
            let mut pos: Vec<f64> = base.iter().map(|x| x + 0.1 * gaussian(rng)).collect();
            let neg: Vec<f64> = base.iter().map(|x| x + 0.1 * gaussian(rng)).collect();
            pos[0] += 1.0;
            (pos, neg)
        })
        .collect()
}
