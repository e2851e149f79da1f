//! Tokenization and sentence-level ROUGE-L.

use serde::Serialize;

use crate::corpus::LengthUnit;

/// Normalized tokens: lowercase, no whitespace inside any token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

/// Lowercase and split `text`.
///
/// In word mode tokens are whitespace-delimited with leading and trailing
/// non-alphanumeric characters stripped; tokens that become empty are
/// dropped. In char mode every non-whitespace scalar value is a token.
pub fn tokenize(text: &str, unit: LengthUnit) -> TokenSeq {
    let tokens = match unit {
        LengthUnit::Words => text
            .split_whitespace()
            .filter_map(|raw| {
                let lower = raw.to_lowercase();
                let t = lower.trim_matches(|c: char| !c.is_alphanumeric());
                (!t.is_empty()).then(|| t.to_string())
            })
            .collect(),
        LengthUnit::Chars => text
            .to_lowercase()
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    };
    TokenSeq(tokens)
}

/// Longest common subsequence length, O(|a|·|b|) time and O(min) memory.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    // One row suffices: `row[j]` holds the LCS of the prefix of `long` seen
    // so far and `short[..=j]`. Short rows live on the stack.
    const STACK: usize = 32;
    if short.len() <= STACK {
        lcs_row(long, short, &mut [0u32; STACK][..short.len()])
    } else {
        lcs_row(long, short, &mut vec![0u32; short.len()])
    }
}

fn lcs_row<T: PartialEq>(long: &[T], short: &[T], row: &mut [u32]) -> usize {
    for x in long {
        let (mut diag, mut left) = (0, 0);
        for (y, cell) in short.iter().zip(row.iter_mut()) {
            let up = *cell;
            // On a match diag + 1 already dominates left and up, so the
            // branch-free max is the usual recurrence.
            left = left.max(up).max(diag + u32::from(x == y));
            diag = up;
            *cell = left;
        }
    }
    row[row.len() - 1] as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RougeScore {
    pub lcs_len: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Scores from an LCS length and the two sequence lengths.
    pub fn from_counts(lcs_len: usize, candidate_len: usize, reference_len: usize) -> Self {
        let ratio = |n: usize| if n == 0 { 0.0 } else { lcs_len as f64 / n as f64 };
        let precision = ratio(candidate_len);
        let recall = ratio(reference_len);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            lcs_len,
            precision,
            recall,
            f1,
        }
    }
}

/// ROUGE-L of `candidate` against `reference`; any empty operand scores 0.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> RougeScore {
    let lcs = lcs_length(candidate.as_slice(), reference.as_slice());
    RougeScore::from_counts(lcs, candidate.len(), reference.len())
}

pub fn rouge_l_text(candidate: &str, reference: &str, unit: LengthUnit) -> RougeScore {
    rouge_l(&tokenize(candidate, unit), &tokenize(reference, unit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &[&str]) -> TokenSeq {
        TokenSeq(s.iter().map(|t| t.to_string()).collect())
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(
            tokenize("Hello, world!", LengthUnit::Words),
            seq(&["hello", "world"])
        );
        assert!(tokenize("", LengthUnit::Words).is_empty());
        assert!(tokenize(" -- ... ", LengthUnit::Words).is_empty());
    }

    #[test]
    fn tokenize_mixed_script_fixture() {
        // Hand-tokenized.
        let text = "The “smile curve” (GVC) — 微笑曲线 ranges 20% to 25%.";
        assert_eq!(
            tokenize(text, LengthUnit::Words),
            seq(&["the", "smile", "curve", "gvc", "微笑曲线", "ranges", "20", "to", "25"])
        );
        assert_eq!(
            tokenize("微笑 AB", LengthUnit::Chars),
            seq(&["微", "笑", "a", "b"])
        );
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length(&["a", "b", "c"], &["a", "x", "c"]), 2);
        let x = ["p", "q", "p", "r"];
        assert_eq!(lcs_length(&x, &x), 4);
        assert_eq!(lcs_length(&x, &[] as &[&str]), 0);
    }

    #[test]
    fn rouge_examples() {
        let abc = seq(&["a", "b", "c"]);
        let same = rouge_l(&abc, &abc);
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));

        let disjoint = rouge_l(&abc, &seq(&["x", "y"]));
        assert_eq!((disjoint.precision, disjoint.recall, disjoint.f1), (0.0, 0.0, 0.0));

        let r = rouge_l(&abc, &seq(&["a", "x", "c"]));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_operands_score_zero() {
        let empty = TokenSeq::default();
        assert_eq!(rouge_l(&empty, &empty), RougeScore::default());
        assert_eq!(rouge_l(&seq(&["a"]), &empty).f1, 0.0);
    }

    #[test]
    fn precision_and_recall_normalize_by_the_right_side() {
        let r = rouge_l(&seq(&["a", "b"]), &seq(&["a", "b", "c", "d"]));
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
    }

    fn tokens() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..12)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn lcs_and_f1_are_symmetric(a in tokens(), b in tokens()) {
            let (ta, tb) = (TokenSeq(a.clone()), TokenSeq(b.clone()));
            prop_assert_eq!(lcs_length(&a, &b), lcs_length(&b, &a));
            prop_assert_eq!(rouge_l(&ta, &tb).f1, rouge_l(&tb, &ta).f1);
            prop_assert!(lcs_length(&a, &b) <= a.len().min(b.len()));
        }

        #[test]
        fn shared_suffix_never_lowers_lcs(a in tokens(), b in tokens(), t in "[a-d]") {
            let before = lcs_length(&a, &b);
            let (mut a2, mut b2) = (a, b);
            a2.push(t.clone());
            b2.push(t);
            prop_assert!(lcs_length(&a2, &b2) > before);
        }

        #[test]
        fn tokenization_is_idempotent(text in "\\PC{0,40}") {
            for unit in [LengthUnit::Words, LengthUnit::Chars] {
                let once = tokenize(&text, unit);
                let sep = if unit == LengthUnit::Words { " " } else { "" };
                let twice = tokenize(&once.0.join(sep), unit);
                prop_assert_eq!(&once, &twice);
                prop_assert!(once.0.iter().all(|t| !t.chars().any(char::is_whitespace)));
            }
        }
    }
}
