//! Error-rate scoring by Levenshtein alignment with unit costs.
//!
//! Among all minimal-cost alignments the backtrace picks one with the most
//! diagonal moves, which makes the substitution/insertion/deletion split
//! canonical: swapping hypothesis and reference swaps insertions with
//! deletions and keeps substitutions fixed.

use std::collections::BTreeMap;

use crate::graph::Phone;

use super::HarnessError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreCounts {
    pub hits: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ScoreCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / ref_len`. An empty reference scores 0 against an
    /// empty hypothesis and 1 otherwise.
    pub fn error_rate(&self) -> f64 {
        if self.ref_len == 0 {
            return if self.edits() == 0 { 0.0 } else { 1.0 };
        }
        self.edits() as f64 / self.ref_len as f64
    }

    pub fn accumulate(&mut self, other: &ScoreCounts) {
        self.hits += other.hits;
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

/// Align one hypothesis against one reference.
pub fn score_pair(reference: &[Phone], hypothesis: &[Phone]) -> ScoreCounts {
    let n = reference.len();
    let m = hypothesis.len();
    // dp = (cost, -diag_moves), minimized lexicographically, so the
    // backtrace below recovers a diagonal-maximal minimal alignment.
    let mut dp = vec![(0usize, 0isize); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        dp[idx(i, 0)] = (i, 0);
    }
    for j in 1..=m {
        dp[idx(0, j)] = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let (dc, dd) = dp[idx(i - 1, j - 1)];
            let diag = (dc + sub_cost, dd - 1);
            let (uc, ud) = dp[idx(i - 1, j)];
            let del = (uc + 1, ud);
            let (lc, ld) = dp[idx(i, j - 1)];
            let ins = (lc + 1, ld);
            dp[idx(i, j)] = diag.min(del).min(ins);
        }
    }

    let mut counts = ScoreCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = dp[idx(i, j)];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let prev = dp[idx(i - 1, j - 1)];
            if cur == (prev.0 + sub_cost, prev.1 - 1) {
                if sub_cost == 0 {
                    counts.hits += 1;
                } else {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == (dp[idx(i - 1, j)].0 + 1, dp[idx(i - 1, j)].1) {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub total: ScoreCounts,
    pub per_utt: BTreeMap<String, ScoreCounts>,
}

impl ScoreReport {
    pub fn error_rate(&self) -> f64 {
        self.total.error_rate()
    }
}

/// Score a hypothesis set against references keyed by utterance id. Every
/// hypothesis must have a reference.
pub fn score(
    hyps: &BTreeMap<String, Vec<Phone>>,
    refs: &BTreeMap<String, Vec<Phone>>,
) -> Result<ScoreReport, HarnessError> {
    let mut total = ScoreCounts::default();
    let mut per_utt = BTreeMap::new();
    for (id, hyp) in hyps {
        let reference = refs
            .get(id)
            .ok_or_else(|| HarnessError::MissingReference(id.clone()))?;
        let counts = score_pair(reference, hyp);
        total.accumulate(&counts);
        per_utt.insert(id.clone(), counts);
    }
    Ok(ScoreReport { total, per_utt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_scores_zero() {
        let c = score_pair(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(c.edits(), 0);
        assert_eq!(c.hits, 3);
        assert_eq!(c.error_rate(), 0.0);
    }

    #[test]
    fn single_deletion() {
        // ref [a b c], hyp [a c]: one deletion, rate 1/3.
        let c = score_pair(&[1, 2, 3], &[1, 3]);
        assert_eq!(c.deletions, 1);
        assert_eq!(c.insertions, 0);
        assert_eq!(c.substitutions, 0);
        assert!((c.error_rate() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_cases() {
        assert_eq!(score_pair(&[], &[]).error_rate(), 0.0);
        let c = score_pair(&[1, 2], &[]);
        assert_eq!(c.deletions, 2);
        let c = score_pair(&[], &[1, 2]);
        assert_eq!(c.insertions, 2);
        assert_eq!(c.error_rate(), 1.0);
    }

    /// Independent oracle: plain recursive memoized edit distance.
    fn oracle_distance(a: &[Phone], b: &[Phone]) -> usize {
        fn rec(
            a: &[Phone],
            b: &[Phone],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let sub = rec(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = rec(a, b, i + 1, j, memo) + 1;
            let ins = rec(a, b, i, j + 1, memo) + 1;
            let v = sub.min(del).min(ins);
            memo.insert((i, j), v);
            v
        }
        rec(a, b, 0, 0, &mut Default::default())
    }

    #[test]
    fn random_pairs_match_independent_dp() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let n = rng.gen_range(0..12);
            let m = rng.gen_range(0..12);
            let a: Vec<Phone> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
            let b: Vec<Phone> = (0..m).map(|_| rng.gen_range(1..=4)).collect();
            let c = score_pair(&a, &b);
            assert_eq!(c.edits(), oracle_distance(&a, &b), "ref {a:?} hyp {b:?}");
            assert_eq!(c.hits + c.substitutions + c.deletions, a.len());
            assert_eq!(c.hits + c.substitutions + c.insertions, b.len());
        }
    }

    #[test]
    fn swap_symmetry() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(0..10);
            let m = rng.gen_range(0..10);
            let a: Vec<Phone> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
            let b: Vec<Phone> = (0..m).map(|_| rng.gen_range(1..=3)).collect();
            let fwd = score_pair(&a, &b);
            let rev = score_pair(&b, &a);
            assert_eq!(fwd.substitutions, rev.substitutions, "ref {a:?} hyp {b:?}");
            assert_eq!(fwd.insertions, rev.deletions, "ref {a:?} hyp {b:?}");
            assert_eq!(fwd.deletions, rev.insertions, "ref {a:?} hyp {b:?}");
        }
    }

    #[test]
    fn missing_reference_errors() {
        let mut hyps = BTreeMap::new();
        hyps.insert("u1".to_string(), vec![1u32, 2]);
        let refs = BTreeMap::new();
        assert!(matches!(
            score(&hyps, &refs),
            Err(HarnessError::MissingReference(_))
        ));
    }
}
