//! Phone n-gram language model with interpolated additive smoothing.
//!
//! Conditional probabilities back off recursively to shorter histories and
//! bottom out at the uniform distribution, so every history normalizes to 1
//! exactly and every continuation (including sentence end) has nonzero
//! probability.

use std::collections::HashMap;

use super::{GraphError, Phone};

/// Sentence-start sentinel. Appears only in histories, never predicted.
pub const BOS: Phone = 0;
/// Sentence-end sentinel. Predicted, never in histories.
pub const EOS: Phone = u32::MAX;

/// Additive smoothing mass per event (the "add-k" of the interpolation).
const ADD_K: f64 = 0.1;

/// Backoff-interpolated add-k phone n-gram model.
#[derive(Debug, Clone)]
pub struct PhoneNgramLM {
    order: usize,
    num_phones: u32,
    /// ngram_counts[k-1] maps a k-token sequence (history + next) to its count.
    ngram_counts: Vec<HashMap<Vec<Phone>, u64>>,
    /// hist_counts[k-1] maps a (k-1)-token history to its total continuation count.
    hist_counts: Vec<HashMap<Vec<Phone>, u64>>,
}

/// Estimate an interpolated add-k smoothed n-gram with backoff from phone
/// transcripts. Sentence boundaries are modeled: histories are BOS-padded
/// and every transcript contributes a sentence-end event.
pub fn estimate_phone_lm(
    transcripts: &[Vec<Phone>],
    order: usize,
    num_phones: u32,
) -> Result<PhoneNgramLM, GraphError> {
    if transcripts.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    if !(1..=4).contains(&order) {
        return Err(GraphError::BadOrder(order));
    }
    let mut lm = PhoneNgramLM {
        order,
        num_phones,
        ngram_counts: vec![HashMap::new(); order],
        hist_counts: vec![HashMap::new(); order],
    };
    for t in transcripts {
        let mut padded: Vec<Phone> = vec![BOS; order - 1];
        padded.extend_from_slice(t);
        padded.push(EOS);
        // Count every k-gram ending at a real token or EOS.
        for end in (order - 1)..padded.len() {
            for k in 1..=order {
                let gram = &padded[end + 1 - k..=end];
                *lm.ngram_counts[k - 1].entry(gram.to_vec()).or_insert(0) += 1;
                *lm.hist_counts[k - 1]
                    .entry(gram[..k - 1].to_vec())
                    .or_insert(0) += 1;
            }
        }
    }
    Ok(lm)
}

impl PhoneNgramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_phones(&self) -> u32 {
        self.num_phones
    }

    /// Vocabulary size for smoothing: all phones plus sentence end.
    fn vocab_size(&self) -> f64 {
        self.num_phones as f64 + 1.0
    }

    /// P(next | history). The history may be any length; only its final
    /// `order - 1` tokens are used. `next` may be [`EOS`].
    pub fn cond_prob(&self, history: &[Phone], next: Phone) -> f64 {
        let ctx = self.order - 1;
        let h = &history[history.len().saturating_sub(ctx)..];
        self.prob_rec(h, next)
    }

    pub fn cond_log_prob(&self, history: &[Phone], next: Phone) -> f64 {
        self.cond_prob(history, next).ln()
    }

    fn prob_rec(&self, h: &[Phone], next: Phone) -> f64 {
        let kv = ADD_K * self.vocab_size();
        if h.is_empty() {
            let c = self.count(&[next]);
            let total = self.hist_count(&[]);
            return (c + ADD_K) / (total + kv);
        }
        let backoff = self.prob_rec(&h[1..], next);
        let hc = self.hist_count(h);
        if hc == 0.0 {
            return backoff;
        }
        let mut gram = Vec::with_capacity(h.len() + 1);
        gram.extend_from_slice(h);
        gram.push(next);
        (self.count(&gram) + kv * backoff) / (hc + kv)
    }

    fn count(&self, gram: &[Phone]) -> f64 {
        self.ngram_counts[gram.len() - 1]
            .get(gram)
            .copied()
            .unwrap_or(0) as f64
    }

    fn hist_count(&self, h: &[Phone]) -> f64 {
        self.hist_counts[h.len()]
            .get(h)
            .copied()
            .unwrap_or(0) as f64
    }

    /// Total log probability of a transcript including the sentence-end event.
    pub fn sequence_log_prob(&self, transcript: &[Phone]) -> f64 {
        let mut hist: Vec<Phone> = vec![BOS; self.order - 1];
        let mut lp = 0.0;
        for &p in transcript.iter().chain(std::iter::once(&EOS)) {
            lp += self.cond_log_prob(&hist, p);
            hist.push(p);
        }
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            estimate_phone_lm(&[], 3, 4),
            Err(GraphError::EmptyCorpus)
        ));
    }

    #[test]
    fn observed_event_dominates() {
        // Single transcript [1 2]: P(2 | <s> 1) beats every alternative.
        let lm = estimate_phone_lm(&[vec![1, 2]], 3, 4).unwrap();
        let hist = [BOS, 1];
        let p_observed = lm.cond_prob(&hist, 2);
        for next in [1u32, 3, 4, EOS] {
            assert!(
                p_observed > lm.cond_prob(&hist, next),
                "P(2|<s> 1) = {p_observed} not maximal vs {next}"
            );
        }
    }

    #[test]
    fn histories_normalize() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let transcripts: Vec<Vec<Phone>> = (0..50)
            .map(|_| (0..8).map(|_| rng.gen_range(1..=5)).collect())
            .collect();
        for order in 1..=4 {
            let lm = estimate_phone_lm(&transcripts, order, 5).unwrap();
            let hists: Vec<Vec<Phone>> = vec![
                vec![],
                vec![BOS, BOS, 3],
                vec![1, 2, 3],
                vec![5, 5, 5],
                vec![2],
                vec![4, 1],
            ];
            for h in &hists {
                let total: f64 = (1..=5)
                    .map(|p| lm.cond_prob(h, p))
                    .chain(std::iter::once(lm.cond_prob(h, EOS)))
                    .sum();
                assert!(
                    (total - 1.0).abs() < 1e-6,
                    "order {order} history {h:?} sums to {total}"
                );
            }
        }
    }

    #[test]
    fn uniform_two_phone_continuations_near_half() {
        // 1000 iid-uniform transcripts over 2 phones: every single-phone
        // history continues with each phone with probability near 0.5
        // (law of large numbers; EOS mass is small at length 20).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let transcripts: Vec<Vec<Phone>> = (0..1000)
            .map(|_| (0..20).map(|_| rng.gen_range(1..=2)).collect())
            .collect();
        let lm = estimate_phone_lm(&transcripts, 3, 2).unwrap();
        for h in [1u32, 2] {
            let renorm: f64 = lm.cond_prob(&[h], 1) + lm.cond_prob(&[h], 2);
            for next in [1u32, 2] {
                let p = lm.cond_prob(&[h], next) / renorm;
                assert!((p - 0.5).abs() < 0.05, "P({next}|{h}) = {p}");
            }
        }
    }

    #[test]
    fn unseen_history_backs_off() {
        let lm = estimate_phone_lm(&[vec![1, 2, 1, 2]], 3, 3).unwrap();
        // History (3, 3) was never seen; probability equals the bigram
        // backoff from history (3), which itself backs off to unigrams.
        assert_eq!(lm.cond_prob(&[3, 3], 1), lm.cond_prob(&[3], 1));
    }
}
