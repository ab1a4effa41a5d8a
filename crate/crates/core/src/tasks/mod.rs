//! The desk-scale sequence-labeling task: a synthetic corpus of noisy class
//! prototypes, CTC loss (tape-differentiable, with an exhaustive alignment
//! oracle), greedy decoding, and label-error-rate reporting.

mod cache;
mod ctc;
mod synth;

pub use cache::{read_corpus_cache, write_corpus_cache};
pub use ctc::{ctc_brute_force, ctc_loss, ctc_min_frames};
pub use synth::{generate, generate_with_threads, Corpus, Sample, SynthConfig};

use crate::autodiff::{Scalar, Tensor};

/// Per-frame argmax, collapse consecutive repeats, drop blanks (label 0).
pub fn greedy_decode<S: Scalar>(log_probs: &Tensor<S>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best != prev && best != 0 {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Levenshtein distance by the standard dynamic program.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Σ edit distance / Σ reference length, as a percentage.
pub fn label_error_rate(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hyp/ref count mismatch");
    let mut dist = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        dist += edit_distance(h, r);
        total += r.len();
    }
    if total == 0 {
        return 0.0;
    }
    100.0 * dist as f64 / total as f64
}
