//! CTC loss over the blank-augmented lattice.
//!
//! The forward (alpha) recursion runs in log space on the autodiff tape, so
//! the gradient comes from the same reverse-mode machinery as every other
//! loss term. `ctc_brute_force` is the independent oracle: it enumerates all
//! (V+1)^T label paths and sums the probability of those collapsing to the
//! target.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Minimum number of frames that can emit `labels`: one per label plus one
/// separating blank per adjacent repeat.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Negative log-likelihood −log p(labels | log_probs) on the tape.
///
/// `log_probs` is a `T×(V+1)` tape node of per-frame log posteriors with
/// blank at column 0; labels take values in `1..=V`. An empty label sequence
/// is the all-blank target.
pub fn ctc_loss<S: Scalar>(tape: &mut Tape<S>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.value(log_probs);
    let frames = lp.rows();
    let classes = lp.cols();
    if classes < 2 {
        return Err(Error::Dimension {
            op: "ctc_loss",
            msg: format!("need at least blank + 1 label, got {classes} columns"),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} outside 1..{} (0 is reserved for blank)",
            classes - 1
        )));
    }
    let needed = ctc_min_frames(labels);
    if frames < needed.max(1) {
        return Err(Error::Feasibility {
            needed: needed.max(1),
            frames,
        });
    }

    // Blank-augmented lattice: blank, y1, blank, y2, ..., blank.
    let mut lattice = Vec::with_capacity(2 * labels.len() + 1);
    lattice.push(0usize);
    for &l in labels {
        lattice.push(l);
        lattice.push(0);
    }
    let s = lattice.len();
    let ninf = S::neg_infinity();

    // alpha_0: only states 0 (blank) and 1 (first label) can start.
    let row0 = tape.gather_rows(log_probs, &[0])?;
    let emit0 = tape.gather_cols(row0, &lattice)?;
    let mut init = vec![0.0f64; s];
    for (i, v) in init.iter_mut().enumerate() {
        if i > 1 {
            *v = f64::NEG_INFINITY;
        }
    }
    let init_mask = tape.constant(Tensor::from_f64_slice(1, s, &init)?);
    let mut alpha = tape.add(emit0, init_mask)?;

    // Skip transitions s-2 -> s are allowed when the state is a label that
    // differs from the label two back.
    let mut skip_mask_vals = vec![f64::NEG_INFINITY; s];
    for (i, v) in skip_mask_vals.iter_mut().enumerate() {
        if i >= 2 && lattice[i] != 0 && lattice[i] != lattice[i - 2] {
            *v = 0.0;
        }
    }
    let skip_mask = tape.constant(Tensor::from_f64_slice(1, s, &skip_mask_vals)?);
    let ninf1 = tape.constant(Tensor::full(1, 1, ninf));
    let ninf2 = tape.constant(Tensor::full(1, 2, ninf));

    for t in 1..frames {
        let stay = alpha;
        let shift1 = if s >= 2 {
            let head = tape.slice_cols(alpha, 0, s - 1)?;
            tape.concat_cols(&[ninf1, head])?
        } else {
            ninf1
        };
        let mut acc = tape.logaddexp(stay, shift1)?;
        if s >= 3 {
            let head2 = tape.slice_cols(alpha, 0, s - 2)?;
            let shift2 = tape.concat_cols(&[ninf2, head2])?;
            let shift2 = tape.add(shift2, skip_mask)?;
            acc = tape.logaddexp(acc, shift2)?;
        }
        let row = tape.gather_rows(log_probs, &[t])?;
        let emit = tape.gather_cols(row, &lattice)?;
        alpha = tape.add(acc, emit)?;
    }

    // Accept in the final blank or the final label state.
    let tail = if s >= 2 {
        let ends = tape.gather_cols(alpha, &[s - 2, s - 1])?;
        tape.logsumexp(ends, 1)?
    } else {
        alpha
    };
    Ok(tape.scale(tail, -1.0))
}

/// Exhaustive-path CTC oracle over linear-domain frame posteriors.
///
/// Enumerates every (V+1)^T path, keeps those that collapse (dedupe repeats,
/// drop blanks) to `labels`, and returns −log of the summed probability.
/// Returns +infinity when no path produces the target. Instance size is
/// capped so the enumeration stays tractable.
pub fn ctc_brute_force(probs: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let frames = probs.rows();
    let classes = probs.cols();
    if frames > 8 || classes > 5 {
        return Err(Error::OracleSize(format!(
            "brute-force CTC limited to T<=8, V<=4; got T={frames}, V={}",
            classes - 1
        )));
    }
    let mut total = 0.0f64;
    let paths = (classes as u64).pow(frames as u32);
    let mut path = vec![0usize; frames];
    for mut code in 0..paths {
        for slot in path.iter_mut() {
            *slot = (code % classes as u64) as usize;
            code /= classes as u64;
        }
        let mut collapsed = Vec::with_capacity(frames);
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev && c != 0 {
                collapsed.push(c);
            }
            prev = c;
        }
        if collapsed == labels {
            let mut p = 1.0;
            for (t, &c) in path.iter().enumerate() {
                p *= probs.at(t, c);
            }
            total += p;
        }
    }
    Ok(-total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::rng::CounterRng;

    fn loss_of(log_rows: &[&[f64]], labels: &[usize]) -> Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let cols = log_rows[0].len();
        let data: Vec<f64> = log_rows.iter().flat_map(|r| r.iter().copied()).collect();
        let lp = tape.constant(Tensor::new(log_rows.len(), cols, data).unwrap());
        let l = ctc_loss(&mut tape, lp, labels)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn single_frame_single_label() {
        let l = loss_of(&[&[0.5f64.ln(), 0.5f64.ln()]], &[1]).unwrap();
        assert!((l - 0.69315).abs() < 5e-6, "{l}");
    }

    #[test]
    fn two_frames_one_label_uniform() {
        // alignments (a,a), (a,-), (-,a): p = 0.75
        let r = [0.5f64.ln(), 0.5f64.ln()];
        let l = loss_of(&[&r, &r], &[1]).unwrap();
        assert!((l - 0.28768).abs() < 5e-6, "{l}");
    }

    #[test]
    fn empty_target_all_blank() {
        let r = [0.5f64.ln(), 0.5f64.ln()];
        let l = loss_of(&[&r, &r], &[]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn infeasible_target_errors() {
        let r = [0.5f64.ln(), 0.5f64.ln()];
        assert!(matches!(
            loss_of(&[&r], &[1, 1]),
            Err(Error::Feasibility { .. })
        ));
        // repeat needs a separating blank: "aa" needs 3 frames
        assert!(loss_of(&[&r, &r], &[1, 1]).is_err());
    }

    #[test]
    fn brute_force_matches_dp_on_random_instances() {
        let mut rng = CounterRng::new(99, &[1]);
        for case in 0..100 {
            let frames = 1 + rng.below(6);
            let vocab = 2 + rng.below(3); // V in 2..=4
            let max_len = frames.min(3);
            let len = rng.below(max_len + 1);
            let labels: Vec<usize> = (0..len).map(|_| 1 + rng.below(vocab)).collect();
            if ctc_min_frames(&labels) > frames {
                continue;
            }
            // random positive probabilities, normalized per frame
            let mut probs = Tensor::zeros(frames, vocab + 1);
            for t in 0..frames {
                let mut sum = 0.0;
                for c in 0..=vocab {
                    let v = 0.05 + rng.uniform();
                    *probs.at_mut(t, c) = v;
                    sum += v;
                }
                for c in 0..=vocab {
                    *probs.at_mut(t, c) = probs.at(t, c) / sum;
                }
            }
            let oracle = ctc_brute_force(&probs, &labels).unwrap();
            let mut tape: Tape<f64> = Tape::new();
            let lp = tape.constant(probs.map(|v| v.ln()));
            let l = ctc_loss(&mut tape, lp, &labels).unwrap();
            let dp = tape.value(l).item();
            assert!(
                (dp - oracle).abs() < 1e-9,
                "case {case}: dp {dp} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn brute_force_impossible_target_is_infinite() {
        let probs = Tensor::from_f64_slice(1, 2, &[0.5, 0.5]).unwrap();
        assert!(ctc_brute_force(&probs, &[1, 1]).unwrap().is_infinite());
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let probs = Tensor::zeros(9, 2);
        assert!(matches!(
            ctc_brute_force(&probs, &[1]),
            Err(Error::OracleSize(_))
        ));
    }

    #[test]
    fn gradient_flows_through_lattice() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = CounterRng::new(17, &[2]);
        let id = store
            .register("logits", Tensor::randn(5, 4, 1.0, &mut rng))
            .unwrap();
        let labels = vec![2usize, 1];
        let err = crate::autodiff::grad_check(
            &mut store,
            |st, grads| {
                let mut tape = Tape::new();
                let x = tape.param(st, id);
                let lp = tape.log_softmax_rows(x);
                let l = ctc_loss(&mut tape, lp, &labels)?;
                if grads {
                    tape.backward(l, st)?;
                }
                Ok(tape.value(l).item())
            },
            1e-5,
            200,
            3,
        )
        .unwrap();
        assert!(err <= 1e-6, "worst rel err {err}");
    }
}
