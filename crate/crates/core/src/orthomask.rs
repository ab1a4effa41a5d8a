//! Orthogonal-softmax mask learning.
//!
//! A learnable N×N score matrix is row-softmaxed (with annealed temperature)
//! into a row-stochastic weight matrix W. Subnet m keeps the largest prefix
//! of rows whose expected cost stays strictly under its budget; the mask is
//! the elementwise sum of those rows, clamped to [0,1] when gating. An
//! orthogonality penalty pushes the selected rows toward distinct one-hot
//! vectors, at which point prefix sums become exact k-hot masks and are
//! rounded to binary.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::costs::{verify, Budget, CostVector};
use crate::error::{Error, Result};

pub const TEMP_START: f64 = 1.0;
pub const TEMP_FLOOR: f64 = 0.1;
/// ln of the per-step decay factor 0.999992 (more precisely e^(-8e-6),
/// which equals 0.999992 at that constant's printed precision).
const STEP_LOG_DECAY: f64 = -8.0e-6;

/// Annealed softmax temperature at a training step: geometric decay from 1
/// toward the 0.1 floor.
pub fn temperature(step: u64) -> f64 {
    (TEMP_START.ln() + STEP_LOG_DECAY * step as f64).exp().max(TEMP_FLOOR)
}

/// Row-stochastic weight matrix from scores (pure evaluation path; training
/// uses the tape's softmax so gradients flow into the scores).
pub fn weights(scores: &Tensor<f64>, temperature: f64) -> Result<Tensor<f64>> {
    if temperature <= 0.0 {
        return Err(Error::Domain {
            op: "weights",
            msg: format!("temperature {temperature} must be positive"),
        });
    }
    let (r, n) = (scores.rows(), scores.cols());
    let mut out = Tensor::zeros(r, n);
    for i in 0..r {
        let row = scores.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = ((row[j] - m) / temperature).exp();
            *out.at_mut(i, j) = e;
            sum += e;
        }
        for j in 0..n {
            *out.at_mut(i, j) /= sum;
        }
    }
    Ok(out)
}

/// Largest k such that the summed expected cost of rows 1..k stays strictly
/// below `tau`; also returns that prefix cost. Expected cost of a row is
/// Σ_j W_ij·c_j.
pub fn select_k(w: &Tensor<f64>, costs: &[f64], tau: f64) -> (usize, f64) {
    debug_assert_eq!(w.cols(), costs.len());
    let mut acc = 0.0;
    let mut prefix = 0.0;
    let mut k = 0;
    for i in 0..w.rows() {
        let row_cost: f64 = w.row(i).iter().zip(costs).map(|(&wv, &c)| wv * c).sum();
        acc += row_cost;
        if acc < tau {
            k = i + 1;
            prefix = acc;
        } else {
            break;
        }
    }
    (k, prefix)
}

/// Soft mask: elementwise sum of the top k rows of W.
pub fn assemble_mask(w: &Tensor<f64>, k: usize) -> Vec<f64> {
    let n = w.cols();
    let mut z = vec![0.0; n];
    for i in 0..k.min(w.rows()) {
        for (zj, &wv) in z.iter_mut().zip(w.row(i)) {
            *zj += wv;
        }
    }
    z
}

/// Closed-form orthogonality loss over the top k rows: with
/// D = W_{1:k}·W_{1:k}ᵀ, the Frobenius norm of the upper triangle of D − I,
/// sqrt(Σ_i (D_ii−1)² + Σ_{i<j} D_ij²). Zero iff the rows are distinct
/// one-hot vectors (for row-stochastic W). k = 0 returns 0 by convention.
pub fn ortho_loss_direct(w: &Tensor<f64>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let k = k.min(w.rows());
    let mut sum = 0.0;
    for i in 0..k {
        for j in i..k {
            let mut d = 0.0;
            for l in 0..w.cols() {
                d += w.at(i, l) * w.at(j, l);
            }
            let e = if i == j { d - 1.0 } else { d };
            sum += e * e;
        }
    }
    sum.sqrt()
}

/// Tape route of the orthogonality loss (the one the optimizer differentiates
/// through). `w` must be a row-stochastic tape node.
pub fn ortho_loss_tape<S: Scalar>(tape: &mut Tape<S>, w: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let rows = tape.value(w).rows();
    if k > rows {
        return Err(Error::Contract(format!("k {k} exceeds {rows} rows")));
    }
    let topk = tape.slice_rows(w, 0, k)?;
    let topk_t = tape.transpose(topk);
    let d = tape.matmul(topk, topk_t)?;
    let mut neg_eye = vec![0.0f64; k * k];
    let mut upper = vec![0.0f64; k * k];
    for i in 0..k {
        neg_eye[i * k + i] = -1.0;
        for j in i..k {
            upper[i * k + j] = 1.0;
        }
    }
    let neg_eye = tape.constant(Tensor::from_f64_slice(k, k, &neg_eye)?);
    let upper = tape.constant(Tensor::from_f64_slice(k, k, &upper)?);
    let e = tape.add(d, neg_eye)?;
    let e = tape.mul(e, upper)?;
    let sq = tape.mul(e, e)?;
    let total = tape.sum_all(sq);
    Ok(tape.sqrt(total))
}

/// Round converged soft masks to binary, one per budget.
///
/// For each subnet the prefix length k is recomputed from the current W;
/// each of the top k rows contributes its argmax column, with collisions
/// resolved by giving the later row its best not-yet-taken column. If the
/// resulting selection violates the strict budget it is repaired by dropping
/// selections from the end.
pub fn round_masks(
    w: &Tensor<f64>,
    budgets: &[Budget],
    cost: &CostVector,
) -> Result<Vec<Vec<u8>>> {
    let n = w.cols();
    let mut out = Vec::with_capacity(budgets.len());
    for (m, budget) in budgets.iter().enumerate() {
        let (k, _) = select_k(w, &cost.per_group, budget.tau);
        let mut taken: Vec<usize> = Vec::with_capacity(k);
        for i in 0..k {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                w.at(i, b)
                    .partial_cmp(&w.at(i, a))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let pick = order
                .into_iter()
                .find(|c| !taken.contains(c))
                .expect("k <= N guarantees a free column");
            taken.push(pick);
        }
        let to_mask = |sel: &[usize]| {
            let mut mask = vec![0u8; n];
            for &c in sel {
                mask[c] = 1;
            }
            mask
        };
        let mut mask = to_mask(&taken);
        while !verify(&mask, cost, budget.tau) {
            if taken.pop().is_none() {
                return Err(Error::BudgetInfeasible {
                    subnet: m,
                    msg: format!("tau {} admits no groups", budget.tau),
                });
            }
            mask = to_mask(&taken);
        }
        out.push(mask);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{BudgetSpec, Criterion};
    use crate::rng::CounterRng;

    fn budget(tau: f64) -> Budget {
        Budget {
            criterion: Criterion::Flops,
            spec: BudgetSpec::Absolute(tau),
            tau,
        }
    }

    fn cost(per_group: Vec<f64>) -> CostVector {
        CostVector {
            criterion: Criterion::Flops,
            per_group,
            base: 0.0,
            l_ref: Some(1),
        }
    }

    #[test]
    fn temperature_schedule_endpoints() {
        assert_eq!(temperature(0), 1.0);
        assert!((temperature(100_000) - (-0.8f64).exp()).abs() <= 1e-6);
        assert_eq!(temperature(300_000), TEMP_FLOOR);
        assert_eq!(temperature(1_000_000), TEMP_FLOOR);
        let mut prev = f64::INFINITY;
        for t in (0..400_000).step_by(10_000) {
            let cur = temperature(t);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn zero_scores_give_uniform_rows() {
        let w = weights(&Tensor::zeros(4, 4), 0.7).unwrap();
        for v in w.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(weights(&Tensor::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn lower_temperature_sharpens_rows() {
        let mut rng = CounterRng::new(3, &[50]);
        let s = Tensor::randn(6, 6, 1.0, &mut rng);
        let entropy = |w: &Tensor<f64>| -> f64 {
            let mut h = 0.0;
            for i in 0..w.rows() {
                for &p in w.row(i) {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
            }
            h
        };
        let h1 = entropy(&weights(&s, 1.0).unwrap());
        let h01 = entropy(&weights(&s, 0.1).unwrap());
        assert!(h01 < h1, "entropy should drop as T anneals: {h01} vs {h1}");
        let w = weights(&s, 0.1).unwrap();
        for i in 0..w.rows() {
            let sum: f64 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn select_k_hand_cases() {
        let eye = Tensor::from_f64_slice(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let c = [1.0, 2.0, 3.0];
        assert_eq!(select_k(&eye, &c, 4.0).0, 2);
        let uniform = Tensor::full(3, 3, 1.0 / 3.0);
        assert_eq!(select_k(&uniform, &c, 4.0).0, 1, "2 < 4 but 4 !< 4");
        assert_eq!(select_k(&eye, &c, 100.0).0, 3);
        assert_eq!(select_k(&eye, &c, 0.5).0, 0);
    }

    #[test]
    fn select_k_is_monotone_in_tau() {
        let mut rng = CounterRng::new(9, &[51]);
        let s = Tensor::randn(8, 8, 1.0, &mut rng);
        let w = weights(&s, 0.5).unwrap();
        let c: Vec<f64> = (0..8).map(|_| 0.5 + rng.uniform()).collect();
        let mut prev = 0usize;
        for tau10 in 1..80 {
            let tau = tau10 as f64 / 10.0;
            let (k, _) = select_k(&w, &c, tau);
            assert!(k >= prev);
            prev = k;
        }
    }

    #[test]
    fn assemble_mask_cases() {
        let eye = Tensor::from_f64_slice(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(assemble_mask(&eye, 0), vec![0.0; 3]);
        assert_eq!(assemble_mask(&eye, 2), vec![1.0, 1.0, 0.0]);
        let uniform = Tensor::full(4, 4, 0.25);
        assert_eq!(assemble_mask(&uniform, 2), vec![0.5; 4]);
    }

    #[test]
    fn mask_nesting_is_pointwise_monotone_in_k() {
        let mut rng = CounterRng::new(12, &[52]);
        let s = Tensor::randn(6, 6, 1.0, &mut rng);
        let w = weights(&s, 0.8).unwrap();
        for k in 0..6 {
            let a = assemble_mask(&w, k);
            let b = assemble_mask(&w, k + 1);
            for (x, y) in a.iter().zip(&b) {
                assert!(x <= y);
            }
        }
    }

    #[test]
    fn ortho_loss_hand_cases() {
        let one_hot = Tensor::from_f64_slice(3, 3, &[0., 1., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        assert_eq!(ortho_loss_direct(&one_hot, 3), 0.0);
        let uniform = Tensor::full(2, 2, 0.5);
        assert!((ortho_loss_direct(&uniform, 2) - 0.75f64.sqrt()).abs() < 1e-12);
        let dup = Tensor::from_f64_slice(2, 2, &[1., 0., 1., 0.]).unwrap();
        assert!((ortho_loss_direct(&dup, 2) - 1.0).abs() < 1e-15);
        assert_eq!(ortho_loss_direct(&uniform, 0), 0.0);
    }

    #[test]
    fn tape_route_matches_direct_evaluation() {
        let mut rng = CounterRng::new(21, &[53]);
        for _ in 0..100 {
            let n = 2 + rng.below(6);
            let s = Tensor::randn(n, n, 1.5, &mut rng);
            let w = weights(&s, 0.5 + rng.uniform()).unwrap();
            let k = 1 + rng.below(n);
            let mut tape: Tape<f64> = Tape::new();
            let wv = tape.constant(w.clone());
            let l = ortho_loss_tape(&mut tape, wv, k).unwrap();
            let direct = ortho_loss_direct(&w, k);
            assert!((tape.value(l).item() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn ortho_loss_zero_iff_distinct_one_hot() {
        // constructive: distinct one-hot rows -> 0; any perturbation -> > 0
        let mut w = Tensor::zeros(3, 5);
        *w.at_mut(0, 2) = 1.0;
        *w.at_mut(1, 0) = 1.0;
        *w.at_mut(2, 4) = 1.0;
        assert_eq!(ortho_loss_direct(&w, 3), 0.0);
        // non-one-hot row
        let mut w2 = w.clone();
        *w2.at_mut(0, 2) = 0.9;
        *w2.at_mut(0, 3) = 0.1;
        assert!(ortho_loss_direct(&w2, 3) > 1e-3);
        // duplicate one-hot rows
        let mut w3 = w.clone();
        *w3.at_mut(1, 0) = 0.0;
        *w3.at_mut(1, 2) = 1.0;
        assert!(ortho_loss_direct(&w3, 3) > 0.5);
    }

    #[test]
    fn rounding_takes_argmax_and_resolves_collisions() {
        let w = Tensor::from_f64_slice(2, 2, &[0.6, 0.4, 0.7, 0.3]).unwrap();
        let c = cost(vec![1.0, 1.0]);
        let masks = round_masks(&w, &[budget(3.0)], &c).unwrap();
        assert_eq!(masks[0], vec![1, 1]);
    }

    #[test]
    fn rounding_repairs_over_budget_selections() {
        // expected prefix cost is under budget (mass spread over cheap
        // columns) but the argmax lands on the expensive column
        let w = Tensor::from_f64_slice(
            3,
            3,
            &[0.34, 0.33, 0.33, 0.2, 0.4, 0.4, 0.2, 0.4, 0.4],
        )
        .unwrap();
        let c = cost(vec![10.0, 1.0, 1.0]);
        let tau = 4.5;
        let (k, prefix) = select_k(&w, &c.per_group, tau);
        assert_eq!(k, 1);
        assert!(prefix < tau);
        let masks = round_masks(&w, &[budget(tau)], &c).unwrap();
        assert!(verify(&masks[0], &c, tau));
        assert_eq!(masks[0], vec![0, 0, 0], "10-cost argmax dropped by repair");
    }

    #[test]
    fn nested_budgets_give_nested_masks() {
        let mut rng = CounterRng::new(33, &[54]);
        let n = 10;
        let s = Tensor::randn(n, n, 2.0, &mut rng);
        let w = weights(&s, 0.2).unwrap();
        let c = cost((0..n).map(|_| 0.5 + rng.uniform()).collect());
        let total: f64 = c.per_group.iter().sum();
        let masks = round_masks(&w, &[budget(0.4 * total), budget(0.7 * total)], &c).unwrap();
        for (a, b) in masks[0].iter().zip(&masks[1]) {
            assert!(a <= b, "small mask must be a subset");
        }
    }
}
