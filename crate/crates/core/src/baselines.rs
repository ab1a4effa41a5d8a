//! Comparison mask learners: greedy top-k selection with straight-through
//! gradients, hard-concrete L0 gates, and the bottom-blocks heuristic with an
//! auxiliary head.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::costs::{mask_cost, verify, CostVector};
use crate::encoder::GroupRegistry;
use crate::error::{Error, Result};

/// Hard-concrete stretch interval (γ, ζ) and concrete temperature — the
/// standard defaults of the method.
pub const HC_GAMMA: f64 = -0.1;
pub const HC_ZETA: f64 = 1.1;
pub const HC_BETA: f64 = 2.0 / 3.0;

/// Greedy budget-aware selection: walk groups in descending score order
/// (ties to the lower id) and keep every group whose addition leaves the
/// cumulative cost strictly below `tau`. The output always verifies.
pub fn ste_mask(scores: &[f64], cost: &CostVector, tau: f64) -> Vec<u8> {
    debug_assert_eq!(scores.len(), cost.per_group.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![0u8; scores.len()];
    let mut acc = 0.0;
    for j in order {
        let c = cost.per_group[j];
        if acc + c < tau {
            acc += c;
            mask[j] = 1;
        }
    }
    mask
}

/// Binary mask emitted by the forward pass while the backward pass copies
/// gradients straight through to the scores.
pub fn ste_gates_tape<S: Scalar>(tape: &mut Tape<S>, scores: Var, mask: &[u8]) -> Result<Var> {
    let vals: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
    let t = Tensor::from_f64_slice(1, vals.len(), &vals)?;
    tape.straight_through(scores, t)
}

/// One stochastic hard-concrete gate: stretched, clamped sigmoid of a
/// logistic noise sample shifted by `log_alpha`.
pub fn hc_sample(log_alpha: f64, u: f64) -> f64 {
    assert!(u > 0.0 && u < 1.0, "u must lie in (0,1)");
    let s = sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / HC_BETA);
    (s * (HC_ZETA - HC_GAMMA) + HC_GAMMA).clamp(0.0, 1.0)
}

/// Probability that the stochastic gate is open (> 0).
pub fn hc_expected_open(log_alpha: f64) -> f64 {
    sigmoid(log_alpha - HC_BETA * (-HC_GAMMA / HC_ZETA).ln())
}

/// Noise-free evaluation gate.
pub fn hc_deterministic(log_alpha: f64) -> f64 {
    (sigmoid(log_alpha) * (HC_ZETA - HC_GAMMA) + HC_GAMMA).clamp(0.0, 1.0)
}

/// Final binarization: a group is kept when its deterministic gate reaches
/// the 0.5 threshold (kept at exactly 0.5).
pub fn hc_binarize(log_alpha: f64) -> bool {
    hc_deterministic(log_alpha) >= 0.5
}

/// Deterministic L0 mask with greedy cost repair: binarize every gate, then
/// drop the kept group with the smallest log_alpha until the strict budget
/// check passes.
pub fn l0_final_mask(log_alpha: &[f64], cost: &CostVector, tau: f64) -> Result<Vec<u8>> {
    let mut mask: Vec<u8> = log_alpha.iter().map(|&a| u8::from(hc_binarize(a))).collect();
    while !verify(&mask, cost, tau) {
        let weakest = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .min_by(|(a, _), (b, _)| {
                log_alpha[*a]
                    .partial_cmp(&log_alpha[*b])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(j, _)| j);
        match weakest {
            Some(j) => mask[j] = 0,
            None => {
                return Err(Error::BudgetInfeasible {
                    subnet: 0,
                    msg: format!("tau {tau} admits no groups"),
                })
            }
        }
    }
    Ok(mask)
}

/// Tape route of the stochastic gates: `log_alpha` is a `1×N` parameter row
/// and `us` the per-group uniform draws for this step.
pub fn hc_gates_tape<S: Scalar>(tape: &mut Tape<S>, log_alpha: Var, us: &[f64]) -> Result<Var> {
    let n = tape.value(log_alpha).cols();
    if us.len() != n {
        return Err(Error::Contract(format!("{} draws for {} gates", us.len(), n)));
    }
    let logistic: Vec<f64> = us.iter().map(|&u| u.ln() - (1.0 - u).ln()).collect();
    let noise = tape.constant(Tensor::from_f64_slice(1, n, &logistic)?);
    let shifted = tape.add(log_alpha, noise)?;
    let scaled = tape.scale(shifted, 1.0 / HC_BETA);
    let s = tape.sigmoid(scaled);
    let stretched = tape.scale(s, HC_ZETA - HC_GAMMA);
    let offset = tape.constant(Tensor::full(1, n, S::from_f64(HC_GAMMA)));
    let shifted = tape.add(stretched, offset)?;
    Ok(tape.clamp01(shifted))
}

/// Quadratic penalty driving the expected open cost toward the budget:
/// `multiplier · max(0, Σ_j p_open_j·c_j − tau)²`, with the multiplier
/// normalized by tau² so its scale is criterion-independent.
pub fn l0_penalty_tape<S: Scalar>(
    tape: &mut Tape<S>,
    log_alpha: Var,
    cost: &CostVector,
    tau: f64,
    multiplier: f64,
) -> Result<Var> {
    let n = tape.value(log_alpha).cols();
    let shift = -HC_BETA * (-HC_GAMMA / HC_ZETA).ln();
    let shift_row = tape.constant(Tensor::full(1, n, S::from_f64(shift)));
    let pre = tape.add(log_alpha, shift_row)?;
    let p_open = tape.sigmoid(pre);
    let costs = tape.constant(Tensor::from_f64_slice(1, n, &cost.per_group)?);
    let weighted = tape.mul(p_open, costs)?;
    let total = tape.sum_all(weighted);
    let neg_tau = tape.constant(Tensor::scalar(S::from_f64(-tau)));
    let excess = tape.add(total, neg_tau)?;
    let r = tape.relu(excess);
    let sq = tape.mul(r, r)?;
    Ok(tape.scale(sq, multiplier / (tau * tau)))
}

/// Expected cost under the open probabilities (reporting).
pub fn l0_expected_cost(log_alpha: &[f64], cost: &CostVector) -> f64 {
    log_alpha
        .iter()
        .zip(&cost.per_group)
        .map(|(&a, &c)| hc_expected_open(a) * c)
        .sum()
}

/// All groups of blocks below `split_block` (bottom blocks kept).
pub fn aux_bottom_mask(registry: &GroupRegistry, split_block: usize) -> Result<Vec<u8>> {
    if split_block > registry.num_blocks {
        return Err(Error::Contract(format!(
            "split {split_block} exceeds {} blocks",
            registry.num_blocks
        )));
    }
    Ok(registry
        .groups()
        .iter()
        .map(|g| u8::from(g.block < split_block))
        .collect())
}

/// Deepest bottom-blocks split whose mask stays strictly under `tau`.
pub fn aux_split_for_budget(
    registry: &GroupRegistry,
    cost: &CostVector,
    tau: f64,
) -> Result<usize> {
    let mut best = None;
    for split in (1..=registry.num_blocks).rev() {
        let mask = aux_bottom_mask(registry, split)?;
        if verify(&mask, cost, tau) {
            best = Some(split);
            break;
        }
    }
    best.ok_or_else(|| Error::BudgetInfeasible {
        subnet: 0,
        msg: format!("tau {tau} admits no bottom block"),
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::Criterion;
    use crate::encoder::{EncoderConfig, Granularity};
    use crate::rng::CounterRng;

    fn cost(per_group: Vec<f64>) -> CostVector {
        CostVector {
            criterion: Criterion::Sparsity,
            per_group,
            base: 0.0,
            l_ref: None,
        }
    }

    #[test]
    fn ste_greedy_trace() {
        let c = cost(vec![1.0, 1.0, 1.0]);
        assert_eq!(ste_mask(&[3.0, 1.0, 2.0], &c, 2.5), vec![1, 0, 1]);
        assert_eq!(ste_mask(&[3.0, 1.0, 2.0], &c, 10.0), vec![1, 1, 1]);
        // ties broken by lower group id
        assert_eq!(ste_mask(&[1.0, 1.0, 0.0], &c, 1.5), vec![1, 0, 0]);
    }

    #[test]
    fn ste_mask_always_verifies() {
        let mut rng = CounterRng::new(4, &[60]);
        for _ in 0..50 {
            let n = 1 + rng.below(12);
            let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let c = cost((0..n).map(|_| 0.1 + rng.uniform()).collect());
            let tau = 0.05 + rng.uniform() * 5.0;
            let mask = ste_mask(&scores, &c, tau);
            assert!(verify(&mask, &c, tau));
        }
    }

    #[test]
    fn hc_hand_values() {
        assert!((hc_sample(0.0, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(hc_sample(40.0, 0.5), 1.0);
        assert_eq!(hc_sample(-40.0, 0.5), 0.0);
        assert!((hc_deterministic(0.0) - 0.5).abs() < 1e-12);
        assert_eq!(hc_deterministic(10.0), 1.0);
        assert!(hc_binarize(0.0), "threshold exactly 0.5 keeps the group");
        let la0 = HC_BETA * (-HC_GAMMA / HC_ZETA).ln();
        assert!((hc_expected_open(la0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hc_gate_bounded_and_p_open_monotone() {
        let mut rng = CounterRng::new(6, &[61]);
        let mut prev = 0.0;
        for i in 0..100 {
            let la = -5.0 + 0.1 * i as f64;
            let p = hc_expected_open(la);
            assert!(p > prev, "p_open must be strictly increasing");
            prev = p;
            let g = hc_sample(la, rng.open01());
            assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn l0_final_mask_repairs_to_budget() {
        let c = cost(vec![5.0, 1.0, 1.0, 1.0]);
        // all gates open, but group 0 is expensive and weakest
        let la = [0.5, 2.0, 3.0, 1.0];
        let mask = l0_final_mask(&la, &c, 4.0).unwrap();
        assert!(verify(&mask, &c, 4.0));
        assert_eq!(mask, vec![0, 1, 1, 1]);
    }

    fn registry_for(blocks: usize) -> GroupRegistry {
        let cfg = EncoderConfig {
            num_blocks: blocks,
            d_model: 16,
            input_dim: 4,
            vocab_size: 4,
            conv_kernel: 3,
            dropout_base: 0.0,
            granularity: Granularity::Component,
            max_frames: 16,
        };
        GroupRegistry::build(&cfg).unwrap()
    }

    #[test]
    fn aux_masks_select_bottom_blocks_and_nest() {
        let reg = registry_for(12);
        let m6 = aux_bottom_mask(&reg, 6).unwrap();
        for g in reg.groups() {
            assert_eq!(m6[g.id] == 1, g.block < 6);
        }
        let all = aux_bottom_mask(&reg, 12).unwrap();
        assert!(all.iter().all(|&m| m == 1));
        let m1 = aux_bottom_mask(&reg, 1).unwrap();
        for g in reg.groups() {
            assert_eq!(m1[g.id] == 1, g.block == 0);
        }
        for s in 1..12 {
            let a = aux_bottom_mask(&reg, s).unwrap();
            let b = aux_bottom_mask(&reg, s + 1).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(x <= y);
            }
        }
    }

    #[test]
    fn aux_split_respects_budget() {
        let reg = registry_for(4);
        let n = reg.len();
        let per = vec![1.0; n];
        let total: f64 = n as f64;
        let c = cost(per);
        let split = aux_split_for_budget(&reg, &c, 0.5 * total).unwrap();
        let mask = aux_bottom_mask(&reg, split).unwrap();
        assert!(verify(&mask, &c, 0.5 * total));
        // one more block would break the budget
        let bigger = aux_bottom_mask(&reg, split + 1).unwrap();
        assert!(!verify(&bigger, &c, 0.5 * total));
    }

    #[test]
    fn hc_tape_matches_pure_evaluation() {
        use crate::autodiff::ParamStore;
        let mut store: ParamStore<f64> = ParamStore::new();
        let la_vals = [0.3, -1.0, 2.0];
        let id = store
            .register("l0/0/log_alpha", Tensor::from_f64_slice(1, 3, &la_vals).unwrap())
            .unwrap();
        let us = [0.3, 0.6, 0.9];
        let mut tape = Tape::new();
        let la = tape.param(&store, id);
        let gates = hc_gates_tape(&mut tape, la, &us).unwrap();
        for j in 0..3 {
            let pure = hc_sample(la_vals[j], us[j]);
            assert!((tape.value(gates).at(0, j) - pure).abs() < 1e-12);
        }
    }
}
