//! Per-group cost vectors (parameter counts or analytic MAC counts), budget
//! resolution, the strict budget check, and an instrumented measurement
//! oracle that counts MACs actually executed by a structurally pruned
//! forward pass.
//!
//! FLOPs accounting unit is the multiply-accumulate; normalization, bias and
//! activation work is excluded. Entries are integer-valued and stored as f64
//! (exact below 2^53), so additivity checks can demand exact equality.

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor};
use crate::encoder::{
    check_mask, Encoder, EncoderConfig, ForwardOpts, Granularity, GroupRegistry, Kind,
    FRONTEND_KERNEL,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Sparsity,
    Flops,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Sparsity => "sparsity",
            Criterion::Flops => "flops",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVector {
    pub criterion: Criterion,
    pub per_group: Vec<f64>,
    /// Unmaskable cost (frontend, norms/biases for sparsity; executed
    /// frontend/head MACs for FLOPs). Never counted against budgets.
    pub base: f64,
    /// Reference post-frontend frame count (FLOPs criterion only).
    pub l_ref: Option<usize>,
}

impl CostVector {
    pub fn total_maskable(&self) -> f64 {
        self.per_group.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.base + self.total_maskable()
    }
}

/// How a subnet budget is specified in configuration.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetSpec {
    /// Fraction of the total maskable cost, in (0, 1].
    Fraction(f64),
    /// Absolute cost over groups, recorded verbatim.
    Absolute(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Budget {
    pub criterion: Criterion,
    pub spec: BudgetSpec,
    /// Resolved absolute threshold over group costs.
    pub tau: f64,
}

/// Scalar-parameter count per group; base counts every unmaskable tensor.
pub fn param_cost<S: Scalar>(registry: &GroupRegistry, store: &ParamStore<S>) -> Result<CostVector> {
    let numel = |name: &str| -> Result<f64> {
        store
            .id(name)
            .map(|id| store.value(id).numel() as f64)
            .ok_or_else(|| Error::Contract(format!("parameter {name} not in store")))
    };
    let mut per_group = Vec::with_capacity(registry.len());
    for gid in 0..registry.len() {
        let mut sum = 0.0;
        for name in registry.owned_params(gid) {
            sum += numel(name)?;
        }
        per_group.push(sum);
    }
    let mut base = 0.0;
    for name in registry.base_params() {
        base += numel(name)?;
    }
    Ok(CostVector {
        criterion: Criterion::Sparsity,
        per_group,
        base,
        l_ref: None,
    })
}

fn head_macs(config: &EncoderConfig, l_ref: usize) -> f64 {
    let d = config.d_model as f64;
    let dh = config.head_dim() as f64;
    let l = l_ref as f64;
    // q/k/v/out projections plus score and context products
    l * (4.0 * d * dh) + 2.0 * l * l * dh
}

fn ffn_chunk_macs(config: &EncoderConfig, l_ref: usize) -> f64 {
    let d = config.d_model as f64;
    let ck = config.chunk_size() as f64;
    l_ref as f64 * 2.0 * d * ck
}

fn conv_macs(config: &EncoderConfig, l_ref: usize) -> f64 {
    let d = config.d_model as f64;
    let k = config.conv_kernel as f64;
    // pointwise expansion, depthwise, pointwise back
    l_ref as f64 * (d * 2.0 * d + k * d + d * d)
}

/// Analytic MACs per group for an input of `l_ref` post-frontend frames.
pub fn flops_cost(registry: &GroupRegistry, config: &EncoderConfig, l_ref: usize) -> Result<CostVector> {
    if l_ref < 1 {
        return Err(Error::Config("l_ref must be at least 1".into()));
    }
    let mut per_group = Vec::with_capacity(registry.len());
    for g in registry.groups() {
        let macs = match (registry.granularity, g.kind) {
            (_, Kind::Conv) => conv_macs(config, l_ref),
            (Granularity::Component, Kind::Mhsa) => head_macs(config, l_ref),
            (Granularity::Component, _) => ffn_chunk_macs(config, l_ref),
            (Granularity::Layer, Kind::Mhsa) => config.num_heads() as f64 * head_macs(config, l_ref),
            (Granularity::Layer, _) => config.num_chunks() as f64 * ffn_chunk_macs(config, l_ref),
        };
        per_group.push(macs);
    }
    let d = config.d_model as f64;
    let l = l_ref as f64;
    let base = l * (FRONTEND_KERNEL as f64 * config.input_dim as f64 * d)
        + l * d * d
        + l * d * config.classes() as f64;
    Ok(CostVector {
        criterion: Criterion::Flops,
        per_group,
        base,
        l_ref: Some(l_ref),
    })
}

/// Resolve a budget specification into an absolute threshold.
pub fn resolve_budget(criterion: Criterion, spec: BudgetSpec, cost: &CostVector) -> Result<Budget> {
    if criterion != cost.criterion {
        return Err(Error::Config(format!(
            "budget criterion {} does not match cost vector {}",
            criterion.name(),
            cost.criterion.name()
        )));
    }
    let tau = match spec {
        BudgetSpec::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("budget fraction {f} outside (0,1]")));
            }
            f * cost.total_maskable()
        }
        BudgetSpec::Absolute(v) => {
            if v <= 0.0 {
                return Err(Error::Config(format!("absolute budget {v} must be positive")));
            }
            v
        }
    };
    Ok(Budget {
        criterion,
        spec,
        tau,
    })
}

/// Cost of the selected groups of a binary mask.
pub fn mask_cost(mask: &[u8], cost: &CostVector) -> f64 {
    mask.iter()
        .zip(&cost.per_group)
        .filter(|(&z, _)| z == 1)
        .map(|(_, &c)| c)
        .sum()
}

/// Strict budget check: Σ selected costs < tau.
pub fn verify(mask: &[u8], cost: &CostVector, tau: f64) -> bool {
    mask_cost(mask, cost) < tau
}

/// Measurement oracle: MACs executed by matmul/conv primitives during one
/// structurally pruned forward pass over `features`.
pub fn measured_flops<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    registry: &GroupRegistry,
    mask: &[u8],
    features: &Tensor<S>,
) -> Result<u64> {
    check_mask(mask, registry.len())?;
    let (pruned, pstore) = encoder.structural_prune(store, registry, mask)?;
    let mut tape: Tape<S> = Tape::new();
    pruned.forward(&mut tape, &pstore, features, &ForwardOpts::eval())?;
    Ok(tape.macs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build;
    use crate::rng::CounterRng;

    fn cfg(d_model: usize, granularity: Granularity) -> EncoderConfig {
        EncoderConfig {
            num_blocks: 2,
            d_model,
            input_dim: 5,
            vocab_size: 4,
            conv_kernel: 3,
            dropout_base: 0.1,
            granularity,
            max_frames: 64,
        }
    }

    #[test]
    fn ffn_chunk_owns_136_parameters_at_d8() {
        let c = cfg(8, Granularity::Component);
        let (_, store, registry) = build::<f64>(&c, 1).unwrap();
        let cost = param_cost(&registry, &store).unwrap();
        let gid = registry.index_of(0, Kind::Ffn1, 0).unwrap();
        assert_eq!(cost.per_group[gid], (8 * 8 + 8 + 8 * 8) as f64);
    }

    #[test]
    fn head_ownership_matches_slicing_rules() {
        let c = cfg(64, Granularity::Component);
        let (_, store, registry) = build::<f64>(&c, 1).unwrap();
        let cost = param_cost(&registry, &store).unwrap();
        let gid = registry.index_of(0, Kind::Mhsa, 0).unwrap();
        // 4 projection slices of 64x64 plus q/k/v bias slices
        assert_eq!(cost.per_group[gid], (4 * 64 * 64 + 3 * 64) as f64);
    }

    #[test]
    fn param_costs_partition_the_build() {
        for gran in [Granularity::Layer, Granularity::Component] {
            let c = cfg(16, gran);
            let (_, store, registry) = build::<f64>(&c, 2).unwrap();
            let cost = param_cost(&registry, &store).unwrap();
            assert!(cost.per_group.iter().all(|&p| p > 0.0));
            assert_eq!(cost.total(), store.total_scalars() as f64);
        }
    }

    #[test]
    fn ffn_chunk_macs_match_hand_count() {
        let c = cfg(8, Granularity::Component);
        let (_, _, registry) = build::<f64>(&c, 1).unwrap();
        let cost = flops_cost(&registry, &c, 10).unwrap();
        let gid = registry.index_of(0, Kind::Ffn1, 0).unwrap();
        assert_eq!(cost.per_group[gid], (10 * 2 * 8 * 8) as f64);
    }

    #[test]
    fn non_attention_costs_scale_linearly_in_l_ref() {
        let c = cfg(16, Granularity::Component);
        let (_, _, registry) = build::<f64>(&c, 1).unwrap();
        let c1 = flops_cost(&registry, &c, 50).unwrap();
        let c2 = flops_cost(&registry, &c, 100).unwrap();
        for g in registry.groups() {
            let (a, b) = (c1.per_group[g.id], c2.per_group[g.id]);
            match g.kind {
                Kind::Mhsa => {
                    // projections double, score/context quadruple
                    let d = c.d_model as f64;
                    let dh = c.head_dim() as f64;
                    assert_eq!(a, 50.0 * 4.0 * d * dh + 2.0 * 2500.0 * dh);
                    assert_eq!(b, 100.0 * 4.0 * d * dh + 2.0 * 10000.0 * dh);
                }
                _ => assert_eq!(2.0 * a, b),
            }
        }
        assert_eq!(2.0 * c1.base, c2.base);
    }

    #[test]
    fn budget_resolution_and_strict_verify() {
        let cost = CostVector {
            criterion: Criterion::Sparsity,
            per_group: vec![1.0, 2.0, 3.0],
            base: 10.0,
            l_ref: None,
        };
        let b = resolve_budget(Criterion::Sparsity, BudgetSpec::Fraction(0.5), &cost).unwrap();
        assert_eq!(b.tau, 3.0);
        let b = resolve_budget(Criterion::Sparsity, BudgetSpec::Fraction(1.0), &cost).unwrap();
        assert_eq!(b.tau, 6.0);
        let b = resolve_budget(Criterion::Sparsity, BudgetSpec::Absolute(2.53e8), &cost).unwrap();
        assert_eq!(b.tau, 2.53e8);
        assert!(resolve_budget(Criterion::Sparsity, BudgetSpec::Fraction(0.0), &cost).is_err());
        assert!(resolve_budget(Criterion::Sparsity, BudgetSpec::Fraction(1.2), &cost).is_err());
        assert!(resolve_budget(Criterion::Flops, BudgetSpec::Fraction(0.5), &cost).is_err());

        assert!(verify(&[0, 0, 0], &cost, 0.5));
        assert!(verify(&[1, 1, 0], &cost, 4.0));
        assert!(!verify(&[1, 1, 1], &cost, 6.0), "equality must fail");
    }

    #[test]
    fn measured_flops_is_exactly_additive() {
        for gran in [Granularity::Layer, Granularity::Component] {
            let c = cfg(16, gran);
            let (enc, store, registry) = build::<f64>(&c, 3).unwrap();
            let l_ref = 7usize;
            let frames = 2 * l_ref; // ceil(14/2) = 7 post-frontend frames
            let cost = flops_cost(&registry, &c, l_ref).unwrap();
            let mut rng = CounterRng::new(5, &[gran as u64]);
            let feats = Tensor::randn(frames, c.input_dim, 1.0, &mut rng);

            let ones = vec![1u8; registry.len()];
            let m = measured_flops(&enc, &store, &registry, &ones, &feats).unwrap();
            assert_eq!(m as f64, cost.total());

            let zeros = vec![0u8; registry.len()];
            let m = measured_flops(&enc, &store, &registry, &zeros, &feats).unwrap();
            assert_eq!(m as f64, cost.base);

            for _ in 0..20 {
                let mask: Vec<u8> = (0..registry.len()).map(|_| rng.below(2) as u8).collect();
                let m = measured_flops(&enc, &store, &registry, &mask, &feats).unwrap();
                assert_eq!(m as f64, cost.base + mask_cost(&mask, &cost));
            }
        }
    }

    #[test]
    fn adding_a_group_strictly_increases_both_criteria() {
        let c = cfg(16, Granularity::Component);
        let (_, store, registry) = build::<f64>(&c, 4).unwrap();
        let pc = param_cost(&registry, &store).unwrap();
        let fc = flops_cost(&registry, &c, 10).unwrap();
        let mut mask = vec![0u8; registry.len()];
        for gid in 0..registry.len() {
            let before_p = mask_cost(&mask, &pc);
            let before_f = mask_cost(&mask, &fc);
            mask[gid] = 1;
            assert!(mask_cost(&mask, &pc) > before_p);
            assert!(mask_cost(&mask, &fc) > before_f);
        }
    }
}
