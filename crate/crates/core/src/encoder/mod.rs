//! Conformer-lite CTC encoder with parameters partitioned into maskable
//! groups, supporting gated (soft or hard mask) and structurally pruned
//! execution paths.

mod config;
mod groups;
mod model;

pub use config::{
    subsampled_len, EncoderConfig, Granularity, FFN_MULT, FRONTEND_KERNEL, FRONTEND_PAD,
    FRONTEND_STRIDE,
};
pub use groups::{
    chunk_param_names, conv_param_names, head_param_names, GroupRegistry, Kind, ParameterGroup,
};
pub use model::{
    build, check_mask, mask_gates, BlockArch, DropoutCtx, Encoder, ForwardOpts, Gate, LayerDropCtx,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Scalar, Tape, Tensor};
    use crate::rng::CounterRng;

    fn toy_config(granularity: Granularity) -> EncoderConfig {
        EncoderConfig {
            num_blocks: 2,
            d_model: 16,
            input_dim: 6,
            vocab_size: 5,
            conv_kernel: 5,
            dropout_base: 0.1,
            granularity,
            max_frames: 32,
        }
    }

    fn random_features<S: Scalar>(frames: usize, dims: usize, seed: u64) -> Tensor<S> {
        let mut rng = CounterRng::new(seed, &[400]);
        Tensor::randn(frames, dims, 1.0, &mut rng)
    }

    fn forward_values<S: Scalar>(
        enc: &Encoder,
        store: &ParamStore<S>,
        feats: &Tensor<S>,
        opts: &ForwardOpts<S>,
    ) -> Tensor<S> {
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, store, feats, opts).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn output_shape_is_frames_by_classes() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, _) = build::<f64>(&cfg, 1).unwrap();
        let feats = random_features(9, cfg.input_dim, 2);
        let out = forward_values(&enc, &store, &feats, &ForwardOpts::eval());
        assert_eq!(out.shape(), [subsampled_len(9), cfg.classes()]);
        // rows are log-probabilities
        for r in 0..out.rows() {
            let s: f64 = out.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_mask_is_bitwise_equal_to_ungated() {
        for gran in [Granularity::Layer, Granularity::Component] {
            let cfg = toy_config(gran);
            let (enc, store, registry) = build::<f32>(&cfg, 3).unwrap();
            let feats = random_features(11, cfg.input_dim, 4);
            let plain = forward_values(&enc, &store, &feats, &ForwardOpts::eval());
            let ones = vec![1u8; registry.len()];
            let gates = mask_gates::<f32>(&ones);
            let gated = forward_values(
                &enc,
                &store,
                &feats,
                &ForwardOpts {
                    gates: Some(&gates),
                    dropout: None,
                },
            );
            assert_eq!(plain, gated);
        }
    }

    #[test]
    fn all_zero_layer_mask_reduces_to_frontend_plus_head() {
        let cfg = toy_config(Granularity::Layer);
        let (enc, store, registry) = build::<f64>(&cfg, 5).unwrap();
        let feats = random_features(10, cfg.input_dim, 6);
        let zeros = vec![0u8; registry.len()];
        let gates = mask_gates::<f64>(&zeros);
        let masked = forward_values(
            &enc,
            &store,
            &feats,
            &ForwardOpts {
                gates: Some(&gates),
                dropout: None,
            },
        );
        // same seed with zero blocks initializes identical frontend/head params
        let mut shallow = cfg.clone();
        shallow.num_blocks = 0;
        let (enc0, store0, _) = build::<f64>(&shallow, 5).unwrap();
        let bare = forward_values(&enc0, &store0, &feats, &ForwardOpts::eval());
        assert!(masked.max_abs_diff(&bare) < 1e-12);
    }

    #[test]
    fn prune_equals_masked_forward_on_random_masks() {
        for gran in [Granularity::Layer, Granularity::Component] {
            let cfg = toy_config(gran);
            let (enc, store, registry) = build::<f64>(&cfg, 7).unwrap();
            let feats = random_features(12, cfg.input_dim, 8);
            let mut rng = CounterRng::new(77, &[gran as u64]);
            for _ in 0..20 {
                let mask: Vec<u8> = (0..registry.len()).map(|_| rng.below(2) as u8).collect();
                let gates = mask_gates::<f64>(&mask);
                let masked = forward_values(
                    &enc,
                    &store,
                    &feats,
                    &ForwardOpts {
                        gates: Some(&gates),
                        dropout: None,
                    },
                );
                let (pruned, pstore) = enc.structural_prune(&store, &registry, &mask).unwrap();
                let direct = forward_values(&pruned, &pstore, &feats, &ForwardOpts::eval());
                assert!(
                    masked.max_abs_diff(&direct) <= 1e-10,
                    "prune/mask mismatch {granularity:?}",
                    granularity = gran
                );
            }
        }
    }

    #[test]
    fn prune_all_ones_is_parameter_identical() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, registry) = build::<f64>(&cfg, 9).unwrap();
        let mask = vec![1u8; registry.len()];
        let (_, pstore) = enc.structural_prune(&store, &registry, &mask).unwrap();
        assert_eq!(pstore.len(), store.len());
        for (id, name, value) in store.iter() {
            let pid = pstore.id(name).unwrap();
            assert_eq!(pstore.value(pid), value, "{name} differs ({id:?})");
        }
    }

    #[test]
    fn prune_drops_chunk_parameters() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, registry) = build::<f64>(&cfg, 11).unwrap();
        let mut mask = vec![1u8; registry.len()];
        let gid = registry.index_of(0, Kind::Ffn1, 0).unwrap();
        mask[gid] = 0;
        let (pruned, pstore) = enc.structural_prune(&store, &registry, &mask).unwrap();
        assert!(pstore.id("block0/ffn1/0/w1").is_none());
        assert!(pstore.id("block0/ffn1/1/w1").is_some());
        assert_eq!(pruned.blocks[0].ffn1.chunks.len(), cfg.num_chunks() - 1);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, registry) = build::<f64>(&cfg, 1).unwrap();
        let mut mask = vec![1u8; registry.len()];
        mask[0] = 2;
        assert!(enc.structural_prune(&store, &registry, &mask).is_err());
    }

    #[test]
    fn mask_length_mismatch_is_contract_error() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, _) = build::<f64>(&cfg, 1).unwrap();
        let gates = mask_gates::<f64>(&[1, 0, 1]);
        let feats = random_features(6, cfg.input_dim, 2);
        let mut tape = Tape::new();
        let r = enc.forward(
            &mut tape,
            &store,
            &feats,
            &ForwardOpts {
                gates: Some(&gates),
                dropout: None,
            },
        );
        assert!(matches!(r, Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn aux_head_shapes_and_bounds() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, _) = build::<f64>(&cfg, 13).unwrap();
        let feats = random_features(9, cfg.input_dim, 3);
        for split in 1..=cfg.num_blocks {
            let mut tape = Tape::new();
            let out = enc
                .aux_head_forward(&mut tape, &store, &feats, split, &ForwardOpts::eval())
                .unwrap();
            assert_eq!(tape.value(out).shape(), [subsampled_len(9), cfg.classes()]);
        }
        let mut tape: Tape<f64> = Tape::new();
        assert!(enc
            .aux_head_forward(&mut tape, &store, &feats, 0, &ForwardOpts::eval())
            .is_err());
        assert!(enc
            .aux_head_forward(&mut tape, &store, &feats, cfg.num_blocks + 1, &ForwardOpts::eval())
            .is_err());
    }

    #[test]
    fn rebuild_is_deterministic() {
        let cfg = toy_config(Granularity::Component);
        let (_, s1, r1) = build::<f64>(&cfg, 21).unwrap();
        let (_, s2, r2) = build::<f64>(&cfg, 21).unwrap();
        assert_eq!(r1.len(), r2.len());
        for (a, b) in r1.groups().iter().zip(r2.groups()) {
            assert_eq!(a, b);
        }
        for (id, name, v) in s1.iter() {
            assert_eq!(s2.name(id), name);
            assert_eq!(s2.value(id), v);
        }
    }

    #[test]
    fn training_forward_with_dropout_stays_finite_and_replays() {
        let cfg = toy_config(Granularity::Component);
        let (enc, store, registry) = build::<f64>(&cfg, 23).unwrap();
        let feats = random_features(10, cfg.input_dim, 5);
        let droppable = vec![true; 4 * cfg.num_blocks];
        let run = |step: u64| {
            let ctx = DropoutCtx {
                seed: 99,
                step,
                model_tag: 0,
                base_rate: 0.2,
                ffn_rates: None,
                layer_drop: Some(LayerDropCtx {
                    p: 0.5,
                    droppable: &droppable,
                }),
            };
            let ones = vec![1u8; registry.len()];
            let gates = mask_gates::<f64>(&ones);
            forward_values(
                &enc,
                &store,
                &feats,
                &ForwardOpts {
                    gates: Some(&gates),
                    dropout: Some(ctx),
                },
            )
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a, b, "same (seed, step, site) must replay identically");
        let c = run(4);
        assert!(a.max_abs_diff(&c) > 0.0, "different steps draw new masks");
        assert!(a.all_finite());
    }
}
