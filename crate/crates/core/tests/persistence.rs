use bsim_core::config::ExperimentConfig;
use bsim_core::dataio::checkpoint::{decode_sampler, encode_sampler};
use bsim_core::posterior::{Sampler, SamplerKind, TrainExample, TrainOptions};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = SamplerKind> {
    prop_oneof![
        Just(SamplerKind::Bootstrap),
        Just(SamplerKind::Multihead),
        Just(SamplerKind::SgdEnsemble),
        Just(SamplerKind::MultiheadSgd),
        Just(SamplerKind::McDropout),
        Just(SamplerKind::Hybrid),
    ]
}

fn build(kind: SamplerKind, members: usize, layers: Vec<usize>, dim: usize, seed: u64, train: bool) -> Sampler {
    let mut config = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    config.sampler.kind = kind;
    config.sampler.member_count = members;
    config.sampler.layer_sizes = layers;
    config.sampler.hybrid_units = 3;
    let mut sampler = Sampler::build(config.sampler_config(dim)).unwrap();
    if train {
        let data: Vec<TrainExample> = (0..16)
            .map(|id| TrainExample {
                id,
                features: (0..dim).map(|j| ((id as usize * 7 + j) % 5) as f64 / 5.0).collect(),
                label: (id % 3 == 0) as u8 as f64,
            })
            .collect();
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 4,
            optimizer: config.optimizer,
        };
        sampler.retrain(&data, &opts).unwrap();
    }
    sampler
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_preserves_predictions(
        kind in kind(),
        members in 1usize..4,
        layers in prop::collection::vec(1usize..8, 1..3),
        dim in 1usize..5,
        seed in any::<u64>(),
        train in any::<bool>(),
        contexts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..100),
    ) {
        let sampler = build(kind, members, layers, dim, seed, train);
        let bytes = encode_sampler(&sampler).unwrap();
        let back = decode_sampler(&bytes).unwrap();
        prop_assert_eq!(encode_sampler(&back).unwrap(), bytes);
        let ctx: Vec<&[f64]> = contexts.iter().map(|c| &c[..dim]).collect();
        let a = sampler.point_predict(&ctx).unwrap();
        let b = back.point_predict(&ctx).unwrap();
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn any_flipped_bit_is_rejected(at in any::<prop::sample::Index>(), bit in 0u8..8, seed in any::<u64>()) {
        let bytes = encode_sampler(&build(SamplerKind::Hybrid, 1, vec![4], 3, seed, false)).unwrap();
        let mut bad = bytes.clone();
        bad[at.index(bytes.len())] ^= 1 << bit;
        prop_assert!(decode_sampler(&bad).is_err());
    }
}
