use bsim_core::nn::{DropoutPlacement, MaskSource, NetworkConfig, NetworkParams};
use bsim_core::rng::rng_from;
use proptest::prelude::*;
use rand::Rng;

fn placement() -> impl Strategy<Value = DropoutPlacement> {
    prop_oneof![
        Just(DropoutPlacement::None),
        Just(DropoutPlacement::AllHidden),
        Just(DropoutPlacement::SecondToLast),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn backprop_matches_central_differences(
        layers in prop::collection::vec(1usize..12, 1..4),
        input_dim in 1usize..6,
        heads in 1usize..4,
        placement in placement(),
        batch_len in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut cfg = NetworkConfig::plain(input_dim, layers);
        cfg.head_count = heads;
        cfg.dropout_placement = placement;
        cfg.dropout_rate = if placement == DropoutPlacement::None { 0.0 } else { 0.4 };
        let mut r = rng_from(seed, &[]);
        let mut net = NetworkParams::init(cfg, seed).unwrap();
        for p in net.values_mut() {
            *p = r.random_range(-1.0..1.0);
        }
        let xs: Vec<Vec<f64>> = (0..batch_len)
            .map(|_| (0..input_dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<(&[f64], f64)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), (i % 2) as f64)).collect();
        let masks: Vec<_> = (0..batch_len).map(|_| net.sample_masks(&mut r)).collect();
        let loss = |n: &NetworkParams| n.loss_and_gradient(&batch, None, MaskSource::Fixed(&masks)).unwrap();

        let (_, grad) = loss(&net);
        let h = 1e-5;
        for (j, &g) in grad.iter().enumerate() {
            let orig = net.values()[j];
            net.values_mut()[j] = orig + h;
            let up = loss(&net).0;
            net.values_mut()[j] = orig - h;
            let down = loss(&net).0;
            net.values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "param {}: analytic {} numeric {}", j, g, numeric);
        }
    }
}
