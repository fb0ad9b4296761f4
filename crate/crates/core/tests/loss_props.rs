mod common;

use flowdepth::losses::{scale_invariant_loss, total_loss, LossConfig};
use flowdepth::network::{sequence_inputs, Model, ModelConfig};
use flowdepth::synth::{generate_sequence, SceneConfig};
use flowdepth::{Shape, Tensor, Var};
use proptest::prelude::*;

fn positive(seed: u64, n: usize) -> Tensor<f64> {
    let mut r = common::rng(seed);
    common::uniform(&mut r, Shape::new(1, 1, 1, n), 0.5, 60.0)
}

fn si(depth: &Tensor<f64>, truth: &Tensor<f64>, alpha: f64) -> f64 {
    scale_invariant_loss(&Var::constant(depth.clone()), truth, alpha).unwrap().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn pair_sum_matches_the_double_sum(seed in any::<u64>(), n in 1usize..=16, alpha in 0.0f64..=1.0) {
        let (d, g) = (positive(seed, n), positive(seed ^ 0x9e37, n));
        let fast = si(&d, &g, alpha);
        let slow = common::si_double_sum(d.data(), g.data(), alpha);
        prop_assert!(common::relative(fast, slow) <= 1e-9, "{} vs {}", fast, slow);
    }

    #[test]
    fn si_is_non_negative(seed in any::<u64>(), n in 2usize..=64, alpha in 0.0f64..=1.0) {
        let (d, g) = (positive(seed, n), positive(seed.wrapping_add(1), n));
        prop_assert!(si(&d, &g, alpha) >= 0.0);
    }

    #[test]
    fn full_alpha_ignores_global_scale(seed in any::<u64>(), n in 2usize..=64, k in 0.01f64..100.0) {
        let (d, g) = (positive(seed, n), positive(seed.wrapping_add(7), n));
        let base = si(&d, &g, 1.0);
        let scaled = si(&d.map(|v| v * k), &g, 1.0);
        prop_assert!(common::relative(base, scaled) <= 1e-10, "{} vs {}", base, scaled);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_loss_term_is_non_negative(seed in 0u64..1000) {
        let scene = SceneConfig {
            height: 16,
            width: 16,
            sprite_count: 2,
            sprite_height: (3, 6),
            sprite_width: (3, 6),
            length: 3,
            ..SceneConfig::default()
        };
        let s = generate_sequence::<f64>(&scene, seed).unwrap();
        let model = Model::new(ModelConfig { height: 16, width: 16, ..ModelConfig::default() }).unwrap();
        let params = model.init_params::<f64>(seed).unwrap();
        let inputs = sequence_inputs(&s.frames, &s.input_flows).unwrap();
        let outputs = model.forward_frames(&inputs, &params.vars(false)).unwrap();
        let depths: Vec<_> = s.depths.iter().collect();
        let loss = total_loss(&outputs, &inputs, &depths, &LossConfig::default()).unwrap();
        prop_assert_eq!(loss.terms.len(), 8);
        for (name, v) in &loss.terms {
            prop_assert!(*v >= 0.0 && v.is_finite(), "{} = {}", name, v);
        }
        prop_assert!(loss.total.item() >= 0.0);
    }
}
