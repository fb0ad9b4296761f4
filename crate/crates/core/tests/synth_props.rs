mod common;

use flowdepth::image::bilinear_warp;
use flowdepth::synth::{generate_sequence, SceneConfig, SequenceSample};
use proptest::prelude::*;

fn scene(speed: f64, focal: f64) -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 64,
        camera_speed: speed,
        focal,
        sprite_height: (4, 12),
        sprite_width: (4, 16),
        ..SceneConfig::default()
    }
}

fn masked(s: &SequenceSample<f64>, t: usize) -> Vec<usize> {
    s.masks[t].data().iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, _)| i).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ground_truth_flow_explains_the_frames(seed in any::<u64>(), speed in -0.5f64..0.5) {
        let s = generate_sequence::<f64>(&scene(speed, 100.0), seed).unwrap();
        for t in 1..s.len() {
            let warped = bilinear_warp(&s.frames[t - 1], &s.flows[t]).unwrap();
            let idx = masked(&s, t);
            prop_assert!(!idx.is_empty());
            let mut err = 0.0;
            for c in 0..3 {
                for &i in &idx {
                    err += (warped.plane(0, c)[i] - s.frames[t].plane(0, c)[i]).abs();
                }
            }
            let mean = err / (3 * idx.len()) as f64;
            prop_assert!(mean <= 0.02, "frame {}: {}", t, mean);
        }
    }

    #[test]
    fn displacement_follows_inverse_depth(seed in any::<u64>(), speed in 0.05f64..0.5, focal in 20.0f64..200.0) {
        let c = scene(speed, focal);
        let s = generate_sequence::<f64>(&c, seed).unwrap();
        let expect = focal * speed;
        for t in 1..s.len() {
            for i in masked(&s, t) {
                let (u, v) = (s.flows[t].plane(0, 0)[i], s.flows[t].plane(0, 1)[i]);
                let z = s.depths[t].data()[i];
                prop_assert_eq!(v, 0.0);
                prop_assert!(common::relative((u * z).abs(), expect) <= 1e-6, "u={} z={}", u, z);
                prop_assert!(common::relative(u.abs(), c.displacement(z)) <= 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_depth_is_carried_exactly(seed in any::<u64>(), speed in -0.5f64..0.5) {
        let s = generate_sequence::<f64>(&scene(speed, 100.0), seed).unwrap();
        for t in 1..s.len() {
            let carried = bilinear_warp(&s.depths[t - 1], &s.flows[t]).unwrap();
            for i in masked(&s, t) {
                prop_assert!((carried.data()[i] - s.depths[t].data()[i]).abs() <= 1e-9);
            }
        }
    }
}
