mod common;

use flowdepth::image::{bilinear_warp, eval};
use flowdepth::{Shape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_flow_warp_is_bitwise_identity(seed in any::<u64>(), c in 1usize..4, h in 1usize..10, w in 1usize..10) {
        let mut r = common::rng(seed);
        let src = common::uniform(&mut r, Shape::new(2, c, h, w), -1e3, 1e3);
        let flow = Tensor::zeros(Shape::new(2, 2, h, w));
        let out = bilinear_warp(&src, &flow).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&out), bits(&src));
    }

    #[test]
    fn warp_stays_within_source_range(seed in any::<u64>(), h in 2usize..8, w in 2usize..8) {
        let mut r = common::rng(seed);
        let src = common::uniform(&mut r, Shape::new(1, 1, h, w), -2.0, 3.0);
        let flow = common::uniform(&mut r, Shape::new(1, 2, h, w), -10.0, 10.0);
        let out = bilinear_warp(&src, &flow).unwrap();
        let lo = src.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = src.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn confidence_lies_in_unit_interval(seed in any::<u64>(), eps in 0.01f64..10.0) {
        let mut r = common::rng(seed);
        let shape = Shape::new(1, 3, 5, 6);
        let a = common::uniform(&mut r, shape, 0.0, 1.0);
        let b = common::uniform(&mut r, shape, 0.0, 1.0);
        let conf = eval::matching_confidence(&a, &b, eps).unwrap();
        prop_assert_eq!(conf.shape(), Shape::new(1, 1, 5, 6));
        prop_assert!(conf.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let same = eval::matching_confidence(&a, &a, eps).unwrap();
        prop_assert!(same.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downsampling_a_constant_gives_the_constant(v in -100.0f64..100.0, hh in 1usize..6, hw in 1usize..6, flow in any::<bool>()) {
        let x = Tensor::full(Shape::new(1, 2, 2 * hh, 2 * hw), v);
        let y = eval::downsample2x(&x, flow).unwrap();
        let expect = if flow { v * 0.5 } else { v };
        prop_assert_eq!(y.shape(), Shape::new(1, 2, hh, hw));
        prop_assert!(y.data().iter().all(|&o| o == expect));
    }

    #[test]
    fn downsampling_preserves_the_mean(seed in any::<u64>(), hh in 1usize..6, hw in 1usize..6) {
        let mut r = common::rng(seed);
        let x = common::dyadic(&mut r, Shape::new(1, 1, 2 * hh, 2 * hw), 256);
        let y = eval::downsample2x(&x, false).unwrap();
        prop_assert_eq!(y.mean(), x.mean());
    }

    #[test]
    fn laplacian_of_an_affine_image_vanishes_inside(
        a in -64i32..64, b in -64i32..64, c in -64i32..64, h in 3usize..9, w in 3usize..9,
    ) {
        let img = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            (a + b * x as i32 + c * y as i32) as f64 / 8.0
        });
        let lap = eval::laplacian(&img).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                prop_assert_eq!(lap.at(0, 0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn ssim_is_bounded_and_one_on_itself(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut r = common::rng(seed);
        let shape = Shape::new(1, 3, h, w);
        let x = common::uniform(&mut r, shape, 0.0, 1.0);
        let y = common::uniform(&mut r, shape, 0.0, 1.0);
        let same = eval::ssim(&x, &x).unwrap();
        prop_assert!(same.data().iter().all(|&v| (v - 1.0).abs() <= 1e-6));
        let cross = eval::ssim(&x, &y).unwrap();
        prop_assert!(cross.data().iter().all(|&v| v.abs() <= 1.0 + 1e-12));
    }
}
