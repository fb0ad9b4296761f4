mod common;

use flowdepth::metrics::{depth_metrics, median_scale, tdt, MetricConfig, TdtResult};
use flowdepth::{Shape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn permute(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let mut out = t.clone();
    for c in 0..s.c {
        let src = t.plane(0, c);
        let dst = out.plane_mut(0, c);
        for (i, &j) in order.iter().enumerate() {
            dst[i] = src[j];
        }
    }
    out
}

fn sorted_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tdt_matches_the_pixel_loop(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let [d, pd, flow, img, pimg] = common::tdt_instance(seed, h, w);
        let cfg = MetricConfig::default();
        let got = tdt(&d, &pd, &flow, &img, &pimg, &cfg).unwrap();
        match (got, common::tdt_oracle(&d, &pd, &flow, &img, &pimg, &cfg)) {
            (TdtResult::Valid(f), Some((v, below, count))) => {
                prop_assert_eq!(f.tdt, v);
                prop_assert_eq!(f.below, below);
                prop_assert_eq!(f.confident, count);
            }
            (TdtResult::NoValidTrajectory, None) => {}
            (g, o) => prop_assert!(false, "library {:?} vs oracle {:?}", g.valid().map(|f| f.tdt), o),
        }
    }

    #[test]
    fn tdt_is_non_negative_with_ordered_fractions(seed in any::<u64>()) {
        let [d, pd, flow, img, pimg] = common::tdt_instance(seed, 6, 7);
        if let TdtResult::Valid(f) = tdt(&d, &pd, &flow, &img, &pimg, &MetricConfig::default()).unwrap() {
            prop_assert!(f.tdt >= 0.0);
            prop_assert!(f.below[0] <= f.below[1] && f.below[1] <= f.below[2]);
            prop_assert!(f.below.iter().all(|&b| (0.0..=1.0).contains(&b)));
            prop_assert!(f.map.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn tdt_with_zero_flow_ignores_pixel_order(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut r = common::rng(seed);
        let n = h * w;
        let d = common::dyadic(&mut r, Shape::new(1, 1, h, w), 512).map(|v| v + 10.0);
        let pd = common::dyadic(&mut r, Shape::new(1, 1, h, w), 512).map(|v| v + 10.0);
        let img = common::uniform(&mut r, Shape::new(1, 3, h, w), 0.0, 1.0);
        let pimg = img.zip_map(&common::uniform(&mut r, img.shape(), -0.03, 0.03), |a, b| a + b).unwrap();
        let flow = Tensor::zeros(Shape::new(1, 2, h, w));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let cfg = MetricConfig::default();
        let a = tdt(&d, &pd, &flow, &img, &pimg, &cfg).unwrap();
        let b = tdt(&permute(&d, &order), &permute(&pd, &order), &flow, &permute(&img, &order), &permute(&pimg, &order), &cfg).unwrap();
        prop_assert_eq!(a.valid().map(|f| (f.tdt, f.below, f.confident)), b.valid().map(|f| (f.tdt, f.below, f.confident)));
    }

    #[test]
    fn depth_metric_invariants(seed in any::<u64>(), n in 1usize..40) {
        let mut r = common::rng(seed);
        let shape = Shape::new(1, 1, 1, n);
        let d = common::uniform(&mut r, shape, 0.5, 90.0);
        let g = common::uniform(&mut r, shape, 0.5, 79.0);
        let cfg = MetricConfig::default();
        let m = depth_metrics(&d, &g, &cfg).unwrap();
        prop_assert!(m.delta[0] <= m.delta[1] && m.delta[1] <= m.delta[2]);
        prop_assert!(m.rmse >= 0.0 && m.rmse_log >= 0.0 && m.abs_rel >= 0.0 && m.sq_rel >= 0.0);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let p = depth_metrics(&permute(&d, &order), &permute(&g, &order), &cfg).unwrap();
        prop_assert_eq!(p.delta, m.delta);
        prop_assert_eq!(p.count, m.count);
        for (a, b) in [(p.abs_rel, m.abs_rel), (p.sq_rel, m.sq_rel), (p.rmse, m.rmse), (p.rmse_log, m.rmse_log)] {
            prop_assert!(common::relative(a, b) <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn median_scaling_equalises_medians(seed in any::<u64>(), n in 1usize..40) {
        let mut r = common::rng(seed);
        let shape = Shape::new(1, 1, 1, n);
        let d = common::uniform(&mut r, shape, 0.01, 5.0);
        let g = common::uniform(&mut r, shape, 1.0, 80.0);
        let scaled = median_scale(&d, &g).unwrap();
        let (a, b) = (sorted_median(scaled.data().to_vec()), sorted_median(g.data().to_vec()));
        prop_assert!(common::relative(a, b) <= 1e-9, "{} vs {}", a, b);
    }
}
