mod common;

use flowdepth::flowgru::{align_state, flowgru_step, gru_update, init_params, GruShape, HiddenState};
use flowdepth::{Shape, Tensor, Var};
use proptest::prelude::*;

struct Case {
    x: Var<f64>,
    h: HiddenState<f64>,
    params: flowdepth::params::ParamVars<f64>,
}

fn case(seed: u64, cin: usize, ch: usize, h: usize, w: usize) -> Case {
    let mut r = common::rng(seed);
    let shape = GruShape { input_channels: cin, hidden_channels: ch, kernel: 3 };
    let params = init_params::<f64, _>(shape, &mut r).unwrap().vars(false);
    Case {
        x: Var::constant(common::uniform(&mut r, Shape::new(1, cin, h, w), -2.0, 2.0)),
        h: HiddenState {
            h: Var::constant(common::uniform(&mut r, Shape::new(1, ch, h, w), -1.5, 1.5)),
            t: 1,
        },
        params,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn update_is_a_convex_combination(seed in any::<u64>(), cin in 1usize..4, ch in 1usize..4) {
        let c = case(seed, cin, ch, 5, 4);
        let (next, gates) = gru_update(&c.x, &c.h.h, c.h.t, &c.params, 3).unwrap();
        prop_assert_eq!(next.t, 2);
        let hv = next.tensor().data();
        let hb = c.h.tensor().data();
        let cand = gates.candidate.value().data();
        for i in 0..hv.len() {
            let (lo, hi) = (hb[i].min(cand[i]), hb[i].max(cand[i]));
            prop_assert!(hv[i] >= lo - 1e-12 && hv[i] <= hi + 1e-12);
            prop_assert!(cand[i].abs() < 1.0);
        }
    }

    #[test]
    fn gates_lie_strictly_inside_the_unit_interval(seed in any::<u64>(), cin in 1usize..4, ch in 1usize..4) {
        let c = case(seed, cin, ch, 4, 4);
        let (_, gates) = gru_update(&c.x, &c.h.h, c.h.t, &c.params, 3).unwrap();
        for g in [&gates.update, &gates.reset] {
            prop_assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_flow_and_full_confidence_reduce_to_plain_update(seed in any::<u64>(), ch in 1usize..4) {
        let c = case(seed, 2, ch, 4, 6);
        let flow = Var::constant(Tensor::zeros(Shape::new(1, 2, 4, 6)));
        let conf = Var::constant(Tensor::ones(Shape::new(1, 1, 4, 6)));
        let guided = flowgru_step(&c.x, &c.h, &flow, &conf, &c.params, 3).unwrap();
        let (plain, _) = gru_update(&c.x, &c.h.h, c.h.t, &c.params, 3).unwrap();
        prop_assert_eq!(guided.tensor(), plain.tensor());
        prop_assert_eq!(guided.t, plain.t);
    }

    #[test]
    fn integer_flow_translates_the_state(seed in any::<u64>(), dx in -2i32..=2, dy in -2i32..=2, ch in 1usize..3) {
        let (h, w) = (7usize, 8usize);
        let c = case(seed, 1, ch, h, w);
        let flow = Tensor::from_fn(Shape::new(1, 2, h, w), |_, k, _, _| if k == 0 { dx as f64 } else { dy as f64 });
        let conf = Var::constant(Tensor::ones(Shape::new(1, 1, h, w)));
        let aligned = align_state(&c.h, &Var::constant(flow), &conf).unwrap();
        let (src, out) = (c.h.tensor(), aligned.value());
        for k in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = (x as i32 + dx, y as i32 + dy);
                    if sx < 0 || sy < 0 || sx >= w as i32 || sy >= h as i32 {
                        continue;
                    }
                    prop_assert_eq!(out.at(0, k, y, x), src.at(0, k, sy as usize, sx as usize));
                }
            }
        }
    }
}
