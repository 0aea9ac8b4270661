mod common;

use common::uniform_tensor;
use common::warp::{clamped_sample, constant_flow, warp};
use deformseg::nn::{Graph, Tensor};
use deformseg::regseg::stn_warp;
use deformseg::Error;
use proptest::prelude::*;

const SHAPE: [usize; 4] = [1, 3, 16, 16];

#[test]
fn zero_flow_is_identity() {
    let x = uniform_tensor(&SHAPE, 0.0, 1.0, 1);
    let out = warp(&x, &constant_flow(16, 16, 0.0, 0.0));
    let err = out
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6, "max error {err}");
}

#[test]
fn integer_flow_is_an_index_shift_on_the_interior() {
    let x = uniform_tensor(&SHAPE, 0.0, 1.0, 2);
    let (dx, dy) = (2i64, -3i64);
    let out = warp(&x, &constant_flow(16, 16, dx as f64, dy as f64));
    for c in 0..3 {
        for i in 0..16i64 {
            for j in 0..16i64 {
                let (si, sj) = (i + dy, j + dx);
                if !(0..16).contains(&si) || !(0..16).contains(&sj) {
                    continue;
                }
                let got = out.data()[((c * 16 + i) * 16 + j) as usize];
                let want = x.data()[((c * 16 + si) * 16 + sj) as usize];
                assert_eq!(got, want, "channel {c} pixel ({i}, {j})");
            }
        }
    }
}

#[test]
fn border_samples_match_explicit_clamping() {
    let x = uniform_tensor(&SHAPE, 0.0, 1.0, 3);
    let flow = uniform_tensor(&[1, 2, 16, 16], -6.0, 6.0, 4);
    let out = warp(&x, &flow);
    for c in 0..3 {
        for i in 0..16 {
            for j in 0..16 {
                let q = i * 16 + j;
                let (fx, fy) = (flow.data()[q], flow.data()[256 + q]);
                let want = clamped_sample(&x, c, i as f64 + fy, j as f64 + fx);
                let got = out.data()[c * 256 + q];
                assert!(
                    (got - want).abs() < 1e-12,
                    "channel {c} pixel ({i}, {j}): {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn mismatched_flow_is_rejected() {
    let g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&SHAPE));
    for shape in [[1, 2, 16, 8], [1, 3, 16, 16], [2, 2, 16, 16]] {
        let f = g.constant(Tensor::zeros(&shape));
        assert!(matches!(stn_warp(&x, &f), Err(Error::InvalidArgument(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn warp_is_linear_in_the_source(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = uniform_tensor(&SHAPE, 0.0, 1.0, seed);
        let y = uniform_tensor(&SHAPE, 0.0, 1.0, seed + 1);
        let flow = uniform_tensor(&[1, 2, 16, 16], -4.0, 4.0, seed + 2);
        let combo = Tensor::from_vec(&SHAPE, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
        let (wx, wy, wc) = (warp(&x, &flow), warp(&y, &flow), warp(&combo, &flow));
        for ((p, q), r) in wx.data().iter().zip(wy.data()).zip(wc.data()) {
            prop_assert!((a * p + b * q - r).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_stays_within_source_range(seed in 0u64..10_000) {
        let x = uniform_tensor(&SHAPE, 0.0, 1.0, seed);
        let flow = uniform_tensor(&[1, 2, 16, 16], -20.0, 20.0, seed + 3);
        let out = warp(&x, &flow);
        let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}
