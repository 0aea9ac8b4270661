//! Finite-difference checks of every differentiable loss and of the
//! warp / flow-prediction paths on `3×16×16` inputs in 64-bit.

use deformseg::losses::{
    adv_loss_dis, adv_loss_gen, artifact_loss, cycle_loss, flow_smoothness, identity_loss, ms_ssim, registration_loss,
    segmentation_loss,
};
use deformseg::nn::gradcheck::{check_input, check_params, CheckReport};
use deformseg::nn::{Graph, ParamStore, Tensor, Var};
use deformseg::regseg::{stn_warp, RegSegConfig, RegSegNet};
use rand::Rng;

use super::{rng, uniform_tensor};

pub const MAX_REL_ERROR: f64 = 1e-3;
const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-5;
const IMG: [usize; 4] = [1, 3, 16, 16];

/// Element indices `0, stride, 2·stride, ...`.
fn probes(numel: usize, stride: usize) -> Vec<usize> {
    (0..numel).step_by(stride).collect()
}

fn constant<'g>(g: &'g Graph<f64>, t: &Tensor<f64>) -> Var<'g, f64> {
    g.constant(t.clone())
}

pub fn run_all() -> Vec<(&'static str, CheckReport)> {
    let x = uniform_tensor(&IMG, 0.05, 0.95, 11);
    let y = uniform_tensor(&IMG, 0.05, 0.95, 12);
    let z = uniform_tensor(&IMG, 0.05, 0.95, 13);
    let scores = uniform_tensor(&IMG, -0.5, 1.5, 14);
    let logits = uniform_tensor(&[1, 4, 16, 16], -2.0, 2.0, 15);
    let flow = uniform_tensor(&[1, 2, 16, 16], -2.5, 2.5, 16);
    let mut r = rng(17);
    let mask: Vec<u8> = (0..256).map(|_| r.random_range(0..4u8)).collect();
    let idx = probes(x.numel(), 7);

    let mut out = Vec::new();
    out.push((
        "adv_loss_dis",
        check_input(&scores, &idx, STEP, FLOOR, |g, v| {
            adv_loss_dis(&v, &constant(g, &y), &constant(g, &z), &v.scale(0.5)).unwrap()
        }),
    ));
    out.push((
        "adv_loss_gen",
        check_input(&scores, &idx, STEP, FLOOR, |g, v| {
            adv_loss_gen(&v, &constant(g, &y)).unwrap()
        }),
    ));
    out.push((
        "cycle_loss",
        check_input(&x, &idx, STEP, FLOOR, |g, v| {
            let (yc, zc) = (constant(g, &y), constant(g, &z));
            cycle_loss(&yc, &v, Some((&zc, &v.scale(0.9))), 0.5).unwrap()
        }),
    ));
    out.push((
        "identity_loss",
        check_input(&x, &idx, STEP, FLOOR, |g, v| {
            identity_loss(&constant(g, &y), &v, &constant(g, &z), &v.square()).unwrap()
        }),
    ));
    out.push((
        "artifact_loss",
        check_input(&x, &idx, STEP, FLOOR, |g, v| {
            artifact_loss(&constant(g, &y), &constant(g, &z), &v.scale(0.3)).unwrap()
        }),
    ));
    out.push((
        "registration_loss",
        check_input(&x, &idx, STEP, FLOOR, |g, v| {
            registration_loss(&constant(g, &y), &v).unwrap()
        }),
    ));
    out.push((
        "segmentation_loss",
        check_input(&logits, &probes(logits.numel(), 7), STEP, FLOOR, |_, v| {
            segmentation_loss(&v, &mask).unwrap()
        }),
    ));
    out.push((
        "ms_ssim",
        check_input(&x, &idx, STEP, FLOOR, |g, v| ms_ssim(&v, &constant(g, &y)).unwrap()),
    ));
    out.push((
        "flow_smoothness",
        check_input(&flow, &probes(flow.numel(), 5), STEP, FLOOR, |_, v| flow_smoothness(&v)),
    ));
    let weights = uniform_tensor(&IMG, -1.0, 1.0, 18);
    out.push((
        "stn_warp (source)",
        check_input(&x, &idx, STEP, FLOOR, |g, v| {
            stn_warp(&v, &constant(g, &flow))
                .unwrap()
                .mul(&constant(g, &weights))
                .sum()
        }),
    ));
    out.push((
        "stn_warp (flow)",
        check_input(&flow, &probes(flow.numel(), 3), STEP, FLOOR, |g, v| {
            stn_warp(&constant(g, &x), &v)
                .unwrap()
                .mul(&constant(g, &weights))
                .sum()
        }),
    ));
    out.extend(predict_flow_checks(&x, &y));
    out
}

fn predict_flow_checks(x: &Tensor<f64>, y: &Tensor<f64>) -> Vec<(&'static str, CheckReport)> {
    let config = RegSegConfig {
        width: 4,
        levels: 3,
        ..RegSegConfig::default()
    };
    let mut r = rng(19);
    let mut store = ParamStore::<f64>::new();
    let net = RegSegNet::new(&config, &mut store, &mut r).unwrap();
    // The registration head starts at zero; perturb every parameter so no
    // gradient path is trivially dead.
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let weights = uniform_tensor(&[1, 2, 16, 16], -1.0, 1.0, 20);
    let entries: Vec<_> = ids
        .iter()
        .flat_map(|&id| {
            let n = store.get(id).numel();
            [0, n / 2, n - 1].into_iter().map(move |k| (id, k))
        })
        .collect();
    let params = check_params(&store, &entries, STEP, FLOOR, |g, ps| {
        flow_loss(&net, g, ps, g.constant(x.clone()), y, &weights)
    });
    let input = check_input(x, &probes(x.numel(), 11), STEP, FLOOR, |g, v| {
        flow_loss(&net, g, &store, v, y, &weights)
    });
    vec![("predict_flow (parameters)", params), ("predict_flow (source)", input)]
}

fn flow_loss<'g>(
    net: &RegSegNet,
    g: &'g Graph<f64>,
    ps: &ParamStore<f64>,
    source: Var<'g, f64>,
    target: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> Var<'g, f64> {
    let target = g.constant(target.clone());
    let flow = net.predict_flow(g, ps, &source, &target).unwrap();
    let warped = stn_warp(&source, &flow).unwrap();
    flow.mul(&g.constant(weights.clone()))
        .sum()
        .add(&registration_loss(&target, &warped).unwrap())
}
