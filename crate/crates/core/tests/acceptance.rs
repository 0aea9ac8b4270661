//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.
//!
//! The desk-scale overfit runs (criteria 7 and 8) train two models for 2000
//! steps each and dominate the runtime. Set `DEFORMSEG_ACCEPTANCE_STEPS` to
//! shorten them while iterating; criteria 7 and 8 then report FAIL because the
//! run no longer matches the required length.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::rc::Rc;
use std::time::{Duration, Instant};

use common::gradients::{run_all, MAX_REL_ERROR};
use common::simulator::{identity_error, mean_ms_ssim_by_severity, shift_error};
use common::warp::{clamped_sample, constant_flow, warp};
use common::{full, reference_ms_ssim, scalar, uniform_image, uniform_tensor};
use deformseg::engine::{score_dataset, Dataset, LossRecord, Predictor, TrainState};
use deformseg::losses::{
    adv_loss_dis, adv_loss_gen, artifact_loss, cross_entropy, cycle_loss, identity_loss, one_hot, registration_loss,
    segmentation_loss, soft_dice_loss, total_generator_loss, GeneratorLossTerms, LossWeights,
};
use deformseg::metrics::{dsc, ms_ssim, mse, pearson, psnr};
use deformseg::nn::{Graph, ParamStore, Tensor, Var};
use deformseg::regseg::{RegSegConfig, RegSegNet};
use deformseg::{Checkpoint, TrainConfig};
use ndarray::{Array2, Axis};
use rand::Rng;

const REQUIRED_STEPS: u64 = 2000;
const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);
const TRAIN_SAMPLES: usize = 8;
const TRAIN_SEED: u64 = 100;
const HELD_OUT_SEED: u64 = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: u32, name: &str, started: Instant, outcome: &Outcome) {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!(
        "[{tag}] {id}. {name}: {} ({:.1}s)",
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 1. Loss oracles

fn loss_oracles() -> Outcome {
    const IMG: [usize; 4] = [1, 3, 16, 16];
    const SCORE: [usize; 4] = [1, 1, 6, 6];
    let g = Graph::new();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut bounds = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        let err = (got - want).abs();
        worst = worst.max(err);
        if err > 1e-6 {
            failed.push(format!("{name} = {got} (expected {want})"));
        }
    };
    let (one, zero, half) = (full(&g, &SCORE, 1.0), full(&g, &SCORE, 0.0), full(&g, &SCORE, 0.5));
    check(
        "adv_dis perfect",
        adv_loss_dis(&one, &zero, &one, &zero).unwrap().item(),
        0.0,
    );
    check(
        "adv_dis 0.5",
        adv_loss_dis(&half, &half, &half, &half).unwrap().item(),
        0.5,
    );
    check(
        "adv_dis inverted",
        adv_loss_dis(&zero, &one, &zero, &one).unwrap().item(),
        2.0,
    );
    check("adv_gen fooled", adv_loss_gen(&one, &one).unwrap().item(), 0.0);
    check("adv_gen 0", adv_loss_gen(&zero, &zero).unwrap().item(), 1.0);
    check("adv_gen 0.5", adv_loss_gen(&half, &half).unwrap().item(), 0.25);

    let x_c = g.constant(uniform_tensor(&IMG, 0.1, 0.8, 1));
    let x_a = g.constant(uniform_tensor(&IMG, 0.1, 0.8, 2));
    check("cycle exact", cycle_loss(&x_c, &x_c, None, 0.5).unwrap().item(), 0.0);
    check(
        "cycle +0.1",
        cycle_loss(&x_c, &x_c.add_scalar(0.1), None, 0.0).unwrap().item(),
        0.1,
    );
    check(
        "cycle both exact",
        cycle_loss(&x_c, &x_c, Some((&x_a, &x_a)), 0.5).unwrap().item(),
        0.0,
    );
    check(
        "identity exact",
        identity_loss(&x_a, &x_a, &x_c, &x_c).unwrap().item(),
        0.0,
    );
    let left = identity_loss(&x_a, &x_a, &x_c, &x_c.add_scalar(0.2)).unwrap().item();
    check("identity +0.2", left, 0.2);
    check(
        "identity swapped",
        identity_loss(&x_a, &x_a.add_scalar(0.2), &x_c, &x_c).unwrap().item(),
        left,
    );
    let diff = x_a.sub(&x_c);
    let zero_img = full(&g, &IMG, 0.0);
    check("artifact exact", artifact_loss(&x_a, &x_c, &diff).unwrap().item(), 0.0);
    check(
        "artifact 0.2",
        artifact_loss(&x_c.add_scalar(0.2), &x_c, &zero_img).unwrap().item(),
        0.2,
    );
    let x_def = g.constant(uniform_tensor(&IMG, -0.3, 0.3, 3));
    check(
        "artifact negated",
        artifact_loss(&x_c, &x_a, &x_def.scale(-1.0)).unwrap().item(),
        artifact_loss(&x_a, &x_c, &x_def).unwrap().item(),
    );
    check("registration exact", registration_loss(&x_c, &x_c).unwrap().item(), 0.0);
    check(
        "registration 0.05",
        registration_loss(&x_c, &x_c.add_scalar(0.05)).unwrap().item(),
        0.05,
    );
    let reversed = |v: &Var<'_, f64>| {
        let t = v.value();
        Tensor::from_vec(t.shape(), t.data().iter().rev().copied().collect())
    };
    check(
        "registration permuted",
        registration_loss(&g.constant(reversed(&x_c)), &g.constant(reversed(&x_a)))
            .unwrap()
            .item(),
        registration_loss(&x_c, &x_a).unwrap().item(),
    );

    let (h, w) = (8, 8);
    let mask: Vec<u8> = (0..h * w).map(|p| (p % 4) as u8).collect();
    let target = Rc::new(one_hot::<f64>(&mask, 1, h, w, 4).unwrap());
    let saturated = g.constant(target.map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
    let sat_loss = segmentation_loss(&saturated, &mask).unwrap().item();
    if sat_loss >= 1e-3 {
        bounds.push(format!("saturated segmentation loss {sat_loss}"));
    }
    check(
        "uniform CE",
        cross_entropy(&full(&g, &[1, 4, h, w], 0.0), target.clone()).item(),
        4f64.ln(),
    );
    let dice = soft_dice_loss(&g.constant((*target).clone()), target.clone()).item();
    if dice > 1e-4 {
        bounds.push(format!("perfect soft dice loss {dice}"));
    }

    let x = uniform_image(64, 64, 4);
    check("ms_ssim self", ms_ssim(&x.view(), &x.view()).unwrap(), 1.0);

    let terms = GeneratorLossTerms {
        adv: scalar(&g, 0.3),
        cyc: scalar(&g, 0.2),
        idt: scalar(&g, 0.7),
        art: scalar(&g, 0.11),
        reg: scalar(&g, 0.05),
        seg: scalar(&g, 1.4),
    };
    let none = LossWeights {
        adv: 0.0,
        cyc: 0.0,
        idt: 0.0,
        art: 0.0,
        reg: 0.0,
        seg: 0.0,
        ms: 0.5,
    };
    check(
        "total zero weights",
        total_generator_loss(&g, &terms, &none).unwrap().item(),
        0.0,
    );
    check(
        "total single weight",
        total_generator_loss(&g, &terms, &LossWeights { seg: 1.0, ..none })
            .unwrap()
            .item(),
        1.4,
    );
    let base = total_generator_loss(&g, &terms, &LossWeights::default())
        .unwrap()
        .item();
    let doubled = total_generator_loss(&g, &terms, &LossWeights::default().scaled(2.0))
        .unwrap()
        .item();
    check("total doubled", doubled, 2.0 * base);

    failed.extend(bounds);
    if failed.is_empty() {
        Outcome::new(true, format!("all closed forms within 1e-6 (worst {worst:.1e})"))
    } else {
        Outcome::new(false, failed.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 2. Gradients

fn gradient_suite() -> Outcome {
    let reports = run_all();
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let (name, worst) = reports
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let bad: Vec<String> = reports
        .iter()
        .filter(|(_, r)| r.max_rel_error.is_nan() || r.max_rel_error >= MAX_REL_ERROR)
        .map(|(n, r)| format!("{n} {:.2e}", r.max_rel_error))
        .collect();
    if bad.is_empty() {
        Outcome::new(
            true,
            format!(
                "{} paths, {checked} entries, max rel error {worst:.2e} ({name})",
                reports.len()
            ),
        )
    } else {
        Outcome::new(false, format!("relative error >= 1e-3: {}", bad.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 3. Warp invariants

fn warp_invariants() -> Outcome {
    let shape = [1, 3, 16, 16];
    let x = uniform_tensor(&shape, 0.0, 1.0, 21);
    let identity = warp(&x, &constant_flow(16, 16, 0.0, 0.0));
    let id_err = identity
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let (dx, dy) = (3i64, -2i64);
    let shifted = warp(&x, &constant_flow(16, 16, dx as f64, dy as f64));
    let mut shift_mismatches = 0;
    for c in 0..3i64 {
        for i in 0..16i64 {
            for j in 0..16i64 {
                let (si, sj) = (i + dy, j + dx);
                if (0..16).contains(&si) && (0..16).contains(&sj) {
                    let got = shifted.data()[((c * 16 + i) * 16 + j) as usize];
                    let want = x.data()[((c * 16 + si) * 16 + sj) as usize];
                    shift_mismatches += (got != want) as usize;
                }
            }
        }
    }

    let flow = uniform_tensor(&[1, 2, 16, 16], -6.0, 6.0, 22);
    let out = warp(&x, &flow);
    let mut clamp_err = 0.0f64;
    for c in 0..3 {
        for q in 0..256 {
            let (i, j) = (q / 16, q % 16);
            let want = clamped_sample(&x, c, i as f64 + flow.data()[256 + q], j as f64 + flow.data()[q]);
            clamp_err = clamp_err.max((out.data()[c * 256 + q] - want).abs());
        }
    }
    let pass = id_err <= 1e-6 && shift_mismatches == 0 && clamp_err <= 1e-12;
    Outcome::new(
        pass,
        format!(
            "zero-flow error {id_err:.1e}, {shift_mismatches} interior shift mismatches, border clamp error {clamp_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Simulator physics

fn simulator_physics() -> Outcome {
    let id = identity_error();
    let shift = shift_error();
    let [s0, s1, s2] = mean_ms_ssim_by_severity(20, 64);
    let pass = id <= 1e-5 && shift <= 1e-4 && s0 > s1 && s1 > s2;
    Outcome::new(
        pass,
        format!("identity {id:.1e}, shift {shift:.1e}, mean MS-SSIM by severity {s0:.4} > {s1:.4} > {s2:.4}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Metric oracles

fn metric_oracles() -> Outcome {
    let a = Array2::from_shape_fn((20, 20), |(i, _)| (i < 5) as u8);
    let disjoint = Array2::from_shape_fn((20, 20), |(i, _)| (i >= 15) as u8);
    let half = Array2::from_shape_fn((20, 20), |(i, j)| (!(5..15).contains(&i) && j < 10) as u8);
    let dscs = [
        dsc(a.view(), a.view(), 1).unwrap(),
        dsc(a.view(), disjoint.view(), 1).unwrap(),
        dsc(a.view(), half.view(), 1).unwrap(),
    ];
    let dsc_ok = dscs == [1.0, 0.0, 0.5];

    let x = Array2::<f32>::from_elem((32, 32), 0.25);
    let gap = psnr(x.view(), x.mapv(|v| v + 0.5).view()).unwrap();
    let gap_ok = (gap - 6.0206).abs() < 1e-4;

    let mut consistency = 0.0f64;
    let mut self_sim = 0.0f64;
    let mut reference = 0.0f64;
    for seed in 0..10u64 {
        let p = uniform_image(64, 64, 300 + seed);
        let noise = uniform_image(64, 64, 400 + seed);
        let mix = 0.1 * seed as f32;
        let q = Array2::from_shape_fn((64, 64), |ij| (1.0 - mix) * p[ij] + mix * noise[ij]);
        let m = mse(p.view(), q.view()).unwrap();
        if m > 0.0 {
            consistency = consistency.max((psnr(p.view(), q.view()).unwrap() - 10.0 * (1.0 / m).log10()).abs());
        }
        self_sim = self_sim.max((ms_ssim(&p.view(), &p.view()).unwrap() - 1.0).abs());
        let ours = ms_ssim(&p.view(), &q.view()).unwrap();
        let theirs = reference_ms_ssim(&p.mapv(f64::from), &q.mapv(f64::from));
        reference = reference.max((ours - theirs).abs());
    }
    let pass = dsc_ok && gap_ok && consistency < 1e-9 && self_sim < 1e-6 && reference < 1e-4;
    Outcome::new(
        pass,
        format!(
            "DSC {dscs:?}, PSNR at gap 0.5 = {gap:.4} dB, psnr/mse gap {consistency:.1e}, \
             self-similarity error {self_sim:.1e}, reference MS-SSIM error {reference:.1e} over 10 pairs"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Cross-stitch equivalence

fn cross_stitch_equivalence() -> Outcome {
    let config = RegSegConfig {
        width: 8,
        levels: 4,
        ..RegSegConfig::default()
    };
    let mut r = common::rng(31);
    let mut store = ParamStore::<f32>::new();
    let net = RegSegNet::new(&config, &mut store, &mut r).unwrap();
    // Give the zero-initialized registration head real weights.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.05f32..0.05);
        }
    }
    net.set_stitch_identity(&mut store);
    let g = Graph::<f32>::new();
    let src = g.constant(uniform_tensor(&[2, 3, 32, 32], 0.0, 1.0, 32).cast());
    let dst = g.constant(uniform_tensor(&[2, 3, 32, 32], 0.0, 1.0, 33).cast());
    let flow = net.predict_flow(&g, &store, &src, &dst).unwrap().value();
    let flow_ref = net.uncoupled_flow(&g, &store, &src, &dst).unwrap().value();
    let seg = net.segment(&g, &store, &dst).unwrap().value();
    let seg_ref = net.uncoupled_segment(&g, &store, &dst).unwrap().value();
    let nonzero = flow.data().iter().any(|&v| v != 0.0);
    let pass = flow.data() == flow_ref.data() && seg.data() == seg_ref.data() && nonzero;
    Outcome::new(
        pass,
        format!(
            "flow bitwise equal: {}, logits bitwise equal: {} ({} + {} values)",
            flow.data() == flow_ref.data(),
            seg.data() == seg_ref.data(),
            flow.numel(),
            seg.numel()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7-9. Desk-scale runs

struct Run {
    config: TrainConfig,
    records: Vec<LossRecord>,
    elapsed: Duration,
    predictor: Predictor,
    checkpoint: Checkpoint,
}

fn desk_config() -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk64.toml");
    let mut config = TrainConfig::load(&path).expect("desk config");
    if let Some(steps) = std::env::var("DEFORMSEG_ACCEPTANCE_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
    {
        config.steps = steps;
    }
    config
}

fn train(config: &TrainConfig, data: &Dataset, label: &str) -> Run {
    let started = Instant::now();
    let mut state = TrainState::<f32>::new(config).expect("valid config");
    let records = state
        .run(data, |st, _| {
            if st.step % 250 == 0 {
                eprintln!("  {label}: step {} ({:.0}s)", st.step, started.elapsed().as_secs_f64());
            }
            Ok(())
        })
        .expect("training runs");
    let elapsed = started.elapsed();
    let checkpoint = Checkpoint::from_state(&state);
    Run {
        config: config.clone(),
        records,
        elapsed,
        predictor: Predictor::new(config.clone(), state.model),
        checkpoint,
    }
}

fn mean_foreground_dsc(run: &Run, data: &Dataset) -> (f64, f64) {
    let rows = score_dataset(&run.predictor, data).expect("scoring");
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.foreground_dsc()).sum::<f64>() / n,
        rows.iter().map(|r| r.ms_ssim).sum::<f64>() / n,
    )
}

fn length_note(run: &Run) -> Option<String> {
    (run.config.steps != REQUIRED_STEPS).then(|| format!("shortened run of {} steps", run.config.steps))
}

fn overfit_run(run: &Run, data: &Dataset) -> Outcome {
    let cyc: Vec<f64> = run.records.iter().map(|r| r.cyc).collect();
    let window = 50.min(cyc.len().max(1));
    let start = cyc[..window].iter().sum::<f64>() / window as f64;
    let end = cyc[cyc.len() - window..].iter().sum::<f64>() / window as f64;
    let drop = 1.0 - end / start;
    let (fg, corrected) = mean_foreground_dsc(run, data);
    let input = data
        .pairs
        .iter()
        .map(|p| ms_ssim(&p.corrupted.center(), &p.clean.center()).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    let gain = corrected - input;
    let a = drop >= 0.5;
    let b = fg >= 0.90;
    let c = gain >= 0.02;
    let fast = run.elapsed < RUN_BUDGET;
    let mut detail = format!(
        "(a) cycle loss {start:.4} -> {end:.4}, drop {:.1}% [{}]; (b) foreground DSC {fg:.4} [{}]; \
         (c) MS-SSIM corrected {corrected:.4} vs input {input:.4}, gain {gain:+.4} [{}]; \
         {:.1} min for {} steps [{}]",
        100.0 * drop,
        pf(a),
        pf(b),
        pf(c),
        run.elapsed.as_secs_f64() / 60.0,
        run.records.len(),
        pf(fast),
    );
    if !c && input > 0.98 {
        detail.push_str(&format!(
            "; gain of 0.02 needs MS-SSIM >= {:.4}, above its maximum of 1",
            input + 0.02
        ));
    }
    let note = length_note(run);
    if let Some(n) = &note {
        detail.push_str(&format!("; {n}"));
    }
    Outcome::new(a && b && c && fast && note.is_none(), detail)
}

fn ablation(full_run: &Run, ablated: &Run, data: &Dataset, held_out: &Dataset) -> Outcome {
    let (fg_full, _) = mean_foreground_dsc(full_run, data);
    let (fg_ablated, _) = mean_foreground_dsc(ablated, data);
    let mut defmap = Vec::new();
    let mut truth = Vec::new();
    for pair in &held_out.pairs {
        let out = full_run.predictor.predict(&pair.corrupted).expect("inference");
        let mid = out.defmap.dim().0 / 2;
        defmap.extend(out.defmap.index_axis(Axis(0), mid).iter().map(|v| v.abs() as f64));
        let (a, c) = (pair.corrupted.center(), pair.clean.center());
        truth.extend(a.iter().zip(c.iter()).map(|(x, y)| (x - y).abs() as f64));
    }
    let r = pearson(&defmap, &truth).expect("equal lengths");
    let dsc_ok = fg_ablated - fg_full <= 0.02;
    let r_ok = r > 0.3;
    let mut detail = format!(
        "DSC full {fg_full:.4} vs no-registration {fg_ablated:.4} (excess {:+.4}) [{}]; \
         defmap vs |x_a - x_c| on {} held-out phantoms r = {r:.3} [{}]",
        fg_ablated - fg_full,
        pf(dsc_ok),
        held_out.len(),
        pf(r_ok)
    );
    let note = length_note(full_run);
    if let Some(n) = &note {
        detail.push_str(&format!("; {n}"));
    }
    Outcome::new(dsc_ok && r_ok && note.is_none(), detail)
}

fn determinism(full_run: &Run, data: &Dataset) -> Outcome {
    let prefix = 20.min(full_run.config.steps);
    let rerun = train(
        &TrainConfig {
            steps: prefix,
            ..full_run.config.clone()
        },
        data,
        "rerun",
    );
    let logs_match = rerun.records[..] == full_run.records[..prefix as usize];

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("checkpoint.bin");
    full_run.checkpoint.save(&path).expect("save");
    let loaded = Predictor::from_checkpoint(&Checkpoint::load(&path).expect("load")).expect("model");
    let mut identical = 0;
    for pair in &data.pairs {
        let live = full_run.predictor.predict(&pair.corrupted).expect("inference");
        identical += (live == loaded.predict(&pair.corrupted).expect("inference")) as usize;
    }
    let pass = logs_match && identical == data.len();
    Outcome::new(
        pass,
        format!(
            "rerun reproduces the first {prefix} log records: {logs_match}; \
             reloaded checkpoint reproduces {identical}/{} inference outputs bitwise",
            data.len()
        ),
    )
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn main() -> ExitCode {
    let mut all = true;
    let mut record = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        report(id, name, started, &outcome);
        all &= outcome.pass;
    };

    record(1, "loss oracles", &mut loss_oracles);
    record(2, "gradient checks", &mut gradient_suite);
    record(3, "warp invariants", &mut warp_invariants);
    record(4, "simulator physics", &mut simulator_physics);
    record(5, "metric oracles", &mut metric_oracles);
    record(6, "cross-stitch equivalence", &mut cross_stitch_equivalence);

    let config = desk_config();
    let data = Dataset::synthetic(TRAIN_SAMPLES, config.image_size, 1, TRAIN_SEED).expect("phantoms");
    let held_out = Dataset::synthetic(TRAIN_SAMPLES, config.image_size, 1, HELD_OUT_SEED).expect("phantoms");
    let full_run = train(&config, &data, "full model");
    record(7, "desk-scale overfit", &mut || overfit_run(&full_run, &data));

    let ablated_config = TrainConfig {
        lambda_reg: 0.0,
        lambda_art: 0.0,
        freeze_stitch_identity: true,
        ..config.clone()
    };
    let ablated = train(&ablated_config, &data, "no registration");
    record(8, "registration ablation", &mut || {
        ablation(&full_run, &ablated, &data, &held_out)
    });
    record(9, "determinism and persistence", &mut || determinism(&full_run, &data));

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
