mod common;

use common::{full, reference_ms_ssim, uniform_image, uniform_tensor};
use deformseg::losses::{
    adv_loss_dis, adv_loss_gen, artifact_loss, cycle_loss, identity_loss, ms_ssim, ms_ssim_value, registration_loss,
    segmentation_loss, total_generator_loss, GeneratorLossTerms, LossWeights,
};
use deformseg::nn::{Graph, Tensor};
use deformseg::Error;
use proptest::prelude::*;

const TOL: f64 = 1e-6;
const IMG: [usize; 4] = [1, 3, 16, 16];
const SCORE: [usize; 4] = [2, 1, 6, 6];

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < TOL, "{a} vs {b}");
}

#[test]
fn adversarial_fixed_points() {
    let g = Graph::new();
    let (one, zero, half) = (full(&g, &SCORE, 1.0), full(&g, &SCORE, 0.0), full(&g, &SCORE, 0.5));
    close(adv_loss_dis(&one, &zero, &one, &zero).unwrap().item(), 0.0);
    close(adv_loss_dis(&half, &half, &half, &half).unwrap().item(), 0.5);
    close(adv_loss_dis(&zero, &one, &zero, &one).unwrap().item(), 2.0);
    close(adv_loss_gen(&one, &one).unwrap().item(), 0.0);
    close(adv_loss_gen(&zero, &zero).unwrap().item(), 1.0);
    close(adv_loss_gen(&half, &half).unwrap().item(), 0.25);
}

#[test]
fn adversarial_rejects_non_finite_scores() {
    let g = Graph::new();
    let ok = full(&g, &SCORE, 0.5);
    let bad = full(&g, &SCORE, f64::NAN);
    assert!(matches!(adv_loss_dis(&ok, &bad, &ok, &ok), Err(Error::NumericInput(_))));
    assert!(matches!(adv_loss_gen(&ok, &bad), Err(Error::NumericInput(_))));
}

#[test]
fn reconstruction_losses_match_direct_means() {
    let g = Graph::new();
    let x_c = g.constant(uniform_tensor(&IMG, 0.1, 0.8, 1));
    let x_a = g.constant(uniform_tensor(&IMG, 0.1, 0.8, 2));

    close(cycle_loss(&x_c, &x_c, None, 0.5).unwrap().item(), 0.0);
    close(cycle_loss(&x_c, &x_c.add_scalar(0.1), None, 0.0).unwrap().item(), 0.1);
    close(cycle_loss(&x_c, &x_c, Some((&x_a, &x_a)), 0.5).unwrap().item(), 0.0);

    close(identity_loss(&x_a, &x_a, &x_c, &x_c).unwrap().item(), 0.0);
    let left = identity_loss(&x_a, &x_a, &x_c, &x_c.add_scalar(0.2)).unwrap().item();
    let right = identity_loss(&x_a, &x_a.add_scalar(0.2), &x_c, &x_c).unwrap().item();
    close(left, 0.2);
    close(right, left);

    let diff = x_a.sub(&x_c);
    close(artifact_loss(&x_a, &x_c, &diff).unwrap().item(), 0.0);
    let zero = full(&g, &IMG, 0.0);
    close(artifact_loss(&x_c.add_scalar(0.2), &x_c, &zero).unwrap().item(), 0.2);
    let x_def = g.constant(uniform_tensor(&IMG, -0.3, 0.3, 5));
    let original = artifact_loss(&x_a, &x_c, &x_def).unwrap().item();
    close(artifact_loss(&x_c, &x_a, &x_def.scale(-1.0)).unwrap().item(), original);

    close(registration_loss(&x_c, &x_c).unwrap().item(), 0.0);
    close(registration_loss(&x_c, &x_c.add_scalar(0.05)).unwrap().item(), 0.05);
}

#[test]
fn registration_loss_ignores_joint_permutations() {
    let a = uniform_tensor(&IMG, 0.0, 1.0, 3);
    let b = uniform_tensor(&IMG, 0.0, 1.0, 4);
    let reversed = |t: &Tensor<f64>| Tensor::from_vec(t.shape(), t.data().iter().rev().copied().collect());
    let g = Graph::new();
    let straight = registration_loss(&g.constant(a.clone()), &g.constant(b.clone()))
        .unwrap()
        .item();
    let permuted = registration_loss(&g.constant(reversed(&a)), &g.constant(reversed(&b)))
        .unwrap()
        .item();
    close(straight, permuted);
}

#[test]
fn reconstruction_losses_reject_mismatched_shapes() {
    let g = Graph::new();
    let a = full(&g, &IMG, 0.5);
    let b = full(&g, &[1, 3, 16, 8], 0.5);
    assert!(matches!(cycle_loss(&a, &b, None, 0.0), Err(Error::InvalidArgument(_))));
    assert!(matches!(identity_loss(&a, &a, &a, &b), Err(Error::InvalidArgument(_))));
    assert!(matches!(artifact_loss(&a, &a, &b), Err(Error::InvalidArgument(_))));
    assert!(matches!(registration_loss(&a, &b), Err(Error::InvalidArgument(_))));
}

fn saturated_logits(mask: &[u8], h: usize, w: usize, hit: f64, miss: f64) -> Tensor<f64> {
    let mut t = Tensor::full(&[1, 4, h, w], miss);
    for (p, &label) in mask.iter().enumerate() {
        t.data_mut()[label as usize * h * w + p] = hit;
    }
    t
}

#[test]
fn segmentation_loss_closed_forms() {
    let (h, w) = (8, 8);
    let mask: Vec<u8> = (0..h * w).map(|p| (p % 4) as u8).collect();
    let g = Graph::new();

    let confident = g.constant(saturated_logits(&mask, h, w, 20.0, -20.0));
    assert!(segmentation_loss(&confident, &mask).unwrap().item() < 1e-3);

    // Uniform logits: CE is ln 4; every class has N/4 target pixels and
    // predicted mass N/4 with overlap N/16.
    let uniform = full(&g, &[1, 4, h, w], 0.0);
    let n = (h * w) as f64;
    let eps = deformseg::losses::DICE_SMOOTH;
    let per_class = n / 4.0;
    let dice = 1.0 - (2.0 * per_class * 0.25 + eps) / (2.0 * per_class + eps);
    close(segmentation_loss(&uniform, &mask).unwrap().item(), 4f64.ln() + dice);

    // A hard one-hot "probability" map via huge logits makes soft Dice vanish.
    let perfect = g.constant(saturated_logits(&mask, h, w, 200.0, -200.0));
    assert!(segmentation_loss(&perfect, &mask).unwrap().item() <= 1e-4);
}

#[test]
fn segmentation_loss_rejects_bad_labels() {
    let g = Graph::new();
    let logits = full(&g, &[1, 4, 4, 4], 0.0);
    let mut mask = vec![0u8; 16];
    mask[3] = 4;
    assert!(matches!(
        segmentation_loss(&logits, &mask),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn total_loss_is_linear_in_weights() {
    let g = Graph::new();
    let terms = GeneratorLossTerms {
        adv: common::scalar(&g, 0.3),
        cyc: common::scalar(&g, 0.2),
        idt: common::scalar(&g, 0.7),
        art: common::scalar(&g, 0.11),
        reg: common::scalar(&g, 0.05),
        seg: common::scalar(&g, 1.4),
    };
    let zero = LossWeights {
        adv: 0.0,
        cyc: 0.0,
        idt: 0.0,
        art: 0.0,
        reg: 0.0,
        seg: 0.0,
        ms: 0.5,
    };
    close(total_generator_loss(&g, &terms, &zero).unwrap().item(), 0.0);
    let only_idt = LossWeights { idt: 1.0, ..zero };
    close(total_generator_loss(&g, &terms, &only_idt).unwrap().item(), 0.7);
    let w = LossWeights::default();
    let single = total_generator_loss(&g, &terms, &w).unwrap().item();
    let double = total_generator_loss(&g, &terms, &w.scaled(2.0)).unwrap().item();
    close(double, 2.0 * single);
}

#[test]
fn total_loss_names_the_non_finite_component() {
    let g = Graph::new();
    let ok = common::scalar(&g, 0.1);
    let terms = GeneratorLossTerms {
        adv: ok,
        cyc: ok,
        idt: ok,
        art: ok,
        reg: common::scalar(&g, f64::INFINITY),
        seg: ok,
    };
    match total_generator_loss(&g, &terms, &LossWeights::default()) {
        Err(Error::NonFiniteLoss { component, .. }) => assert_eq!(component, "reg"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("non-finite component accepted"),
    }
}

#[test]
fn ms_ssim_matches_reference_implementation() {
    for seed in 0..4 {
        let x = uniform_image(64, 64, 100 + seed);
        let y = uniform_image(64, 64, 200 + seed).mapv(|v| 0.5 * v) + &x.mapv(|v| 0.5 * v);
        let ours = ms_ssim_value(&x.view(), &y.view()).unwrap();
        let reference = reference_ms_ssim(&x.mapv(f64::from), &y.mapv(f64::from));
        assert!((ours - reference).abs() < 1e-4, "seed {seed}: {ours} vs {reference}");
    }
}

#[test]
fn ms_ssim_rejects_small_or_mismatched_images() {
    let g = Graph::new();
    let small = full(&g, &[1, 1, 8, 8], 0.5);
    assert!(matches!(ms_ssim(&small, &small), Err(Error::InvalidArgument(_))));
    let a = full(&g, &[1, 1, 32, 32], 0.5);
    let b = full(&g, &[1, 1, 32, 16], 0.5);
    assert!(matches!(ms_ssim(&a, &b), Err(Error::InvalidArgument(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ms_ssim_is_symmetric_and_self_similar(seed in 0u64..1000) {
        let x = uniform_image(32, 32, seed);
        let y = uniform_image(32, 32, seed + 1);
        let xy = ms_ssim_value(&x.view(), &y.view()).unwrap();
        let yx = ms_ssim_value(&y.view(), &x.view()).unwrap();
        prop_assert!((xy - yx).abs() < 1e-6);
        prop_assert!((ms_ssim_value(&x.view(), &x.view()).unwrap() - 1.0).abs() < 1e-6);
        prop_assert!(xy <= 1.0 + 1e-12);
    }

    #[test]
    fn reconstruction_losses_are_nonnegative(seed in 0u64..1000) {
        let g = Graph::new();
        let a = g.constant(uniform_tensor(&IMG, 0.0, 1.0, seed));
        let b = g.constant(uniform_tensor(&IMG, 0.0, 1.0, seed + 7));
        prop_assert!(cycle_loss(&a, &b, Some((&b, &a)), 0.5).unwrap().item() >= 0.0);
        prop_assert!(identity_loss(&a, &b, &b, &a).unwrap().item() >= 0.0);
        prop_assert!(artifact_loss(&a, &b, &a).unwrap().item() >= 0.0);
        prop_assert!(registration_loss(&a, &b).unwrap().item() >= 0.0);
    }
}
