//! Central-difference gradient check shared by the test targets.
#![allow(dead_code)]

use rand::Rng as _;

use segmatch::consistency::{plan_loss_and_grad, prepare_step, StepConfig, StepPlan, Variant, VariantConfig};
use segmatch::model::{SegModel, TinyNetConfig};
use segmatch::nn::uniform_tensor;
use segmatch::rng::SeedTree;
use segmatch::tensor::{ImageTensor, LabelMask};

pub fn batch(seed: u64, n: usize) -> (Vec<(ImageTensor, LabelMask)>, Vec<ImageTensor>) {
    let mut rng = SeedTree::new(seed).rng();
    let labeled = (0..n)
        .map(|i| {
            let img = uniform_tensor(3, 8, 8, 0.0, 1.0, &mut rng);
            let mask = LabelMask::from_fn(8, 8, |y, x| ((y / 3 + x / 4 + i) % 3) as u8);
            (img, mask)
        })
        .collect();
    let unlabeled = (0..n).map(|_| uniform_tensor(3, 8, 8, 0.0, 1.0, &mut rng)).collect();
    (labeled, unlabeled)
}

pub fn step_config(variant: Variant) -> StepConfig {
    let mut cfg = StepConfig {
        variant: VariantConfig::preset(variant),
        ..StepConfig::default()
    };
    cfg.variant.tau = 0.0;
    cfg.aug.train_size = 8;
    cfg.aug.scale_range = (0.8, 1.25);
    cfg.aug.cutmix_prob = 1.0;
    cfg
}

fn loss(model: &SegModel, plan: &StepPlan, cfg: &StepConfig) -> f64 {
    plan_loss_and_grad(model, plan, cfg, false).unwrap().losses.loss_total
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn check(model: &SegModel, cfg: &StepConfig, seed: u64) -> f64 {
    let (labeled, unlabeled) = batch(seed, 3);
    let plan = prepare_step(model, &labeled, &unlabeled, cfg, &SeedTree::new(seed)).unwrap();
    let analytic = plan_loss_and_grad(model, &plan, cfg, false).unwrap().grads.flat();
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = model.clone();
    let n_tensors = probe.params_mut().len();
    for t in 0..n_tensors {
        let len = probe.params_mut()[t].len();
        for i in 0..len {
            let orig = probe.params_mut()[t][i];
            probe.params_mut()[t][i] = orig + h;
            let up = loss(&probe, &plan, cfg);
            probe.params_mut()[t][i] = orig - h;
            let down = loss(&probe, &plan, cfg);
            probe.params_mut()[t][i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    assert!(scale > 0.0, "gradient vanished");
    diff / scale
}

/// Micro model with small random biases: zero biases put zero-padded pixels
/// exactly on a ReLU kink, where finite differences are meaningless.
pub fn micro() -> SegModel {
    let mut rng = SeedTree::new(5).rng();
    let mut model = SegModel::tiny(&TinyNetConfig::micro(3), &mut rng).unwrap();
    for (t, p) in model.params_mut().into_iter().enumerate() {
        if t % 2 == 1 {
            p.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    assert!(model.num_params() <= 1000, "{} params", model.num_params());
    model
}

