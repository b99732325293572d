use std::collections::HashMap;

use msshare_core::data::{Dataset, Preprocess};
use msshare_core::layers::Linear;
use msshare_core::ops::softmax_xent;
use msshare_core::toy::{generate, ToyConfig};
use msshare_core::train::{
    evaluate, finetune_prepare, fit, lr_at_epoch, sgd_step, topk_errors, train_epoch, FitOptions,
};
use msshare_core::{build_model, ArchSpec, Model, OptimState, SgdConfig, Tensor, Variant};

/// A model with no features and a single scalar weight.
fn scalar_model(w: f32) -> Model<f32> {
    let mut classifier = Linear::new(1, 1);
    classifier.weight.value.fill(w);
    Model {
        spec: ArchSpec::resnet(10, Variant::Vanilla, 1),
        features: Vec::new(),
        classifier_name: "fc".into(),
        classifier,
        freeze_features: false,
    }
}

fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> SgdConfig {
    SgdConfig { base_lr: lr, momentum, weight_decay, ..SgdConfig::default() }
}

fn tiny_spec(variant: Variant) -> ArchSpec {
    ArchSpec { width: 4, input_size: 16, ..ArchSpec::resnet(10, variant, 3) }
}

fn tiny_data() -> (Dataset, Dataset, Preprocess) {
    let (train, val) = generate(&ToyConfig { images: 30, size: 20, val_fraction: 0.2, seed: 5 });
    (train, val, Preprocess { resize: 20, crop: 16, ..Preprocess::default() })
}

#[test]
fn sgd_two_steps_by_hand() {
    let mut m = scalar_model(1.0);
    let mut st = OptimState::default();
    let cfg = sgd(0.1, 0.9, 0.0);
    for want in [0.9f32, 0.71] {
        m.classifier.weight.grad.fill(1.0);
        m.classifier.bias.grad.fill(0.0);
        sgd_step(&mut m, &mut st, &cfg, cfg.base_lr).unwrap();
        assert!((m.classifier.weight.value.data()[0] - want).abs() < 1e-6);
    }
    assert!((st.velocities[0].1.data()[0] - 1.9).abs() < 1e-6);
    assert_eq!(st.step, 2);
}

#[test]
fn zero_gradient_is_a_fixed_point_without_decay() {
    let mut m = scalar_model(0.37);
    let mut st = OptimState::default();
    let cfg = sgd(0.5, 0.9, 0.0);
    for _ in 0..5 {
        m.zero_grad();
        sgd_step(&mut m, &mut st, &cfg, cfg.base_lr).unwrap();
    }
    assert_eq!(m.classifier.weight.value.data()[0], 0.37);
}

#[test]
fn pure_weight_decay_shrinks_geometrically() {
    let mut m = scalar_model(2.0);
    let mut st = OptimState::default();
    let cfg = sgd(0.1, 0.0, 0.5);
    let mut want = 2.0f64;
    for _ in 0..4 {
        m.zero_grad();
        sgd_step(&mut m, &mut st, &cfg, cfg.base_lr).unwrap();
        want *= 1.0 - 0.1 * 0.5;
        assert!((m.classifier.weight.value.data()[0] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn quadratic_descends_monotonically() {
    // loss ½w², gradient w
    let mut m = scalar_model(3.0);
    let mut st = OptimState::default();
    let cfg = sgd(0.1, 0.0, 0.0);
    let mut prev = f32::INFINITY;
    for _ in 0..30 {
        let w = m.classifier.weight.value.data()[0];
        assert!(0.5 * w * w < prev);
        prev = 0.5 * w * w;
        m.zero_grad();
        m.classifier.weight.grad.fill(w);
        sgd_step(&mut m, &mut st, &cfg, cfg.base_lr).unwrap();
    }
}

#[test]
fn step_schedule() {
    let cfg = SgdConfig::default();
    assert_eq!(lr_at_epoch(0, &cfg), 0.1);
    assert_eq!(lr_at_epoch(9, &cfg), 0.1);
    assert_eq!(lr_at_epoch(10, &cfg), 0.01);
    assert_eq!(lr_at_epoch(29, &cfg), 0.001);
    let big = SgdConfig::imagenet();
    assert_eq!(lr_at_epoch(30, &big), 0.01);
    assert_eq!(lr_at_epoch(99, &big), 0.0001);
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mut m = build_model::<f32>(&tiny_spec(Variant::Shared), 1).unwrap();
    let x = Tensor::from_fn([6, 3, 16, 16], |i| (((i * 7919) % 101) as f32 / 50.0) - 1.0);
    let labels = [0, 1, 2, 0, 1, 2];
    let cfg = sgd(0.05, 0.9, 0.0);
    let mut st = OptimState::default();
    let mut losses = Vec::new();
    for _ in 0..50 {
        m.zero_grad();
        let logits = m.forward(&x, true).unwrap();
        let (loss, g) = softmax_xent(&logits, &labels).unwrap();
        m.backward(&g).unwrap();
        sgd_step(&mut m, &mut st, &cfg, cfg.base_lr).unwrap();
        losses.push(loss);
    }
    let head: f32 = losses[..5].iter().sum::<f32>() / 5.0;
    let tail: f32 = losses[45..].iter().sum::<f32>() / 5.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn equal_seeds_give_identical_traces() {
    let (train, _, pre) = tiny_data();
    let cfg = SgdConfig { batch_size: 8, ..SgdConfig::default() };
    let run = |seed| {
        let mut m = build_model::<f32>(&tiny_spec(Variant::Shared), 3).unwrap();
        let mut st = OptimState::default();
        let a = train_epoch(&mut m, &train, &pre, &cfg, &mut st, 0, seed).unwrap();
        let b = train_epoch(&mut m, &train, &pre, &cfg, &mut st, 1, seed).unwrap();
        (a.losses, b.losses, m.conv_kernels("layer4.0.conv2").unwrap())
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).0, run(10).0);
}

#[test]
fn fit_records_the_schedule() {
    let (train, val, pre) = tiny_data();
    let cfg = SgdConfig { batch_size: 8, epochs: 3, step_epochs: 2, ..SgdConfig::default() };
    let mut m = build_model::<f32>(&tiny_spec(Variant::Vanilla), 3).unwrap();
    let mut st = OptimState::default();
    let mut seen = 0;
    let recs = fit(&mut m, &train, Some(&val), &pre, &cfg, &mut st, &FitOptions::default(), |_, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 3);
    for r in &recs {
        assert_eq!(r.lr, lr_at_epoch(r.epoch, &cfg));
        assert!(r.val_top1.is_some());
        // three classes: top-5 is undefined
        assert!(r.val_top5.is_none());
        assert_eq!(r.wall_seconds, 0.0);
    }
    assert_eq!(recs[2].lr, 0.01);
    assert_eq!(st.step, 3 * train.len().div_ceil(8) as u64);
}

#[test]
fn topk_on_perfect_and_constant_logits() {
    let k = 10;
    let labels: Vec<usize> = (0..40).map(|i| i % k).collect();
    let perfect = Tensor::<f32>::from_fn([40, k, 1, 1], |i| if i % k == labels[i / k] { 5.0 } else { 0.0 });
    assert_eq!(topk_errors(&perfect, &labels).unwrap(), (0.0, 0.0));
    // ties resolve to the lowest index, so only label 0 is ranked first
    let flat = Tensor::<f32>::zeros([40, k, 1, 1]);
    let (t1, t5) = topk_errors(&flat, &labels).unwrap();
    assert!((t1 - 100.0 * (k - 1) as f64 / k as f64).abs() < 1e-9);
    assert!((t5 - 50.0).abs() < 1e-9);
    assert!(topk_errors(&Tensor::<f32>::zeros([2, 3, 1, 1]), &[0, 1]).is_err());
}

#[test]
fn evaluation_reports_percentages() {
    let (train, _, pre) = tiny_data();
    let mut m = build_model::<f32>(&tiny_spec(Variant::Shared), 3).unwrap();
    let e = evaluate(&mut m, &train, &pre, 7).unwrap();
    assert_eq!(e.samples, train.len());
    assert!((0.0..=100.0).contains(&e.top1_error));
    let again = evaluate(&mut m, &train, &pre, 100).unwrap();
    assert_eq!(e, again);
}

fn feature_snapshot(m: &Model<f32>) -> HashMap<String, Tensor<f32>> {
    m.named_tensors()
        .into_iter()
        .filter(|t| !t.name.starts_with("fc."))
        .map(|t| (t.name, t.tensor.clone()))
        .collect()
}

#[test]
fn finetune_replaces_only_the_classifier() {
    let spec = ArchSpec { input_size: 32, ..ArchSpec::resnet(18, Variant::Shared, 1000) };
    let mut m = build_model::<f32>(&spec, 4).unwrap();
    let before = feature_snapshot(&m);
    let count = m.count_params(true);
    finetune_prepare(&mut m, 67, true, 5).unwrap();
    assert_eq!(feature_snapshot(&m), before);
    assert_eq!(m.num_classes(), 67);
    assert_eq!(m.classifier.weight.value.shape().dims(), [67, 512, 1, 1]);
    assert_eq!(count - m.count_params(true), (512 * 1000 + 1000) - (512 * 67 + 67));
    assert!(finetune_prepare(&mut m, 1, true, 5).is_err());
}

#[test]
fn frozen_features_stay_bitwise_identical() {
    let (train, _, pre) = tiny_data();
    let mut m = build_model::<f32>(&tiny_spec(Variant::Shared), 3).unwrap();
    finetune_prepare(&mut m, 3, true, 8).unwrap();
    let before = feature_snapshot(&m);
    let head = m.classifier.weight.value.clone();
    let cfg = SgdConfig { batch_size: 3, ..SgdConfig::default() };
    let mut st = OptimState::default();
    train_epoch(&mut m, &train, &pre, &cfg, &mut st, 0, 1).unwrap();
    assert!(st.step >= 8);
    assert_eq!(feature_snapshot(&m), before);
    assert_ne!(m.classifier.weight.value, head);
    // only the classifier carries momentum
    assert!(st.velocities.iter().all(|(n, _)| n.starts_with("fc.")));
}

#[test]
fn shared_step_equals_tied_unshared_mean() {
    let shared_spec = tiny_spec(Variant::Shared);
    let mut shared = build_model::<f32>(&shared_spec, 21).unwrap();
    let mut tied = build_model::<f32>(&shared_spec.with_variant(Variant::Unshared), 0).unwrap();
    let src: HashMap<String, Tensor<f32>> =
        shared.named_tensors().into_iter().map(|t| (t.name, t.tensor.clone())).collect();
    for t in tied.named_tensors_mut() {
        let key = match t.name.rfind(".weight_r") {
            Some(i) => format!("{}.weight", &t.name[..i]),
            None => t.name.clone(),
        };
        *t.tensor = src[&key].clone();
    }
    let x = Tensor::from_fn([4, 3, 16, 16], |i| ((i * 31 % 37) as f32 / 18.0) - 1.0);
    let labels = [0, 1, 2, 1];
    let mut grads = Vec::new();
    for m in [&mut shared, &mut tied] {
        m.zero_grad();
        let logits = m.forward(&x, true).unwrap();
        let (_, g) = softmax_xent(&logits, &labels).unwrap();
        m.backward(&g).unwrap();
        let by_name: HashMap<String, Tensor<f32>> =
            m.params_mut(true).into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
        grads.push(by_name);
    }
    let (gs, gu) = (&grads[0], &grads[1]);
    for (name, g) in gs {
        let want = if gu.contains_key(name) {
            gu[name].clone()
        } else {
            let mut mean = gu[&format!("{}_r1", name)].clone();
            mean.add_assign(&gu[&format!("{}_r2", name)]).unwrap();
            mean.scale(0.5)
        };
        let scale = want.max_abs().max(1e-3);
        for (a, b) in g.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-4 * scale, "{name}: {a} vs {b}");
        }
    }
}
