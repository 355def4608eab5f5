//! End-to-end training behaviour of the toy networks.

use gsf_core::data::{generate, ClipDataset, Protocol, SyntheticSpec, Task};
use gsf_core::gsf::{FusionMode, GateMode};
use gsf_core::nets::{ArchConfig, ArchKind};
use gsf_core::rng::seeded;
use gsf_core::train::{evaluate, fit, log_text, predict, train_step, TrainConfig, TrainState};
use gsf_core::{GsfError, Tensor};
use rand::seq::SliceRandom;

fn datasets(task: Task, n: usize, eval_n: usize, size: (usize, usize, usize), seed: u64) -> (ClipDataset, ClipDataset) {
    let spec = SyntheticSpec::new(task, size.0, size.1, size.2, seed);
    let eval_spec = SyntheticSpec {
        seed: seed + 1,
        ..spec.clone()
    };
    (
        ClipDataset::new(generate(&spec, n).unwrap()).unwrap(),
        ClipDataset::new(generate(&eval_spec, eval_n).unwrap()).unwrap(),
    )
}

fn tsn_config(arch: ArchKind, classes: usize, frames: usize) -> ArchConfig {
    let mut cfg = ArchConfig::new(arch, classes, frames);
    cfg.gate = GateMode::Zero;
    cfg.fusion = FusionMode::Sum;
    cfg
}

#[test]
fn fit_logs_are_bitwise_reproducible() {
    let (train, eval) = datasets(Task::Order2, 24, 8, (4, 10, 10), 5);
    let run = |seed: u64| {
        let mut arch = ArchConfig::new(ArchKind::InceptionToy, 2, 4);
        arch.width = 8;
        arch.seed = seed;
        let mut model = arch.build::<f32>().unwrap();
        let mut cfg = TrainConfig::new(3);
        cfg.seed = seed;
        cfg.flip = Some(Task::Order2);
        log_text(&fit(&mut model, &train, &eval, &cfg, |_| {}).unwrap())
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a, run(8));
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().all(|l| l.split('\t').count() == 4));
}

#[test]
fn direction4_with_gsf_beats_chance_by_far() {
    let (train, eval) = datasets(Task::Direction4, 256, 128, (8, 16, 16), 21);
    let mut model = ArchConfig::new(ArchKind::InceptionToy, 4, 8).build::<f32>().unwrap();
    let mut cfg = TrainConfig::new(30);
    cfg.flip = Some(Task::Direction4);
    fit(&mut model, &train, &eval, &cfg, |_| {}).unwrap();
    let acc = evaluate(&model, &eval, Protocol::Efficiency, None).unwrap();
    assert!(acc >= 0.90, "direction4 accuracy {acc}");
}

#[test]
fn tsn_mode_ignores_frame_order() {
    let (_, eval) = datasets(Task::Order2, 2, 8, (8, 12, 12), 3);
    for arch in [ArchKind::InceptionToy, ArchKind::BottleneckToy] {
        let mut cfg = tsn_config(arch, 2, 8);
        cfg.width = 8;
        let model = cfg.build::<f32>().unwrap();
        let mut rng = seeded(4);
        for clip in &eval.clips {
            let mut order: Vec<usize> = (0..clip.t).collect();
            order.shuffle(&mut rng);
            let a = predict(&model, clip, Protocol::Efficiency, None).unwrap();
            let b = predict(&model, &clip.reordered(&order), Protocol::Efficiency, None).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-5, "{arch}: {:?} vs {:?}", a.data(), b.data());
        }
        let acc = evaluate(&model, &eval, Protocol::Efficiency, None).unwrap();
        assert_eq!(acc, 0.5);
    }
}

#[test]
fn non_finite_loss_is_a_numeric_error_with_diagnostics() {
    let mut cfg = ArchConfig::new(ArchKind::InceptionToy, 2, 2);
    cfg.width = 4;
    let mut model = cfg.build::<f32>().unwrap();
    let mut state = TrainState::new(&model, 0);
    let batch = Tensor::<f32>::full(&[1, 2, 1, 6, 6], f32::NAN);
    let err = train_step(&mut model, &mut state, &batch, &[0], 0.01, &TrainConfig::new(2)).unwrap_err();
    match err {
        GsfError::Numeric(msg) => assert!(msg.contains("epoch 0 step 0"), "{msg}"),
        other => panic!("expected a numeric error, got {other}"),
    }
}

#[test]
fn bad_labels_and_empty_sets_are_rejected() {
    let (train, eval) = datasets(Task::Direction4, 8, 4, (4, 8, 8), 1);
    let mut model = ArchConfig::new(ArchKind::InceptionToy, 2, 4).build::<f32>().unwrap();
    let r = fit(&mut model, &train, &eval, &TrainConfig::new(2), |_| {});
    assert!(matches!(r, Err(GsfError::Data(_))));
    let mut cfg = TrainConfig::new(2);
    cfg.lr0 = 0.0;
    let mut model = ArchConfig::new(ArchKind::InceptionToy, 4, 4).build::<f32>().unwrap();
    assert!(matches!(
        fit(&mut model, &train, &eval, &cfg, |_| {}),
        Err(GsfError::Config(_))
    ));
}
