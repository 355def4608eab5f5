//! Property tests for the GSF block, the schedule, accounting and data.

use proptest::prelude::*;
use rand::Rng;

use gsf_core::accounting::{model_macs, model_params};
use gsf_core::data::{
    crops, generate, sample_frames, segment, Clip, ClipDataset, Protocol, SampleMode, SyntheticSpec, Task,
};
use gsf_core::gsf::{FusionMode, GateMode, GsfConfig, GsfModule};
use gsf_core::layers::Parameterized;
use gsf_core::nets::{ArchConfig, ArchKind};
use gsf_core::rng::seeded;
use gsf_core::selftest::{
    affected_frames, convex_excess, fan_in_module, fusion_range, gate_range, group_parts, passthrough_intact,
    random_config, random_learned_config, random_shape, reach_bound, temporal_reach, CONVEX_SLACK, FUSIONS, GATES,
};
use gsf_core::train::{lr_at, predict, train_step, TrainConfig, TrainState};
use gsf_core::Tensor;

const STRUCTURAL_CASES: u32 = 500;

fn structural() -> ProptestConfig {
    ProptestConfig::with_cases(STRUCTURAL_CASES)
}

proptest! {
    #![proptest_config(structural())]

    #[test]
    fn passthrough_channels_are_bit_exact(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let cfg = random_config(&mut rng, 16);
        let m = GsfModule::<f32>::random(cfg, 0.5, &mut rng).unwrap();
        let x = Tensor::<f32>::randn(&random_shape(&mut rng, cfg.channels_in), 1.0, &mut rng);
        prop_assert!(passthrough_intact(&m, &x).unwrap());
    }

    #[test]
    fn learned_fusion_is_a_convex_combination(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let cfg = random_learned_config(&mut rng, 12, FusionMode::Learned);
        let std = rng.gen_range(0.05..1.0);
        let m = GsfModule::<f64>::random(cfg, std, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&random_shape(&mut rng, cfg.channels_in), 1.0, &mut rng);
        prop_assert!(convex_excess(&m, &x).unwrap() <= CONVEX_SLACK);
    }

    #[test]
    fn single_frame_changes_reach_bounded_frames(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let gate = GATES[rng.gen_range(0..GATES.len())];
        let fusion = FUSIONS[rng.gen_range(0..FUSIONS.len())];
        let cfg = loop {
            let cfg = random_config(&mut rng, 12).with_modes(gate, fusion);
            if cfg.validate().is_ok() {
                break cfg;
            }
        };
        let std = rng.gen_range(0.05..1.0);
        let m = GsfModule::<f64>::random(cfg, std, &mut rng).unwrap();
        let mut shape = random_shape(&mut rng, cfg.channels_in);
        shape[2] = rng.gen_range(1..=8);
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let t0 = rng.gen_range(0..shape[2]);
        let reach = temporal_reach(&m, &x, t0, &mut rng).unwrap();
        prop_assert!(reach <= reach_bound(gate, fusion), "{gate}/{fusion}: reach {reach}");
        if gate != GateMode::Learned || fusion != FusionMode::Learned {
            prop_assert!(reach <= 2);
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let fusion = FUSIONS[rng.gen_range(0..2)];
        let cfg = random_learned_config(&mut rng, 12, fusion);
        let m = fan_in_module(&mut rng, cfg).unwrap();
        let mut shape = random_shape(&mut rng, cfg.processed_channels());
        shape[1] = cfg.processed_channels();
        let std = rng.gen_range(0.1..3.0);
        let (lo, hi) = gate_range(&m, &Tensor::<f64>::randn(&shape, std, &mut rng)).unwrap();
        prop_assert!(lo > -1.0 && hi < 1.0, "[{lo}, {hi}]");
    }

    #[test]
    fn fusion_weights_lie_strictly_inside_unit_interval(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let cfg = random_learned_config(&mut rng, 12, FusionMode::Learned);
        let m = fan_in_module(&mut rng, cfg).unwrap();
        let shape = random_shape(&mut rng, cfg.channels_in);
        let std = rng.gen_range(0.1..3.0);
        let x = Tensor::<f64>::randn(&shape, std, &mut rng);
        let (lo, hi) = fusion_range(&m, &x).unwrap();
        prop_assert!(lo > 0.0 && hi < 1.0, "[{lo}, {hi}]");
        for (g, (ys, r)) in group_parts(&m, &x).unwrap().iter().enumerate() {
            let w = m.fusion_weights(g, ys, r).unwrap();
            prop_assert_eq!(w.shape(), &ys.shape()[..3]);
        }
    }
}

#[test]
fn learned_gate_and_fusion_reach_three_frames() {
    let cfg = GsfConfig::new(4).with_fraction(1.0);
    let m = GsfModule::<f64>::random(cfg, 0.5, &mut seeded(1)).unwrap();
    let x = Tensor::<f64>::randn(&[1, 4, 8, 4, 4], 1.0, &mut seeded(2));
    let reached = affected_frames(&m, &x, 4, &mut seeded(3)).unwrap();
    assert_eq!(reached, vec![1, 2, 3, 4, 5, 6, 7]);
}

proptest! {
    #[test]
    fn schedule_is_continuous_at_warmup(epochs in 2usize..300, lr0 in 1e-4f64..1.0) {
        let mut cfg = TrainConfig::new(epochs);
        cfg.lr0 = lr0;
        let w = cfg.warmup_epochs;
        if w > 0 {
            prop_assert!((lr_at(w - 1, &cfg).unwrap() - lr_at(w, &cfg).unwrap()).abs() <= 1e-12 * lr0);
        }
        prop_assert_eq!(lr_at(w, &cfg).unwrap(), lr0);
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_at(e, &cfg).unwrap()).collect();
        prop_assert!(lrs[..w].windows(2).all(|p| p[0] < p[1]));
        prop_assert!(lrs[w..].windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(lrs.iter().all(|&l| l > 0.0 && l <= lr0));
        prop_assert!(lr_at(epochs, &cfg).is_err());
    }

    #[test]
    fn analytic_costs_match_the_tape(seed in any::<u64>(), bottleneck in any::<bool>(), gsf in any::<bool>()) {
        let mut rng = seeded(seed);
        let arch = if bottleneck { ArchKind::BottleneckToy } else { ArchKind::InceptionToy };
        let frames = rng.gen_range(1..=4);
        let mut cfg = ArchConfig::new(arch, rng.gen_range(2..=5), frames);
        cfg.width = 4 * rng.gen_range(1..=3);
        cfg.gsf = gsf;
        cfg.gate = GATES[rng.gen_range(0..4)];
        cfg.fusion = FUSIONS[rng.gen_range(0..2)];
        cfg.fraction = [0.5, 1.0][rng.gen_range(0..2)];
        cfg.seed = seed;
        let built = cfg.build::<f32>();
        prop_assume!(built.is_ok(), "{:?}", built.err());
        let model = built.unwrap();
        let (h, w) = (rng.gen_range(4..=9), rng.gen_range(4..=9));
        let clips = rng.gen_range(1..=2);
        prop_assert_eq!(model_macs(&model, clips, h, w), model.measured_macs(&[clips, frames, 1, h, w]).unwrap());
        prop_assert_eq!(model_params(&model), model.param_count());
    }

    #[test]
    fn jittered_frames_stay_in_their_segments(len in 1usize..64, t in 1usize..16, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let idx = sample_frames(len, t, SampleMode::TrainJitter, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), t);
        for (i, &f) in idx.iter().enumerate() {
            let (lo, hi) = segment(len, t, i);
            prop_assert!(f >= lo && f < hi.max(lo + 1) && f < len, "frame {f} outside {lo}..{hi}");
        }
        let a = sample_frames(len, t, SampleMode::EvalCenter, &mut rng).unwrap();
        let b = sample_frames(len, t, SampleMode::EvalCenter, &mut seeded(seed ^ 1)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn crops_fit_inside_the_frame(h in 1usize..200, w in 1usize..200, frac in 0.05f64..1.0) {
        let size = ((h.min(w) as f64 * frac) as usize).max(1);
        for p in [Protocol::Efficiency, Protocol::Accuracy, Protocol::Accuracy10] {
            let list = crops(p, h, w, size).unwrap();
            prop_assert_eq!(list.len(), if p == Protocol::Efficiency { 1 } else { 3 * p.clips() });
            for (_, r) in list {
                prop_assert!(r.top + r.size <= h && r.left + r.size <= w);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regeneration_is_byte_identical(seed in any::<u64>(), order in any::<bool>(), n in 2usize..12) {
        let task = if order { Task::Order2 } else { Task::Direction4 };
        let spec = SyntheticSpec::new(task, 6, 12, 12, seed);
        let n = n.max(task.num_classes());
        let a = generate(&spec, n).unwrap();
        let b = generate(&spec, n).unwrap();
        prop_assert_eq!(&a, &b);
        let labels: Vec<usize> = a.iter().map(|c| c.label).collect();
        for k in 0..task.num_classes() {
            let count = labels.iter().filter(|&&l| l == k).count();
            prop_assert!(count.abs_diff(n / task.num_classes()) <= 1);
        }
    }

    #[test]
    fn bar_intensity_matches_coverage(seed in any::<u64>()) {
        let spec = SyntheticSpec::new(Task::Direction4, 8, 24, 24, seed);
        let clips = generate(&spec, 64).unwrap();
        let (sum, count) = clips.iter().fold((0.0, 0usize), |(s, n), c| {
            (s + c.pixels.iter().map(|&p| p as f64).sum::<f64>(), n + c.pixels.len())
        });
        let mean = sum / count as f64;
        let expect = spec.expected_mean();
        prop_assert!((mean - expect).abs() <= 0.01 * expect, "mean {mean} vs {expect}");
    }

    #[test]
    fn identical_views_average_to_the_single_view(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut cfg = ArchConfig::new(ArchKind::InceptionToy, 3, 4);
        cfg.width = 4;
        cfg.seed = seed;
        let model = cfg.build::<f32>().unwrap();
        let frame: Vec<u8> = (0..100).map(|_| rng.gen()).collect();
        let clip = Clip { t: 8, c: 1, h: 10, w: 10, pixels: frame.repeat(8), label: 0 };
        let one = predict(&model, &clip, Protocol::Efficiency, None).unwrap();
        let many = predict(&model, &clip, Protocol::Accuracy, None).unwrap();
        prop_assert!(one.max_abs_diff(&many) <= 1e-6, "{:?} vs {:?}", one.data(), many.data());
    }

    #[test]
    fn one_small_step_lowers_the_loss(seed in any::<u64>()) {
        let mut cfg = ArchConfig::new(ArchKind::InceptionToy, 2, 4);
        cfg.width = 4;
        cfg.seed = seed;
        let mut model = cfg.build::<f32>().unwrap();
        let spec = SyntheticSpec::new(Task::Order2, 4, 8, 8, seed);
        let data = ClipDataset::new(generate(&spec, 4).unwrap()).unwrap();
        let views: Vec<_> = data.clips.iter().map(|c| (c, vec![0, 1, 2, 3], gsf_core::data::Rect { top: 0, left: 0, size: 8 }, false)).collect();
        let batch = gsf_core::data::batch_tensor::<f32>(&views).unwrap();
        let labels: Vec<usize> = data.clips.iter().map(|c| c.label).collect();
        let mut tc = TrainConfig::new(10);
        tc.dropout = 0.0;
        tc.weight_decay = 0.0;
        model.dropout = 0.0;
        let mut state = TrainState::new(&model, seed);
        let before = train_step(&mut model, &mut state, &batch, &labels, 1e-3, &tc).unwrap();
        let after = train_step(&mut model, &mut state, &batch, &labels, 0.0, &tc).unwrap();
        prop_assert!(after < before, "loss {before} -> {after}");
    }
}
