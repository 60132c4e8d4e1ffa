use acenet_core::data::synth::synth_membranes;
use acenet_core::data::LabeledSample;
use acenet_core::graph::{Network, NetworkConfig};
use acenet_core::tensor::{LabelMap, Shape, Tape, Tensor};
use acenet_core::training::*;
use acenet_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn membrane(seed: u64, size: usize) -> LabeledSample {
    synth_membranes(seed, size, size, 6).unwrap().sample
}

fn small() -> NetworkConfig {
    NetworkConfig::with_size(2, 4)
}

fn trainer(cfg: TrainConfig, weights: LossWeights, seed: u64) -> Trainer {
    Trainer::new(Network::new(small(), seed).unwrap(), cfg, weights).unwrap()
}

fn quiet(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        augment: AugmentConfig::disabled(),
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

/// Sample whose single image channel holds its own labels.
fn self_labelled(seed: u64, h: usize, w: usize, fov: bool) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u32> = (0..h * w).map(|_| rand::Rng::random_range(&mut rng, 0..2)).collect();
    let image = Tensor::new(Shape::new(1, 1, h, w), labels.iter().map(|&l| l as f32).collect()).unwrap();
    let fov = fov.then(|| labels.iter().map(|&l| l == 1).collect());
    LabeledSample::new("s", image, LabelMap::new(1, h, w, labels).unwrap(), fov).unwrap()
}

#[test]
fn defaults() {
    let t = TrainConfig::default();
    assert_eq!(t.lr, 1e-4);
    assert_eq!(t.batch_size, 1);
    assert_eq!(LossWeights::default().lambda, 1.0);
    let a = AugmentConfig::default();
    assert_eq!(a.zoom_range, [0.8, 1.2]);
    assert_eq!(a.rotate, RotateMode::RightAngles);
}

#[test]
fn formula_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let lp = tape.constant(Tensor::scalar(0.5));
    let ls: Vec<_> = (0..8).map(|_| tape.constant(Tensor::scalar(0.1))).collect();
    let sum = tape.sum_scalars(&ls).unwrap();
    let total = tape.add_scaled(lp, sum, 1.0).unwrap();
    assert!((tape.value(total).item() - 1.3).abs() < 1e-12);
}

#[test]
fn without_side_outputs_total_is_lp() {
    let mut cfg = small();
    cfg.deep_supervision = false;
    let net = Network::<f64>::new(cfg, 3).unwrap();
    let s = membrane(1, 16);
    let mut tape = Tape::new();
    let x = tape.constant(s.image.cast());
    let (out, _) = net.forward(&mut tape, x).unwrap();
    let (_, b) = total_loss(&mut tape, &out, &s.labels, LossWeights::default(), None, 0).unwrap();
    assert!(b.ls.is_empty());
    assert_eq!(b.total.to_bits(), b.lp.to_bits());
}

#[test]
fn side_count_mismatch_is_an_error() {
    let net = Network::<f64>::new(small(), 3).unwrap();
    let s = membrane(1, 16);
    let mut tape = Tape::new();
    let x = tape.constant(s.image.cast());
    let (out, _) = net.forward(&mut tape, x).unwrap();
    assert!(total_loss(&mut tape, &out, &s.labels, LossWeights::default(), None, 3).is_err());
}

fn side_grads(lambda: f64) -> Vec<(String, f64)> {
    let mut net = Network::<f64>::new(small(), 5).unwrap();
    let s = membrane(2, 16);
    let mut tape = Tape::new();
    let x = tape.constant(s.image.cast());
    let (out, bound) = net.forward(&mut tape, x).unwrap();
    let (total, _) = total_loss(&mut tape, &out, &s.labels, LossWeights { lambda }, None, 4).unwrap();
    tape.backward(total).unwrap();
    net.params.accumulate_grads(&tape, &bound);
    let names = net.side_head_param_names();
    assert!(!names.is_empty());
    names
        .into_iter()
        .map(|n| {
            let g = net.params.by_name(&n).unwrap().grad.clone().unwrap_or_default();
            let norm = g.iter().map(|v| v.abs()).sum();
            (n, norm)
        })
        .collect()
}

#[test]
fn zero_lambda_silences_side_heads() {
    for (name, norm) in side_grads(0.0) {
        assert_eq!(norm, 0.0, "{name}");
    }
    for (name, norm) in side_grads(1.0) {
        assert!(norm > 0.0, "{name}");
    }
}

#[test]
fn recorded_total_matches_formula_bitwise() {
    let cfg = TrainConfig {
        steps: 100,
        seed: 11,
        augment: AugmentConfig {
            rotate: RotateMode::SmallAngle,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let samples: Vec<_> = (0..3).map(|i| membrane(i, 16)).collect();
    for lambda in [1.0, 0.37] {
        let mut t = trainer(cfg, LossWeights { lambda }, 4);
        t.run(&samples, |_, _| Ok(())).unwrap();
        assert_eq!(t.trace.len(), 100);
        for b in &t.trace {
            assert_eq!(b.ls.len(), 4);
            let sum = b.ls.iter().fold(0.0f32, |acc, &v| acc + v);
            let expect = b.lp + lambda as f32 * sum;
            assert_eq!(b.total.to_bits(), expect.to_bits());
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = TrainConfig { lr: 0.0, ..quiet(5, 0) };
    let mut t = trainer(cfg, LossWeights::default(), 2);
    let before: Vec<Vec<f32>> = t.net.params.iter().map(|p| p.tensor.data().to_vec()).collect();
    t.run(&[membrane(3, 16)], |_, _| Ok(())).unwrap();
    for (p, b) in t.net.params.iter().zip(&before) {
        assert_eq!(p.tensor.data(), b.as_slice(), "{}", p.name);
        assert!(p.grad.is_none() || p.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }
    let first = t.trace[0].total;
    assert!(t.trace.iter().all(|b| b.total.to_bits() == first.to_bits()));
}

#[test]
fn loss_trends_down_on_one_sample() {
    let cfg = NetworkConfig::with_size(2, 8);
    let mut t = Trainer::new(Network::new(cfg, 1).unwrap(), quiet(50, 1), LossWeights::default()).unwrap();
    t.run(&[membrane(4, 32)], |_, _| Ok(())).unwrap();
    let totals: Vec<f32> = t.trace.iter().map(|b| b.total).collect();
    let avg: Vec<f32> = totals.windows(10).map(|w| w.iter().sum::<f32>() / 10.0).collect();
    for pair in avg.windows(2) {
        assert!(pair[1] < pair[0], "moving average rose: {avg:?}");
    }
}

#[test]
fn seeded_runs_are_identical() {
    let samples: Vec<_> = (0..2).map(|i| membrane(i, 16)).collect();
    let run = || {
        let cfg = TrainConfig {
            steps: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut t = trainer(cfg, LossWeights::default(), 9);
        t.run(&samples, |_, _| Ok(())).unwrap();
        let trace: Vec<String> = t.trace.iter().enumerate().map(|(i, b)| b.trace_line(i)).collect();
        let params: Vec<u32> = t.net.params.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect();
        (trace, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn trace_line_is_tab_separated() {
    let b = LossBreakdown {
        lp: 0.5f32,
        ls: vec![0.25, 0.125],
        lambda: 1.0,
        total: 0.875,
    };
    assert_eq!(b.trace_line(7), "7\t0.5\t0.25\t0.125\t0.875");
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let mut s = membrane(0, 16);
    s.image.data_mut()[5] = f32::NAN;
    let mut t = trainer(quiet(3, 0), LossWeights::default(), 0);
    t.step_on(&[membrane(1, 16)]).unwrap();
    match t.step_on(&[s]) {
        Err(Error::NonFinite { step, trace }) => {
            assert_eq!(step, 1);
            assert_eq!(trace.len(), 2);
            assert!(trace[1].is_nan());
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(t.step, 1);
}

#[test]
fn padding_handles_awkward_sizes() {
    let s = synth_membranes(3, 13, 10, 4).unwrap().sample;
    let mut t = trainer(quiet(2, 0), LossWeights::default(), 0);
    t.run(std::slice::from_ref(&s), |_, _| Ok(())).unwrap();
    let probs = predict_probabilities(&t.net, &s.image).unwrap();
    assert_eq!(probs.shape(), Shape::new(1, 2, 13, 10));
    assert_eq!(predict_labels(&t.net, &s.image).unwrap().len(), 130);
}

#[test]
fn batches_stack_and_reject_mixed_sizes() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..quiet(2, 0)
    };
    let mut t = trainer(cfg, LossWeights::default(), 0);
    let same = [membrane(0, 16), membrane(1, 16)];
    t.run(&same, |_, _| Ok(())).unwrap();
    assert_eq!(t.trace.len(), 2);
    let mixed = [membrane(0, 16), membrane(1, 32)];
    assert!(matches!(t.step_on(&mixed), Err(Error::Data(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_zoom = AugmentConfig {
        zoom_range: [0.0, 1.0],
        ..AugmentConfig::default()
    };
    assert!(bad_zoom.validate().is_err());
    let inverted = AugmentConfig {
        zoom_range: [1.2, 0.8],
        ..AugmentConfig::default()
    };
    assert!(inverted.validate().is_err());
    let steep = AugmentConfig {
        rotate: RotateMode::SmallAngle,
        max_degrees: 45.0,
        ..AugmentConfig::default()
    };
    assert!(steep.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(LossWeights { lambda: -1.0 }.validate().is_err());
    let net = Network::new(small(), 0).unwrap();
    assert!(Trainer::new(net, TrainConfig { lr: f64::NAN, ..TrainConfig::default() }, LossWeights::default()).is_err());
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = self_labelled(1, 9, 7, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        assert_eq!(augment_sample(&s, &AugmentConfig::disabled(), &mut rng).unwrap(), s);
    }
}

#[test]
fn flips_are_involutions() {
    let s = self_labelled(2, 6, 9, true);
    for t in [
        Transform { flip_h: true, ..Transform::IDENTITY },
        Transform { flip_v: true, ..Transform::IDENTITY },
    ] {
        let once = apply_transform(&s, &t).unwrap();
        assert_ne!(once, s);
        assert_eq!(apply_transform(&once, &t).unwrap(), s);
    }
}

#[test]
fn full_turn_is_identity() {
    let s = self_labelled(3, 8, 8, true);
    let t = Transform {
        quarter_turns: 4,
        zoom: 1.0,
        ..Transform::IDENTITY
    };
    assert_eq!(apply_transform(&s, &t).unwrap(), s);
    let mut r = s.clone();
    for _ in 0..4 {
        r = rotate90(&r).unwrap();
    }
    assert_eq!(r, s);
}

#[test]
fn quarter_turn_is_counter_clockwise() {
    let image = Tensor::from_fn(Shape::new(1, 1, 2, 2), |[_, _, y, x]| (y * 2 + x) as f32);
    let s = LabeledSample::new("q", image, LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap(), None).unwrap();
    let r = rotate90(&s).unwrap();
    assert_eq!(r.image.data(), &[1.0, 3.0, 0.0, 2.0]);
    assert_eq!(r.labels.data, vec![1, 3, 0, 2]);
    assert!(rotate90(&self_labelled(0, 3, 4, false)).is_err());
}

#[test]
fn overfit_check_is_deterministic() {
    let s = membrane(5, 16);
    let a = overfit_check(&small(), &s, 3, 7).unwrap();
    let b = overfit_check(&small(), &s, 3, 7).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn untrained_network_is_near_chance_on_balanced_labels() {
    // Halves of equal size with matching intensities.
    let (h, w) = (16, 16);
    let labels: Vec<u32> = (0..h * w).map(|i| ((i % w) >= w / 2) as u32).collect();
    let image = Tensor::new(Shape::new(1, 1, h, w), labels.iter().map(|&l| 0.2 + 0.6 * l as f32).collect()).unwrap();
    let s = LabeledSample::new("halves", image, LabelMap::new(1, h, w, labels).unwrap(), None).unwrap();
    let acc = overfit_check(&small(), &s, 0, 0).unwrap();
    assert!((0.2..=0.8).contains(&acc), "{acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_keeps_size_and_label_alphabet(seed in 0u64..10_000, h in 4usize..14, w in 4usize..14) {
        let s = self_labelled(seed, h, w, true);
        let cfg = AugmentConfig { rotate: RotateMode::SmallAngle, max_degrees: 30.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment_sample(&s, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.image.shape(), s.image.shape());
        prop_assert_eq!((out.labels.h, out.labels.w), (h, w));
        prop_assert!(out.labels.data.iter().all(|&l| l < 2));
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // The FOV here equals the label map, so the same nearest lookup keeps them equal.
        let fov: Vec<u32> = out.fov.unwrap().iter().map(|&f| f as u32).collect();
        prop_assert_eq!(fov, out.labels.data);
    }

    #[test]
    fn exact_transforms_move_labels_with_pixels(seed in 0u64..10_000, n in 3usize..10, fh: bool, fv: bool, k in 0u8..8) {
        let s = self_labelled(seed, n, n, false);
        let t = Transform { flip_h: fh, flip_v: fv, quarter_turns: k, ..Transform::IDENTITY };
        let out = apply_transform(&s, &t).unwrap();
        let from_image: Vec<u32> = out.image.data().iter().map(|&v| v as u32).collect();
        prop_assert_eq!(from_image, out.labels.data);
    }
}
