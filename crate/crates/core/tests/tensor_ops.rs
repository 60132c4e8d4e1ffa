use acenet_core::tensor::gradcheck::{grad_check, primitive_suite};
use acenet_core::tensor::{ConvOptions, LabelMap, Padding, Shape, Tape, Tensor};
use acenet_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(Shape(shape), data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(Shape(shape), |_| rng.random_range(-1.0..1.0))
}

/// Direct sliding-window convolution with symmetric zero padding `pad`.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, dil: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, k, _] = w.shape().0;
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    Tensor::from_fn(Shape::new(n, cout, oh, ow), |[bn, co, oy, ox]| {
        let mut s = b[co];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky * dil) as i64 - pad as i64;
                    let ix = (ox * stride + kx * dil) as i64 - pad as i64;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += x.at([bn, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                    }
                }
            }
        }
        s
    })
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(t([1, 1, 1, 1], vec![5.0]));
    let w = tape.constant(t([1, 1, 1, 1], vec![1.0]));
    let b = tape.constant(t([1, 1, 1, 1], vec![0.0]));
    let y = tape.conv2d(x, w, Some(b), ConvOptions::default()).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn conv_dilated_same_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, dil) in [(3usize, 2usize), (8, 2), (8, 4), (5, 1)] {
        let x = random(&mut rng, [2, 3, h, h + 1]);
        let w = random(&mut rng, [4, 3, 3, 3]);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let vb = tape.constant(t([4, 1, 1, 1], b.clone()));
        let y = tape.conv2d(vx, vw, Some(vb), ConvOptions::dilated(dil)).unwrap();
        let expected = naive_conv(&x, &w, &b, 1, dil, dil);
        assert_eq!(tape.shape(y), expected.shape());
        assert_close(tape.value(y).data(), expected.data(), 1e-12);
    }
}

#[test]
fn conv_strided_valid_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, [1, 2, 9, 7]);
    let w = random(&mut rng, [3, 2, 3, 3]);
    let b = vec![0.1, -0.2, 0.3];
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let vb = tape.constant(t([3, 1, 1, 1], b.clone()));
    let opts = ConvOptions {
        stride: 2,
        dilation: 1,
        padding: Padding::Valid,
    };
    let y = tape.conv2d(vx, vw, Some(vb), opts).unwrap();
    let expected = naive_conv(&x, &w, &b, 2, 1, 0);
    assert_eq!(tape.shape(y), Shape::new(1, 3, 4, 3));
    assert_close(tape.value(y).data(), expected.data(), 1e-12);
}

#[test]
fn conv_zero_kernel_yields_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 2, 4, 4), 3.0));
    let w = tape.constant(Tensor::zeros(Shape::new(2, 2, 3, 3)));
    let b = tape.constant(t([2, 1, 1, 1], vec![0.5, -1.5]));
    let y = tape.conv2d(x, w, Some(b), ConvOptions::dilated(2)).unwrap();
    let out = tape.value(y);
    assert!(out.plane(0, 0).iter().all(|&v| v == 0.5));
    assert!(out.plane(0, 1).iter().all(|&v| v == -1.5));
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w_bad = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    match tape.conv2d(x, w_bad, None, ConvOptions::default()) {
        Err(Error::Shape { operand, .. }) => assert_eq!(operand, "weight"),
        other => panic!("{other:?}"),
    }
    let w_even = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    assert!(matches!(tape.conv2d(x, w_even, None, ConvOptions::default()), Err(Error::Shape { .. })));
    let valid = ConvOptions {
        padding: Padding::Valid,
        ..Default::default()
    };
    assert!(tape.conv2d(x, w_even, None, valid).is_ok());
}

#[test]
fn transposed_conv_single_pixel_spread() {
    let mut tape = Tape::new();
    let x = tape.constant(t([1, 1, 1, 1], vec![1.0]));
    let w = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
    let b = tape.constant(t([1, 1, 1, 1], vec![0.0]));
    let y = tape.conv_transpose2x2(x, w, Some(b)).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 2, 2));
    assert_eq!(tape.value(y).data(), &[1.0; 4]);
}

#[test]
fn transposed_conv_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, [2, 3, 2, 2]);
    let w = random(&mut rng, [3, 2, 2, 2]);
    let b = [0.25, -0.5];
    let mut expected = Tensor::from_fn(Shape::new(2, 2, 4, 4), |[_, co, _, _]| b[co]);
    for n in 0..2 {
        for ci in 0..3 {
            for y in 0..2 {
                for xx in 0..2 {
                    for co in 0..2 {
                        for a in 0..2 {
                            for c in 0..2 {
                                let idx = expected.index([n, co, 2 * y + a, 2 * xx + c]);
                                expected.data_mut()[idx] += x.at([n, ci, y, xx]) * w.at([ci, co, a, c]);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(x), tape.constant(w));
    let vb = tape.constant(t([2, 1, 1, 1], b.to_vec()));
    let y = tape.conv_transpose2x2(vx, vw, Some(vb)).unwrap();
    assert_close(tape.value(y).data(), expected.data(), 1e-12);
}

#[test]
fn transposed_conv_zero_input_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let w = tape.constant(Tensor::full(Shape::new(2, 1, 2, 2), 0.7));
    let b = tape.constant(t([1, 1, 1, 1], vec![2.5]));
    let y = tape.conv_transpose2x2(x, w, Some(b)).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 6, 6));
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    // <convT(x), y> == <x, conv_stride2(y)> with the kernel transposed.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, [1, 3, 3, 2]);
    let y = random(&mut rng, [1, 2, 6, 4]);
    let wt = random(&mut rng, [3, 2, 2, 2]);
    let w = Tensor::from_fn(Shape::new(3, 2, 2, 2), |[co, ci, a, c]| wt.at([co, ci, a, c]));
    let mut tape = Tape::new();
    let (vx, vwt) = (tape.constant(x.clone()), tape.constant(wt));
    let up = tape.conv_transpose2x2(vx, vwt, None).unwrap();
    let lhs: f64 = tape.value(up).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let (vy, vw) = (tape.constant(y), tape.constant(w));
    let opts = ConvOptions {
        stride: 2,
        dilation: 1,
        padding: Padding::Valid,
    };
    let down = tape.conv2d(vy, vw, None, opts).unwrap();
    let rhs: f64 = tape.value(down).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 7.0));
    let y = tape.maxpool2x2(x).unwrap();
    let s = tape.dot_const(y, &[1.0]).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_matches_window_max_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, [1, 2, 4, 4]);
    let expected = Tensor::from_fn(Shape::new(1, 2, 2, 2), |[n, c, y, xx]| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                m = m.max(x.at([n, c, 2 * y + dy, 2 * xx + dx]));
            }
        }
        m
    });
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = tape.maxpool2x2(v).unwrap();
    assert_eq!(tape.value(y).data(), expected.data());
}

#[test]
fn maxpool_odd_extent_rejected_with_padding_advice() {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(Tensor::zeros(Shape::new(1, 1, 5, 4)));
    match tape.maxpool2x2(v) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("pad"), "{detail}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn resize_same_size_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, [1, 3, 5, 7]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.resize_bilinear(v, 5, 7).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn resize_upscale_matches_interpolation_oracle() {
    // Sample centres land at (i + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25;
    // after clamping, the interpolation weights on the second row/column are
    // 0, 0.25, 0.75 and 1. With [[0, 2], [4, 6]] this gives 4 * wy + 2 * wx.
    let mut tape = Tape::new();
    let v = tape.constant(t([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]));
    let y = tape.resize_bilinear(v, 4, 4).unwrap();
    let rows = [0.0, 1.0, 3.0, 4.0];
    let cols = [0.0, 0.5, 1.5, 2.0];
    let expected: Vec<f64> = rows.iter().flat_map(|r| cols.iter().map(move |c| r + c)).collect();
    assert_eq!(tape.value(y).data(), &expected[..]);
}

#[test]
fn resize_constant_stays_constant() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(Shape::new(1, 2, 3, 5), 0.375));
    for (h, w) in [(7, 2), (1, 1), (12, 20)] {
        let y = tape.resize_bilinear(v, h, w).unwrap();
        assert!(tape.value(y).data().iter().all(|&x| x == 0.375));
    }
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random(&mut rng, [2, 2, 3, 3]);
    let b = random(&mut rng, [2, 3, 3, 3]);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let single = tape.concat_channels(&[va]).unwrap();
    assert_eq!(tape.value(single), &a);
    let both = tape.concat_channels(&[va, vb]).unwrap();
    let out = tape.value(both);
    assert_eq!(out.shape(), Shape::new(2, 5, 3, 3));
    for n in 0..2 {
        assert_eq!(out.plane(n, 1), a.plane(n, 1));
        assert_eq!(out.plane(n, 2), b.plane(n, 0));
        assert_eq!(out.plane(n, 4), b.plane(n, 2));
    }
    let c = tape.constant(Tensor::zeros(Shape::new(2, 1, 3, 4)));
    match tape.concat_channels(&[va, vb, c]) {
        Err(Error::Shape { operand, .. }) => assert_eq!(operand, "input 2"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn concat_slice_sum_gradient_is_block_indicator() {
    // d/d(input) of the sum over output channels 2..5 (exactly input b).
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = random(&mut rng, [1, 2, 2, 2]);
    let b = random(&mut rng, [1, 3, 2, 2]);
    let f = |tape: &mut Tape<f64>, v: &[acenet_core::tensor::Var]| {
        let cat = tape.concat_channels(&[v[0], v[1]])?;
        let s = tape.slice_channels(cat, 2, 3)?;
        tape.dot_const(s, &[1.0; 12])
    };
    assert!(grad_check(f, &[a.clone(), b.clone()], 1e-6).unwrap() < 1e-9);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let y = f(&mut tape, &[va, vb]).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(va).unwrap().iter().all(|&g| g == 0.0));
    assert!(tape.grad(vb).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn relu_values_and_mask() {
    let mut tape = Tape::new();
    let x = tape.leaf(t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.dot_const(y, &[1.0, 1.0, 1.0]).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

fn labels(n: usize, h: usize, w: usize, data: Vec<u32>) -> LabelMap {
    LabelMap::new(n, h, w, data).unwrap()
}

#[test]
fn cross_entropy_uniform_logits_give_ln2() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 2, 2, 3), 0.3));
    let l = tape.softmax_cross_entropy(x, &labels(1, 2, 3, vec![0, 1, 1, 0, 1, 0]), None).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn cross_entropy_huge_correct_margin_vanishes() {
    let mut tape = Tape::new();
    let x = tape.constant(t([1, 2, 1, 2], vec![1000.0, -1000.0, -1000.0, 1000.0]));
    let l = tape.softmax_cross_entropy(x, &labels(1, 1, 2, vec![0, 1]), None).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_| rng.random_range(-5.0..5.0));
    let lab = labels(1, 2, 2, vec![2, 0, 1, 2]);
    let mut expected = 0.0;
    for p in 0..4 {
        let (y, xx) = (p / 2, p % 2);
        let zs: Vec<f64> = (0..3).map(|c| x.at([0, c, y, xx])).collect();
        let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
        expected += lse - zs[lab.data[p] as usize];
    }
    expected /= 4.0;
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let l = tape.softmax_cross_entropy(v, &lab, None).unwrap();
    let got = tape.value(l).item();
    assert!((got - expected).abs() <= 1e-12 * expected.abs(), "{got} vs {expected}");
}

#[test]
fn cross_entropy_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    match tape.softmax_cross_entropy(x, &labels(1, 2, 2, vec![0, 1, 2, 0]), None) {
        Err(Error::Data(msg)) => assert!(msg.contains("y=1, x=0"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let none = [false; 4];
    assert!(matches!(
        tape.softmax_cross_entropy(x, &labels(1, 2, 2, vec![0; 4]), Some(&none)),
        Err(Error::Data(_))
    ));
}

#[test]
fn masked_pixels_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t([1, 2, 1, 2], vec![0.1, 0.9, -0.4, 0.2]));
    let l = tape.softmax_cross_entropy(x, &labels(1, 1, 2, vec![1, 0]), Some(&[true, false])).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!((g[1], g[3]), (0.0, 0.0));
    assert!(g[0] != 0.0 && g[2] != 0.0);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn primitive_gradients_agree_with_finite_differences() {
    for seed in [1, 2, 3] {
        for r in primitive_suite(seed).unwrap() {
            assert!(r.passed(), "seed {seed}: {} error {:e}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 2, 8, 8), |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(Shape::new(3, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x), tape.leaf(w));
        let y = tape.conv2d(vx, vw, None, ConvOptions::dilated(2)).unwrap();
        let y = tape.relu(y);
        let p = tape.maxpool2x2(y).unwrap();
        let u = tape.resize_bilinear(p, 8, 8).unwrap();
        let l = tape.softmax_cross_entropy(u, &LabelMap::new(1, 8, 8, vec![1; 64]).unwrap(), None).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item().to_bits(), tape.grad(vw).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_padding_preserves_extent(h in 1usize..12, w in 1usize..12, k in prop::sample::select(vec![1usize, 3]), d in prop::sample::select(vec![1usize, 2, 4])) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, h, w)));
        let wt = tape.constant(Tensor::zeros(Shape::new(3, 2, k, k)));
        let y = tape.conv2d(x, wt, None, ConvOptions::dilated(d)).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(1, 3, h, w));
    }

    #[test]
    fn concat_then_split_is_identity(c1 in 1usize..4, c2 in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, [2, c1, 3, 2]);
        let b = random(&mut rng, [2, c2, 3, 2]);
        let ga: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gb: Vec<f64> = (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let cat = tape.concat_channels(&[va, vb]).unwrap();
        let sa = tape.slice_channels(cat, 0, c1).unwrap();
        let sb = tape.slice_channels(cat, c1, c2).unwrap();
        prop_assert_eq!(tape.value(sa), &a);
        prop_assert_eq!(tape.value(sb), &b);
        let la = tape.dot_const(sa, &ga).unwrap();
        let lb = tape.dot_const(sb, &gb).unwrap();
        let total = tape.sum_scalars(&[la, lb]).unwrap();
        tape.backward(total).unwrap();
        prop_assert_eq!(tape.grad(va).unwrap(), &ga[..]);
        prop_assert_eq!(tape.grad(vb).unwrap(), &gb[..]);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_over_classes(c in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(Shape::new(2, c, 3, 3), |_| rng.random_range(-3.0..3.0));
        let lab = LabelMap::new(2, 3, 3, (0..18).map(|_| rng.random_range(0..c as u32)).collect()).unwrap();
        let mask: Vec<bool> = (0..18).map(|i| i % 4 != 0).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let l = tape.softmax_cross_entropy(v, &lab, Some(&mask)).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        for n in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..c).map(|k| g[(n * c + k) * 9 + p]).sum();
                prop_assert!(s.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_primitive_suites_pass(seed in 100u64..10_000) {
        for r in primitive_suite(seed).unwrap() {
            prop_assert!(r.passed(), "{} error {:e}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn nan_survives_relu_and_pooling() {
    let mut tape = Tape::new();
    let x = tape.leaf(t([1, 1, 2, 2], vec![1.0, f64::NAN, 3.0, -2.0]));
    let r = tape.relu(x);
    assert!(tape.value(r).data()[1].is_nan());
    assert_eq!(tape.value(r).data()[3], 0.0);
    let p = tape.maxpool2x2(x).unwrap();
    assert!(tape.value(p).item().is_nan());
}
