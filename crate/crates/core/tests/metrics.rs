use std::collections::HashMap;

use acenet_core::metrics::{
    auc, connected_components, overlay, pixel_metrics, roc, trapezoid_area, vrand, Connectivity, BLUE, RED, WHITE,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Union-find labelling, renumbered by first appearance in raster order.
fn components_oracle(fg: &[bool], h: usize, w: usize, eight: bool) -> Vec<u32> {
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    let mut parent: Vec<usize> = (0..fg.len()).collect();
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            let mut nbrs = vec![];
            if x + 1 < w {
                nbrs.push((y, x + 1));
            }
            if y + 1 < h {
                nbrs.push((y + 1, x));
                if eight && x + 1 < w {
                    nbrs.push((y + 1, x + 1));
                }
                if eight && x > 0 {
                    nbrs.push((y + 1, x - 1));
                }
            }
            for (ny, nx) in nbrs {
                if fg[ny * w + nx] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, ny * w + nx));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut ids = HashMap::new();
    (0..fg.len())
        .map(|i| {
            if !fg[i] {
                return 0;
            }
            let r = find(&mut parent, i);
            let next = ids.len() as u32 + 1;
            *ids.entry(r).or_insert(next)
        })
        .collect()
}

#[test]
fn components_basic_cases() {
    assert_eq!(connected_components(&[true; 6], 2, 3, Connectivity::Four), vec![1; 6]);
    let diag = [true, false, false, true];
    assert_eq!(connected_components(&diag, 2, 2, Connectivity::Four), vec![1, 0, 0, 2]);
    assert_eq!(connected_components(&diag, 2, 2, Connectivity::Eight), vec![1, 0, 0, 1]);
    let anti = [false, true, true, false];
    assert_eq!(connected_components(&anti, 2, 2, Connectivity::Eight), vec![0, 1, 1, 0]);
}

#[test]
fn components_match_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let density = rng.random_range(0.2..0.8);
        let fg: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            assert_eq!(
                connected_components(&fg, 16, 16, conn),
                components_oracle(&fg, 16, 16, eight),
                "case {case}"
            );
        }
    }
}

/// Rand F-score from explicit enumeration of ordered foreground pixel pairs,
/// self-pairs included.
fn vrand_pairs(pred: &[u32], gt: &[u32]) -> f64 {
    let fg: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > 0).collect();
    let (mut both, mut same_pred, mut same_gt) = (0u64, 0u64, 0u64);
    for &i in &fg {
        for &j in &fg {
            let sp = pred[i] == pred[j];
            let sg = gt[i] == gt[j];
            both += (sp && sg) as u64;
            same_pred += sp as u64;
            same_gt += sg as u64;
        }
    }
    let precision = both as f64 / same_pred as f64;
    let recall = both as f64 / same_gt as f64;
    2.0 * precision * recall / (precision + recall)
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, ids: u32, zero_frac: f64) -> Vec<u32> {
    (0..n)
        .map(|_| if rng.random_bool(zero_frac) { 0 } else { rng.random_range(1..=ids) })
        .collect()
}

#[test]
fn vrand_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    while cases < 200 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let (gt_ids, pred_ids) = (rng.random_range(1..6), rng.random_range(1..6));
        let gt = random_map(&mut rng, h * w, gt_ids, 0.3);
        if gt.iter().all(|&g| g == 0) {
            continue;
        }
        let pred = random_map(&mut rng, h * w, pred_ids, 0.2);
        let got = vrand(&pred, &gt).unwrap();
        let want = vrand_pairs(&pred, &gt);
        assert!((got - want).abs() <= 1e-12, "case {cases}: {got} vs {want}");
        cases += 1;
    }
}

#[test]
fn vrand_worked_example() {
    // Two equal true segments merged into one prediction.
    let gt = [1, 1, 1, 2, 2, 2, 0, 0];
    let pred = [5, 5, 5, 5, 5, 5, 1, 2];
    let v = vrand(&pred, &gt).unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-15);
    assert!((vrand_pairs(&pred, &gt) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn vrand_self_is_one_and_relabel_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random_map(&mut rng, 100, 7, 0.2);
        if x.iter().all(|&v| v == 0) {
            continue;
        }
        assert_eq!(vrand(&x, &x).unwrap(), 1.0);
    }
    let gt = random_map(&mut rng, 144, 6, 0.25);
    let pred = random_map(&mut rng, 144, 6, 0.1);
    let base = vrand(&pred, &gt).unwrap();
    for _ in 0..50 {
        let mut pred_ids: Vec<u32> = (0..=6).collect();
        pred_ids.shuffle(&mut rng);
        let mut gt_ids: Vec<u32> = (1..=6).map(|i| i * 11).collect();
        gt_ids.shuffle(&mut rng);
        let p2: Vec<u32> = pred.iter().map(|&v| pred_ids[v as usize] + 100).collect();
        let g2: Vec<u32> = gt.iter().map(|&v| if v == 0 { 0 } else { gt_ids[v as usize - 1] }).collect();
        assert!((vrand(&p2, &g2).unwrap() - base).abs() < 1e-15);
    }
}

fn auc_pairs(prob: &[f32], gt: &[bool], fov: &[bool]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for i in 0..prob.len() {
        for j in 0..prob.len() {
            if fov[i] && fov[j] && gt[i] && !gt[j] {
                total += 1.0;
                if prob[i] > prob[j] {
                    wins += 1.0;
                } else if prob[i] == prob[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / total
}

#[test]
fn auc_matches_pair_enumeration_and_trapezoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    while cases < 300 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let fov: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let pos = (0..n).filter(|&i| fov[i] && gt[i]).count();
        let neg = (0..n).filter(|&i| fov[i] && !gt[i]).count();
        if pos == 0 || neg == 0 {
            assert!(auc(&prob, &gt, Some(&fov)).is_err());
            continue;
        }
        let a = auc(&prob, &gt, Some(&fov)).unwrap();
        assert!((a - auc_pairs(&prob, &gt, &fov)).abs() <= 1e-12);
        let curve = roc(&prob, &gt, Some(&fov)).unwrap();
        assert!((a - trapezoid_area(&curve)).abs() <= 1e-12);
        for w in curve.windows(2) {
            assert!(w[1].tpr >= w[0].tpr && w[1].fpr >= w[0].fpr);
            assert!(w[1].threshold < w[0].threshold);
        }
        let last = curve.last().unwrap();
        assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        cases += 1;
    }
}

#[test]
fn auc_extremes() {
    let gt = [true, false, true, false];
    assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &gt, None).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 4], &gt, None).unwrap(), 0.5);
    assert_eq!(auc(&[0.1, 0.9, 0.2, 0.8], &gt, None).unwrap(), 0.0);
}

#[test]
fn pixel_metric_extremes() {
    let gt = [true, false, true, false, false];
    let perfect: Vec<f32> = gt.iter().map(|&g| g as u8 as f32).collect();
    let m = pixel_metrics(&perfect, &gt, None, 0.5).unwrap();
    assert_eq!((m.sensitivity, m.specificity, m.accuracy), (Some(1.0), Some(1.0), 1.0));
    let inverse: Vec<f32> = gt.iter().map(|&g| (!g) as u8 as f32).collect();
    let m = pixel_metrics(&inverse, &gt, None, 0.5).unwrap();
    assert_eq!((m.sensitivity, m.specificity), (Some(0.0), Some(0.0)));
    let m = pixel_metrics(&[0.2, 0.7], &[false, false], None, 0.5).unwrap();
    assert_eq!(m.sensitivity, None);
    assert_eq!(m.specificity, Some(0.5));
    // Threshold is inclusive.
    assert_eq!(pixel_metrics(&[0.5], &[true], None, 0.5).unwrap().counts.tp, 1);
}

fn census(pixels: &[[u8; 3]]) -> (u64, u64, u64, u64) {
    let count = |c: [u8; 3]| pixels.iter().filter(|&&p| p == c).count() as u64;
    let gray = pixels.iter().filter(|p| p[0] == p[1] && p[1] == p[2] && p[0] != 255).count() as u64;
    (count(WHITE), count(RED), count(BLUE), gray)
}

#[test]
fn overlay_census_equals_confusion_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let fov: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
        if !fov.contains(&true) {
            continue;
        }
        let base: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let thr = rng.random_range(0.2..0.8);
        let m = pixel_metrics(&prob, &gt, Some(&fov), thr).unwrap();
        let pred: Vec<bool> = prob.iter().map(|&p| p >= thr).collect();
        let img = overlay(&pred, &gt, &base, Some(&fov)).unwrap();
        let outside = fov.iter().filter(|&&f| !f).count() as u64;
        let (white, red, blue, gray) = census(&img);
        assert_eq!(white, m.counts.tp);
        assert_eq!(red, m.counts.fn_);
        assert_eq!(blue, m.counts.fp);
        assert_eq!(gray, m.counts.tn + outside);
    }
}

#[test]
fn overlay_simple_cases() {
    let gt = [true, false, true, false];
    let base = [1.0f32, 1.0, 0.0, 0.5];
    let same = overlay(&gt, &gt, &base, None).unwrap();
    assert!(!same.contains(&RED) && !same.contains(&BLUE));
    assert_eq!(same[1], [254; 3]);
    let none = overlay(&[false; 4], &gt, &base, None).unwrap();
    assert_eq!(none[0], RED);
    assert_eq!(none[2], RED);
}

proptest! {
    #[test]
    fn sensitivity_ignores_pixels_outside_fov(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 64;
        let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let mut fov: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        fov[0] = true;
        let swapped: Vec<f32> = (0..n).map(|i| if fov[i] { prob[i] } else { 1.0 - prob[i] }).collect();
        let a = pixel_metrics(&prob, &gt, Some(&fov), 0.5).unwrap();
        let b = pixel_metrics(&swapped, &gt, Some(&fov), 0.5).unwrap();
        prop_assert_eq!(a, b);
    }
}
