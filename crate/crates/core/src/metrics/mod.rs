//! Segmentation scores: the foreground-restricted Rand F-score for instance
//! maps, and FOV-masked confusion counts, ROC and AUC for probability maps.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Labels the `true` pixels of an `h` x `w` map. Components are numbered
/// from 1 in raster order of their first pixel; background is 0.
pub fn connected_components(fg: &[bool], h: usize, w: usize, conn: Connectivity) -> Vec<u32> {
    assert_eq!(fg.len(), h * w, "mask size");
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut ids = vec![0u32; fg.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if fg[j] && ids[j] == 0 {
                    ids[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    ids
}

/// Cell instances of a class map: 4-connected components of nonzero
/// classes. Boundary (class 0) pixels become background.
pub fn instances(classes: &[u32], h: usize, w: usize) -> Vec<u32> {
    let fg: Vec<bool> = classes.iter().map(|&c| c > 0).collect();
    connected_components(&fg, h, w, Connectivity::Four)
}

/// Foreground-restricted Rand F-score.
///
/// Only pixels with `gt > 0` take part. With `n_ij` the overlap of predicted
/// segment `i` and true segment `j` among those pixels, returns
/// `2 Σ n_ij² / (Σ_i a_i² + Σ_j b_j²)` where `a`, `b` are the row and column
/// sums. Predicted label 0 is an ordinary segment id here.
pub fn vrand(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "vrand",
            "pred",
            format!("{} pixels vs {} in ground truth", pred.len(), gt.len()),
        ));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 0 {
            continue;
        }
        *joint.entry((p, g)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(g).or_default() += 1;
    }
    if joint.is_empty() {
        return Err(Error::Data("vrand is undefined without ground-truth foreground".into()));
    }
    let (sij, sa, sb) = (sum_squares(joint.values()), sum_squares(rows.values()), sum_squares(cols.values()));
    Ok(2.0 * sij as f64 / (sa + sb) as f64)
}

fn sum_squares<'a>(counts: impl Iterator<Item = &'a u64>) -> u128 {
    counts.map(|&n| n as u128 * n as u128).sum()
}

/// Confusion counts over the field of view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub counts: ConfusionCounts,
    /// `None` when there are no positive pixels.
    pub sensitivity: Option<f64>,
    /// `None` when there are no negative pixels.
    pub specificity: Option<f64>,
    pub accuracy: f64,
}

fn check_congruent(op: &'static str, n: usize, gt: &[bool], fov: Option<&[bool]>) -> Result<()> {
    if gt.len() != n {
        return Err(Error::shape(op, "gt", format!("{} pixels, expected {n}", gt.len())));
    }
    if fov.is_some_and(|f| f.len() != n) {
        return Err(Error::shape(op, "fov", "size differs from prediction"));
    }
    Ok(())
}

fn inside(fov: Option<&[bool]>, i: usize) -> bool {
    fov.is_none_or(|f| f[i])
}

/// Thresholds `prob >= threshold` and counts against `gt` inside `fov`
/// (everywhere when `fov` is `None`).
pub fn pixel_metrics(prob: &[f32], gt: &[bool], fov: Option<&[bool]>, threshold: f32) -> Result<PixelMetrics> {
    check_congruent("pixel_metrics", prob.len(), gt, fov)?;
    let mut c = ConfusionCounts::default();
    for i in 0..prob.len() {
        if !inside(fov, i) {
            continue;
        }
        match (prob[i] >= threshold, gt[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::Data("field of view is empty".into()));
    }
    let ratio = |a: u64, b: u64| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
    Ok(PixelMetrics {
        counts: c,
        sensitivity: ratio(c.tp, c.fn_),
        specificity: ratio(c.tn, c.fp),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
    })
}

/// Scores and truth of FOV pixels, sorted by descending score.
fn ranked(prob: &[f32], gt: &[bool], fov: Option<&[bool]>) -> Result<(Vec<(f32, bool)>, u64, u64)> {
    check_congruent("auc", prob.len(), gt, fov)?;
    if let Some(i) = prob.iter().position(|p| p.is_nan()) {
        return Err(Error::Data(format!("NaN score at pixel {i}")));
    }
    let mut v: Vec<(f32, bool)> = (0..prob.len())
        .filter(|&i| inside(fov, i))
        .map(|i| (prob[i], gt[i]))
        .collect();
    let pos = v.iter().filter(|p| p.1).count() as u64;
    let neg = v.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC needs both classes inside the field of view".into()));
    }
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((v, pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(prob: &[f32], gt: &[bool], fov: Option<&[bool]>) -> Result<f64> {
    let (v, pos, neg) = ranked(prob, gt, fov)?;
    // Twice the number of winning (pos, neg) pairs, so ties stay integral.
    let mut twice: u128 = 0;
    let mut neg_below = neg;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        neg_below -= n;
        twice += p as u128 * (2 * neg_below as u128 + n as u128);
        i = j;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f32,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve from `threshold = +inf` down through every distinct score.
pub fn roc(prob: &[f32], gt: &[bool], fov: Option<&[bool]>) -> Result<Vec<RocPoint>> {
    let (v, pos, neg) = ranked(prob, gt, fov)?;
    let mut out = vec![RocPoint {
        threshold: f32::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < v.len() {
        let t = v[i].0;
        while i < v.len() && v[i].0 == t {
            if v[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(out)
}

/// Trapezoidal area under an ROC curve.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

/// Colour-codes a binary prediction: hits white, misses red, false alarms
/// blue. True negatives and pixels outside `fov` show `base` (gray values in
/// `[0, 1]`) capped at 254 so they never read as white.
pub fn overlay(pred: &[bool], gt: &[bool], base: &[f32], fov: Option<&[bool]>) -> Result<Vec<[u8; 3]>> {
    check_congruent("overlay", pred.len(), gt, fov)?;
    if base.len() != pred.len() {
        return Err(Error::shape("overlay", "base", "size differs from prediction"));
    }
    Ok((0..pred.len())
        .map(|i| {
            let gray = (base[i].clamp(0.0, 1.0) * 254.0).round() as u8;
            if !inside(fov, i) {
                return [gray; 3];
            }
            match (pred[i], gt[i]) {
                (true, true) => WHITE,
                (false, true) => RED,
                (true, false) => BLUE,
                (false, false) => [gray; 3],
            }
        })
        .collect())
}

/// Scores of one vessel-style evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VesselReport {
    pub metrics: PixelMetrics,
    pub auc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl VesselReport {
    pub fn key_values(&self) -> String {
        let c = self.metrics.counts;
        format!(
            "sensitivity={} specificity={} accuracy={:.6} auc={} tp={} fp={} tn={} fn={}",
            opt(self.metrics.sensitivity),
            opt(self.metrics.specificity),
            self.metrics.accuracy,
            opt(self.auc),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        )
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {}", "sensitivity", opt(self.metrics.sensitivity));
        let _ = writeln!(s, "{:<12} {}", "specificity", opt(self.metrics.specificity));
        let _ = writeln!(s, "{:<12} {:.6}", "accuracy", self.metrics.accuracy);
        let _ = writeln!(s, "{:<12} {}", "auc", opt(self.auc));
        s
    }
}
