use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{reflect_index, LabeledSample};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotateMode {
    None,
    /// Quarter turns only. Non-square samples draw from 0 and 180 degrees.
    #[default]
    RightAngles,
    /// Quarter turns followed by a uniform angle in `[-max_degrees, max_degrees]`.
    SmallAngle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate: RotateMode,
    pub max_degrees: f64,
    pub zoom_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h: true,
            flip_v: true,
            rotate: RotateMode::RightAngles,
            max_degrees: 15.0,
            zoom_range: [0.8, 1.2],
        }
    }
}

impl AugmentConfig {
    /// No transform at all.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_h: false,
            flip_v: false,
            rotate: RotateMode::None,
            max_degrees: 0.0,
            zoom_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let [lo, hi] = self.zoom_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            errs.push(format!("zoom_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.max_degrees >= 0.0 && self.max_degrees < 45.0) {
            errs.push(format!("max_degrees must be in [0, 45), got {}", self.max_degrees));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Sampled transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    pub degrees: f64,
    pub zoom: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip_h: false,
        flip_v: false,
        quarter_turns: 0,
        degrees: 0.0,
        zoom: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, square: bool, rng: &mut R) -> Self {
        let mut t = Transform::IDENTITY;
        t.flip_h = cfg.flip_h && rng.random_bool(0.5);
        t.flip_v = cfg.flip_v && rng.random_bool(0.5);
        if cfg.rotate != RotateMode::None {
            t.quarter_turns = if square { rng.random_range(0..4) } else { 2 * rng.random_range(0..2) };
        }
        if cfg.rotate == RotateMode::SmallAngle && cfg.max_degrees > 0.0 {
            t.degrees = rng.random_range(-cfg.max_degrees..=cfg.max_degrees);
        }
        let [lo, hi] = cfg.zoom_range;
        if lo < hi {
            t.zoom = rng.random_range(lo..=hi);
        } else {
            t.zoom = lo;
        }
        t
    }
}

/// Draws a transform from `cfg` and applies it.
pub fn augment_sample<R: Rng + ?Sized>(sample: &LabeledSample, cfg: &AugmentConfig, rng: &mut R) -> Result<LabeledSample> {
    cfg.validate()?;
    let t = Transform::sample(cfg, sample.height() == sample.width(), rng);
    apply_transform(sample, &t)
}

/// Applies one geometric transform to image, labels and FOV alike. The
/// output has the input's size; zooming out reflects at the borders.
pub fn apply_transform(sample: &LabeledSample, t: &Transform) -> Result<LabeledSample> {
    let mut out = sample.clone();
    if t.flip_h {
        out = remap_exact(&out, |y, x, _h, w| (y, w - 1 - x), false);
    }
    if t.flip_v {
        out = remap_exact(&out, |y, x, h, _w| (h - 1 - y, x), false);
    }
    match t.quarter_turns % 4 {
        0 => {}
        2 => out = remap_exact(&out, |y, x, h, w| (h - 1 - y, w - 1 - x), false),
        k => {
            for _ in 0..k {
                out = rotate90(&out)?;
            }
        }
    }
    if t.degrees != 0.0 || t.zoom != 1.0 {
        out = warp(&out, t.degrees, t.zoom);
    }
    Ok(out)
}

/// Quarter turn counter-clockwise. Requires a square sample.
pub fn rotate90(sample: &LabeledSample) -> Result<LabeledSample> {
    if sample.height() != sample.width() {
        return Err(Error::Data(format!(
            "cannot rotate {}x{} sample by 90 degrees",
            sample.height(),
            sample.width()
        )));
    }
    // output (y, x) reads input (x, n - 1 - y)
    Ok(remap_exact(sample, |y, x, _h, w| (x, w - 1 - y), true))
}

fn remap_exact(s: &LabeledSample, src: impl Fn(usize, usize, usize, usize) -> (usize, usize), swap: bool) -> LabeledSample {
    let (h, w) = (s.height(), s.width());
    let (oh, ow) = if swap { (w, h) } else { (h, w) };
    let shape = s.image.shape();
    let image = Tensor::from_fn(Shape::new(shape.n(), shape.c(), oh, ow), |[n, c, y, x]| {
        let (sy, sx) = src(y, x, h, w);
        s.image.at([n, c, sy, sx])
    });
    let mut labels = Vec::with_capacity(oh * ow);
    let mut fov = s.fov.as_ref().map(|_| Vec::with_capacity(oh * ow));
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y, x, h, w);
            labels.push(s.labels.data[sy * w + sx]);
            if let (Some(out), Some(f)) = (fov.as_mut(), s.fov.as_ref()) {
                out.push(f[sy * w + sx]);
            }
        }
    }
    LabeledSample {
        id: s.id.clone(),
        image,
        labels: LabelMap::new(1, oh, ow, labels).expect("remapped labels"),
        fov,
    }
}

/// Rotation by `degrees` and scaling by `zoom` about the image centre.
fn warp(s: &LabeledSample, degrees: f64, zoom: f64) -> LabeledSample {
    let (h, w) = (s.height(), s.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let source = |y: usize, x: usize| -> (f64, f64) {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = (cos * dy - sin * dx) / zoom;
        let sx = (sin * dy + cos * dx) / zoom;
        (cy + sy, cx + sx)
    };
    let ry = |i: f64| reflect_index(i as isize, h);
    let rx = |i: f64| reflect_index(i as isize, w);

    let shape = s.image.shape();
    let mut image = Tensor::zeros(shape);
    let mut labels = Vec::with_capacity(h * w);
    let mut fov = s.fov.as_ref().map(|_| Vec::with_capacity(h * w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (ya, yb, xa, xb) = (ry(y0), ry(y0 + 1.0), rx(x0), rx(x0 + 1.0));
            for n in 0..shape.n() {
                for c in 0..shape.c() {
                    let p = s.image.plane(n, c);
                    let top = p[ya * w + xa] * (1.0 - fx) + p[ya * w + xb] * fx;
                    let bottom = p[yb * w + xa] * (1.0 - fx) + p[yb * w + xb] * fx;
                    let i = image.index([n, c, y, x]);
                    image.data_mut()[i] = top * (1.0 - fy) + bottom * fy;
                }
            }
            let k = ry(sy.round()) * w + rx(sx.round());
            labels.push(s.labels.data[k]);
            if let (Some(out), Some(f)) = (fov.as_mut(), s.fov.as_ref()) {
                out.push(f[k]);
            }
        }
    }
    LabeledSample {
        id: s.id.clone(),
        image,
        labels: LabelMap::new(1, h, w, labels).expect("warped labels"),
        fov,
    }
}
