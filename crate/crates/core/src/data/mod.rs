//! Samples, raster I/O, synthetic datasets, manifests and checkpoints.

pub mod checkpoint;
pub mod image;
pub mod manifest;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

/// One image with its per-pixel class labels and optional field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// `[1, channels, h, w]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `n = 1`, same `h` and `w` as the image.
    pub labels: LabelMap,
    pub fov: Option<Vec<bool>>,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, labels: LabelMap, fov: Option<Vec<bool>>) -> Result<Self> {
        let s = image.shape();
        let id = id.into();
        if s.n() != 1 {
            return Err(Error::Data(format!("sample `{id}`: image batch must be 1, got {}", s.n())));
        }
        if (labels.n, labels.h, labels.w) != (1, s.h(), s.w()) {
            return Err(Error::Data(format!(
                "sample `{id}`: labels are {}x{}, image is {}x{}",
                labels.h,
                labels.w,
                s.h(),
                s.w()
            )));
        }
        if fov.as_ref().is_some_and(|f| f.len() != s.plane()) {
            return Err(Error::Data(format!("sample `{id}`: FOV mask size differs from image")));
        }
        Ok(LabeledSample { id, image, labels, fov })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }

    pub fn channels(&self) -> usize {
        self.image.shape().c()
    }

    /// Fails if any label is outside `0..num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.data.iter().position(|&l| l as usize >= num_classes) {
            Some(i) => Err(Error::Data(format!(
                "sample `{}`: label {} at (y={}, x={}) is not below num_classes = {num_classes}",
                self.id,
                self.labels.data[i],
                i / self.width(),
                i % self.width()
            ))),
            None => Ok(()),
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// A sample grown at the bottom and right edges by reflection.
#[derive(Clone, Debug)]
pub struct Padded {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    /// `true` for original pixels; padded pixels are excluded from the loss.
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

fn round_up(x: usize, multiple: usize) -> usize {
    x.div_ceil(multiple) * multiple
}

/// Reflect-pads an image `[n, c, h, w]` so both extents are multiples of
/// `multiple`.
pub fn pad_image(image: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let s = image.shape();
    let (ph, pw) = (round_up(s.h(), multiple), round_up(s.w(), multiple));
    if (ph, pw) == (s.h(), s.w()) {
        return image.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), s.c(), ph, pw), |[n, c, y, x]| {
        image.at([n, c, reflect_index(y as isize, s.h()), reflect_index(x as isize, s.w())])
    })
}

/// Top-left `h` x `w` window of every plane.
pub fn crop_image<T: crate::tensor::Real>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    if (s.h(), s.w()) == (h, w) {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |idx| t.at(idx))
}

/// Pads image and labels to multiples of `multiple`, masking the padding.
pub fn pad_sample(sample: &LabeledSample, multiple: usize) -> Padded {
    let (h, w) = (sample.height(), sample.width());
    let image = pad_image(&sample.image, multiple);
    let (ph, pw) = (image.shape().h(), image.shape().w());
    let mut labels = Vec::with_capacity(ph * pw);
    let mut mask = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        for x in 0..pw {
            let sy = reflect_index(y as isize, h);
            let sx = reflect_index(x as isize, w);
            labels.push(sample.labels.data[sy * w + sx]);
            mask.push(y < h && x < w);
        }
    }
    Padded {
        image,
        labels: LabelMap::new(1, ph, pw, labels).expect("padded labels"),
        mask,
        height: h,
        width: w,
    }
}
