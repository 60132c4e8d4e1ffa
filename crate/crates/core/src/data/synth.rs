//! Seeded synthetic stand-ins for the two kinds of data the network targets:
//! cell membranes (a Voronoi tiling with dark boundaries) and retinal
//! vessels (tapered branching curves inside a circular field of view).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{reflect_index, LabeledSample};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

/// Default cell count for membrane samples.
pub const DEFAULT_CELLS: usize = 12;
/// Membrane thickness in pixels.
pub const MEMBRANE_WIDTH: f64 = 3.0;
/// Default root count for vessel samples.
pub const DEFAULT_BRANCHES: usize = 5;

/// A membrane sample plus its instance map (0 on boundaries, cell ids from
/// 1 elsewhere).
#[derive(Clone, Debug)]
pub struct MembraneSample {
    pub sample: LabeledSample,
    pub cells: Vec<u32>,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One pass of the `[1, 2, 1] / 4` kernel along both axes.
fn smooth(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let l = plane[y * w + reflect_index(x as isize - 1, w)];
            let r = plane[y * w + reflect_index(x as isize + 1, w)];
            tmp[y * w + x] = 0.25 * l + 0.5 * plane[y * w + x] + 0.25 * r;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let u = tmp[reflect_index(y as isize - 1, h) * w + x];
            let d = tmp[reflect_index(y as isize + 1, h) * w + x];
            out[y * w + x] = 0.25 * u + 0.5 * tmp[y * w + x] + 0.25 * d;
        }
    }
    out
}

/// Voronoi membranes: `n_cells` sites with a minimum spacing, bands of
/// `MEMBRANE_WIDTH` pixels along every cell border, and a blurred noisy
/// rendering of the boundary map as the image. Class 1 is cell interior, class 0 boundary.
pub fn synth_membranes(seed: u64, h: usize, w: usize, n_cells: usize) -> Result<MembraneSample> {
    if n_cells < 2 {
        return Err(Error::Usage(format!("synth_membranes needs at least 2 cells, got {n_cells}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::Usage(format!("synth_membranes needs at least 4x4 pixels, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = 0.6 * ((h * w) as f64 / n_cells as f64).sqrt();
    let mut sites: Vec<(f64, f64)> = Vec::with_capacity(n_cells);
    let mut tries = 0;
    while sites.len() < n_cells {
        let p = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        tries += 1;
        let clear = sites
            .iter()
            .all(|s| (s.0 - p.0).powi(2) + (s.1 - p.1).powi(2) >= spacing * spacing);
        if clear || tries > 10_000 {
            sites.push(p);
        }
    }

    let owner: Vec<usize> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let d = |s: &(f64, f64)| (s.0 - y).powi(2) + (s.1 - x).powi(2);
            (0..n_cells)
                .min_by(|&a, &b| d(&sites[a]).total_cmp(&d(&sites[b])))
                .expect("at least two sites")
        })
        .collect();

    // Boundary pixels lie within half a membrane width of the bisector
    // between their own site and some other site.
    let half = MEMBRANE_WIDTH / 2.0;
    let mut cells = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let p = (y as f64 + 0.5, x as f64 + 0.5);
            let d = |s: &(f64, f64)| (s.0 - p.0).powi(2) + (s.1 - p.1).powi(2);
            let own = sites[o];
            let border = sites.iter().enumerate().any(|(k, s)| {
                let sep = ((s.0 - own.0).powi(2) + (s.1 - own.1).powi(2)).sqrt();
                k != o && sep > 0.0 && (d(s) - d(&own)) / (2.0 * sep) < half
            });
            if !border {
                cells[y * w + x] = o as u32 + 1;
            }
        }
    }

    let shade: Vec<f32> = (0..n_cells).map(|_| rng.random_range(0.65..0.85)).collect();
    let base: Vec<f32> = cells
        .iter()
        .map(|&c| if c == 0 { 0.15 } else { shade[c as usize - 1] })
        .collect();
    let blurred = smooth(&base, h, w);
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let pixels: Vec<f32> = blurred.iter().map(|&v| quantize(v + noise.sample(&mut rng))).collect();

    let image = Tensor::new(Shape::new(1, 1, h, w), pixels)?;
    let labels = LabelMap::new(1, h, w, cells.iter().map(|&c| (c > 0) as u32).collect())?;
    let sample = LabeledSample::new(format!("membranes-{seed}"), image, labels, None)?;
    Ok(MembraneSample { sample, cells })
}

struct Walker {
    y: f64,
    x: f64,
    angle: f64,
    width: f64,
    generation: u32,
}

/// Vessel trees: `branches` roots leave a disc near the centre and wander
/// outward with tapering width and occasional forks. Three-channel image,
/// circular field of view, class 1 is vessel.
pub fn synth_vessels(seed: u64, h: usize, w: usize, branches: usize) -> Result<LabeledSample> {
    if branches == 0 {
        return Err(Error::Usage("synth_vessels needs at least one branch".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::Usage(format!("synth_vessels needs at least 8x8 pixels, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let radius = 0.46 * h.min(w) as f64;
    let fov: Vec<bool> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius
        })
        .collect();

    let scale = h.min(w) as f64 / 64.0;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (dy, dx) = (cy + rng.random_range(-0.1..0.1) * radius, cx + side * 0.3 * radius);
    let mut stack: Vec<Walker> = (0..branches)
        .map(|b| Walker {
            y: dy,
            x: dx,
            angle: std::f64::consts::TAU * b as f64 / branches as f64 + rng.random_range(-0.3..0.3),
            width: rng.random_range(2.2..3.2) * scale,
            generation: 0,
        })
        .collect();

    let turn = Normal::new(0.0, 0.12).expect("valid std");
    let mut vessel = vec![false; h * w];
    let step = 0.8;
    while let Some(mut wk) = stack.pop() {
        let mut travelled = 0.0;
        while travelled < 2.5 * radius {
            let r = (wk.width / 2.0).max(0.5);
            let (y0, y1) = ((wk.y - r).floor().max(0.0) as usize, (wk.y + r).ceil().min(h as f64 - 1.0).max(0.0) as usize);
            let (x0, x1) = ((wk.x - r).floor().max(0.0) as usize, (wk.x + r).ceil().min(w as f64 - 1.0).max(0.0) as usize);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    if (py - wk.y).powi(2) + (px - wk.x).powi(2) <= r * r && fov[y * w + x] {
                        vessel[y * w + x] = true;
                    }
                }
            }
            wk.angle += turn.sample(&mut rng);
            wk.y += step * wk.angle.sin();
            wk.x += step * wk.angle.cos();
            travelled += step;
            wk.width = (wk.width * 0.993).max(0.9 * scale);
            if (wk.y - cy).powi(2) + (wk.x - cx).powi(2) > radius * radius {
                break;
            }
            if wk.generation < 3 && rng.random_bool(0.025) {
                let fork = if rng.random_bool(0.5) { 0.6 } else { -0.6 };
                stack.push(Walker {
                    y: wk.y,
                    x: wk.x,
                    angle: wk.angle + fork,
                    width: wk.width * 0.75,
                    generation: wk.generation + 1,
                });
                wk.angle -= fork * 0.4;
            }
        }
    }

    let soft: Vec<f32> = smooth(&vessel.iter().map(|&v| v as u8 as f32).collect::<Vec<_>>(), h, w);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.08) / scale,
                rng.random_range(0.02..0.08) / scale,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.07),
            )
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let base = [0.78f32, 0.42, 0.2];
    let contrast = [0.25f32, 0.3, 0.1];
    let mut pixels = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        if !fov[i] {
            continue;
        }
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let texture: f64 = waves.iter().map(|(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum();
        for c in 0..3 {
            let v = base[c] + texture as f32 - contrast[c] * soft[i] + noise.sample(&mut rng);
            pixels[c * h * w + i] = quantize(v);
        }
    }

    let image = Tensor::new(Shape::new(1, 3, h, w), pixels)?;
    let labels = LabelMap::new(1, h, w, vessel.iter().map(|&v| v as u32).collect())?;
    LabeledSample::new(format!("vessels-{seed}"), image, labels, Some(fov))
}
