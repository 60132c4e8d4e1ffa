//! Forward and adjoint kernels over raw NCHW slices.
//!
//! Convolutions go through an im2col buffer and a tiled row-times-matrix
//! product. All loops run in a fixed order, so results are bitwise
//! reproducible for identical inputs.

use super::Real;

/// Column tile width for the im2col products; keeps a tile of the column
/// buffer resident in cache while every output channel reads it.
const TILE: usize = 512;

#[inline]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (xa, xb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Zero padding on the top and left (and, for SAME, bottom and right).
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `pad_total` is the sum of both sides' padding along one axis.
    pub fn new(k: usize, stride: usize, dilation: usize, pad_total: usize, in_h: usize, in_w: usize) -> Option<Self> {
        let span = dilation * (k - 1) + 1;
        if in_h + pad_total < span || in_w + pad_total < span {
            return None;
        }
        Some(ConvGeom {
            k,
            stride,
            dilation,
            pad: pad_total / 2,
            in_h,
            in_w,
            out_h: (in_h + pad_total - span) / stride + 1,
            out_w: (in_w + pad_total - span) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output index `o` and tap `t`, if inside the input.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Real>(src: &[T], cin: usize, g: &ConvGeom, col: &mut [T]) {
    let p = g.out_plane();
    let in_plane = g.in_h * g.in_w;
    for ci in 0..cin {
        let plane = &src[ci * in_plane..(ci + 1) * in_plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.in_h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let srow = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, d) in line.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.in_w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], cin: usize, g: &ConvGeom, dst: &mut [T]) {
    let p = g.out_plane();
    let in_plane = g.in_h * g.in_w;
    for ci in 0..cin {
        let plane = &mut dst[ci * in_plane..(ci + 1) * in_plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                let srcrow = &col[row..row + p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    let line = &srcrow[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.in_w) {
                            drow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `input` is `[n, cin, in_h, in_w]`, `weight` is `[cout, cin, k, k]`.
pub fn conv2d_forward<T: Real>(
    input: &[T],
    n: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.out_plane();
    let r = cin * g.k * g.k;
    let in_len = cin * g.in_h * g.in_w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut col_buf = if g.pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..n {
        let src = &input[b * in_len..(b + 1) * in_len];
        let col: &[T] = if g.pointwise() {
            src
        } else {
            im2col(src, cin, g, &mut col_buf);
            &col_buf
        };
        let out_b = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for co in 0..cout {
                out_b[co * p..(co + 1) * p].fill(bias[co]);
            }
        }
        for p0 in (0..p).step_by(TILE) {
            let p1 = (p0 + TILE).min(p);
            for co in 0..cout {
                let orow = &mut out_b[co * p + p0..co * p + p1];
                let wrow = &weight[co * r..(co + 1) * r];
                for (ri, &a) in wrow.iter().enumerate() {
                    axpy(orow, a, &col[ri * p + p0..ri * p + p1]);
                }
            }
        }
    }
    out
}

/// Accumulates adjoints of [`conv2d_forward`] into whichever of the
/// gradient buffers are present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    n: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    g: &ConvGeom,
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let p = g.out_plane();
    let r = cin * g.k * g.k;
    let in_len = cin * g.in_h * g.in_w;
    let mut col_buf = if g.pointwise() || dweight.is_none() { Vec::new() } else { vec![T::zero(); r * p] };
    let mut dcol = if dinput.is_some() { vec![T::zero(); r * p] } else { Vec::new() };
    for b in 0..n {
        let dout_b = &dout[b * cout * p..(b + 1) * cout * p];
        if let Some(db) = dbias.as_deref_mut() {
            let ones = vec![T::one(); p];
            for co in 0..cout {
                db[co] += dot(&dout_b[co * p..(co + 1) * p], &ones);
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let src = &input[b * in_len..(b + 1) * in_len];
            let col: &[T] = if g.pointwise() {
                src
            } else {
                im2col(src, cin, g, &mut col_buf);
                &col_buf
            };
            for co in 0..cout {
                let drow = &dout_b[co * p..(co + 1) * p];
                for ri in 0..r {
                    dw[co * r + ri] += dot(drow, &col[ri * p..(ri + 1) * p]);
                }
            }
        }
        if let Some(di) = dinput.as_deref_mut() {
            let di_b = &mut di[b * in_len..(b + 1) * in_len];
            let target: &mut [T] = if g.pointwise() { di_b } else {
                dcol.fill(T::zero());
                &mut dcol
            };
            for p0 in (0..p).step_by(TILE) {
                let p1 = (p0 + TILE).min(p);
                for ri in 0..r {
                    let crow = &mut target[ri * p + p0..ri * p + p1];
                    for co in 0..cout {
                        axpy(crow, weight[co * r + ri], &dout_b[co * p + p0..co * p + p1]);
                    }
                }
            }
            if !g.pointwise() {
                col2im_add(&dcol, cin, g, &mut di[b * in_len..(b + 1) * in_len]);
            }
        }
    }
}

/// Stride-2, 2x2 transposed convolution. `weight` is `[cin, cout, 2, 2]`.
pub fn conv_transpose2x2_forward<T: Real>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * cout * oh * ow];
    let mut tmp = vec![T::zero(); p];
    for b in 0..n {
        let src = &input[b * cin * p..(b + 1) * cin * p];
        for co in 0..cout {
            let base = bias.map_or(T::zero(), |bs| bs[co]);
            let oplane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for a in 0..2 {
                for c in 0..2 {
                    tmp.fill(base);
                    for ci in 0..cin {
                        let wv = weight[((ci * cout + co) * 2 + a) * 2 + c];
                        axpy(&mut tmp, wv, &src[ci * p..(ci + 1) * p]);
                    }
                    for y in 0..h {
                        for x in 0..w {
                            oplane[(2 * y + a) * ow + 2 * x + c] = tmp[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2x2_backward<T: Real>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let p = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    // Gathered adjoint sub-planes, indexed [(co, a, c)][y * w + x].
    let mut sub = vec![T::zero(); cout * 4 * p];
    let ones = vec![T::one(); p];
    for b in 0..n {
        for co in 0..cout {
            let dplane = &dout[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for a in 0..2 {
                for c in 0..2 {
                    let s = &mut sub[((co * 2 + a) * 2 + c) * p..((co * 2 + a) * 2 + c + 1) * p];
                    for y in 0..h {
                        for x in 0..w {
                            s[y * w + x] = dplane[(2 * y + a) * ow + 2 * x + c];
                        }
                    }
                }
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for co in 0..cout {
                for q in 0..4 {
                    db[co] += dot(&sub[(co * 4 + q) * p..(co * 4 + q + 1) * p], &ones);
                }
            }
        }
        let src = &input[b * cin * p..(b + 1) * cin * p];
        if let Some(dw) = dweight.as_deref_mut() {
            for ci in 0..cin {
                for j in 0..cout * 4 {
                    dw[ci * cout * 4 + j] += dot(&src[ci * p..(ci + 1) * p], &sub[j * p..(j + 1) * p]);
                }
            }
        }
        if let Some(di) = dinput.as_deref_mut() {
            for ci in 0..cin {
                let drow = &mut di[(b * cin + ci) * p..(b * cin + ci + 1) * p];
                for j in 0..cout * 4 {
                    axpy(drow, weight[ci * cout * 4 + j], &sub[j * p..(j + 1) * p]);
                }
            }
        }
    }
}

/// 2x2 max pooling; returns the pooled values and the flat input index of
/// each window's maximum (first in row-major order on ties).
pub fn maxpool2x2_forward<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if input[c] > input[best] || input[c].is_nan() && !input[best].is_nan() {
                        best = c;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Per-axis sampling table for bilinear resizing without corner alignment.
#[derive(Clone, Debug)]
pub struct LinearAxis<T> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Real> LinearAxis<T> {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut axis = LinearAxis {
            i0: Vec::with_capacity(out_len),
            i1: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            axis.i0.push(i0);
            axis.i1.push(i1);
            axis.frac.push(T::lit(src - i0 as f64));
        }
        axis
    }
}

pub fn resize_bilinear_forward<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ys: &LinearAxis<T>,
    xs: &LinearAxis<T>,
) -> Vec<T> {
    let (oh, ow) = (ys.i0.len(), xs.i0.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (&src[ys.i0[oy] * w..], &src[ys.i1[oy] * w..], ys.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (xs.i0[ox], xs.i1[ox], xs.frac[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Real>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ys: &LinearAxis<T>,
    xs: &LinearAxis<T>,
    dinput: &mut [T],
) {
    let (oh, ow) = (ys.i0.len(), xs.i0.len());
    let one = T::one();
    for pl in 0..planes {
        let dst = &mut dinput[pl * h * w..(pl + 1) * h * w];
        let g = &dout[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let fy = ys.frac[oy];
            for ox in 0..ow {
                let fx = xs.frac[ox];
                let v = g[oy * ow + ox];
                let (top, bot) = (v * (one - fy), v * fy);
                dst[ys.i0[oy] * w + xs.i0[ox]] += top * (one - fx);
                dst[ys.i0[oy] * w + xs.i1[ox]] += top * fx;
                dst[ys.i1[oy] * w + xs.i0[ox]] += bot * (one - fx);
                dst[ys.i1[oy] * w + xs.i1[ox]] += bot * fx;
            }
        }
    }
}
