use super::kernels::{self, ConvGeom, LinearAxis};
use super::{LabelMap, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that a stride-1 convolution keeps the spatial extent.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvOptions {
    pub fn dilated(dilation: usize) -> Self {
        ConvOptions {
            dilation,
            ..Default::default()
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Resize {
        x: Var,
        ys: LinearAxis<T>,
        xs: LinearAxis<T>,
    },
    Concat {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Relu {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u32>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    SumScalars {
        xs: Vec<Var>,
    },
    AddScaled {
        a: Var,
        b: Var,
        scale: T,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended after their inputs, so reverse insertion order is a
/// valid reverse topological order for the adjoint sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Adjoint of `v` from the most recent [`Tape::backward`], if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOptions) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x);
        let ws = self.shape(w);
        if x == w || Some(x) == b || Some(w) == b {
            return Err(Error::Usage("conv2d operands must be distinct nodes".into()));
        }
        if ws.h() != ws.w() {
            return Err(Error::shape(OP, "weight", format!("kernel must be square, got {ws}")));
        }
        if ws.c() != xs.c() {
            return Err(Error::shape(
                OP,
                "weight",
                format!("weight {ws} expects {} input channels, input {xs} has {}", ws.c(), xs.c()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws.n() {
                return Err(Error::shape(
                    OP,
                    "bias",
                    format!("bias has {} values, weight has {} output channels", self.value(b).len(), ws.n()),
                ));
            }
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::shape(OP, "options", "stride and dilation must be positive"));
        }
        let k = ws.h();
        let pad_total = match opts.padding {
            Padding::Valid => 0,
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::shape(
                        OP,
                        "weight",
                        format!("SAME padding needs an odd kernel, got {k}x{k}"),
                    ));
                }
                opts.dilation * (k - 1)
            }
        };
        let geom = ConvGeom::new(k, opts.stride, opts.dilation, pad_total, xs.h(), xs.w()).ok_or_else(|| {
            Error::shape(OP, "input", format!("input {xs} smaller than the dilated kernel"))
        })?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            xs.n(),
            xs.c(),
            self.value(w).data(),
            ws.n(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(Shape::new(xs.n(), ws.n(), geom.out_h, geom.out_w), data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Learnable 2x upsampling: stride-2 transposed convolution with a 2x2
    /// kernel and no padding. `w` is `[cin, cout, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "conv_transpose2x2";
        let xs = self.shape(x);
        let ws = self.shape(w);
        if x == w || Some(x) == b || Some(w) == b {
            return Err(Error::Usage("conv_transpose2x2 operands must be distinct nodes".into()));
        }
        if ws.h() != 2 || ws.w() != 2 {
            return Err(Error::shape(OP, "weight", format!("kernel must be 2x2, got {ws}")));
        }
        if ws.n() != xs.c() {
            return Err(Error::shape(
                OP,
                "weight",
                format!("weight {ws} expects {} input channels, input {xs} has {}", ws.n(), xs.c()),
            ));
        }
        let cout = ws.c();
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape(OP, "bias", format!("bias must have {cout} values")));
            }
        }
        let data = kernels::conv_transpose2x2_forward(
            self.value(x).data(),
            xs.n(),
            xs.c(),
            xs.h(),
            xs.w(),
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(Shape::new(xs.n(), cout, 2 * xs.h(), 2 * xs.w()), data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h() % 2 != 0 || xs.w() % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                "input",
                format!(
                    "spatial extents of {xs} must be even; pad the input to a multiple of 2^depth"
                ),
            ));
        }
        let (data, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), xs.n() * xs.c(), xs.h(), xs.w());
        let out = Tensor::new(Shape::new(xs.n(), xs.c(), xs.h() / 2, xs.w() / 2), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2x2 { x, argmax }, rg))
    }

    /// Bilinear resize with half-pixel sample centres (corners not aligned).
    /// Resizing to the current extent is an exact copy.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x);
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "size", "output extents must be at least 1"));
        }
        let ys = LinearAxis::new(xs.h(), out_h);
        let xa = LinearAxis::new(xs.w(), out_w);
        let data = if (out_h, out_w) == (xs.h(), xs.w()) {
            self.value(x).data().to_vec()
        } else {
            kernels::resize_bilinear_forward(self.value(x).data(), xs.n() * xs.c(), xs.h(), xs.w(), &ys, &xa)
        };
        let out = Tensor::new(Shape::new(xs.n(), xs.c(), out_h, out_w), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, ys, xs: xa }, rg))
    }

    /// Channel-wise concatenation in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let Some(&first) = xs.first() else {
            return Err(Error::shape(OP, "inputs", "need at least one input"));
        };
        let s0 = self.shape(first);
        let mut channels = 0;
        for (i, &v) in xs.iter().enumerate() {
            let s = self.shape(v);
            if (s.n(), s.h(), s.w()) != (s0.n(), s0.h(), s0.w()) {
                return Err(Error::shape(
                    OP,
                    format!("input {i}"),
                    format!("shape {s} does not match input 0 shape {s0} in batch or spatial extents"),
                ));
            }
            channels += s.c();
        }
        let plane = s0.plane();
        let mut data = Vec::with_capacity(s0.n() * channels * plane);
        for n in 0..s0.n() {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape().c() * plane;
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let out = Tensor::new(Shape::new(s0.n(), channels, s0.h(), s0.w()), data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if len == 0 || start + len > xs.c() {
            return Err(Error::shape(
                "slice_channels",
                "range",
                format!("channels {start}..{} out of range for {xs}", start + len),
            ));
        }
        let plane = xs.plane();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(xs.n() * len * plane);
        for n in 0..xs.n() {
            let off = (n * xs.c() + start) * plane;
            data.extend_from_slice(&src[off..off + len * plane]);
        }
        let out = Tensor::new(Shape::new(xs.n(), len, xs.h(), xs.w()), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() || v.is_nan() { v } else { T::zero() }).collect();
        let out = Tensor::new(t.shape(), data).expect("relu keeps shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Mean over included pixels of `-log softmax(logits)[label]`.
    ///
    /// `mask[i] == true` includes pixel `i` (flat `[n, h, w]` order).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &LabelMap, mask: Option<&[bool]>) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let s = self.shape(logits);
        if (labels.n, labels.h, labels.w) != (s.n(), s.h(), s.w()) {
            return Err(Error::shape(
                OP,
                "labels",
                format!("labels [{},{},{}] do not match logits {s}", labels.n, labels.h, labels.w),
            ));
        }
        if let Some(m) = mask {
            if m.len() != labels.len() {
                return Err(Error::shape(OP, "mask", format!("mask has {} entries, need {}", m.len(), labels.len())));
            }
        }
        let (c, plane) = (s.c(), s.plane());
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        let mut row = vec![T::zero(); c];
        for n in 0..s.n() {
            for p in 0..plane {
                let li = n * plane + p;
                if mask.is_some_and(|m| !m[li]) {
                    continue;
                }
                let label = labels.data[li] as usize;
                if label >= c {
                    return Err(Error::Data(format!(
                        "label {label} at (n={n}, y={}, x={}) is outside [0, {c})",
                        p / s.w(),
                        p % s.w()
                    )));
                }
                let mut max = T::neg_infinity();
                for (k, r) in row.iter_mut().enumerate() {
                    *r = x[(n * c + k) * plane + p];
                    max = max.max(*r);
                }
                let mut sum = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for (k, r) in row.iter().enumerate() {
                    probs[(n * c + k) * plane + p] = *r / sum;
                }
                let lse = max + sum.ln();
                total += lse - x[(n * c + label) * plane + p];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Data("cross-entropy over an empty pixel set".into()));
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.data.clone(),
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            rg,
        ))
    }

    /// Left fold `((0 + x1) + x2) + ...` over single-element tensors.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = T::zero();
        for (i, &v) in xs.iter().enumerate() {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("sum_scalars", format!("input {i}"), format!("expected a scalar, got {}", t.shape())));
            }
            acc = acc + t.item();
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), Op::SumScalars { xs: xs.to_vec() }, rg))
    }

    /// `a + scale * b`, elementwise.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add_scaled", "b", format!("{sb} does not match {sa}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + scale * y)
            .collect();
        let out = Tensor::new(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddScaled { a, b, scale }, rg))
    }

    /// Scalar `sum_i weights[i] * x[i]` against fixed weights.
    pub fn dot_const(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(Error::shape("dot_const", "weights", format!("{} weights for {} values", weights.len(), t.len())));
        }
        let mut acc = T::zero();
        for (&a, &b) in t.data().iter().zip(weights) {
            acc += a * b;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(acc), Op::Dot { x, weights: weights.to_vec() }, rg))
    }

    /// Reverse sweep from the single-element node `root`, replacing any
    /// adjoints left by an earlier sweep.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Removes the adjoint buffer for `v` (allocating zeros on first touch), or
/// `None` when `v` does not require a gradient.
fn checkout<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()]))
}

fn checkin<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let (xs, ws) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let mut dx = checkout(nodes, grads, *x);
            let mut dw = checkout(nodes, grads, *w);
            let mut db = b.and_then(|b| checkout(nodes, grads, b));
            kernels::conv2d_backward(
                nodes[x.0].value.data(),
                xs.n(),
                xs.c(),
                nodes[w.0].value.data(),
                ws.n(),
                geom,
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            checkin(grads, *x, dx);
            checkin(grads, *w, dw);
            if let Some(b) = b {
                checkin(grads, *b, db);
            }
        }
        Op::ConvTranspose2x2 { x, w, b } => {
            let (xs, ws) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let mut dx = checkout(nodes, grads, *x);
            let mut dw = checkout(nodes, grads, *w);
            let mut db = b.and_then(|b| checkout(nodes, grads, b));
            kernels::conv_transpose2x2_backward(
                nodes[x.0].value.data(),
                xs.n(),
                xs.c(),
                xs.h(),
                xs.w(),
                nodes[w.0].value.data(),
                ws.c(),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            checkin(grads, *x, dx);
            checkin(grads, *w, dw);
            if let Some(b) = b {
                checkin(grads, *b, db);
            }
        }
        Op::MaxPool2x2 { x, argmax } => {
            if let Some(mut dx) = checkout(nodes, grads, *x) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src as usize] += gv;
                }
                checkin(grads, *x, Some(dx));
            }
        }
        Op::Resize { x, ys, xs } => {
            if let Some(mut dx) = checkout(nodes, grads, *x) {
                let s = nodes[x.0].value.shape();
                if (ys.i0.len(), xs.i0.len()) == (s.h(), s.w()) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                } else {
                    kernels::resize_bilinear_backward(g, s.n() * s.c(), s.h(), s.w(), ys, xs, &mut dx);
                }
                checkin(grads, *x, Some(dx));
            }
        }
        Op::Concat { xs } => {
            let out_shape = node.value.shape();
            let plane = out_shape.plane();
            let total_c = out_shape.c();
            let mut offset = 0;
            for &v in xs {
                let c = nodes[v.0].value.shape().c();
                if let Some(mut dx) = checkout(nodes, grads, v) {
                    for n in 0..out_shape.n() {
                        let src = &g[(n * total_c + offset) * plane..(n * total_c + offset + c) * plane];
                        for (d, &gv) in dx[n * c * plane..(n + 1) * c * plane].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                    checkin(grads, v, Some(dx));
                }
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            if let Some(mut dx) = checkout(nodes, grads, *x) {
                let xs = nodes[x.0].value.shape();
                let len = node.value.shape().c();
                let plane = xs.plane();
                for n in 0..xs.n() {
                    let off = (n * xs.c() + start) * plane;
                    let src = &g[n * len * plane..(n + 1) * len * plane];
                    for (d, &gv) in dx[off..off + len * plane].iter_mut().zip(src) {
                        *d += gv;
                    }
                }
                checkin(grads, *x, Some(dx));
            }
        }
        Op::Relu { x } => {
            if let Some(mut dx) = checkout(nodes, grads, *x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
                checkin(grads, *x, Some(dx));
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
            mask,
            count,
        } => {
            if let Some(mut dx) = checkout(nodes, grads, *logits) {
                let s = nodes[logits.0].value.shape();
                let (c, plane) = (s.c(), s.plane());
                let scale = g[0] / T::lit(*count as f64);
                for n in 0..s.n() {
                    for p in 0..plane {
                        let li = n * plane + p;
                        if mask.as_ref().is_some_and(|m| !m[li]) {
                            continue;
                        }
                        let label = labels[li] as usize;
                        for k in 0..c {
                            let idx = (n * c + k) * plane + p;
                            let onehot = if k == label { T::one() } else { T::zero() };
                            dx[idx] += (probs[idx] - onehot) * scale;
                        }
                    }
                }
                checkin(grads, *logits, Some(dx));
            }
        }
        Op::SumScalars { xs } => {
            for &v in xs {
                if let Some(mut dx) = checkout(nodes, grads, v) {
                    dx[0] += g[0];
                    checkin(grads, v, Some(dx));
                }
            }
        }
        Op::AddScaled { a, b, scale } => {
            if let Some(mut da) = checkout(nodes, grads, *a) {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
                checkin(grads, *a, Some(da));
            }
            if let Some(mut db) = checkout(nodes, grads, *b) {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += *scale * gv;
                }
                checkin(grads, *b, Some(db));
            }
        }
        Op::Dot { x, weights } => {
            if let Some(mut dx) = checkout(nodes, grads, *x) {
                for (d, &wv) in dx.iter_mut().zip(weights) {
                    *d += g[0] * wv;
                }
                checkin(grads, *x, Some(dx));
            }
        }
    }
}
