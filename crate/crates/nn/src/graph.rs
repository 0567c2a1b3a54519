//! Reverse-mode autodiff over a recorded tape of tensor ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are bound
//! from a [`ParamStore`] by name; binding the same name twice returns the
//! same leaf, so a module applied twice in one pass accumulates gradients.

use std::collections::HashMap;

use crate::conv::{col2im_range, column_block, im2col_range, ConvGeom};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Silu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    // `geom` is the forward convolution whose adjoint this op applies.
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Act { x: Var, kind: Activation },
    AddScaled { a: Var, b: Var, wa: T, wb: T },
    Film { x: Var, scale: Var, shift: Var },
    Concat { a: Var, b: Var },
    Broadcast2d { c: Var },
    Reshape { x: Var },
    PadEdge { x: Var, top: usize, left: usize },
    Crop { x: Var, top: usize, left: usize },
    MeanSpatial { x: Var },
    Mse { pred: Var, target: Var },
    BceLogits { logits: Var, label: T },
    GaussianKl { mu: Var, logvar: Var },
    Reparam { mu: Var, logvar: Var, eta: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Splits a `[B, C, rest...]` shape into `(B, C, prod(rest))`.
fn bc_inner(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [B, C], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [B, C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
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
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf that collects a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter of `store` as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.variable(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let (batch, cin, h, wd) = dims4(self.shape(x));
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        assert_eq!(wshape[1], cin, "conv input channels mismatch");
        assert_eq!(wshape[2], wshape[3], "square kernels only");
        let cout = wshape[0];
        let geom = ConvGeom::new(cin, h, wd, wshape[2], stride, padding);
        let (kk, p) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros(&[batch, cout, geom.out_height, geom.out_width]);
        let block = column_block::<T>(kk);
        let mut cols = vec![T::zero(); kk * block.min(p)];
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let od = out.data_mut();
            for s in 0..batch {
                let os = &mut od[s * cout * p..(s + 1) * cout * p];
                for a in (0..p).step_by(block) {
                    let bw = block.min(p - a);
                    let cols = &mut cols[..kk * bw];
                    im2col_range(&geom, xv.outer(s), a, a + bw, cols);
                    T::gemm_strided(cout, kk, bw, T::one(), (wv, kk as isize, 1), (cols, bw as isize, 1), T::zero(), (&mut os[a..], p as isize, 1));
                }
            }
            if let Some(b) = b {
                add_channel_bias(od, self.value(b).data(), batch, cout, p);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution with weight `[Cin, Cout, k, k]`, producing an
    /// `out_h x out_w` map. The stride/padding describe the forward
    /// convolution that maps `out_h x out_w` back to the input size.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let (batch, cin, h, wd) = dims4(self.shape(x));
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 4, "conv-transpose weight must be [Cin, Cout, k, k]");
        assert_eq!(wshape[0], cin, "conv-transpose input channels mismatch");
        let cout = wshape[1];
        let geom = ConvGeom::new(cout, out_h, out_w, wshape[2], stride, padding);
        assert_eq!(
            (geom.out_height, geom.out_width),
            (h, wd),
            "conv-transpose output size inconsistent with input"
        );
        let (kk, p) = (geom.col_rows(), geom.col_cols());
        let plane = out_h * out_w;
        let mut out = Tensor::zeros(&[batch, cout, out_h, out_w]);
        let block = column_block::<T>(kk);
        let mut cols = vec![T::zero(); kk * block.min(p)];
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let od = out.data_mut();
            for s in 0..batch {
                let xs = xv.outer(s);
                let os = &mut od[s * cout * plane..(s + 1) * cout * plane];
                for a in (0..p).step_by(block) {
                    let bw = block.min(p - a);
                    let cols = &mut cols[..kk * bw];
                    T::gemm_strided(kk, cin, bw, T::one(), (wv, 1, kk as isize), (&xs[a..], p as isize, 1), T::zero(), (cols, bw as isize, 1));
                    col2im_range(&geom, cols, a, a + bw, os);
                }
            }
            if let Some(b) = b {
                add_channel_bias(od, self.value(b).data(), batch, cout, plane);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::ConvT2d { x, w, b, geom }, rg)
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [B, in]");
        assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[batch, fout]);
        T::gemm(false, true, batch, fin, fout, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), out.data_mut());
        if let Some(b) = b {
            add_channel_bias(out.data_mut(), self.value(b).data(), batch, fout, 1);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| match kind {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::from_f64_lossy(slope)
                }
            }
            Activation::Silu => v * sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        });
        let rg = self.rg(x);
        self.push(out, Op::Act { x, kind }, rg)
    }

    /// `wa * a + wb * b` for equal shapes.
    pub fn add_scaled(&mut self, a: Var, b: Var, wa: T, wb: T) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| wa * p + wb * q).collect();
            Tensor::from_vec(av.shape(), data).expect("same shape")
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddScaled { a, b, wa, wb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, T::one(), T::one())
    }

    /// Per-channel modulation `x * (1 + scale) + shift`; `scale`, `shift` are `[B, C]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (batch, ch, inner) = bc_inner(self.shape(x));
        assert_eq!(self.shape(scale), &[batch, ch], "film scale shape");
        assert_eq!(self.shape(shift), &[batch, ch], "film shift shape");
        let mut out = self.value(x).clone();
        {
            let sc = self.value(scale).data();
            let sh = self.value(shift).data();
            for (bc, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let (m, a) = (T::one() + sc[bc], sh[bc]);
                chunk.iter_mut().for_each(|v| *v = *v * m + a);
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(out, Op::Film { x, scale, shift }, rg)
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "concat batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat trailing dims mismatch");
        let (batch, ca, inner) = bc_inner(&sa);
        let cb = sb[1];
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(batch * (ca + cb) * inner);
        {
            let (av, bv) = (self.value(a), self.value(b));
            for s in 0..batch {
                data.extend_from_slice(av.outer(s));
                data.extend_from_slice(bv.outer(s));
            }
        }
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat { a, b }, rg)
    }

    /// `[B, D] -> [B, D, h, w]`, constant over the spatial axes.
    pub fn broadcast2d(&mut self, c: Var, h: usize, w: usize) -> Var {
        let cs = self.shape(c).to_vec();
        assert_eq!(cs.len(), 2, "broadcast2d input must be [B, D]");
        let mut data = Vec::with_capacity(cs[0] * cs[1] * h * w);
        for &v in self.value(c).data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::from_vec(&[cs[0], cs[1], h, w], data).expect("broadcast shape");
        let rg = self.rg(c);
        self.push(out, Op::Broadcast2d { c }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Pads a `[B, C, H, W]` map by replicating its edge rows/columns.
    pub fn pad_edge(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        let (batch, ch, h, w) = dims4(self.shape(x));
        let (nh, nw) = (h + top + bottom, w + left + right);
        let mut out = Tensor::zeros(&[batch, ch, nh, nw]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for plane in 0..batch * ch {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * nh * nw..(plane + 1) * nh * nw];
                for r in 0..nh {
                    let sr = r.saturating_sub(top).min(h - 1);
                    for c in 0..nw {
                        let sc = c.saturating_sub(left).min(w - 1);
                        dst[r * nw + c] = src[sr * w + sc];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::PadEdge { x, top, left }, rg)
    }

    /// Crops a `[B, C, H, W]` map to `h x w` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (batch, ch, xh, xw) = dims4(self.shape(x));
        assert!(top + h <= xh && left + w <= xw, "crop window out of bounds");
        let mut out = Tensor::zeros(&[batch, ch, h, w]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for plane in 0..batch * ch {
                for r in 0..h {
                    let s = plane * xh * xw + (top + r) * xw + left;
                    od[plane * h * w + r * w..plane * h * w + (r + 1) * w].copy_from_slice(&xv[s..s + w]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Crop { x, top, left }, rg)
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (batch, ch, inner) = bc_inner(self.shape(x));
        let n = T::from_usize(inner).expect("size");
        let data = self.value(x).data().chunks(inner).map(|c| c.iter().copied().sum::<T>() / n).collect();
        let out = Tensor::from_vec(&[batch, ch], data).expect("pool shape");
        let rg = self.rg(x);
        self.push(out, Op::MeanSpatial { x }, rg)
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        assert_eq!(self.shape(pred), self.shape(target), "mse shape mismatch");
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::from_usize(p.len()).expect("size");
        let loss = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let rg = self.rg(pred) || self.rg(target);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, label: T) -> Var {
        let l = self.value(logits).data();
        let n = T::from_usize(l.len()).expect("size");
        let loss = l
            .iter()
            .map(|&z| z.max(T::zero()) - z * label + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, label }, rg)
    }

    /// `-0.5 * mean(1 + logvar - mu^2 - exp(logvar))`, the KL divergence of a
    /// diagonal Gaussian from the standard normal, averaged per element.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Var {
        assert_eq!(self.shape(mu), self.shape(logvar), "kl shape mismatch");
        let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
        let n = T::from_usize(m.len()).expect("size");
        let half = T::from_f64_lossy(0.5);
        let s = m
            .iter()
            .zip(lv)
            .map(|(&a, &b)| T::one() + b - a * a - b.exp())
            .sum::<T>();
        let rg = self.rg(mu) || self.rg(logvar);
        self.push(Tensor::scalar(-half * s / n), Op::GaussianKl { mu, logvar }, rg)
    }

    /// `mu + exp(logvar / 2) * eta` with `eta` held fixed.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eta: Var) -> Var {
        assert_eq!(self.shape(mu), self.shape(logvar), "reparam shape mismatch");
        assert_eq!(self.shape(mu), self.shape(eta), "reparam noise shape mismatch");
        let half = T::from_f64_lossy(0.5);
        let out = {
            let (m, lv, e) = (self.value(mu), self.value(logvar).data(), self.value(eta).data());
            let data = m
                .data()
                .iter()
                .zip(lv)
                .zip(e)
                .map(|((&a, &b), &c)| a + (b * half).exp() * c)
                .collect();
            Tensor::from_vec(m.shape(), data).expect("same shape")
        };
        let rg = self.rg(mu) || self.rg(logvar) || self.rg(eta);
        self.push(out, Op::Reparam { mu, logvar, eta }, rg)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut acc = Accum {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            graph: self,
        };
        acc.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                acc.grads[i] = None;
                continue;
            }
            let Some(g) = acc.grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut acc);
            if matches!(node.op, Op::Leaf) {
                acc.grads[i] = Some(g);
            }
        }
        Gradients { grads: acc.grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, acc: &mut Accum<'_, T>) {
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(x);
                let wv = self.value(w).data();
                let batch = xv.shape()[0];
                let cout = self.shape(w)[0];
                let (kk, p) = (geom.col_rows(), geom.col_cols());
                let block = column_block::<T>(kk);
                let mut cols = vec![T::zero(); kk * block.min(p)];
                let mut dw = self.rg(w).then(|| vec![T::zero(); wv.len()]);
                let mut dx = self.rg(x).then(|| vec![T::zero(); xv.len()]);
                for s in 0..batch {
                    let gs = &gd[s * cout * p..(s + 1) * cout * p];
                    for a in (0..p).step_by(block) {
                        let bw = block.min(p - a);
                        let cols = &mut cols[..kk * bw];
                        if let Some(dw) = dw.as_mut() {
                            im2col_range(&geom, xv.outer(s), a, a + bw, cols);
                            T::gemm_strided(cout, bw, kk, T::one(), (&gs[a..], p as isize, 1), (cols, 1, bw as isize), T::one(), (dw, kk as isize, 1));
                        }
                        if let Some(dx) = dx.as_mut() {
                            T::gemm_strided(kk, cout, bw, T::one(), (wv, 1, kk as isize), (&gs[a..], p as isize, 1), T::zero(), (cols, bw as isize, 1));
                            col2im_range(&geom, cols, a, a + bw, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                        }
                    }
                }
                if let Some(dw) = dw {
                    acc.add_vec(w, dw);
                }
                if let Some(dx) = dx {
                    acc.add_vec(x, dx);
                }
                if let Some(b) = b {
                    acc.add_vec(b, channel_sums(gd, batch, cout, p));
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let xv = self.value(x);
                let wv = self.value(w).data();
                let (batch, cin) = (xv.shape()[0], xv.shape()[1]);
                let cout = geom.channels;
                let (kk, p) = (geom.col_rows(), geom.col_cols());
                let plane = geom.height * geom.width;
                let block = column_block::<T>(kk);
                let mut dcols = vec![T::zero(); kk * block.min(p)];
                let mut dw = self.rg(w).then(|| vec![T::zero(); wv.len()]);
                let mut dx = self.rg(x).then(|| vec![T::zero(); xv.len()]);
                for s in 0..batch {
                    let gs = &gd[s * cout * plane..(s + 1) * cout * plane];
                    let xs = xv.outer(s);
                    for a in (0..p).step_by(block) {
                        let bw = block.min(p - a);
                        let dcols = &mut dcols[..kk * bw];
                        im2col_range(&geom, gs, a, a + bw, dcols);
                        if let Some(dx) = dx.as_mut() {
                            let dxs = &mut dx[s * cin * p..(s + 1) * cin * p];
                            T::gemm_strided(cin, kk, bw, T::one(), (wv, kk as isize, 1), (dcols, bw as isize, 1), T::zero(), (&mut dxs[a..], p as isize, 1));
                        }
                        if let Some(dw) = dw.as_mut() {
                            T::gemm_strided(cin, bw, kk, T::one(), (&xs[a..], p as isize, 1), (dcols, 1, bw as isize), T::one(), (dw, kk as isize, 1));
                        }
                    }
                }
                if let Some(dw) = dw {
                    acc.add_vec(w, dw);
                }
                if let Some(dx) = dx {
                    acc.add_vec(x, dx);
                }
                if let Some(b) = b {
                    acc.add_vec(b, channel_sums(gd, batch, cout, plane));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (batch, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.rg(x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    T::gemm(false, false, batch, fout, fin, T::one(), gd, wv.data(), T::zero(), &mut dx);
                    acc.add_vec(x, dx);
                }
                if self.rg(w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(true, false, fout, batch, fin, T::one(), gd, xv.data(), T::zero(), &mut dw);
                    acc.add_vec(w, dw);
                }
                if let Some(b) = b {
                    acc.add_vec(b, channel_sums(gd, batch, fout, 1));
                }
            }
            Op::Act { x, kind } => {
                let (xv, yv) = (self.value(x).data(), node.value.data());
                let slope = match kind {
                    Activation::LeakyRelu(s) => T::from_f64_lossy(s),
                    _ => T::zero(),
                };
                let dx = gd
                    .iter()
                    .zip(xv)
                    .zip(yv)
                    .map(|((&g, &xi), &yi)| {
                        g * match kind {
                            Activation::Relu | Activation::LeakyRelu(_) => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    slope
                                }
                            }
                            Activation::Silu => {
                                let s = sigmoid(xi);
                                s * (T::one() + xi * (T::one() - s))
                            }
                            Activation::Tanh => T::one() - yi * yi,
                            Activation::Sigmoid => yi * (T::one() - yi),
                        }
                    })
                    .collect();
                acc.add_vec(x, dx);
            }
            Op::AddScaled { a, b, wa, wb } => {
                acc.add_vec(a, gd.iter().map(|&v| v * wa).collect());
                acc.add_vec(b, gd.iter().map(|&v| v * wb).collect());
            }
            Op::Film { x, scale, shift } => {
                let (_, _, inner) = bc_inner(node.value.shape());
                let xv = self.value(x).data();
                let sc = self.value(scale).data();
                if self.rg(x) {
                    let dx = gd
                        .chunks(inner)
                        .enumerate()
                        .flat_map(|(bc, ch)| ch.iter().map(move |&v| v * (T::one() + sc[bc])))
                        .collect();
                    acc.add_vec(x, dx);
                }
                if self.rg(scale) {
                    let ds = gd
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc.add_vec(scale, ds);
                }
                if self.rg(shift) {
                    acc.add_vec(shift, gd.chunks(inner).map(|c| c.iter().copied().sum()).collect());
                }
            }
            Op::Concat { a, b } => {
                let batch = node.value.shape()[0];
                let (la, lb) = (self.value(a).len() / batch, self.value(b).len() / batch);
                let mut da = Vec::with_capacity(batch * la);
                let mut db = Vec::with_capacity(batch * lb);
                for chunk in gd.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                acc.add_vec(a, da);
                acc.add_vec(b, db);
            }
            Op::Broadcast2d { c } => {
                let n = self.value(c).len();
                let inner = gd.len() / n;
                acc.add_vec(c, gd.chunks(inner).map(|ch| ch.iter().copied().sum()).collect());
            }
            Op::Reshape { x } => acc.add_vec(x, gd.to_vec()),
            Op::PadEdge { x, top, left } => {
                let (batch, ch, h, w) = dims4(self.shape(x));
                let (_, _, nh, nw) = dims4(node.value.shape());
                let mut dx = vec![T::zero(); batch * ch * h * w];
                for plane in 0..batch * ch {
                    for r in 0..nh {
                        let sr = r.saturating_sub(top).min(h - 1);
                        for c in 0..nw {
                            let sc = c.saturating_sub(left).min(w - 1);
                            dx[plane * h * w + sr * w + sc] += gd[plane * nh * nw + r * nw + c];
                        }
                    }
                }
                acc.add_vec(x, dx);
            }
            Op::Crop { x, top, left } => {
                let (batch, ch, xh, xw) = dims4(self.shape(x));
                let (_, _, h, w) = dims4(node.value.shape());
                let mut dx = vec![T::zero(); batch * ch * xh * xw];
                for plane in 0..batch * ch {
                    for r in 0..h {
                        let d = plane * xh * xw + (top + r) * xw + left;
                        dx[d..d + w].copy_from_slice(&gd[plane * h * w + r * w..plane * h * w + (r + 1) * w]);
                    }
                }
                acc.add_vec(x, dx);
            }
            Op::MeanSpatial { x } => {
                let (_, _, inner) = bc_inner(self.shape(x));
                let n = T::from_usize(inner).expect("size");
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v / n, inner)).collect();
                acc.add_vec(x, dx);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(pred).data(), self.value(target).data());
                let scale = gd[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).expect("size");
                let diff: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect();
                if self.rg(target) {
                    acc.add_vec(target, diff.iter().map(|&v| -v).collect());
                }
                acc.add_vec(pred, diff);
            }
            Op::BceLogits { logits, label } => {
                let l = self.value(logits).data();
                let scale = gd[0] / T::from_usize(l.len()).expect("size");
                acc.add_vec(logits, l.iter().map(|&z| (sigmoid(z) - label) * scale).collect());
            }
            Op::GaussianKl { mu, logvar } => {
                let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
                let scale = gd[0] / T::from_usize(m.len()).expect("size");
                let half = T::from_f64_lossy(0.5);
                acc.add_vec(mu, m.iter().map(|&v| v * scale).collect());
                acc.add_vec(logvar, lv.iter().map(|&v| half * (v.exp() - T::one()) * scale).collect());
            }
            Op::Reparam { mu, logvar, eta } => {
                let (lv, e) = (self.value(logvar).data(), self.value(eta).data());
                let half = T::from_f64_lossy(0.5);
                acc.add_vec(mu, gd.to_vec());
                if self.rg(logvar) {
                    let d = gd
                        .iter()
                        .zip(lv)
                        .zip(e)
                        .map(|((&g, &b), &c)| g * half * (b * half).exp() * c)
                        .collect();
                    acc.add_vec(logvar, d);
                }
                if self.rg(eta) {
                    acc.add_vec(eta, gd.iter().zip(lv).map(|(&g, &b)| g * (b * half).exp()).collect());
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(data: &mut [T], bias: &[T], batch: usize, ch: usize, inner: usize) {
    for s in 0..batch {
        for (c, &b) in bias.iter().enumerate().take(ch) {
            let start = (s * ch + c) * inner;
            data[start..start + inner].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn channel_sums<T: Real>(g: &[T], batch: usize, ch: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ch];
    for s in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (s * ch + c) * inner;
            *o += g[start..start + inner].iter().copied().sum::<T>();
        }
    }
    out
}

struct Accum<'g, T> {
    grads: Vec<Option<Tensor<T>>>,
    graph: &'g Graph<T>,
}

impl<T: Real> Accum<'_, T> {
    fn add_vec(&mut self, v: Var, data: Vec<T>) {
        if !self.graph.rg(v) {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(existing) => existing.data_mut().iter_mut().zip(&data).for_each(|(a, &b)| *a += b),
            None => {
                let shape = self.graph.shape(v);
                self.grads[v.0] = Some(Tensor::from_vec(shape, data).expect("gradient shape matches value"));
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients aligned with the entries of `store`; unused parameters get `None`.
    pub fn for_store(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store
            .names()
            .map(|name| graph.bound_param(name).and_then(|v| self.get(v).cloned()))
            .collect()
    }
}
