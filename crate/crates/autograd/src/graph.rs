//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward computation.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] walks it in reverse.

use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Ln(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Linear(Var, Var, Option<Var>),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    ChannelAffine(Var, Var, Var),
    AddChannel(Var, Var),
    ChannelMean(Var),
    ChannelVar(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    Embedding(Var, Vec<usize>),
    LogSoftmax(Var),
    Softmax(Var),
    Nll(Var, Vec<usize>),
    CwMargin(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward/backward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not
    /// influence the loss through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs (B, C, ...) input, got {shape:?}");
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op on mismatched shapes"
        );
        let value = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(a, lo)`; the gradient passes where `a >= lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::L2Norm(a), ng)
    }

    /// `x · wᵀ + b` for `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear: x {xs:?} w {ws:?}");
        let (bsz, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bsz * fout];
        if let Some(b) = b {
            assert_eq!(self.shape(b), [fout], "linear bias shape");
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            bsz,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::from_vec(&[bsz, fout], out).expect("linear output");
        self.push(value, Op::Linear(x, w, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::from_vec(&[m, n], out).expect("matmul output");
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// 2-D convolution, `x: (B, Cin, H, W)`, `w: (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: x {xs:?} w {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: x {xs:?} w {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d needs square kernels");
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad);
        let (bsz, cout) = (xs[0], ws[0]);
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let in_len = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; bsz * cout * p];
        let mut cols = vec![0.0; kr * p];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for b in 0..bsz {
            im2col(&xv[b * in_len..(b + 1) * in_len], &geom, &mut cols);
            gemm(cout, kr, p, wv, false, &cols, false, 0.0, &mut out[b * cout * p..(b + 1) * cout * p]);
        }
        let ng = self.ng(x) || self.ng(w);
        let value = Tensor::from_vec(&[bsz, cout, geom.out_h, geom.out_w], out).expect("conv2d output");
        self.push(value, Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// Transposed 2-D convolution, `x: (B, Cin, H, W)`, `w: (Cin, Cout, k, k)`,
    /// producing `(B, Cout, (H-1)·s - 2p + k, (W-1)·s - 2p + k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 4 && ws.len() == 4, "conv_transpose2d: x {xs:?} w {ws:?}");
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv_transpose2d needs square kernels");
        let (bsz, cin, h, wd, cout, k) = (xs[0], xs[1], xs[2], xs[3], ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad);
        assert!(geom.out_h == h && geom.out_w == wd, "conv_transpose2d geometry");
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; bsz * cout * oh * ow];
        let mut cols = vec![0.0; kr * p];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for b in 0..bsz {
            gemm(kr, cin, p, wv, true, &xv[b * cin * p..(b + 1) * cin * p], false, 0.0, &mut cols);
            col2im(&cols, &geom, &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow]);
        }
        let ng = self.ng(x) || self.ng(w);
        let value = Tensor::from_vec(&[bsz, cout, oh, ow], out).expect("conv_transpose2d output");
        self.push(value, Op::ConvTranspose2d { x, w, stride, pad }, ng)
    }

    /// `x[:, c, ...] · scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (b, c, inner) = channel_layout(self.shape(x));
        assert_eq!(self.shape(scale), [c], "channel_affine scale shape");
        assert_eq!(self.shape(shift), [c], "channel_affine shift shape");
        let (xv, sv, tv) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for i in off..off + inner {
                    out[i] = xv[i] * sv[ci] + tv[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        let value = Tensor::from_vec(self.shape(x), out).expect("channel_affine output");
        self.push(value, Op::ChannelAffine(x, scale, shift), ng)
    }

    /// `x[:, c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let (b, c, inner) = channel_layout(self.shape(x));
        assert_eq!(self.shape(bias), [c], "add_channel bias shape");
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let mut out = xv.to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for v in &mut out[off..off + inner] {
                    *v += bv[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        let value = Tensor::from_vec(self.shape(x), out).expect("add_channel output");
        self.push(value, Op::AddChannel(x, bias), ng)
    }

    /// Per-channel mean over batch and trailing dims.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let value = Tensor::from_vec(&[self.shape(x)[1]], channel_means(self.value(x))).expect("channel_mean");
        let ng = self.ng(x);
        self.push(value, Op::ChannelMean(x), ng)
    }

    /// Per-channel population variance over batch and trailing dims.
    pub fn channel_var(&mut self, x: Var) -> Var {
        let value = Tensor::from_vec(&[self.shape(x)[1]], channel_vars(self.value(x))).expect("channel_var");
        let ng = self.ng(x);
        self.push(value, Op::ChannelVar(x), ng)
    }

    /// `(B, C, h, w) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, inner) = channel_layout(self.shape(x));
        let xv = self.value(x).data();
        let out: Vec<f64> = xv.chunks(inner).map(|s| s.iter().sum::<f64>() / inner as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[b, c], out).expect("gap"), Op::GlobalAvgPool(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).reshape(shape).expect("reshape element count");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// `(B, m), (B, n) -> (B, m + n)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat_cols: {sa:?} {sb:?}");
        let (rows, m, n) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (m + n));
        for i in 0..rows {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[rows, m + n], out).expect("concat"), Op::ConcatCols(a, b), ng)
    }

    /// Row lookup `table[idx[i]]` for `table: (V, D)`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Var {
        let ts = self.shape(table);
        assert_eq!(ts.len(), 2, "embedding table must be 2-D");
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < v, "embedding index {i} out of range {v}");
            out.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(
            Tensor::from_vec(&[idx.len(), d], out).expect("embedding"),
            Op::Embedding(table, idx.to_vec()),
            ng,
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.ndim(), 2, "log_softmax needs (B, C)");
        let c = t.dim(1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_vec(t.shape(), out).expect("log_softmax");
        let ng = self.ng(x);
        self.push(value, Op::LogSoftmax(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Var {
        let t = self.value(logp);
        assert_eq!(t.ndim(), 2, "nll needs (B, C)");
        assert_eq!(t.dim(0), labels.len(), "nll label count");
        let b = labels.len();
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| -t.row(i)[y]).sum();
        let ng = self.ng(logp);
        self.push(Tensor::scalar(s / b as f64), Op::Nll(logp, labels.to_vec()), ng)
    }

    /// Per-row CW margin `max_{j != y} z_j - z_y`, shape `(B)`.
    pub fn cw_margin(&mut self, z: Var, labels: &[usize]) -> Var {
        let t = self.value(z);
        assert_eq!(t.ndim(), 2, "cw_margin needs (B, C)");
        let out: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = t.row(i);
                row[best_other(row, y)] - row[y]
            })
            .collect();
        let ng = self.ng(z);
        self.push(
            Tensor::from_vec(&[labels.len()], out).expect("cw_margin"),
            Op::CwMargin(z, labels.to_vec()),
            ng,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves and nodes the caller may ask about keep gradients; drop
        // everything that cannot influence the loss.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || g.zip_map(bv, |gi, bi| gi * bi));
                self.acc(grads, *b, || g.zip_map(av, |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || g.zip_map(bv, |gi, bi| gi / bi));
                self.acc(grads, *b, || {
                    let t = g.zip_map(av, |gi, ai| gi * ai);
                    t.zip_map(bv, |t, bi| -t / (bi * bi))
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.map(|v| v * s)),
            Op::AddScalar(a) => self.acc(grads, *a, || g.clone()),
            Op::Ln(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |gi, ai| gi / ai));
            }
            Op::Exp(a) => self.acc(grads, *a, || g.zip_map(y, |gi, yi| gi * yi)),
            Op::Sqrt(a) => self.acc(grads, *a, || g.zip_map(y, |gi, yi| gi / (2.0 * yi))),
            Op::Square(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |gi, ai| 2.0 * gi * ai));
            }
            Op::ClampMin(a, lo) => {
                let av = self.value(*a);
                let lo = *lo;
                self.acc(grads, *a, || g.zip_map(av, |gi, ai| if ai >= lo { gi } else { 0.0 }));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |gi, ai| if ai > 0.0 { gi } else { 0.0 }));
            }
            Op::LeakyRelu(a, s) => {
                let av = self.value(*a);
                let s = *s;
                self.acc(grads, *a, || g.zip_map(av, |gi, ai| if ai > 0.0 { gi } else { s * gi }));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, || g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Tanh(a) => self.acc(grads, *a, || g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || g.zip_map(av, |gi, ai| gi * sigmoid(ai)));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g.item() / n;
                self.acc(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::L2Norm(a) => {
                let norm = y.item();
                let gv = g.item();
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    if norm > 0.0 {
                        av.map(|v| gv * v / norm)
                    } else {
                        Tensor::zeros(av.shape())
                    }
                });
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bsz, fin, fout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; bsz * fin];
                    gemm(bsz, fout, fin, g.data(), false, wv.data(), false, 0.0, &mut dx);
                    Tensor::from_vec(&[bsz, fin], dx).unwrap()
                });
                self.acc(grads, *w, || {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, bsz, fin, g.data(), true, xv.data(), false, 0.0, &mut dw);
                    Tensor::from_vec(&[fout, fin], dw).unwrap()
                });
                if let Some(b) = b {
                    self.acc(grads, *b, || {
                        let mut db = vec![0.0; fout];
                        for row in g.data().chunks(fout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_vec(&[fout], db).unwrap()
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    Tensor::from_vec(&[m, k], da).unwrap()
                });
                self.acc(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    Tensor::from_vec(&[k, n], db).unwrap()
                });
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_backward(*x, *w, *stride, *pad, g, grads),
            Op::ConvTranspose2d { x, w, stride, pad } => {
                self.conv_transpose2d_backward(*x, *w, *stride, *pad, g, grads)
            }
            Op::ChannelAffine(x, scale, shift) => {
                let (b, c, inner) = channel_layout(g.shape());
                let (xv, sv) = (self.value(*x), self.value(*scale));
                self.acc(grads, *x, || {
                    let mut dx = g.data().to_vec();
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            for v in &mut dx[off..off + inner] {
                                *v *= sv.data()[ci];
                            }
                        }
                    }
                    Tensor::from_vec(g.shape(), dx).unwrap()
                });
                self.acc(grads, *scale, || {
                    let prod = g.zip_map(xv, |a, b| a * b);
                    Tensor::from_vec(&[c], channel_sums(&prod)).unwrap()
                });
                self.acc(grads, *shift, || Tensor::from_vec(&[c], channel_sums(g)).unwrap());
            }
            Op::AddChannel(x, bias) => {
                let c = g.dim(1);
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *bias, || Tensor::from_vec(&[c], channel_sums(g)).unwrap());
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(*x);
                let (b, c, inner) = channel_layout(xs);
                let n = (b * inner) as f64;
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; b * c * inner];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            dx[off..off + inner].fill(g.data()[ci] / n);
                        }
                    }
                    Tensor::from_vec(xs, dx).unwrap()
                });
            }
            Op::ChannelVar(x) => {
                let xv = self.value(*x);
                let (b, c, inner) = channel_layout(xv.shape());
                let n = (b * inner) as f64;
                let means = channel_means(xv);
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; xv.numel()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            let k = 2.0 * g.data()[ci] / n;
                            for i in off..off + inner {
                                dx[i] = k * (xv.data()[i] - means[ci]);
                            }
                        }
                    }
                    Tensor::from_vec(xv.shape(), dx).unwrap()
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let (_, _, inner) = channel_layout(xs);
                self.acc(grads, *x, || {
                    let mut dx = Vec::with_capacity(g.numel() * inner);
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat_n(gv / inner as f64, inner));
                    }
                    Tensor::from_vec(xs, dx).unwrap()
                });
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x);
                self.acc(grads, *x, || g.reshape(xs).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let (m, n) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = g.dim(0);
                self.acc(grads, *a, || {
                    let d: Vec<f64> = (0..rows).flat_map(|i| g.row(i)[..m].to_vec()).collect();
                    Tensor::from_vec(&[rows, m], d).unwrap()
                });
                self.acc(grads, *b, || {
                    let d: Vec<f64> = (0..rows).flat_map(|i| g.row(i)[m..].to_vec()).collect();
                    Tensor::from_vec(&[rows, n], d).unwrap()
                });
            }
            Op::Embedding(table, idx) => {
                let ts = self.shape(*table);
                let d = ts[1];
                self.acc(grads, *table, || {
                    let mut dt = Tensor::zeros(ts);
                    for (r, &i) in idx.iter().enumerate() {
                        for (dst, src) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                            *dst += src;
                        }
                    }
                    dt
                });
            }
            Op::LogSoftmax(x) => {
                let c = y.dim(1);
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; y.numel()];
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    Tensor::from_vec(y.shape(), dx).unwrap()
                });
            }
            Op::Softmax(x) => {
                let c = y.dim(1);
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; y.numel()];
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    Tensor::from_vec(y.shape(), dx).unwrap()
                });
            }
            Op::Nll(logp, labels) => {
                let s = self.shape(*logp);
                let c = s[1];
                let k = -g.item() / labels.len() as f64;
                self.acc(grads, *logp, || {
                    let mut d = Tensor::zeros(s);
                    for (i, &yl) in labels.iter().enumerate() {
                        d.data_mut()[i * c + yl] = k;
                    }
                    d
                });
            }
            Op::CwMargin(z, labels) => {
                let zv = self.value(*z);
                let c = zv.dim(1);
                self.acc(grads, *z, || {
                    let mut d = Tensor::zeros(zv.shape());
                    for (i, &yl) in labels.iter().enumerate() {
                        let j = best_other(zv.row(i), yl);
                        d.data_mut()[i * c + j] += g.data()[i];
                        d.data_mut()[i * c + yl] -= g.data()[i];
                    }
                    d
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let d = f();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, stride: usize, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad);
        let (bsz, cout) = (xs[0], ws[0]);
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let in_len = xs[1] * xs[2] * xs[3];
        let mut cols = vec![0.0; kr * p];
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        let mut dw = vec![0.0; if need_w { cout * kr } else { 0 }];
        let mut dx = vec![0.0; if need_x { xv.numel() } else { 0 }];
        for b in 0..bsz {
            let gb = &g.data()[b * cout * p..(b + 1) * cout * p];
            if need_w {
                im2col(&xv.data()[b * in_len..(b + 1) * in_len], &geom, &mut cols);
                gemm(cout, p, kr, gb, false, &cols, true, 1.0, &mut dw);
            }
            if need_x {
                gemm(kr, cout, p, wv.data(), true, gb, false, 0.0, &mut cols);
                col2im(&cols, &geom, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
        if need_w {
            self.acc(grads, w, || Tensor::from_vec(ws, dw).unwrap());
        }
        if need_x {
            self.acc(grads, x, || Tensor::from_vec(xs, dx).unwrap());
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let (bsz, cin, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
        let (oh, ow) = (g.dim(2), g.dim(3));
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad);
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let out_len = cout * oh * ow;
        let mut cols = vec![0.0; kr * p];
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        let mut dw = vec![0.0; if need_w { cin * kr } else { 0 }];
        let mut dx = vec![0.0; if need_x { xv.numel() } else { 0 }];
        for b in 0..bsz {
            im2col(&g.data()[b * out_len..(b + 1) * out_len], &geom, &mut cols);
            if need_x {
                gemm(cin, kr, p, wv.data(), false, &cols, false, 0.0, &mut dx[b * cin * p..(b + 1) * cin * p]);
            }
            if need_w {
                gemm(cin, p, kr, &xv.data()[b * cin * p..(b + 1) * cin * p], false, &cols, true, 1.0, &mut dw);
            }
        }
        if need_w {
            self.acc(grads, w, || Tensor::from_vec(ws, dw).unwrap());
        }
        if need_x {
            self.acc(grads, x, || Tensor::from_vec(xs, dx).unwrap());
        }
    }
}

/// Index of the largest entry other than `y`; ties go to the lowest index.
fn best_other(row: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j != y && (best == usize::MAX || v > row[best]) {
            best = j;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn channel_sums(t: &Tensor) -> Vec<f64> {
    let (b, c, inner) = channel_layout(t.shape());
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let off = (bi * c + ci) * inner;
            *o += t.data()[off..off + inner].iter().sum::<f64>();
        }
    }
    out
}

/// Per-channel mean of a `(B, C, ...)` tensor.
pub fn channel_means(t: &Tensor) -> Vec<f64> {
    let (b, _, inner) = channel_layout(t.shape());
    let n = (b * inner) as f64;
    channel_sums(t).into_iter().map(|s| s / n).collect()
}

/// Per-channel population variance of a `(B, C, ...)` tensor.
pub fn channel_vars(t: &Tensor) -> Vec<f64> {
    let (b, c, inner) = channel_layout(t.shape());
    let n = (b * inner) as f64;
    let means = channel_means(t);
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * inner;
            out[ci] += t.data()[off..off + inner]
                .iter()
                .map(|v| (v - means[ci]) * (v - means[ci]))
                .sum::<f64>();
        }
    }
    out.into_iter().map(|s| s / n).collect()
}
