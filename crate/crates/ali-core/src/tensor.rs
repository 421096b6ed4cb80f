//! Minimal reverse-mode autodiff over `ndarray`, sized for this pipeline.
//!
//! A `Graph` is a per-step tape: builders compute values eagerly and record
//! the op, `backward` walks the tape once and accumulates gradients for every
//! trainable leaf. Batched image tensors are `[N, C, H, W]`, feature matrices
//! `[n, d]`, scalars zero-dimensional. Convolutions lower to im2col + GEMM;
//! batch loops run on rayon with per-item outputs reduced in index order so
//! results are bit-reproducible regardless of thread count.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = a * x + b
    ScaleAdd(Var, f64, f64),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    UpsampleBilinear {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    GlobalAvgPool(Var),
    ConcatChannels(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Transpose2(Var),
    SumAll(Var),
    MeanAll(Var),
    AddChannelVec {
        x: Var,
        v: Var,
    },
    RowNormalize(Var),
    CodingRate {
        x: Var,
        lambda: f64,
    },
    LogSumExpRows(Var),
    SelectEntries {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op,
    rg: bool,
    param: Option<String>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_cache: HashMap<String, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<F: Scalar> {
    pub by_param: BTreeMap<String, ArrayD<F>>,
    by_var: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_var[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op, rg: bool, param: Option<String>) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite node value");
        self.nodes.push(Node {
            value,
            op,
            rg,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.ndim(), 0);
        *self.nodes[v.0].value.first().unwrap()
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// Named leaf. Trainable leaves collect gradients under their name.
    pub fn leaf(&mut self, name: &str, value: ArrayD<F>, trainable: bool) -> Var {
        if let Some(&v) = self.param_cache.get(name) {
            return v;
        }
        let v = self.push(value, Op::Leaf, trainable, Some(name.to_string()));
        self.param_cache.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg, None)
    }

    pub fn scale_add(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (fa, fb) = (F::from_f64(a), F::from_f64(b));
        let v = self.nodes[x.0].value.mapv(|t| t * fa + fb);
        let rg = self.rg(x);
        self.push(v, Op::ScaleAdd(x, a, b), rg, None)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.max(F::zero()));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg, None)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t * sigmoid_s(t));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(sigmoid_s);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg, None)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.abs());
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg, None)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t * t);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg, None)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.max(F::zero()).sqrt());
        let rg = self.rg(x);
        self.push(v, Op::Sqrt(x), rg, None)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg, None)
    }

    /// `x [n, din], w [dout, din], b [dout] -> [n, dout]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        assert_eq!(xv.ncols(), wv.ncols(), "linear din");
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.len(), wv.nrows(), "linear bias dim");
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e + bv[[j]];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, rg, None)
    }

    /// `x [N,C,H,W], w [Co,C,kh,kw], b [Co]` with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let bv = &self.nodes[b.0].value;
        let (n, c, h, wd) = dims4(&xv);
        let (co, ci, kh, kw) = dims4(&wv);
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(bv.len(), co, "conv2d bias dim");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let w2 = wv
            .to_shape((co, ci * kh * kw))
            .expect("conv weight reshape")
            .to_owned();

        let outs: Vec<Array3<F>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let col = im2col(&xv.index_axis(Axis(0), ni).to_owned(), kh, kw, stride, pad);
                let mut y = w2.dot(&col); // [co, oh*ow]
                for (ci_, mut row) in y.rows_mut().into_iter().enumerate() {
                    let bias = bv[[ci_]];
                    row.mapv_inplace(|t| t + bias);
                }
                y.into_shape_with_order((co, oh, ow)).unwrap()
            })
            .collect();
        let mut out = Array4::<F>::zeros((n, co, oh, ow));
        for (ni, o) in outs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), ni).assign(&o);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
            None,
        )
    }

    /// Non-overlapping k x k average pooling; spatial dims must divide by k.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = dims4(&xv);
        assert!(h % k == 0 && w % k == 0, "avg_pool2d divisibility");
        let (oh, ow) = (h / k, w / k);
        let inv = F::from_f64(1.0 / (k * k) as f64);
        let mut out = Array4::<F>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = F::zero();
                        for di in 0..k {
                            for dj in 0..k {
                                s = s + xv[[ni, ci, i * k + di, j * k + dj]];
                            }
                        }
                        out[[ni, ci, i, j]] = s * inv;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::AvgPool2d { x, k }, rg, None)
    }

    /// Bilinear resize with half-pixel centers and clamped edges.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = dims4(&xv);
        if h == out_h && w == out_w {
            return x;
        }
        let (ri, ci_) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
        let mut out = Array4::<F>::zeros((n, c, out_h, out_w));
        for ni in 0..n {
            for ch in 0..c {
                for (i, &(i0, i1, wy)) in ri.iter().enumerate() {
                    for (j, &(j0, j1, wx)) in ci_.iter().enumerate() {
                        let fy = F::from_f64(wy);
                        let fx = F::from_f64(wx);
                        let one = F::one();
                        let v00 = xv[[ni, ch, i0, j0]];
                        let v01 = xv[[ni, ch, i0, j1]];
                        let v10 = xv[[ni, ch, i1, j0]];
                        let v11 = xv[[ni, ch, i1, j1]];
                        let top = v00 * (one - fx) + v01 * fx;
                        let bot = v10 * (one - fx) + v11 * fx;
                        out[[ni, ch, i, j]] = top * (one - fy) + bot * fy;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::UpsampleBilinear { x, out_h, out_w }, rg, None)
    }

    /// `[N,C,H,W] -> [N,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = dims4(&xv);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let mut out = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = F::zero();
                for i in 0..h {
                    for j in 0..w {
                        s = s + xv[[ni, ci, i, j]];
                    }
                }
                out[[ni, ci]] = s * inv;
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), rg, None)
    }

    /// Concatenate `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_channels needs at least one input");
        let views: Vec<_> = xs.iter().map(|v| as4(&self.nodes[v.0].value)).collect();
        let (n, _, h, w) = dims4(&views[0]);
        let total_c: usize = views.iter().map(|v| v.shape()[1]).sum();
        let mut out = Array4::<F>::zeros((n, total_c, h, w));
        let mut at = 0;
        for v in &views {
            let c = v.shape()[1];
            assert_eq!(v.shape()[0], n, "concat batch");
            assert_eq!((v.shape()[2], v.shape()[3]), (h, w), "concat spatial");
            out.slice_mut(ndarray::s![.., at..at + c, .., ..]).assign(v);
            at += c;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out.into_dyn(), Op::ConcatChannels(xs.to_vec()), rg, None)
    }

    /// Gather rows along axis 0 (any rank).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let picked: Vec<_> = idx
            .iter()
            .map(|&i| xv.index_axis(Axis(0), i).insert_axis(Axis(0)))
            .collect();
        let out = ndarray::concatenate(Axis(0), &picked).expect("select_rows concat");
        let rg = self.rg(x);
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
            None,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg, None)
    }

    pub fn transpose2(&mut self, x: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let out = xv.t().as_standard_layout().to_owned().into_dyn();
        let rg = self.rg(x);
        self.push(out, Op::Transpose2(x), rg, None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(ndarray::arr0(s).into_dyn(), Op::SumAll(x), rg, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].value.len();
        let s = self.nodes[x.0].value.sum() * F::from_f64(1.0 / len as f64);
        let rg = self.rg(x);
        self.push(ndarray::arr0(s).into_dyn(), Op::MeanAll(x), rg, None)
    }

    /// `x [N,C,H,W] + v [N,C]`, broadcast over the spatial dims.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let vv = as2(&self.nodes[v.0].value);
        let (n, c, h, w) = dims4(&xv);
        assert_eq!((vv.nrows(), vv.ncols()), (n, c), "add_channel_vec dims");
        let mut out = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let add = vv[[ni, ci]];
                for i in 0..h {
                    for j in 0..w {
                        out[[ni, ci, i, j]] = out[[ni, ci, i, j]] + add;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out.into_dyn(), Op::AddChannelVec { x, v }, rg, None)
    }

    /// L2-normalize each row of `[n,d]`; all-zero rows pass through unchanged.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let norm = row.iter().fold(F::zero(), |a, &t| a + t * t).sqrt();
            if norm.to_f64() > ZERO_ROW_EPS {
                let inv = F::one() / norm;
                row.mapv_inplace(|t| t * inv);
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::RowNormalize(x), rg, None)
    }

    /// `log det(I + (d / (n lambda^2)) X^T X)` of an `[n,d]` matrix.
    pub fn coding_rate(&mut self, x: Var, lambda: f64) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let val = coding_rate_forward(&xv.mapv(|t| t.to_f64()), lambda);
        let rg = self.rg(x);
        self.push(
            ndarray::arr0(F::from_f64(val)).into_dyn(),
            Op::CodingRate { x, lambda },
            rg,
            None,
        )
    }

    /// Row-wise `log sum exp` of `[n,m] -> [n]`, stabilized by the row max.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let mut out = Array1::<F>::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mx = row.iter().fold(F::neg_infinity(), |a, &t| a.max(t));
            let s: F = row.iter().fold(F::zero(), |a, &t| a + (t - mx).exp());
            out[i] = mx + s.ln();
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::LogSumExpRows(x), rg, None)
    }

    /// Gather scalar entries `[ (r, c) ... ]` from `[n,m] -> [k]`.
    pub fn select_entries(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let out = Array1::from_iter(idx.iter().map(|&(r, c)| xv[[r, c]]));
        let rg = self.rg(x);
        self.push(
            out.into_dyn(),
            Op::SelectEntries {
                x,
                idx: idx.to_vec(),
            },
            rg,
            None,
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(
            self.nodes[loss.0].value.ndim(),
            0,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ndarray::arr0(F::one()).into_dyn());

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].rg {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_param = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g), true) = (&node.param, &grads[i], node.rg) {
                by_param.insert(name.clone(), g.clone());
            }
        }
        Gradients {
            by_param,
            by_var: grads,
        }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], v: Var, delta: ArrayD<F>) {
        if !self.nodes[v.0].rg {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|t| -t));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * &self.nodes[b.0].value);
                self.acc(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::ScaleAdd(x, a, _) => {
                let fa = F::from_f64(*a);
                self.acc(grads, *x, g.mapv(|t| t * fa));
            }
            Op::Relu(x) => {
                let mask = self.nodes[x.0].value.mapv(|t| {
                    if t > F::zero() {
                        F::one()
                    } else {
                        F::zero()
                    }
                });
                self.acc(grads, *x, g * &mask);
            }
            Op::Silu(x) => {
                let d = self.nodes[x.0].value.mapv(|t| {
                    let s = sigmoid_s(t);
                    s * (F::one() + t * (F::one() - s))
                });
                self.acc(grads, *x, g * &d);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let d = y.mapv(|t| t * (F::one() - t));
                self.acc(grads, *x, g * &d);
            }
            Op::Abs(x) => {
                let d = self.nodes[x.0].value.mapv(|t| {
                    if t > F::zero() {
                        F::one()
                    } else if t < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                self.acc(grads, *x, g * &d);
            }
            Op::Square(x) => {
                let two = F::from_f64(2.0);
                let d = self.nodes[x.0].value.mapv(|t| two * t);
                self.acc(grads, *x, g * &d);
            }
            Op::Sqrt(x) => {
                // Subgradient 0 at the origin keeps exact-zero norms exact.
                let y = &self.nodes[i].value;
                let half = F::from_f64(0.5);
                let d = y.mapv(|t| {
                    if t > F::zero() {
                        half / t
                    } else {
                        F::zero()
                    }
                });
                self.acc(grads, *x, g * &d);
            }
            Op::MatMul(a, b) => {
                let gv = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                self.acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                self.acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Linear { x, w, b } => {
                let gv = as2(g);
                let xv = as2(&self.nodes[x.0].value);
                let wv = as2(&self.nodes[w.0].value);
                self.acc(grads, *x, gv.dot(&wv).into_dyn());
                self.acc(grads, *w, gv.t().dot(&xv).into_dyn());
                self.acc(grads, *b, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    &as4(&self.nodes[x.0].value),
                    &as4(&self.nodes[w.0].value),
                    &as4(g),
                    *stride,
                    *pad,
                    self.rg(*x),
                );
                if self.rg(*x) {
                    self.acc(grads, *x, dx.into_dyn());
                }
                self.acc(grads, *w, dw.into_dyn());
                self.acc(grads, *b, db.into_dyn());
            }
            Op::AvgPool2d { x, k } => {
                let gv = as4(g);
                let (n, c, oh, ow) = dims4(&gv);
                let inv = F::from_f64(1.0 / ((k * k) as f64));
                let mut dx = Array4::<F>::zeros((n, c, oh * k, ow * k));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let val = gv[[ni, ci, i, j]] * inv;
                                for di in 0..*k {
                                    for dj in 0..*k {
                                        dx[[ni, ci, i * k + di, j * k + dj]] = val;
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::UpsampleBilinear { x, out_h, out_w } => {
                let gv = as4(g);
                let xv = as4(&self.nodes[x.0].value);
                let (n, c, h, w) = dims4(&xv);
                let ri = bilinear_taps(h, *out_h);
                let ci_ = bilinear_taps(w, *out_w);
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ch in 0..c {
                        for (i, &(i0, i1, wy)) in ri.iter().enumerate() {
                            for (j, &(j0, j1, wx)) in ci_.iter().enumerate() {
                                let go = gv[[ni, ch, i, j]];
                                let fy = F::from_f64(wy);
                                let fx = F::from_f64(wx);
                                let one = F::one();
                                dx[[ni, ch, i0, j0]] =
                                    dx[[ni, ch, i0, j0]] + go * (one - fy) * (one - fx);
                                dx[[ni, ch, i0, j1]] = dx[[ni, ch, i0, j1]] + go * (one - fy) * fx;
                                dx[[ni, ch, i1, j0]] = dx[[ni, ch, i1, j0]] + go * fy * (one - fx);
                                dx[[ni, ch, i1, j1]] = dx[[ni, ch, i1, j1]] + go * fy * fx;
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let gv = as2(g);
                let xv = as4(&self.nodes[x.0].value);
                let (n, c, h, w) = dims4(&xv);
                let inv = F::from_f64(1.0 / (h * w) as f64);
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let val = gv[[ni, ci]] * inv;
                        dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(val);
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::ConcatChannels(xs) => {
                let gv = as4(g);
                let mut at = 0;
                for &xv in xs {
                    let c = self.nodes[xv.0].value.shape()[1];
                    let part = gv.slice(ndarray::s![.., at..at + c, .., ..]).to_owned();
                    self.acc(grads, xv, part.into_dyn());
                    at += c;
                }
            }
            Op::SelectRows { x, idx } => {
                let mut dx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                for (row, &src) in idx.iter().enumerate() {
                    let gi = g.index_axis(Axis(0), row);
                    let mut slot = dx.index_axis_mut(Axis(0), src);
                    slot += &gi;
                }
                self.acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                    .unwrap();
                self.acc(grads, *x, dx);
            }
            Op::Transpose2(x) => {
                let gv = as2(g);
                self.acc(grads, *x, gv.t().as_standard_layout().to_owned().into_dyn());
            }
            Op::SumAll(x) => {
                let s = *g.first().unwrap();
                let dx = ArrayD::<F>::from_elem(self.nodes[x.0].value.raw_dim(), s);
                self.acc(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let len = self.nodes[x.0].value.len();
                let s = *g.first().unwrap() * F::from_f64(1.0 / len as f64);
                let dx = ArrayD::<F>::from_elem(self.nodes[x.0].value.raw_dim(), s);
                self.acc(grads, *x, dx);
            }
            Op::AddChannelVec { x, v } => {
                self.acc(grads, *x, g.clone());
                let gv = as4(g);
                let (n, c, _, _) = dims4(&gv);
                let mut dv = Array2::<F>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        dv[[ni, ci]] = gv.slice(ndarray::s![ni, ci, .., ..]).sum();
                    }
                }
                self.acc(grads, *v, dv.into_dyn());
            }
            Op::RowNormalize(x) => {
                let gv = as2(g);
                let xv = as2(&self.nodes[x.0].value);
                let yv = as2(&self.nodes[i].value);
                let mut dx = Array2::<F>::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let norm = xv
                        .row(r)
                        .iter()
                        .fold(F::zero(), |a, &t| a + t * t)
                        .sqrt();
                    if norm.to_f64() <= ZERO_ROW_EPS {
                        continue; // zero rows pass through with zero gradient
                    }
                    let y = yv.row(r);
                    let gr = gv.row(r);
                    let dot = y
                        .iter()
                        .zip(gr.iter())
                        .fold(F::zero(), |a, (&yi, &gi)| a + yi * gi);
                    let inv = F::one() / norm;
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = (gr[c] - dot * y[c]) * inv;
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::CodingRate { x, lambda } => {
                let gs = (*g.first().unwrap()).to_f64();
                let xv = as2(&self.nodes[x.0].value).mapv(|t| t.to_f64());
                let dx = coding_rate_backward(&xv, *lambda).mapv(|t| F::from_f64(t * gs));
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::LogSumExpRows(x) => {
                let xv = as2(&self.nodes[x.0].value);
                let yv = &self.nodes[i].value;
                let mut dx = Array2::<F>::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let lse = yv[[r]];
                    let gr = g[[r]];
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = (xv[[r, c]] - lse).exp() * gr;
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::SelectEntries { x, idx } => {
                let mut dx = Array2::<F>::zeros(as2(&self.nodes[x.0].value).raw_dim());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    dx[[r, c]] = dx[[r, c]] + g[[k]];
                }
                self.acc(grads, *x, dx.into_dyn());
            }
        }
    }
}

const ZERO_ROW_EPS: f64 = 1e-12;

fn sigmoid_s<F: Scalar>(t: F) -> F {
    F::one() / (F::one() + (-t).exp())
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn dims4<F: Scalar>(a: &ndarray::ArrayView4<'_, F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

/// Tap table for 1-D bilinear interpolation with half-pixel centers.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0f = src.floor();
            let frac = src - i0f;
            let i0 = (i0f.max(0.0) as usize).min(in_len - 1);
            let i1 = (((i0f as i64) + 1).max(0) as usize).min(in_len - 1);
            (i0, i1, frac)
        })
        .collect()
}

fn im2col<F: Scalar>(
    x: &Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut col = Array2::<F>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ci * kh * kw + di * kw + dj;
                for i in 0..oh {
                    let src_i = (i * stride + di) as i64 - pad as i64;
                    if src_i < 0 || src_i >= h as i64 {
                        continue;
                    }
                    for j in 0..ow {
                        let src_j = (j * stride + dj) as i64 - pad as i64;
                        if src_j < 0 || src_j >= w as i64 {
                            continue;
                        }
                        col[[row, i * ow + j]] = x[[ci, src_i as usize, src_j as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(
    col: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut x = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ci * kh * kw + di * kw + dj;
                for i in 0..oh {
                    let src_i = (i * stride + di) as i64 - pad as i64;
                    if src_i < 0 || src_i >= h as i64 {
                        continue;
                    }
                    for j in 0..ow {
                        let src_j = (j * stride + dj) as i64 - pad as i64;
                        if src_j < 0 || src_j >= w as i64 {
                            continue;
                        }
                        let slot = &mut x[[ci, src_i as usize, src_j as usize]];
                        *slot = *slot + col[[row, i * ow + j]];
                    }
                }
            }
        }
    }
    x
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<F: Scalar>(
    x: &ndarray::ArrayView4<'_, F>,
    w: &ndarray::ArrayView4<'_, F>,
    gy: &ndarray::ArrayView4<'_, F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, c, h, wd) = dims4(x);
    let (co, ci, kh, kw) = dims4(w);
    let (_, _, oh, ow) = dims4(gy);
    let w2 = w.to_shape((co, ci * kh * kw)).unwrap().to_owned();

    let per_item: Vec<(Option<Array3<F>>, Array2<F>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let gy_n = gy
                .index_axis(Axis(0), ni)
                .to_shape((co, oh * ow))
                .unwrap()
                .to_owned();
            let col = im2col(&x.index_axis(Axis(0), ni).to_owned(), kh, kw, stride, pad);
            let dw_n = gy_n.dot(&col.t()); // [co, c*kh*kw]
            let dx_n = if need_dx {
                let dcol = w2.t().dot(&gy_n); // [c*kh*kw, oh*ow]
                Some(col2im(&dcol, c, h, wd, kh, kw, stride, pad))
            } else {
                None
            };
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = Array4::<F>::zeros((n, c, h, wd));
    let mut dw2 = Array2::<F>::zeros((co, ci * kh * kw));
    for (ni, (dx_n, dw_n)) in per_item.into_iter().enumerate() {
        if let Some(d) = dx_n {
            dx.index_axis_mut(Axis(0), ni).assign(&d);
        }
        dw2 += &dw_n;
    }
    let dw = dw2.into_shape_with_order((co, ci, kh, kw)).unwrap();
    let mut db = Array1::<F>::zeros(co);
    for ni in 0..n {
        for c_ in 0..co {
            db[c_] = db[c_] + gy.slice(ndarray::s![ni, c_, .., ..]).sum();
        }
    }
    (dx, dw, db)
}

/// Forward value of the coding rate, computed in f64 regardless of `F`.
pub fn coding_rate_forward(x: &Array2<f64>, lambda: f64) -> f64 {
    let (n, d) = (x.nrows(), x.ncols());
    let c = d as f64 / (n as f64 * lambda * lambda);
    let gram = x.t().dot(x);
    let m = Array2::<f64>::eye(d) + &(gram * c);
    let (vals, _) = crate::numerics::jacobi_eigh(&m);
    vals.iter().map(|w| w.max(1e-300).ln()).sum()
}

/// d/dX log det(I + c X^T X) = 2 c X (I + c X^T X)^{-1}
fn coding_rate_backward(x: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let c = d as f64 / (n as f64 * lambda * lambda);
    let gram = x.t().dot(x);
    let m = Array2::<f64>::eye(d) + &(gram * c);
    let (vals, vecs) = crate::numerics::jacobi_eigh(&m);
    // M^{-1} = V diag(1/w) V^T; eigenvalues are >= 1 by construction.
    let mut inv = Array2::<f64>::zeros((d, d));
    for (k, w) in vals.iter().enumerate() {
        let vk = vecs.column(k);
        let scale = 1.0 / w.max(1e-12);
        for r in 0..d {
            for cc in 0..d {
                inv[[r, cc]] += vk[r] * vk[cc] * scale;
            }
        }
    }
    x.dot(&inv) * (2.0 * c)
}
