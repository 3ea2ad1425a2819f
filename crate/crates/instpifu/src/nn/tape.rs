//! Reverse-mode automatic differentiation over a flat tape of ops.
//!
//! Each forward call appends a node holding its value plus whatever the op
//! caches for its backward pass. [`Tape::backward`] walks the nodes in
//! reverse creation order, so gradient accumulation order is fixed and the
//! whole pass is bit-deterministic. One tape per training sample keeps
//! evaluation reentrant; per-sample parameter gradients are summed by the
//! caller in sample order.

use super::ParamStore;
use crate::Scalar;
use ndarray::{concatenate, Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};

pub type NodeId = usize;

enum Op<S: Scalar> {
    /// Leaf holding data (inputs and parameter snapshots).
    Leaf,
    /// `a (n,k) × b (k,m)`.
    MatMul,
    /// `x (n,m) + b (m,)` broadcast over rows.
    AddBias,
    Add,
    Mul,
    Relu,
    Sigmoid,
    Sin,
    Cos,
    Scale(S),
    /// Concatenation along `axis`; `split` is the first parent's extent.
    Concat { axis: usize, split: usize },
    /// Parents `[x (N,Cin,H,W), w (Cout, Cin·k·k), b (Cout,)]`.
    Conv2d {
        k: usize,
        stride: usize,
        pad: usize,
        dil: usize,
        cols: Vec<Array2<S>>,
    },
    /// Parents `[x (N,C,H,W), gamma (C,), beta (C,)]`.
    GroupNorm {
        groups: usize,
        xhat: Array4<S>,
        inv_std: Array2<S>,
    },
    /// Per-location layer norm over channels; parents as in `GroupNorm`.
    /// Pointwise across space, so it preserves translation equivariance.
    ChanNorm {
        xhat: Array4<S>,
        inv_std: Array3<S>,
    },
    AvgPool2,
    UpNearest2,
    /// Global average pool `(N,C,H,W) -> (N,C)`.
    Gap,
    /// Bilinear gather from a `(C,H,W)` map at fixed continuous grid
    /// coordinates, one output row per coordinate. Taps are precomputed at
    /// construction; gradients flow to the map only.
    Gather { taps: Vec<[(usize, usize, S); 4]> },
    /// Mean squared error against a constant target; output shape `[1]`.
    MseTo { target: ArrayD<S> },
    /// Mean of all elements; output shape `[1]`.
    Mean,
    /// Shape change preserving logical element order.
    Reshape,
    /// 2-d transpose.
    Transpose2,
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<NodeId>,
    op: Op<S>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<S: Scalar> {
    node_grads: Vec<Option<ArrayD<S>>>,
    /// Indexed by parameter-store slot; `None` for untouched parameters.
    pub param_grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to the node's value, if the node
    /// influences the loss.
    pub fn of(&self, id: NodeId) -> Option<&ArrayD<S>> {
        self.node_grads[id].as_ref()
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// (node, parameter-store slot) for every parameter leaf.
    param_leaves: Vec<(NodeId, usize)>,
    n_params: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            n_params: store.len(),
        }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> S {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<S>, parents: Vec<NodeId>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, parents, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, vec![], Op::Leaf)
    }

    pub fn input2(&mut self, value: Array2<S>) -> NodeId {
        self.input(value.into_dyn())
    }

    pub fn input4(&mut self, value: Array4<S>) -> NodeId {
        self.input(value.into_dyn())
    }

    /// Snapshots a parameter as a leaf; its gradient is routed to the
    /// store slot by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<S>, idx: usize) -> NodeId {
        let id = self.push(store.value(idx).clone(), vec![], Op::Leaf);
        self.param_leaves.push((id, idx));
        id
    }

    fn a2(v: &ArrayD<S>) -> Array2<S> {
        v.view()
            .into_dimensionality()
            .expect("2-d node")
            .to_owned()
    }

    fn a4(v: &ArrayD<S>) -> Array4<S> {
        v.view()
            .into_dimensionality()
            .expect("4-d node")
            .to_owned()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = Self::a2(&self.nodes[a].value);
        let bv = Self::a2(&self.nodes[b].value);
        let out = av.dot(&bv).into_dyn();
        self.push(out, vec![a, b], Op::MatMul)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = Self::a2(&self.nodes[x].value);
        let bv = &self.nodes[b].value;
        let bv1: Array1<S> = bv.view().into_dimensionality().expect("1-d bias").to_owned();
        let out = (&xv + &bv1).into_dyn();
        self.push(out, vec![x, b], Op::AddBias)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let out = &self.nodes[a].value + &self.nodes[b].value;
        self.push(out, vec![a, b], Op::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let out = &self.nodes[a].value * &self.nodes[b].value;
        self.push(out, vec![a, b], Op::Mul)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.max(S::zero()));
        self.push(out, vec![x], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = S::one();
        let out = self.nodes[x].value.mapv(|v| one / (one + (-v).exp()));
        self.push(out, vec![x], Op::Sigmoid)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.sin());
        self.push(out, vec![x], Op::Sin)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.cos());
        self.push(out, vec![x], Op::Cos)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v * c);
        self.push(out, vec![x], Op::Scale(c))
    }

    pub fn concat(&mut self, axis: usize, a: NodeId, b: NodeId) -> NodeId {
        let split = self.nodes[a].value.shape()[axis];
        let out = concatenate(
            Axis(axis),
            &[self.nodes[a].value.view(), self.nodes[b].value.view()],
        )
        .expect("concat shapes must agree off-axis");
        self.push(out, vec![a, b], Op::Concat { axis, split })
    }

    /// 2-d convolution via im2col. `w` is `(Cout, Cin·k·k)`, `b` is `(Cout,)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        self.conv2d_dilated(x, w, b, k, stride, pad, 1)
    }

    /// Dilated 2-d convolution; a tap at kernel offset `ky,kx` reads the
    /// input `dil` cells apart. `dil = 1` is an ordinary convolution.
    pub fn conv2d_dilated(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> NodeId {
        let xv = Self::a4(&self.nodes[x].value);
        let wv = Self::a2(&self.nodes[w].value);
        let bv: Array1<S> = self.nodes[b]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d bias")
            .to_owned();
        let (n, cin, h, wd) = xv.dim();
        let cout = wv.nrows();
        let keff = dil * (k - 1) + 1;
        assert_eq!(wv.ncols(), cin * k * k, "conv weight shape");
        assert!(h + 2 * pad >= keff && wd + 2 * pad >= keff, "conv input too small");
        let ho = (h + 2 * pad - keff) / stride + 1;
        let wo = (wd + 2 * pad - keff) / stride + 1;
        let mut out = Array4::<S>::zeros((n, cout, ho, wo));
        let mut cols = Vec::with_capacity(n);
        for ni in 0..n {
            let col = im2col(&xv, ni, k, stride, pad, dil, ho, wo);
            let y = wv.dot(&col);
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[(ni, co, oy, ox)] = y[(co, oy * wo + ox)] + bv[co];
                    }
                }
            }
            cols.push(col);
        }
        self.push(
            out.into_dyn(),
            vec![x, w, b],
            Op::Conv2d { k, stride, pad, dil, cols },
        )
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let xv = Self::a4(&self.nodes[x].value);
        let gv: Array1<S> = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d gamma")
            .to_owned();
        let bv: Array1<S> = self.nodes[beta]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d beta")
            .to_owned();
        let (n, c, h, w) = xv.dim();
        assert!(groups > 0 && c % groups == 0, "channels divisible by groups");
        let cpg = c / groups;
        let m = S::from_us(cpg * h * w);
        let eps = S::from_f(1e-5);
        let mut xhat = Array4::<S>::zeros((n, c, h, w));
        let mut inv_std = Array2::<S>::zeros((n, groups));
        let mut out = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            for g in 0..groups {
                let c0 = g * cpg;
                let mut mean = S::zero();
                for ci in c0..c0 + cpg {
                    for yi in 0..h {
                        for xi in 0..w {
                            mean = mean + xv[(ni, ci, yi, xi)];
                        }
                    }
                }
                mean = mean / m;
                let mut var = S::zero();
                for ci in c0..c0 + cpg {
                    for yi in 0..h {
                        for xi in 0..w {
                            let d = xv[(ni, ci, yi, xi)] - mean;
                            var = var + d * d;
                        }
                    }
                }
                var = var / m;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[(ni, g)] = inv;
                for ci in c0..c0 + cpg {
                    for yi in 0..h {
                        for xi in 0..w {
                            let xh = (xv[(ni, ci, yi, xi)] - mean) * inv;
                            xhat[(ni, ci, yi, xi)] = xh;
                            out[(ni, ci, yi, xi)] = gv[ci] * xh + bv[ci];
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, gamma, beta],
            Op::GroupNorm {
                groups,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-location layer normalization over the channel axis with
    /// per-channel affine parameters. Unlike [`Tape::group_norm`] the
    /// statistics involve no spatial positions, so the op commutes with
    /// translation.
    pub fn chan_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = Self::a4(&self.nodes[x].value);
        let gv: Array1<S> = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d gamma")
            .to_owned();
        let bv: Array1<S> = self.nodes[beta]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d beta")
            .to_owned();
        let (n, c, h, w) = xv.dim();
        let m = S::from_us(c);
        let eps = S::from_f(1e-5);
        let mut xhat = Array4::<S>::zeros((n, c, h, w));
        let mut inv_std = Array3::<S>::zeros((n, h, w));
        let mut out = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            for y in 0..h {
                for xj in 0..w {
                    let mut mean = S::zero();
                    for ci in 0..c {
                        mean = mean + xv[(ni, ci, y, xj)];
                    }
                    mean = mean / m;
                    let mut var = S::zero();
                    for ci in 0..c {
                        let d = xv[(ni, ci, y, xj)] - mean;
                        var = var + d * d;
                    }
                    var = var / m;
                    let inv = S::one() / (var + eps).sqrt();
                    inv_std[(ni, y, xj)] = inv;
                    for ci in 0..c {
                        let xh = (xv[(ni, ci, y, xj)] - mean) * inv;
                        xhat[(ni, ci, y, xj)] = xh;
                        out[(ni, ci, y, xj)] = gv[ci] * xh + bv[ci];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, gamma, beta],
            Op::ChanNorm { xhat, inv_std },
        )
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = Self::a4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
        let q = S::from_f(0.25);
        let mut out = Array4::<S>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let s = xv[(ni, ci, 2 * oy, 2 * ox)]
                            + xv[(ni, ci, 2 * oy, 2 * ox + 1)]
                            + xv[(ni, ci, 2 * oy + 1, 2 * ox)]
                            + xv[(ni, ci, 2 * oy + 1, 2 * ox + 1)];
                        out[(ni, ci, oy, ox)] = s * q;
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x], Op::AvgPool2)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn up_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = Self::a4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<S>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xj in 0..2 * w {
                        out[(ni, ci, y, xj)] = xv[(ni, ci, y / 2, xj / 2)];
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x], Op::UpNearest2)
    }

    /// Global average pooling `(N,C,H,W) -> (N,C)`.
    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let xv = Self::a4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let inv = S::one() / S::from_us(h * w);
        let mut out = Array2::<S>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = S::zero();
                for y in 0..h {
                    for xj in 0..w {
                        s = s + xv[(ni, ci, y, xj)];
                    }
                }
                out[(ni, ci)] = s * inv;
            }
        }
        self.push(out.into_dyn(), vec![x], Op::Gap)
    }

    /// Bilinear gather from a `(C,H,W)` map at continuous feature-grid
    /// coordinates `(u, v)` (u along width). Coordinates clamp to the
    /// border, matching the declared sampling policy. Output is `(n, C)`.
    pub fn gather(&mut self, map: NodeId, coords: &[[f64; 2]]) -> NodeId {
        let shape = self.nodes[map].value.shape().to_vec();
        assert_eq!(shape.len(), 3, "gather expects a (C,H,W) map");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mv = self.nodes[map].value.view();
        let mut taps = Vec::with_capacity(coords.len());
        let mut out = Array2::<S>::zeros((coords.len(), c));
        for (i, &[u, v]) in coords.iter().enumerate() {
            let uc = u.clamp(0.0, (w - 1) as f64);
            let vc = v.clamp(0.0, (h - 1) as f64);
            let x0 = uc.floor() as usize;
            let y0 = vc.floor() as usize;
            let fx = uc - x0 as f64;
            let fy = vc - y0 as f64;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let tap = [
                (y0, x0, S::from_f((1.0 - fy) * (1.0 - fx))),
                (y0, x1, S::from_f((1.0 - fy) * fx)),
                (y1, x0, S::from_f(fy * (1.0 - fx))),
                (y1, x1, S::from_f(fy * fx)),
            ];
            for ci in 0..c {
                let mut acc = S::zero();
                for &(ty, tx, tw) in &tap {
                    acc = acc + mv[IxDyn(&[ci, ty, tx])] * tw;
                }
                out[(i, ci)] = acc;
            }
            taps.push(tap);
        }
        self.push(out.into_dyn(), vec![map], Op::Gather { taps })
    }

    /// Mean squared error against a constant target, shape `[1]`.
    pub fn mse_to(&mut self, x: NodeId, target: ArrayD<S>) -> NodeId {
        assert_eq!(self.nodes[x].value.shape(), target.shape(), "mse shapes");
        let n = S::from_us(target.len());
        let mut s = S::zero();
        for (a, b) in self.nodes[x].value.iter().zip(target.iter()) {
            let d = *a - *b;
            s = s + d * d;
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), s / n);
        self.push(out, vec![x], Op::MseTo { target })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = S::from_us(self.nodes[x].value.len());
        let s: S = self.nodes[x].value.iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[1]), s / n);
        self.push(out, vec![x], Op::Mean)
    }

    /// Shape change preserving logical element order.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[x].value;
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape size");
        let out = ArrayD::from_shape_vec(IxDyn(shape), v.iter().copied().collect())
            .expect("sizes checked");
        self.push(out, vec![x], Op::Reshape)
    }

    /// 2-d transpose.
    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let xv = Self::a2(&self.nodes[x].value);
        self.push(
            xv.t().as_standard_layout().to_owned().into_dyn(),
            vec![x],
            Op::Transpose2,
        )
    }

    /// Reverse pass from a scalar loss node. Gradient accumulation follows
    /// reverse node order, so results are bit-deterministic.
    pub fn backward(&self, loss: NodeId) -> Gradients<S> {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(IxDyn(&[1]), S::one()));
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut param_grads: Vec<Option<ArrayD<S>>> = vec![None; self.n_params];
        for &(node, slot) in &self.param_leaves {
            if let Some(g) = &grads[node] {
                match &mut param_grads[slot] {
                    Some(acc) => *acc = &*acc + g,
                    entry @ None => *entry = Some(g.clone()),
                }
            }
        }
        Gradients {
            node_grads: grads,
            param_grads,
        }
    }

    fn accumulate(grads: &mut [Option<ArrayD<S>>], id: NodeId, delta: ArrayD<S>) {
        match &mut grads[id] {
            Some(g) => *g = &*g + &delta,
            entry @ None => *entry = Some(delta),
        }
    }

    fn backprop_node(&self, id: NodeId, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let node = &self.nodes[id];
        let p = &node.parents;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let gv = Self::a2(g);
                let av = Self::a2(&self.nodes[p[0]].value);
                let bv = Self::a2(&self.nodes[p[1]].value);
                Self::accumulate(grads, p[0], gv.dot(&bv.t()).into_dyn());
                Self::accumulate(grads, p[1], av.t().dot(&gv).into_dyn());
            }
            Op::AddBias => {
                let gv = Self::a2(g);
                let db = gv.sum_axis(Axis(0));
                Self::accumulate(grads, p[0], gv.into_dyn());
                Self::accumulate(grads, p[1], db.into_dyn());
            }
            Op::Add => {
                Self::accumulate(grads, p[0], g.clone());
                Self::accumulate(grads, p[1], g.clone());
            }
            Op::Mul => {
                let da = g * &self.nodes[p[1]].value;
                let db = g * &self.nodes[p[0]].value;
                Self::accumulate(grads, p[0], da);
                Self::accumulate(grads, p[1], db);
            }
            Op::Relu => {
                let x = &self.nodes[p[0]].value;
                let mut dx = g.clone();
                dx.zip_mut_with(x, |d, &v| {
                    if v <= S::zero() {
                        *d = S::zero();
                    }
                });
                Self::accumulate(grads, p[0], dx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let one = S::one();
                let dx = g * &y.mapv(|s| s * (one - s));
                Self::accumulate(grads, p[0], dx);
            }
            Op::Sin => {
                let x = &self.nodes[p[0]].value;
                let dx = g * &x.mapv(|v| v.cos());
                Self::accumulate(grads, p[0], dx);
            }
            Op::Cos => {
                let x = &self.nodes[p[0]].value;
                let dx = g * &x.mapv(|v| -v.sin());
                Self::accumulate(grads, p[0], dx);
            }
            Op::Scale(c) => {
                Self::accumulate(grads, p[0], g.mapv(|v| v * *c));
            }
            Op::Concat { axis, split } => {
                let da = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(0..*split))
                    .to_owned();
                let db = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(*split..))
                    .to_owned();
                Self::accumulate(grads, p[0], da);
                Self::accumulate(grads, p[1], db);
            }
            Op::Conv2d {
                k,
                stride,
                pad,
                dil,
                cols,
            } => {
                let gv = Self::a4(g);
                let xv = Self::a4(&self.nodes[p[0]].value);
                let wv = Self::a2(&self.nodes[p[1]].value);
                let (n, cin, h, wd) = xv.dim();
                let (_, cout, ho, wo) = gv.dim();
                let mut dw = Array2::<S>::zeros(wv.raw_dim());
                let mut db = Array1::<S>::zeros(cout);
                let mut dx = Array4::<S>::zeros((n, cin, h, wd));
                for ni in 0..n {
                    let mut gmat = Array2::<S>::zeros((cout, ho * wo));
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = gv[(ni, co, oy, ox)];
                                gmat[(co, oy * wo + ox)] = v;
                                db[co] = db[co] + v;
                            }
                        }
                    }
                    dw = dw + gmat.dot(&cols[ni].t());
                    let dcol = wv.t().dot(&gmat);
                    col2im_add(&dcol, &mut dx, ni, *k, *stride, *pad, *dil, ho, wo);
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
                Self::accumulate(grads, p[1], dw.into_dyn());
                Self::accumulate(grads, p[2], db.into_dyn());
            }
            Op::GroupNorm {
                groups,
                xhat,
                inv_std,
            } => {
                let gv = Self::a4(g);
                let gamma: Array1<S> = self.nodes[p[1]]
                    .value
                    .view()
                    .into_dimensionality()
                    .expect("1-d gamma")
                    .to_owned();
                let (n, c, h, w) = gv.dim();
                let cpg = c / groups;
                let m = S::from_us(cpg * h * w);
                let mut dx = Array4::<S>::zeros((n, c, h, w));
                let mut dgamma = Array1::<S>::zeros(c);
                let mut dbeta = Array1::<S>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xj in 0..w {
                                let go = gv[(ni, ci, y, xj)];
                                dgamma[ci] = dgamma[ci] + go * xhat[(ni, ci, y, xj)];
                                dbeta[ci] = dbeta[ci] + go;
                            }
                        }
                    }
                    for gi in 0..*groups {
                        let c0 = gi * cpg;
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for ci in c0..c0 + cpg {
                            for y in 0..h {
                                for xj in 0..w {
                                    let dxh = gv[(ni, ci, y, xj)] * gamma[ci];
                                    s1 = s1 + dxh;
                                    s2 = s2 + dxh * xhat[(ni, ci, y, xj)];
                                }
                            }
                        }
                        let inv = inv_std[(ni, gi)];
                        for ci in c0..c0 + cpg {
                            for y in 0..h {
                                for xj in 0..w {
                                    let dxh = gv[(ni, ci, y, xj)] * gamma[ci];
                                    dx[(ni, ci, y, xj)] = inv
                                        * (dxh - s1 / m - xhat[(ni, ci, y, xj)] * s2 / m);
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
                Self::accumulate(grads, p[1], dgamma.into_dyn());
                Self::accumulate(grads, p[2], dbeta.into_dyn());
            }
            Op::ChanNorm { xhat, inv_std } => {
                let gv = Self::a4(g);
                let gamma: Array1<S> = self.nodes[p[1]]
                    .value
                    .view()
                    .into_dimensionality()
                    .expect("1-d gamma")
                    .to_owned();
                let (n, c, h, w) = gv.dim();
                let m = S::from_us(c);
                let mut dx = Array4::<S>::zeros((n, c, h, w));
                let mut dgamma = Array1::<S>::zeros(c);
                let mut dbeta = Array1::<S>::zeros(c);
                for ni in 0..n {
                    for y in 0..h {
                        for xj in 0..w {
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for ci in 0..c {
                                let go = gv[(ni, ci, y, xj)];
                                let xh = xhat[(ni, ci, y, xj)];
                                dgamma[ci] = dgamma[ci] + go * xh;
                                dbeta[ci] = dbeta[ci] + go;
                                let dxh = go * gamma[ci];
                                s1 = s1 + dxh;
                                s2 = s2 + dxh * xh;
                            }
                            let inv = inv_std[(ni, y, xj)];
                            for ci in 0..c {
                                let dxh = gv[(ni, ci, y, xj)] * gamma[ci];
                                dx[(ni, ci, y, xj)] = inv
                                    * (dxh - s1 / m - xhat[(ni, ci, y, xj)] * s2 / m);
                            }
                        }
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
                Self::accumulate(grads, p[1], dgamma.into_dyn());
                Self::accumulate(grads, p[2], dbeta.into_dyn());
            }
            Op::AvgPool2 => {
                let gv = Self::a4(g);
                let (n, c, ho, wo) = gv.dim();
                let q = S::from_f(0.25);
                let mut dx = Array4::<S>::zeros((n, c, 2 * ho, 2 * wo));
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = gv[(ni, ci, oy, ox)] * q;
                                dx[(ni, ci, 2 * oy, 2 * ox)] = v;
                                dx[(ni, ci, 2 * oy, 2 * ox + 1)] = v;
                                dx[(ni, ci, 2 * oy + 1, 2 * ox)] = v;
                                dx[(ni, ci, 2 * oy + 1, 2 * ox + 1)] = v;
                            }
                        }
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
            }
            Op::UpNearest2 => {
                let gv = Self::a4(g);
                let (n, c, ho, wo) = gv.dim();
                let mut dx = Array4::<S>::zeros((n, c, ho / 2, wo / 2));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..ho {
                            for xj in 0..wo {
                                dx[(ni, ci, y / 2, xj / 2)] =
                                    dx[(ni, ci, y / 2, xj / 2)] + gv[(ni, ci, y, xj)];
                            }
                        }
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
            }
            Op::Gap => {
                let gv = Self::a2(g);
                let shape = self.nodes[p[0]].value.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let inv = S::one() / S::from_us(h * w);
                let mut dx = Array4::<S>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = gv[(ni, ci)] * inv;
                        for y in 0..h {
                            for xj in 0..w {
                                dx[(ni, ci, y, xj)] = v;
                            }
                        }
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
            }
            Op::Gather { taps } => {
                let gv = Self::a2(g);
                let shape = self.nodes[p[0]].value.shape().to_vec();
                let mut dmap = ArrayD::<S>::zeros(IxDyn(&shape));
                let c = shape[0];
                for (i, tap) in taps.iter().enumerate() {
                    for ci in 0..c {
                        let go = gv[(i, ci)];
                        for &(ty, tx, tw) in tap {
                            let slot = &mut dmap[IxDyn(&[ci, ty, tx])];
                            *slot = *slot + go * tw;
                        }
                    }
                }
                Self::accumulate(grads, p[0], dmap);
            }
            Op::MseTo { target } => {
                let go = g.iter().copied().next().expect("scalar grad");
                let x = &self.nodes[p[0]].value;
                let scale = S::from_f(2.0) / S::from_us(target.len()) * go;
                let mut dx = x - target;
                dx.mapv_inplace(|v| v * scale);
                Self::accumulate(grads, p[0], dx);
            }
            Op::Mean => {
                let go = g.iter().copied().next().expect("scalar grad");
                let x = &self.nodes[p[0]].value;
                let v = go / S::from_us(x.len());
                Self::accumulate(grads, p[0], ArrayD::from_elem(x.raw_dim(), v));
            }
            Op::Reshape => {
                let src = self.nodes[p[0]].value.raw_dim();
                let gx = ArrayD::from_shape_vec(src, g.iter().copied().collect())
                    .expect("matching sizes");
                Self::accumulate(grads, p[0], gx);
            }
            Op::Transpose2 => {
                let gv = Self::a2(g);
                Self::accumulate(
                    grads,
                    p[0],
                    gv.t().as_standard_layout().to_owned().into_dyn(),
                );
            }
        }
    }
}

fn im2col<S: Scalar>(
    x: &Array4<S>,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
) -> Array2<S> {
    let (_, cin, h, w) = x.dim();
    let mut col = Array2::<S>::zeros((cin * k * k, ho * wo));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[(row, oy * wo + ox)] = x[(n, ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<S: Scalar>(
    dcol: &Array2<S>,
    dx: &mut Array4<S>,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
) {
    let (_, cin, h, w) = dx.dim();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let p = (n, ci, iy as usize, ix as usize);
                        dx[p] = dx[p] + dcol[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
}

/// Convolution forward without recording a tape. Shares [`im2col`] with the
/// recorded op, so eval and training paths compute identical values while
/// this one drops the unfolded columns immediately (important for large
/// images where retaining them per layer would dominate memory).
pub fn conv2d_eval<S: Scalar>(
    x: &Array4<S>,
    w: &Array2<S>,
    b: &Array1<S>,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Array4<S> {
    let (n, cin, h, wd) = x.dim();
    let cout = w.nrows();
    let keff = dil * (k - 1) + 1;
    assert_eq!(w.ncols(), cin * k * k, "conv weight shape");
    assert!(h + 2 * pad >= keff && wd + 2 * pad >= keff, "conv input too small");
    let ho = (h + 2 * pad - keff) / stride + 1;
    let wo = (wd + 2 * pad - keff) / stride + 1;
    let mut out = Array4::<S>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        let col = im2col(x, ni, k, stride, pad, dil, ho, wo);
        let y = w.dot(&col);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(ni, co, oy, ox)] = y[(co, oy * wo + ox)] + b[co];
                }
            }
        }
    }
    out
}

/// Per-location channel normalization without recording a tape; identical
/// math to [`Tape::chan_norm`].
pub fn chan_norm_eval<S: Scalar>(
    x: &Array4<S>,
    gamma: &Array1<S>,
    beta: &Array1<S>,
) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let m = S::from_us(c);
    let eps = S::from_f(1e-5);
    let mut out = Array4::<S>::zeros((n, c, h, w));
    for ni in 0..n {
        for y in 0..h {
            for xj in 0..w {
                let mut mean = S::zero();
                for ci in 0..c {
                    mean = mean + x[(ni, ci, y, xj)];
                }
                mean = mean / m;
                let mut var = S::zero();
                for ci in 0..c {
                    let d = x[(ni, ci, y, xj)] - mean;
                    var = var + d * d;
                }
                var = var / m;
                let inv = S::one() / (var + eps).sqrt();
                for ci in 0..c {
                    out[(ni, ci, y, xj)] = gamma[ci] * (x[(ni, ci, y, xj)] - mean) * inv + beta[ci];
                }
            }
        }
    }
    out
}
