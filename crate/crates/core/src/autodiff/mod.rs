//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Each forward operation appends a [`Node`] holding its computed value and
//! the identity of its parents; [`Tape::backward`] walks the arena in reverse
//! and accumulates gradients. The op set is exactly what the model needs:
//! dense/conv/transposed-conv layers, SELU + inverted dropout, channel
//! concatenation and broadcast, the reparameterized Gaussian and
//! Gumbel-Softmax samplers, and fused likelihood/divergence reductions whose
//! logit-space forms avoid sigmoid/softmax saturation.
//!
//! Tapes are single-threaded by design; parallel training builds one tape
//! per record and reduces gradients in a fixed order.

pub mod kernels;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};
use rand::Rng;

use crate::distributions::UNIFORM_FLOOR;
use kernels::{
    avgpool2_ceil_backward, avgpool2_ceil_forward, channel_sums, conv3d_backward_input,
    conv3d_backward_weights, conv3d_forward, convt3d_backward_input,
    convt3d_backward_weights, convt3d_forward, selu, selu_grad, sigmoid,
    softplus, upsample_nearest_backward, upsample_nearest_forward,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Sum(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvT3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    AvgPool2Ceil(NodeId),
    UpsampleNearest(NodeId),
    Selu(NodeId),
    Dropout {
        x: NodeId,
        mask: ArrayD<f64>,
    },
    ConcatCh(NodeId, NodeId),
    BroadcastCh {
        v: NodeId,
    },
    Reshape(NodeId),
    SliceVec {
        x: NodeId,
        start: usize,
    },
    GaussKl {
        mu: NodeId,
        logvar: NodeId,
    },
    Rsample {
        mu: NodeId,
        logvar: NodeId,
        noise: Vec<f64>,
    },
    BernoulliLogLik {
        logits: NodeId,
        target: ArrayD<f64>,
    },
    CategoricalLogLik {
        logits: NodeId,
        target: ArrayD<f64>,
    },
    CatLogProb {
        logits: NodeId,
        index: usize,
    },
    EntropyLogits(NodeId),
    SoftmaxVec(NodeId),
    PickVec {
        x: NodeId,
        index: usize,
    },
    GumbelSoftmax {
        logits: NodeId,
        tau: f64,
    },
    EmbedRow {
        table: NodeId,
        index: usize,
    },
    EmbedSoft {
        table: NodeId,
        weights: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: ArrayD<f64>,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to the tape's leaf nodes.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient accumulated at `id`, if the node is a leaf on the
    /// differentiated path.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Remove and return the gradient at `id`.
    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.grads[id.0].take()
    }
}

/// Arena of forward values plus enough structure to run reverse mode.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

pub(crate) fn view4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4-d value")
}

pub(crate) fn view2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

pub(crate) fn view1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d value")
}

fn spatial(a: &ArrayD<f64>) -> [usize; 3] {
    let s = a.shape();
    debug_assert_eq!(s.len(), 4);
    [s[1], s[2], s[3]]
}

/// Reshape a conv weight (Co, Ci, k, k, k) to its (Co, Ci·k³) matrix; for
/// transposed convs the stored orientation is (Cin, Cout, k, k, k) and the
/// same flattening yields the adjoint-conv matrix.
pub(crate) fn weight_matrix(w: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    let s = w.shape();
    debug_assert_eq!(s.len(), 5);
    w.view()
        .into_shape_with_order((s[0], s[1] * s[2] * s[3] * s[4]))
        .expect("contiguous weight")
}

/// Transform uniform draws into Gumbel noise −log(−log u), with u clamped to
/// [`UNIFORM_FLOOR`, 1 − `UNIFORM_FLOOR`].
pub fn gumbels_from_uniform(u: &[f64]) -> Vec<f64> {
    u.iter()
        .map(|&u| {
            let u = u.clamp(UNIFORM_FLOOR, 1.0 - UNIFORM_FLOOR);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Inverted-dropout mask: entries are 1/(1−rate) with probability 1−rate,
/// otherwise 0, so the activation scale is unchanged in expectation.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], rate: f64) -> ArrayD<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    let keep = 1.0 - rate;
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

impl Tape {
    /// Empty tape.
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing has been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Forward value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert!(v.ndim() == 0);
        *v.first().expect("scalar node")
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Scalar constant node.
    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(scalar_array(v))
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), value, self.ng(a) || self.ng(b))
    }

    /// Add a constant scalar to every element.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        self.push(Op::AddConst(a), value, self.ng(a))
    }

    /// Multiply every element by a constant scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(Op::Scale(a, c), value, self.ng(a))
    }

    /// Product of two scalar nodes.
    pub fn mul_scalar(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = scalar_array(self.scalar(a) * self.scalar(b));
        self.push(Op::MulScalar(a, b), value, self.ng(a) || self.ng(b))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = scalar_array(self.nodes[a.0].value.sum());
        self.push(Op::Sum(a), value, self.ng(a))
    }

    /// Dense layer y = W·x + b for 1-D `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = view1(self.value(x));
        let wv = view2(self.value(w));
        let bv = view1(self.value(b));
        assert_eq!(wv.ncols(), xv.len(), "linear weight/input mismatch");
        assert_eq!(wv.nrows(), bv.len(), "linear weight/bias mismatch");
        let value = (wv.dot(&xv) + bv).into_dyn();
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::Linear { x, w, b }, value, needs)
    }

    /// 3D convolution with cubic kernel; weights (Co, Ci, k, k, k).
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 5);
        let k = ws[2];
        assert_eq!(self.value(x).shape()[0], ws[1], "conv input channels");
        let value = conv3d_forward(
            view4(self.value(x)),
            weight_matrix(self.value(w)),
            Some(view1(self.value(b))),
            k,
            stride,
            pad,
        )
        .into_dyn();
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::Conv3d { x, w, b, stride, pad }, value, needs)
    }

    /// Transposed 3D convolution to the requested spatial shape; weights
    /// (Cin, Cout, k, k, k).
    pub fn convt3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out_sp: [usize; 3],
    ) -> NodeId {
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 5);
        let k = ws[2];
        assert_eq!(self.value(x).shape()[0], ws[0], "transposed-conv input channels");
        let value = convt3d_forward(
            view4(self.value(x)),
            weight_matrix(self.value(w)),
            Some(view1(self.value(b))),
            k,
            stride,
            pad,
            out_sp,
        )
        .into_dyn();
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::ConvT3d { x, w, b, stride, pad }, value, needs)
    }

    /// Ceil-mode average pooling, kernel 2 stride 2.
    pub fn avgpool2_ceil(&mut self, x: NodeId) -> NodeId {
        let value = avgpool2_ceil_forward(view4(self.value(x))).into_dyn();
        self.push(Op::AvgPool2Ceil(x), value, self.ng(x))
    }

    /// Nearest-neighbor upsampling to `out_sp`.
    pub fn upsample_nearest(&mut self, x: NodeId, out_sp: [usize; 3]) -> NodeId {
        let value = upsample_nearest_forward(view4(self.value(x)), out_sp).into_dyn();
        self.push(Op::UpsampleNearest(x), value, self.ng(x))
    }

    /// Elementwise SELU.
    pub fn selu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(selu);
        self.push(Op::Selu(x), value, self.ng(x))
    }

    /// Elementwise multiplication by a fixed dropout mask.
    pub fn dropout(&mut self, x: NodeId, mask: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape());
        let value = &self.nodes[x.0].value * &mask;
        self.push(Op::Dropout { x, mask }, value, self.ng(x))
    }

    /// Concatenate two volumes along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view();
        let bv = self.value(b).view();
        assert_eq!(av.shape()[1..], bv.shape()[1..], "spatial mismatch in concat");
        let value = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat");
        self.push(Op::ConcatCh(a, b), value, self.ng(a) || self.ng(b))
    }

    /// Broadcast a length-C vector to a (C, d1, d2, d3) volume, constant per
    /// channel.
    pub fn broadcast_ch(&mut self, v: NodeId, sp: [usize; 3]) -> NodeId {
        let vec = view1(self.value(v)).to_owned();
        let value = ArrayD::from_shape_fn(
            IxDyn(&[vec.len(), sp[0], sp[1], sp[2]]),
            |ix| vec[ix[0]],
        );
        self.push(Op::BroadcastCh { v }, value, self.ng(v))
    }

    /// Reinterpret the element buffer with a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count")
            .to_owned();
        self.push(Op::Reshape(x), value, self.ng(x))
    }

    /// Contiguous slice of a 1-D node.
    pub fn slice_vec(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = view1(self.value(x));
        assert!(start + len <= xv.len());
        let value = xv.slice(ndarray::s![start..start + len]).to_owned().into_dyn();
        self.push(Op::SliceVec { x, start }, value, self.ng(x))
    }

    /// Closed-form KL(N(μ, diag e^logvar) ‖ N(0, I)) as a scalar node.
    pub fn gauss_kl(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let m = view1(self.value(mu));
        let lv = view1(self.value(logvar));
        assert_eq!(m.len(), lv.len());
        let kl: f64 = m
            .iter()
            .zip(lv.iter())
            .map(|(&mu, &lv)| 0.5 * (mu * mu + lv.exp() - 1.0 - lv))
            .sum();
        let needs = self.ng(mu) || self.ng(logvar);
        self.push(Op::GaussKl { mu, logvar }, scalar_array(kl), needs)
    }

    /// Reparameterized Gaussian draw z = μ + e^{logvar/2} ⊙ ε.
    pub fn rsample(&mut self, mu: NodeId, logvar: NodeId, noise: Vec<f64>) -> NodeId {
        let m = view1(self.value(mu));
        let lv = view1(self.value(logvar));
        assert_eq!(m.len(), noise.len());
        let z: Array1<f64> = m
            .iter()
            .zip(lv.iter())
            .zip(&noise)
            .map(|((&mu, &lv), &e)| mu + (0.5 * lv).exp() * e)
            .collect();
        let needs = self.ng(mu) || self.ng(logvar);
        self.push(Op::Rsample { mu, logvar, noise }, z.into_dyn(), needs)
    }

    /// Σ t·log σ(l) + (1−t)·log(1−σ(l)) over all elements, computed in logit
    /// space (no saturation), as a scalar node.
    pub fn bernoulli_log_lik(&mut self, logits: NodeId, target: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(logits).shape(), target.shape());
        let mut total = 0.0;
        ndarray::Zip::from(&self.nodes[logits.0].value)
            .and(&target)
            .for_each(|&l, &t| {
                total += t * (-softplus(-l)) + (1.0 - t) * (-softplus(l));
            });
        let needs = self.ng(logits);
        self.push(Op::BernoulliLogLik { logits, target }, scalar_array(total), needs)
    }

    /// Per-voxel categorical log-likelihood Σ_vox log softmax(l[:, vox])·t,
    /// summed over voxels, as a scalar node. `target` is one-hot per voxel
    /// along the channel axis.
    pub fn categorical_log_lik(&mut self, logits: NodeId, target: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(logits).shape(), target.shape());
        let l = view4(self.value(logits));
        let t = view4(&target);
        let (c, d1, d2, d3) = l.dim();
        let mut total = 0.0;
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                for i3 in 0..d3 {
                    let mut m = f64::NEG_INFINITY;
                    for ch in 0..c {
                        m = m.max(l[(ch, i1, i2, i3)]);
                    }
                    let lse = m + (0..c)
                        .map(|ch| (l[(ch, i1, i2, i3)] - m).exp())
                        .sum::<f64>()
                        .ln();
                    for ch in 0..c {
                        total += t[(ch, i1, i2, i3)] * (l[(ch, i1, i2, i3)] - lse);
                    }
                }
            }
        }
        let needs = self.ng(logits);
        self.push(Op::CategoricalLogLik { logits, target }, scalar_array(total), needs)
    }

    /// log softmax(logits)[index] as a scalar node.
    pub fn cat_log_prob(&mut self, logits: NodeId, index: usize) -> NodeId {
        let l = view1(self.value(logits));
        assert!(index < l.len());
        let lse = crate::distributions::log_sum_exp(l.as_slice().expect("contiguous"));
        let value = scalar_array(l[index] - lse);
        let needs = self.ng(logits);
        self.push(Op::CatLogProb { logits, index }, value, needs)
    }

    /// Entropy of softmax(logits) as a scalar node.
    pub fn entropy_logits(&mut self, logits: NodeId) -> NodeId {
        let l = view1(self.value(logits));
        let p = crate::distributions::softmax(l.as_slice().expect("contiguous"));
        let h = crate::distributions::entropy_of_probabilities(&p);
        let needs = self.ng(logits);
        self.push(Op::EntropyLogits(logits), scalar_array(h), needs)
    }

    /// softmax(logits) as a 1-D node.
    pub fn softmax_vec(&mut self, logits: NodeId) -> NodeId {
        let l = view1(self.value(logits));
        let p = crate::distributions::softmax(l.as_slice().expect("contiguous"));
        let needs = self.ng(logits);
        self.push(Op::SoftmaxVec(logits), Array1::from(p).into_dyn(), needs)
    }

    /// Single element of a 1-D node, as a scalar node.
    pub fn pick_vec(&mut self, x: NodeId, index: usize) -> NodeId {
        let xv = view1(self.value(x));
        assert!(index < xv.len());
        let value = scalar_array(xv[index]);
        self.push(Op::PickVec { x, index }, value, self.ng(x))
    }

    /// Gumbel-Softmax relaxation softmax((logits + g)/τ) with fixed Gumbel
    /// noise (see [`gumbels_from_uniform`]).
    pub fn gumbel_softmax(&mut self, logits: NodeId, tau: f64, gumbels: Vec<f64>) -> NodeId {
        assert!(tau > 0.0, "temperature must be positive");
        let l = view1(self.value(logits));
        assert_eq!(l.len(), gumbels.len());
        let scaled: Vec<f64> = l.iter().zip(&gumbels).map(|(&l, &g)| (l + g) / tau).collect();
        let p = crate::distributions::softmax(&scaled);
        let needs = self.ng(logits);
        self.push(
            Op::GumbelSoftmax { logits, tau },
            Array1::from(p).into_dyn(),
            needs,
        )
    }

    /// Row `index` of a (M, E) table node.
    pub fn embed_row(&mut self, table: NodeId, index: usize) -> NodeId {
        let t = view2(self.value(table));
        assert!(index < t.nrows());
        let value = t.row(index).to_owned().into_dyn();
        self.push(Op::EmbedRow { table, index }, value, self.ng(table))
    }

    /// Convex combination of table rows: weightsᵀ·table for 1-D weights.
    pub fn embed_soft(&mut self, table: NodeId, weights: NodeId) -> NodeId {
        let t = view2(self.value(table));
        let w = view1(self.value(weights));
        assert_eq!(t.nrows(), w.len());
        let value = t.t().dot(&w).into_dyn();
        let needs = self.ng(table) || self.ng(weights);
        self.push(Op::EmbedSoft { table, weights }, value, needs)
    }

    /// Reverse pass from a scalar node; returns gradients for leaf nodes.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.value(output).ndim(), 0, "backward needs a scalar output");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(scalar_array(1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.dispatch(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn dispatch(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::Scale(a, c) => self.acc(grads, *a, g.mapv(|v| v * c)),
            Op::MulScalar(a, b) => {
                let av = self.scalar(*a);
                let bv = self.scalar(*b);
                let gv = *g.first().expect("scalar grad");
                self.acc(grads, *a, scalar_array(gv * bv));
                self.acc(grads, *b, scalar_array(gv * av));
            }
            Op::Sum(a) => {
                let gv = *g.first().expect("scalar grad");
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, ArrayD::from_elem(IxDyn(&shape), gv));
            }
            Op::Linear { x, w, b } => {
                let gy = view1(g);
                let wv = view2(self.value(*w));
                let xv = view1(self.value(*x));
                if self.ng(*x) {
                    self.acc(grads, *x, wv.t().dot(&gy).into_dyn());
                }
                if self.ng(*w) {
                    let gw = Array2::from_shape_fn((wv.nrows(), wv.ncols()), |(r, c)| {
                        gy[r] * xv[c]
                    });
                    self.acc(grads, *w, gw.into_dyn());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gy.to_owned().into_dyn());
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let gy = view4(g);
                let k = self.value(*w).shape()[2];
                if self.ng(*x) {
                    let xs = self.value(*x).shape();
                    let gx = conv3d_backward_input(
                        gy,
                        weight_matrix(self.value(*w)),
                        k,
                        *stride,
                        *pad,
                        (xs[0], [xs[1], xs[2], xs[3]]),
                    );
                    self.acc(grads, *x, gx.into_dyn());
                }
                if self.ng(*w) {
                    let gw = conv3d_backward_weights(view4(self.value(*x)), gy, k, *stride, *pad);
                    let ws = self.value(*w).shape().to_vec();
                    let gw = gw.into_shape_with_order(IxDyn(&ws)).expect("weight grad shape");
                    self.acc(grads, *w, gw);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, channel_sums(gy).into_dyn());
                }
            }
            Op::ConvT3d { x, w, b, stride, pad } => {
                let gy = view4(g);
                let k = self.value(*w).shape()[2];
                if self.ng(*x) {
                    let gx = convt3d_backward_input(
                        gy,
                        weight_matrix(self.value(*w)),
                        k,
                        *stride,
                        *pad,
                    );
                    self.acc(grads, *x, gx.into_dyn());
                }
                if self.ng(*w) {
                    let gw =
                        convt3d_backward_weights(view4(self.value(*x)), gy, k, *stride, *pad);
                    let ws = self.value(*w).shape().to_vec();
                    let gw = gw.into_shape_with_order(IxDyn(&ws)).expect("weight grad shape");
                    self.acc(grads, *w, gw);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, channel_sums(gy).into_dyn());
                }
            }
            Op::AvgPool2Ceil(x) => {
                let gx = avgpool2_ceil_backward(view4(g), spatial(self.value(*x)));
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::UpsampleNearest(x) => {
                let gx = upsample_nearest_backward(view4(g), spatial(self.value(*x)));
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::Selu(x) => {
                let mut gx = self.nodes[x.0].value.mapv(selu_grad);
                gx *= g;
                self.acc(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, g * mask);
            }
            Op::ConcatCh(a, b) => {
                let ca = self.value(*a).shape()[0];
                let ga = g.slice_axis(Axis(0), Slice::from(..ca)).to_owned();
                let gb = g.slice_axis(Axis(0), Slice::from(ca..)).to_owned();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::BroadcastCh { v } => {
                self.acc(grads, *v, channel_sums(view4(g)).into_dyn());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let gx = g
                    .view()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("grad reshape")
                    .to_owned();
                self.acc(grads, *x, gx);
            }
            Op::SliceVec { x, start } => {
                let mut gx = ArrayD::zeros(IxDyn(self.value(*x).shape()));
                {
                    let gs = view1(g);
                    let mut gx1 = gx.view_mut().into_dimensionality::<Ix1>().unwrap();
                    for (j, &v) in gs.iter().enumerate() {
                        gx1[start + j] = v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GaussKl { mu, logvar } => {
                let s = *g.first().expect("scalar grad");
                let m = view1(self.value(*mu));
                let lv = view1(self.value(*logvar));
                if self.ng(*mu) {
                    self.acc(grads, *mu, m.mapv(|mu| mu * s).into_dyn());
                }
                if self.ng(*logvar) {
                    self.acc(
                        grads,
                        *logvar,
                        lv.mapv(|lv| 0.5 * (lv.exp() - 1.0) * s).into_dyn(),
                    );
                }
            }
            Op::Rsample { mu, logvar, noise } => {
                let gy = view1(g);
                if self.ng(*mu) {
                    self.acc(grads, *mu, gy.to_owned().into_dyn());
                }
                if self.ng(*logvar) {
                    let lv = view1(self.value(*logvar));
                    let glv: Array1<f64> = lv
                        .iter()
                        .zip(noise)
                        .zip(gy.iter())
                        .map(|((&lv, &e), &gv)| 0.5 * (0.5 * lv).exp() * e * gv)
                        .collect();
                    self.acc(grads, *logvar, glv.into_dyn());
                }
            }
            Op::BernoulliLogLik { logits, target } => {
                let s = *g.first().expect("scalar grad");
                let mut gl = ArrayD::zeros(IxDyn(target.shape()));
                ndarray::Zip::from(&mut gl)
                    .and(&self.nodes[logits.0].value)
                    .and(target)
                    .for_each(|o, &l, &t| *o = (t - sigmoid(l)) * s);
                self.acc(grads, *logits, gl);
            }
            Op::CategoricalLogLik { logits, target } => {
                let s = *g.first().expect("scalar grad");
                let l = view4(self.value(*logits));
                let t = view4(target);
                let (c, d1, d2, d3) = l.dim();
                let mut gl = ndarray::Array4::zeros((c, d1, d2, d3));
                for i1 in 0..d1 {
                    for i2 in 0..d2 {
                        for i3 in 0..d3 {
                            let mut m = f64::NEG_INFINITY;
                            for ch in 0..c {
                                m = m.max(l[(ch, i1, i2, i3)]);
                            }
                            let denom: f64 =
                                (0..c).map(|ch| (l[(ch, i1, i2, i3)] - m).exp()).sum();
                            for ch in 0..c {
                                let p = (l[(ch, i1, i2, i3)] - m).exp() / denom;
                                gl[(ch, i1, i2, i3)] = (t[(ch, i1, i2, i3)] - p) * s;
                            }
                        }
                    }
                }
                self.acc(grads, *logits, gl.into_dyn());
            }
            Op::CatLogProb { logits, index } => {
                let s = *g.first().expect("scalar grad");
                let l = view1(self.value(*logits));
                let p = crate::distributions::softmax(l.as_slice().expect("contiguous"));
                let gl: Array1<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| ((j == *index) as u8 as f64 - pj) * s)
                    .collect();
                self.acc(grads, *logits, gl.into_dyn());
            }
            Op::EntropyLogits(logits) => {
                let s = *g.first().expect("scalar grad");
                let h = self.scalar(NodeId(i));
                let l = view1(self.value(*logits));
                let p = crate::distributions::softmax(l.as_slice().expect("contiguous"));
                let gl: Array1<f64> = p
                    .iter()
                    .map(|&pj| {
                        if pj > 0.0 {
                            -pj * (pj.ln() + h) * s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(grads, *logits, gl.into_dyn());
            }
            Op::SoftmaxVec(logits) => {
                let gy = view1(g);
                let p = view1(self.value(NodeId(i)));
                let dot: f64 = gy.iter().zip(p.iter()).map(|(&a, &b)| a * b).sum();
                let gl: Array1<f64> =
                    p.iter().zip(gy.iter()).map(|(&pj, &gj)| pj * (gj - dot)).collect();
                self.acc(grads, *logits, gl.into_dyn());
            }
            Op::PickVec { x, index } => {
                let s = *g.first().expect("scalar grad");
                let mut gx = Array1::zeros(self.value(*x).len());
                gx[*index] = s;
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::GumbelSoftmax { logits, tau } => {
                let gy = view1(g);
                let p = view1(self.value(NodeId(i)));
                let dot: f64 = gy.iter().zip(p.iter()).map(|(&a, &b)| a * b).sum();
                let gl: Array1<f64> = p
                    .iter()
                    .zip(gy.iter())
                    .map(|(&pj, &gj)| pj * (gj - dot) / tau)
                    .collect();
                self.acc(grads, *logits, gl.into_dyn());
            }
            Op::EmbedRow { table, index } => {
                let gy = view1(g);
                let ts = self.value(*table).shape();
                let mut gt = Array2::zeros((ts[0], ts[1]));
                gt.row_mut(*index).assign(&gy);
                self.acc(grads, *table, gt.into_dyn());
            }
            Op::EmbedSoft { table, weights } => {
                let gy = view1(g);
                let t = view2(self.value(*table));
                let w = view1(self.value(*weights));
                if self.ng(*table) {
                    let gt = Array2::from_shape_fn(t.dim(), |(r, c)| w[r] * gy[c]);
                    self.acc(grads, *table, gt.into_dyn());
                }
                if self.ng(*weights) {
                    self.acc(grads, *weights, t.dot(&gy).into_dyn());
                }
            }
        }
    }
}
