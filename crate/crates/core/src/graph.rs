//! Reverse-mode automatic differentiation over a static operation graph.
//!
//! A [`Graph`] is built once (nodes are appended in topological order by
//! construction), then evaluated against named input bindings. Gradients are
//! available with respect to every `Input` leaf — parameters and data inputs
//! alike — which is what adversarial example generation needs. `Constant`
//! leaves never receive gradients, and backward skips whole gradient paths
//! (e.g. the weight-gradient GEMM of a convolution) when no differentiable
//! leaf lies behind them.
//!
//! Supported operations: matmul, row-broadcast bias add, elementwise
//! add/scale, relu, 2-D convolution (stride 1, valid/same padding), 2×2 max
//! pooling, batch normalization (train and frozen-statistics modes), fused
//! softmax cross-entropy (mean over the batch), reshape.
//!
//! Every reduction runs in ascending index order and matrix products use a
//! fixed blocked kernel, so identical graphs and bindings produce bitwise
//! identical outputs and gradients run after run.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input { name: String },
    Constant(Tensor),
    MatMul,
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddRow,
    Add,
    Scale(f64),
    Relu,
    Conv2d { padding: Padding },
    MaxPool2x2,
    /// Inputs: x, gamma, beta. Normalizes per channel with batch statistics.
    BatchNormTrain { eps: f64 },
    /// Inputs: x, gamma, beta, mean, var. mean/var are not differentiated.
    BatchNormEval { eps: f64 },
    /// Inputs: logits `[n,z]`, targets `[n,z]` (rows sum to 1). Scalar mean CE.
    SoftmaxCrossEntropy,
    /// New shape; at most one extent may be 0, meaning "infer from numel".
    Reshape(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_ids: BTreeMap<String, NodeId>,
    output_ids: BTreeMap<String, NodeId>,
}

/// Per-node state saved by the forward pass for reuse in backward.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Winning flat offset within each image plane, per output element.
    MaxPool(Vec<u32>),
    /// Per-channel batch statistics of a training-mode batch norm.
    BatchNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row-wise softmax probabilities of the fused cross-entropy.
    Softmax(Vec<f64>),
}

/// Result of a forward pass: one value per node plus kernel scratch state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Batch statistics computed by a `BatchNormTrain` node in this pass.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.aux[id] {
            Aux::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }
}

/// Gradient buffers indexed by node id. Accumulates across backward calls
/// until reset; see [`Graph::backward_into`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn accum(&mut self, id: NodeId, shape: &[usize]) -> &mut [f64] {
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        slot.as_mut().unwrap().data_mut()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "graph input id out of range");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
        );
        self.input_ids.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow, vec![x, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, padding: Padding) -> NodeId {
        self.push(Op::Conv2d { padding }, vec![x, w])
    }

    pub fn max_pool_2x2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2x2, vec![x])
    }

    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::BatchNormTrain { eps }, vec![x, gamma, beta])
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> NodeId {
        self.push(Op::BatchNormEval { eps }, vec![x, gamma, beta, mean, var])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy, vec![logits, targets])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![x])
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.output_ids.insert(name.to_string(), id);
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.input_ids.get(name).copied()
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.output_ids.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Evaluate every node against the given named bindings.
    pub fn forward(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let (v, a) = self.eval_node(id, node, &values, bindings)?;
            values.push(v);
            aux.push(a);
        }
        Ok(Evaluation { values, aux })
    }

    /// Named outputs of a forward pass.
    pub fn outputs(&self, eval: &Evaluation) -> BTreeMap<String, Tensor> {
        self.output_ids
            .iter()
            .map(|(name, &id)| (name.clone(), eval.values[id].clone()))
            .collect()
    }

    fn eval_node(
        &self,
        id: NodeId,
        node: &Node,
        values: &[Tensor],
        bindings: &BTreeMap<String, Tensor>,
    ) -> Result<(Tensor, Aux)> {
        let val = |i: usize| &values[node.inputs[i]];
        let shape_err = |expected: Vec<usize>, actual: &[usize]| Error::ShapeMismatch {
            node: id,
            expected,
            actual: actual.to_vec(),
        };
        match &node.op {
            Op::Input { name } => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                Ok((t.clone(), Aux::None))
            }
            Op::Constant(t) => Ok((t.clone(), Aux::None)),
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(shape_err(vec![sa[0], sa[1], sa[1], 0], sb));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut c = Tensor::zeros(&[m, n]);
                gemm_nn(m, k, n, 1.0, a.data(), b.data(), c.data_mut());
                Ok((c, Aux::None))
            }
            Op::AddRow => {
                let (x, bias) = (val(0), val(1));
                let sx = x.shape();
                if sx.len() != 2 || bias.shape() != [sx[1]] {
                    return Err(shape_err(vec![sx[sx.len() - 1]], bias.shape()));
                }
                let (m, n) = (sx[0], sx[1]);
                let mut y = x.clone();
                let yd = y.data_mut();
                let bd = bias.data();
                for i in 0..m {
                    for j in 0..n {
                        yd[i * n + j] += bd[j];
                    }
                }
                Ok((y, Aux::None))
            }
            Op::Add => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(shape_err(a.shape().to_vec(), b.shape()));
                }
                let mut y = a.clone();
                y.add_in_place(b);
                Ok((y, Aux::None))
            }
            Op::Scale(c) => {
                let mut y = val(0).clone();
                y.scale_in_place(*c);
                Ok((y, Aux::None))
            }
            Op::Relu => {
                let mut y = val(0).clone();
                y.data_mut().iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                });
                Ok((y, Aux::None))
            }
            Op::Conv2d { padding } => conv2d_forward(id, val(0), val(1), *padding),
            Op::MaxPool2x2 => max_pool_forward(id, val(0)),
            Op::BatchNormTrain { eps } => bn_train_forward(id, val(0), val(1), val(2), *eps),
            Op::BatchNormEval { eps } => {
                bn_eval_forward(id, val(0), val(1), val(2), val(3), val(4), *eps)
            }
            Op::SoftmaxCrossEntropy => sce_forward(id, val(0), val(1)),
            Op::Reshape(shape) => {
                let resolved = resolve_shape(shape, val(0).numel()).ok_or_else(|| {
                    Error::ShapeMismatch {
                        node: id,
                        expected: shape.clone(),
                        actual: val(0).shape().to_vec(),
                    }
                })?;
                let y = val(0).reshaped(&resolved).map_err(|_| Error::ShapeMismatch {
                    node: id,
                    expected: resolved.clone(),
                    actual: val(0).shape().to_vec(),
                })?;
                Ok((y, Aux::None))
            }
        }
    }

    /// Which nodes sit on a differentiable path, i.e. reach an `Input` leaf.
    fn differentiable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            mask[id] = match node.op {
                Op::Input { .. } => true,
                Op::Constant(_) => false,
                // mean/var legs of frozen batch norm are not differentiated
                Op::BatchNormEval { .. } => node.inputs[..3].iter().any(|&i| mask[i]),
                _ => node.inputs.iter().any(|&i| mask[i]),
            };
        }
        mask
    }

    /// Reverse pass from a scalar loss node. Returns fresh gradient buffers.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradients> {
        let mut grads = Gradients::new(self.nodes.len());
        self.backward_into(eval, loss, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass that accumulates into existing buffers: calling it twice
    /// without resetting doubles every gradient.
    pub fn backward_into(
        &self,
        eval: &Evaluation,
        loss: NodeId,
        grads: &mut Gradients,
    ) -> Result<()> {
        if eval.values.len() != self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let loss_val = &eval.values[loss];
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        if grads.grads.len() != self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }

        let needs = self.differentiable_mask();
        if !needs[loss] {
            return Ok(()); // loss independent of every input
        }

        // Seed dL/dL = 1 and walk nodes in reverse construction order.
        let mut seed = Gradients::new(self.nodes.len());
        seed.accum(loss, &[1])[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if !needs[id] || seed.grads[id].is_none() {
                continue;
            }
            let dy = seed.grads[id].take().unwrap();
            // Surface this node's gradient to the caller's buffers.
            let out = grads.accum(id, eval.values[id].shape());
            for (o, d) in out.iter_mut().zip(dy.data()) {
                *o += d;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Input { .. } | Op::Constant(_) => {}
                Op::MatMul => {
                    let a = &eval.values[node.inputs[0]];
                    let b = &eval.values[node.inputs[1]];
                    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                    if needs[node.inputs[0]] {
                        let da = seed.accum(node.inputs[0], a.shape());
                        gemm_nt(m, n, k, 1.0, dy.data(), b.data(), da);
                    }
                    if needs[node.inputs[1]] {
                        let db = seed.accum(node.inputs[1], b.shape());
                        gemm_tn(k, m, n, 1.0, a.data(), dy.data(), db);
                    }
                }
                Op::AddRow => {
                    let (m, n) = {
                        let s = eval.values[node.inputs[0]].shape();
                        (s[0], s[1])
                    };
                    if needs[node.inputs[0]] {
                        let dx = seed.accum(node.inputs[0], &[m, n]);
                        for (o, d) in dx.iter_mut().zip(dy.data()) {
                            *o += d;
                        }
                    }
                    if needs[node.inputs[1]] {
                        let db = seed.accum(node.inputs[1], &[n]);
                        let dyd = dy.data();
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += dyd[i * n + j];
                            }
                        }
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        if needs[inp] {
                            let dx = seed.accum(inp, dy.shape());
                            for (o, d) in dx.iter_mut().zip(dy.data()) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::Scale(c) => {
                    if needs[node.inputs[0]] {
                        let dx = seed.accum(node.inputs[0], dy.shape());
                        for (o, d) in dx.iter_mut().zip(dy.data()) {
                            *o += c * d;
                        }
                    }
                }
                Op::Relu => {
                    if needs[node.inputs[0]] {
                        let x = eval.values[node.inputs[0]].data();
                        let dx = seed.accum(node.inputs[0], dy.shape());
                        for ((o, d), xv) in dx.iter_mut().zip(dy.data()).zip(x) {
                            if *xv > 0.0 {
                                *o += d;
                            }
                        }
                    }
                }
                Op::Conv2d { padding } => {
                    conv2d_backward(node, *padding, eval, &dy, &needs, &mut seed);
                }
                Op::MaxPool2x2 => {
                    if needs[node.inputs[0]] {
                        let x_shape = eval.values[node.inputs[0]].shape().to_vec();
                        let Aux::MaxPool(arg) = &eval.aux[id] else {
                            unreachable!()
                        };
                        let dx = seed.accum(node.inputs[0], &x_shape);
                        let (h, w) = (x_shape[2], x_shape[3]);
                        let plane = h * w;
                        let out_plane = (h / 2) * (w / 2);
                        for (oidx, (&a, d)) in arg.iter().zip(dy.data()).enumerate() {
                            let img = oidx / out_plane;
                            dx[img * plane + a as usize] += d;
                        }
                    }
                }
                Op::BatchNormTrain { .. } => {
                    bn_train_backward(node, id, eval, &dy, &needs, &mut seed);
                }
                Op::BatchNormEval { eps } => {
                    bn_eval_backward(node, *eps, eval, &dy, &needs, &mut seed);
                }
                Op::SoftmaxCrossEntropy => {
                    sce_backward(node, id, eval, &dy, &needs, &mut seed);
                }
                Op::Reshape(_) => {
                    if needs[node.inputs[0]] {
                        let xs = eval.values[node.inputs[0]].shape().to_vec();
                        let dx = seed.accum(node.inputs[0], &xs);
                        for (o, d) in dx.iter_mut().zip(dy.data()) {
                            *o += d;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Substitute the single 0 extent (if any) so the product equals `numel`.
fn resolve_shape(shape: &[usize], numel: usize) -> Option<Vec<usize>> {
    let zeros = shape.iter().filter(|&&d| d == 0).count();
    if zeros > 1 {
        return None;
    }
    if zeros == 0 {
        return (shape.iter().product::<usize>() == numel).then(|| shape.to_vec());
    }
    let known: usize = shape.iter().filter(|&&d| d != 0).product();
    if known == 0 || numel % known != 0 {
        return None;
    }
    Some(
        shape
            .iter()
            .map(|&d| if d == 0 { numel / known } else { d })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(id: NodeId, x: &Tensor, wt: &Tensor, padding: Padding) -> Result<ConvDims> {
    let (sx, sw) = (x.shape(), wt.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(Error::ShapeMismatch {
            node: id,
            expected: vec![0, sw.get(1).copied().unwrap_or(0), 0, 0],
            actual: sx.to_vec(),
        });
    }
    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
    let (ph, pw) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::ShapeMismatch {
                    node: id,
                    expected: vec![o, c, kh | 1, kw | 1],
                    actual: sw.to_vec(),
                });
            }
            ((kh - 1) / 2, (kw - 1) / 2)
        }
    };
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::ShapeMismatch {
            node: id,
            expected: vec![n, c, kh, kw],
            actual: sx.to_vec(),
        });
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ph,
        pw,
        oh: h + 2 * ph - kh + 1,
        ow: w + 2 * pw - kw + 1,
    })
}

/// Images per im2col GEMM group; picked so a group is a few thousand columns.
fn conv_group(d: &ConvDims) -> usize {
    (4096 / (d.oh * d.ow)).clamp(1, d.n.max(1))
}

fn im2col(d: &ConvDims, x: &[f64], imgs: std::ops::Range<usize>, col: &mut [f64]) {
    let g = imgs.len();
    let cols = g * d.oh * d.ow;
    debug_assert_eq!(col.len(), d.c * d.kh * d.kw * cols);
    col.iter_mut().for_each(|v| *v = 0.0);
    let plane = d.h * d.w;
    for (gi, img) in imgs.enumerate() {
        let xin = &x[img * d.c * plane..(img + 1) * d.c * plane];
        for ci in 0..d.c {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let row = ((ci * d.kh + ky) * d.kw + kx) * cols + gi * d.oh * d.ow;
                    for oy in 0..d.oh {
                        let iy = oy + ky;
                        if iy < d.ph || iy >= d.h + d.ph {
                            continue;
                        }
                        let iy = iy - d.ph;
                        for ox in 0..d.ow {
                            let ix = ox + kx;
                            if ix < d.pw || ix >= d.w + d.pw {
                                continue;
                            }
                            col[row + oy * d.ow + ox] = xin[ci * plane + iy * d.w + (ix - d.pw)];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_accumulate(d: &ConvDims, col: &[f64], imgs: std::ops::Range<usize>, dx: &mut [f64]) {
    let g = imgs.len();
    let cols = g * d.oh * d.ow;
    let plane = d.h * d.w;
    for (gi, img) in imgs.enumerate() {
        let xout = &mut dx[img * d.c * plane..(img + 1) * d.c * plane];
        for ci in 0..d.c {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let row = ((ci * d.kh + ky) * d.kw + kx) * cols + gi * d.oh * d.ow;
                    for oy in 0..d.oh {
                        let iy = oy + ky;
                        if iy < d.ph || iy >= d.h + d.ph {
                            continue;
                        }
                        let iy = iy - d.ph;
                        for ox in 0..d.ow {
                            let ix = ox + kx;
                            if ix < d.pw || ix >= d.w + d.pw {
                                continue;
                            }
                            xout[ci * plane + iy * d.w + (ix - d.pw)] += col[row + oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(id: NodeId, x: &Tensor, wt: &Tensor, padding: Padding) -> Result<(Tensor, Aux)> {
    let d = conv_dims(id, x, wt, padding)?;
    let mut y = Tensor::zeros(&[d.n, d.o, d.oh, d.ow]);
    let group = conv_group(&d);
    let kdim = d.c * d.kh * d.kw;
    let out_plane = d.oh * d.ow;
    let mut col = vec![0.0; kdim * group * out_plane];
    let mut out_buf = vec![0.0; d.o * group * out_plane];
    let mut start = 0;
    while start < d.n {
        let end = (start + group).min(d.n);
        let g = end - start;
        let cols = g * out_plane;
        let col_s = &mut col[..kdim * cols];
        im2col(&d, x.data(), start..end, col_s);
        let out_s = &mut out_buf[..d.o * cols];
        out_s.iter_mut().for_each(|v| *v = 0.0);
        gemm_nn(d.o, kdim, cols, 1.0, wt.data(), col_s, out_s);
        // out_s[o][g*out_plane + p] -> y[img][o][p]
        let yd = y.data_mut();
        for oc in 0..d.o {
            for gi in 0..g {
                let src = &out_s[(oc * g + gi) * out_plane..(oc * g + gi + 1) * out_plane];
                let dst_base = ((start + gi) * d.o + oc) * out_plane;
                yd[dst_base..dst_base + out_plane].copy_from_slice(src);
            }
        }
        start = end;
    }
    Ok((y, Aux::None))
}

fn conv2d_backward(
    node: &Node,
    padding: Padding,
    eval: &Evaluation,
    dy: &Tensor,
    needs: &[bool],
    seed: &mut Gradients,
) {
    let x = &eval.values[node.inputs[0]];
    let wt = &eval.values[node.inputs[1]];
    let d = conv_dims(usize::MAX, x, wt, padding).expect("validated in forward");
    let need_x = needs[node.inputs[0]];
    let need_w = needs[node.inputs[1]];
    if !need_x && !need_w {
        return;
    }
    let group = conv_group(&d);
    let kdim = d.c * d.kh * d.kw;
    let out_plane = d.oh * d.ow;
    let mut col = vec![0.0; kdim * group * out_plane];
    let mut dy_buf = vec![0.0; d.o * group * out_plane];
    let mut dcol = vec![0.0; if need_x { kdim * group * out_plane } else { 0 }];
    let mut dw_acc = vec![0.0; if need_w { d.o * kdim } else { 0 }];
    let mut dx_acc = vec![0.0; if need_x { d.n * d.c * d.h * d.w } else { 0 }];

    let dyd = dy.data();
    let mut start = 0;
    while start < d.n {
        let end = (start + group).min(d.n);
        let g = end - start;
        let cols = g * out_plane;
        // gather dy into [o, cols]
        let dys = &mut dy_buf[..d.o * cols];
        for oc in 0..d.o {
            for gi in 0..g {
                let src_base = ((start + gi) * d.o + oc) * out_plane;
                let dst = &mut dys[(oc * g + gi) * out_plane..(oc * g + gi + 1) * out_plane];
                dst.copy_from_slice(&dyd[src_base..src_base + out_plane]);
            }
        }
        if need_w {
            let col_s = &mut col[..kdim * cols];
            im2col(&d, x.data(), start..end, col_s);
            // dW[o,kdim] += dY[o,cols] · colᵀ
            gemm_nt(d.o, cols, kdim, 1.0, dys, col_s, &mut dw_acc);
        }
        if need_x {
            let dcol_s = &mut dcol[..kdim * cols];
            dcol_s.iter_mut().for_each(|v| *v = 0.0);
            // dcol[kdim,cols] = Wᵀ[kdim,o] · dY[o,cols]
            gemm_tn(kdim, d.o, cols, 1.0, wt.data(), dys, dcol_s);
            col2im_accumulate(&d, dcol_s, start..end, &mut dx_acc);
        }
        start = end;
    }
    if need_w {
        let dw = seed.accum(node.inputs[1], wt.shape());
        for (o, v) in dw.iter_mut().zip(&dw_acc) {
            *o += v;
        }
    }
    if need_x {
        let dx = seed.accum(node.inputs[0], x.shape());
        for (o, v) in dx.iter_mut().zip(&dx_acc) {
            *o += v;
        }
    }
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

fn max_pool_forward(id: NodeId, x: &Tensor) -> Result<(Tensor, Aux)> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::ShapeMismatch {
            node: id,
            expected: vec![s[0], s[1], s[2] & !1, s[3] & !1],
            actual: s.to_vec(),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    let plane = h * w;
    for img in 0..n * c {
        let xp = &xd[img * plane..(img + 1) * plane];
        let base = img * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                // ties keep the first candidate in scan order
                let mut best_off = (2 * oy) * w + 2 * ox;
                let mut best = xp[best_off];
                for (ddy, ddx) in [(0, 1), (1, 0), (1, 1)] {
                    let off = (2 * oy + ddy) * w + 2 * ox + ddx;
                    if xp[off] > best {
                        best = xp[off];
                        best_off = off;
                    }
                }
                yd[base + oy * ow + ox] = best;
                arg[base + oy * ow + ox] = best_off as u32;
            }
        }
    }
    Ok((y, Aux::MaxPool(arg)))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// (channel count, elements per channel, stride pattern) of a BN input.
fn bn_layout(id: NodeId, x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    match s.len() {
        2 => Ok((s[1], s[0])),
        4 => Ok((s[1], s[0] * s[2] * s[3])),
        _ => Err(Error::ShapeMismatch {
            node: id,
            expected: vec![0, 0],
            actual: s.to_vec(),
        }),
    }
}

/// Iterate `x` of shape `[n,c]` or `[n,c,h,w]` channel-wise: calls `f(ch, idx)`.
fn bn_for_each(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    if shape.len() == 2 {
        let (n, c) = (shape[0], shape[1]);
        for i in 0..n {
            for ch in 0..c {
                f(ch, i * c + ch);
            }
        }
    } else {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    f(ch, base + p);
                }
            }
        }
    }
}

fn bn_train_forward(
    id: NodeId,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Aux)> {
    let (c, per_c) = bn_layout(id, x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            node: id,
            expected: vec![c],
            actual: gamma.shape().to_vec(),
        });
    }
    if per_c < 2 {
        return Err(Error::BatchTooSmall(x.shape()[0]));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    bn_for_each(x.shape(), |ch, idx| mean[ch] += xd[idx]);
    mean.iter_mut().for_each(|m| *m /= per_c as f64);
    bn_for_each(x.shape(), |ch, idx| {
        let d = xd[idx] - mean[ch];
        var[ch] += d * d;
    });
    var.iter_mut().for_each(|v| *v /= per_c as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    let (g, b) = (gamma.data(), beta.data());
    bn_for_each(x.shape(), |ch, idx| {
        yd[idx] = g[ch] * (xd[idx] - mean[ch]) * inv_std[ch] + b[ch];
    });
    Ok((y, Aux::BatchNorm { mean, var, inv_std }))
}

fn bn_train_backward(
    node: &Node,
    id: NodeId,
    eval: &Evaluation,
    dy: &Tensor,
    needs: &[bool],
    seed: &mut Gradients,
) {
    let x = &eval.values[node.inputs[0]];
    let gamma = &eval.values[node.inputs[1]];
    let Aux::BatchNorm {
        mean,
        var: _,
        inv_std,
    } = &eval.aux[id]
    else {
        unreachable!()
    };
    let (c, per_c) = bn_layout(usize::MAX, x).expect("validated in forward");
    let xd = x.data();
    let dyd = dy.data();
    // per-channel reductions: sum dy, sum dy * xhat
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    bn_for_each(x.shape(), |ch, idx| {
        let xhat = (xd[idx] - mean[ch]) * inv_std[ch];
        sum_dy[ch] += dyd[idx];
        sum_dy_xhat[ch] += dyd[idx] * xhat;
    });
    if needs[node.inputs[1]] {
        let dg = seed.accum(node.inputs[1], &[c]);
        for (o, v) in dg.iter_mut().zip(&sum_dy_xhat) {
            *o += v;
        }
    }
    if needs[node.inputs[2]] {
        let db = seed.accum(node.inputs[2], &[c]);
        for (o, v) in db.iter_mut().zip(&sum_dy) {
            *o += v;
        }
    }
    if needs[node.inputs[0]] {
        let m = per_c as f64;
        let gd = gamma.data();
        let shape = x.shape().to_vec();
        let dx = seed.accum(node.inputs[0], &shape);
        bn_for_each(&shape, |ch, idx| {
            let xhat = (xd[idx] - mean[ch]) * inv_std[ch];
            dx[idx] += gd[ch] * inv_std[ch] / m
                * (m * dyd[idx] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
        });
    }
}

fn bn_eval_forward(
    id: NodeId,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<(Tensor, Aux)> {
    let (c, _) = bn_layout(id, x)?;
    for t in [gamma, beta, mean, var] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                node: id,
                expected: vec![c],
                actual: t.shape().to_vec(),
            });
        }
    }
    let xd = x.data();
    let (g, b, m, v) = (gamma.data(), beta.data(), mean.data(), var.data());
    let inv_std: Vec<f64> = v.iter().map(|vv| 1.0 / (vv + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    bn_for_each(x.shape(), |ch, idx| {
        yd[idx] = g[ch] * (xd[idx] - m[ch]) * inv_std[ch] + b[ch];
    });
    Ok((y, Aux::None))
}

fn bn_eval_backward(
    node: &Node,
    eps: f64,
    eval: &Evaluation,
    dy: &Tensor,
    needs: &[bool],
    seed: &mut Gradients,
) {
    let x = &eval.values[node.inputs[0]];
    let gamma = &eval.values[node.inputs[1]];
    let mean = &eval.values[node.inputs[3]];
    let var = &eval.values[node.inputs[4]];
    let (c, _) = bn_layout(usize::MAX, x).expect("validated in forward");
    let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let dyd = dy.data();
    if needs[node.inputs[0]] {
        let gd = gamma.data();
        let shape = x.shape().to_vec();
        let dx = seed.accum(node.inputs[0], &shape);
        bn_for_each(&shape, |ch, idx| {
            dx[idx] += dyd[idx] * gd[ch] * inv_std[ch];
        });
    }
    if needs[node.inputs[1]] {
        let md = mean.data();
        let mut dg_local = vec![0.0; c];
        bn_for_each(x.shape(), |ch, idx| {
            dg_local[ch] += dyd[idx] * (xd[idx] - md[ch]) * inv_std[ch];
        });
        let dg = seed.accum(node.inputs[1], &[c]);
        for (o, v) in dg.iter_mut().zip(&dg_local) {
            *o += v;
        }
    }
    if needs[node.inputs[2]] {
        let mut db_local = vec![0.0; c];
        bn_for_each(x.shape(), |ch, idx| db_local[ch] += dyd[idx]);
        let db = seed.accum(node.inputs[2], &[c]);
        for (o, v) in db.iter_mut().zip(&db_local) {
            *o += v;
        }
    }
}

// ---------------------------------------------------------------------------
// fused softmax cross-entropy
// ---------------------------------------------------------------------------

fn sce_forward(id: NodeId, logits: &Tensor, targets: &Tensor) -> Result<(Tensor, Aux)> {
    let s = logits.shape();
    if s.len() != 2 || targets.shape() != s {
        return Err(Error::ShapeMismatch {
            node: id,
            expected: s.to_vec(),
            actual: targets.shape().to_vec(),
        });
    }
    let (n, z) = (s[0], s[1]);
    let ld = logits.data();
    let td = targets.data();
    let mut probs = vec![0.0; n * z];
    let mut total = 0.0;
    for i in 0..n {
        let row = &ld[i * z..(i + 1) * z];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &l in row {
            sum_exp += (l - m).exp();
        }
        let lse = m + sum_exp.ln();
        for j in 0..z {
            probs[i * z + j] = (row[j] - lse).exp();
            total += td[i * z + j] * (lse - row[j]);
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            node: id,
            context: "softmax cross-entropy loss".into(),
        });
    }
    Ok((Tensor::scalar(loss), Aux::Softmax(probs)))
}

fn sce_backward(
    node: &Node,
    id: NodeId,
    eval: &Evaluation,
    dy: &Tensor,
    needs: &[bool],
    seed: &mut Gradients,
) {
    let logits = &eval.values[node.inputs[0]];
    let targets = &eval.values[node.inputs[1]];
    let Aux::Softmax(probs) = &eval.aux[id] else {
        unreachable!()
    };
    let (n, z) = (logits.shape()[0], logits.shape()[1]);
    let scale = dy.item() / n as f64;
    if needs[node.inputs[0]] {
        let td = targets.data();
        let dl = seed.accum(node.inputs[0], &[n, z]);
        // each target row sums to 1, so dL/dlogit = (p - t)/n
        for (o, (p, t)) in dl.iter_mut().zip(probs.iter().zip(td)) {
            *o += scale * (p - t);
        }
    }
    if needs[node.inputs[1]] {
        let ld = logits.data();
        let dt = seed.accum(node.inputs[1], &[n, z]);
        for i in 0..n {
            let row = &ld[i * z..(i + 1) * z];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            for j in 0..z {
                dt[i * z + j] += scale * (lse - row[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn identity_graph_passes_through() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.mark_output("y", x);
        let eval = g
            .forward(&bind(&[("x", Tensor::from_vec(vec![1.0, 2.0, 3.0]))]))
            .unwrap();
        assert_eq!(eval.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_identity_matrix() {
        let mut g = Graph::new();
        let a = g.input("a");
        let x = g.input("x");
        let y = g.matmul(a, x);
        let eval = g
            .forward(&bind(&[
                ("a", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                ("x", Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(eval.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_identity_plus_relu_clamps_negative() {
        // dense(2->2, w=I, b=0) then relu on (-1, 2) -> (0, 2)
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let b = g.input("b");
        let h = g.matmul(x, w);
        let h = g.add_row(h, b);
        let y = g.relu(h);
        let eval = g
            .forward(&bind(&[
                ("x", Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap()),
                ("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                ("b", Tensor::from_vec(vec![0.0, 0.0])),
            ]))
            .unwrap();
        assert_eq!(eval.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = Graph::new();
        g.input("x");
        let err = g.forward(&BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnboundInput(name) if name == "x"));
    }

    #[test]
    fn matmul_shape_mismatch_reports_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let err = g
            .forward(&bind(&[
                ("a", Tensor::zeros(&[2, 3])),
                ("b", Tensor::zeros(&[4, 2])),
            ]))
            .unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert_eq!(node, c),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bilinear_form_gradients() {
        // L = w^T x, w = (1,2), x = (3,4): dL/dw = x, dL/dx = w
        let mut g = Graph::new();
        let w = g.input("w");
        let x = g.input("x");
        let l = g.matmul(w, x);
        let eval = g
            .forward(&bind(&[
                ("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()),
                ("x", Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(eval.value(l).item(), 11.0);
        let grads = g.backward(&eval, l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn quadratic_gradient_via_shared_input() {
        // L = ||x||^2 / 2 built as 0.5 * (x_row · x_col); x = (3,-1)
        let mut g = Graph::new();
        let x = g.input("x");
        let xr = g.reshape(x, &[1, 2]);
        let xc = g.reshape(x, &[2, 1]);
        let q = g.matmul(xr, xc);
        let l = g.scale(q, 0.5);
        let eval = g
            .forward(&bind(&[("x", Tensor::from_vec(vec![3.0, -1.0]))]))
            .unwrap();
        assert_eq!(eval.value(l).item(), 5.0);
        let grads = g.backward(&eval, l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input("x");
        let eval = g
            .forward(&bind(&[("x", Tensor::from_vec(vec![1.0, 2.0]))]))
            .unwrap();
        assert!(matches!(
            g.backward(&eval, x),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.input("x");
        let xr = g.reshape(x, &[1, 1]);
        let l = g.scale(xr, 3.0);
        let eval = g
            .forward(&bind(&[("x", Tensor::from_vec(vec![2.0]))]))
            .unwrap();
        let mut grads = g.backward(&eval, l).unwrap();
        g.backward_into(&eval, l, &mut grads).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_of_scaled_loss_scales_gradients() {
        let mut g = Graph::new();
        let x = g.input("x");
        let xr = g.reshape(x, &[1, 3]);
        let xc = g.reshape(x, &[3, 1]);
        let q = g.matmul(xr, xc);
        let l = g.scale(q, 0.5);
        let l4 = g.scale(l, 4.0);
        let t = Tensor::from_vec(vec![0.5, -2.0, 1.5]);
        let eval = g.forward(&bind(&[("x", t)])).unwrap();
        let g1 = g.backward(&eval, l).unwrap();
        let g4 = g.backward(&eval, l4).unwrap();
        for (a, b) in g1.get(x).unwrap().data().iter().zip(g4.get(x).unwrap().data()) {
            assert_eq!(*b, 4.0 * *a);
        }
    }

    #[test]
    fn constants_receive_no_gradients() {
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let xr = g.reshape(x, &[1, 2]);
        let l = g.matmul(xr, c);
        let eval = g
            .forward(&bind(&[("x", Tensor::from_vec(vec![1.0, 2.0]))]))
            .unwrap();
        let grads = g.backward(&eval, l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_z() {
        let z = 10;
        let mut g = Graph::new();
        let logits = g.input("logits");
        let mut onehot = Tensor::zeros(&[2, z]);
        onehot.data_mut()[3] = 1.0;
        onehot.data_mut()[z + 7] = 1.0;
        let t = g.constant(onehot);
        let l = g.softmax_cross_entropy(logits, t);
        let eval = g
            .forward(&bind(&[("logits", Tensor::zeros(&[2, z]))]))
            .unwrap();
        let expected = (z as f64).ln();
        assert!((eval.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_grad_sums_to_zero_per_row() {
        let mut g = Graph::new();
        let logits = g.input("logits");
        let mut onehot = Tensor::zeros(&[1, 4]);
        onehot.data_mut()[2] = 1.0;
        let t = g.constant(onehot);
        let l = g.softmax_cross_entropy(logits, t);
        let eval = g
            .forward(&bind(&[(
                "logits",
                Tensor::new(vec![1, 4], vec![0.3, -0.1, 2.0, 0.4]).unwrap(),
            )]))
            .unwrap();
        let grads = g.backward(&eval, l).unwrap();
        let s: f64 = grads.get(logits).unwrap().data().iter().sum();
        assert!(s.abs() < 1e-14);
    }

    #[test]
    fn conv2d_valid_matches_hand_computation() {
        // 1x1x3x3 input, 1x1x2x2 kernel of ones: output = window sums
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let y = g.conv2d(x, w, Padding::Valid);
        let eval = g
            .forward(&bind(&[
                (
                    "x",
                    Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap(),
                ),
                ("w", Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(eval.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(eval.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_same_preserves_spatial_size() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let y = g.conv2d(x, w, Padding::Same);
        let eval = g
            .forward(&bind(&[
                ("x", Tensor::new(vec![2, 1, 4, 4], vec![1.0; 32]).unwrap()),
                (
                    "w",
                    Tensor::new(vec![3, 1, 3, 3], (0..27).map(|v| v as f64 * 0.1).collect())
                        .unwrap(),
                ),
            ]))
            .unwrap();
        assert_eq!(eval.value(y).shape(), &[2, 3, 4, 4]);
    }

    #[test]
    fn max_pool_takes_block_maxima_and_routes_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.max_pool_2x2(x);
        let r = g.reshape(y, &[1, 2]);
        let ones = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let l = g.matmul(r, ones);
        let eval = g
            .forward(&bind(&[(
                "x",
                Tensor::new(
                    vec![1, 1, 2, 4],
                    vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 8.0, 2.0],
                )
                .unwrap(),
            )]))
            .unwrap();
        assert_eq!(eval.value(y).data(), &[5.0, 8.0]);
        let grads = g.backward(&eval, l).unwrap();
        let dx = grads.get(x).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bn_train_constant_batch_normalizes_to_beta() {
        let mut g = Graph::new();
        let x = g.input("x");
        let gamma = g.input("gamma");
        let beta = g.input("beta");
        let y = g.batch_norm_train(x, gamma, beta, 1e-5);
        let eval = g
            .forward(&bind(&[
                ("x", Tensor::new(vec![4, 3], vec![2.5; 12]).unwrap()),
                ("gamma", Tensor::from_vec(vec![1.0, 1.0, 1.0])),
                ("beta", Tensor::from_vec(vec![0.0, 0.0, 0.0])),
            ]))
            .unwrap();
        // zero variance handled by eps: normalized activations all zero
        for v in eval.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn bn_train_rejects_batch_of_one() {
        let mut g = Graph::new();
        let x = g.input("x");
        let gamma = g.input("gamma");
        let beta = g.input("beta");
        g.batch_norm_train(x, gamma, beta, 1e-5);
        let err = g
            .forward(&bind(&[
                ("x", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()),
                ("gamma", Tensor::from_vec(vec![1.0; 3])),
                ("beta", Tensor::from_vec(vec![0.0; 3])),
            ]))
            .unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let h = g.matmul(x, w);
        let y = g.relu(h);
        let b = bind(&[
            (
                "x",
                Tensor::new(vec![3, 5], (0..15).map(|v| (v as f64).sin()).collect()).unwrap(),
            ),
            (
                "w",
                Tensor::new(vec![5, 4], (0..20).map(|v| (v as f64).cos()).collect()).unwrap(),
            ),
        ]);
        let e1 = g.forward(&b).unwrap();
        let e2 = g.forward(&b).unwrap();
        assert_eq!(e1.value(y).data(), e2.value(y).data());
    }
}
