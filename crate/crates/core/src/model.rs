//! Classification models with split batch normalization.
//!
//! Two architectures are provided as presets: a plain MLP and a small CNN
//! (conv3×3 → BN → relu → pool, twice, then a dense head). Batch-norm scale
//! and shift parameters are shared between two independent sets of running
//! statistics: the *main* branch sees clean batches, the *auxiliary* branch
//! sees adversarial batches. Evaluation always reads the main branch.
//!
//! Batches are processed in fixed micro-batches of [`CHUNK`] examples, so a
//! training-mode batch norm normalizes over at most `CHUNK` examples (ghost
//! batch statistics) and memory stays bounded regardless of the global batch
//! size. Chunk boundaries are a pure function of the batch size, which keeps
//! every pass bitwise reproducible.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId, Padding};
use crate::rng::{role, stream};
use crate::tensor::Tensor;

/// Micro-batch size for chunked passes and ghost batch-norm statistics.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnBranch {
    Main,
    Aux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A batch of examples with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != labels.len() {
            return Err(Error::BatchSizeMismatch {
                clean: inputs.shape().first().copied().unwrap_or(0),
                adv: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    /// Copy out examples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let per = self.inputs.numel() / self.len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = end - start;
        let data = self.inputs.data()[start * per..end * per].to_vec();
        Self {
            inputs: Tensor::new(shape, data).unwrap(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    fn onehot(&self, num_classes: usize) -> Tensor {
        let n = self.len();
        let mut t = Tensor::zeros(&[n, num_classes]);
        let d = t.data_mut();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * num_classes + l] = 1.0;
        }
        t
    }
}

/// Chunk boundaries: fixed size, except a trailing singleton merges into the
/// previous chunk so training-mode batch norm always sees ≥ 2 examples.
pub fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() >= 2 && out[out.len() - 1].1 - out[out.len() - 1].0 == 1 {
        let k = out.len() - 2;
        out[k].1 += 1;
        out.pop();
    }
    out
}

// ---------------------------------------------------------------------------
// architecture
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
    Cnn {
        in_channels: usize,
        height: usize,
        width: usize,
        conv_channels: (usize, usize),
        num_classes: usize,
    },
}

impl ModelSpec {
    /// MLP preset: input → 256 → 128 → Z.
    pub fn mlp_preset(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec::Mlp {
            input_dim,
            hidden: vec![256, 128],
            num_classes,
        }
    }

    /// CNN preset: conv3×3(16) BN relu pool, conv3×3(32) BN relu pool, dense.
    /// Spatial dims must be divisible by 4.
    pub fn cnn_preset(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        ModelSpec::Cnn {
            in_channels,
            height,
            width,
            conv_channels: (16, 32),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { num_classes, .. } | ModelSpec::Cnn { num_classes, .. } => *num_classes,
        }
    }

    pub fn input_numel(&self) -> usize {
        match self {
            ModelSpec::Mlp { input_dim, .. } => *input_dim,
            ModelSpec::Cnn {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    /// Channel counts of the batch-norm layers, in order.
    pub fn bn_channels(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { .. } => vec![],
            ModelSpec::Cnn { conv_channels, .. } => vec![conv_channels.0, conv_channels.1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                if *input_dim == 0 || *num_classes < 2 || hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config(format!("invalid MLP spec {self:?}")));
                }
            }
            ModelSpec::Cnn {
                in_channels,
                height,
                width,
                conv_channels,
                num_classes,
            } => {
                if *in_channels == 0
                    || *num_classes < 2
                    || conv_channels.0 == 0
                    || conv_channels.1 == 0
                {
                    return Err(Error::Config(format!("invalid CNN spec {self:?}")));
                }
                if height % 4 != 0 || width % 4 != 0 || *height < 4 || *width < 4 {
                    return Err(Error::Config(format!(
                        "CNN preset needs spatial dims divisible by 4, got {height}x{width}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
    /// Bias and batch-norm parameters skip LARS trust scaling and weight decay.
    pub lars_exempt: bool,
}

/// Model parameters: an ordered list of tensors plus layer metadata.
/// `clone()` is the snapshot operation — a deep, independent copy.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub tensors: Vec<Tensor>,
    pub meta: Vec<ParamMeta>,
}

impl ModelParams {
    /// He fan-in initialization from the given seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, &[role::INIT]);
        let mut p = Self {
            spec: spec.clone(),
            tensors: Vec::new(),
            meta: Vec::new(),
        };
        let mut he = |shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| dist.sample(&mut rng))
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        match spec {
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let mut dims = vec![*input_dim];
                dims.extend_from_slice(hidden);
                dims.push(*num_classes);
                for i in 0..dims.len() - 1 {
                    let (fi, fo) = (dims[i], dims[i + 1]);
                    let w = he(&[fi, fo], fi);
                    p.push(w, format!("dense{i}.w"), ParamKind::Weight);
                    p.push(Tensor::zeros(&[fo]), format!("dense{i}.b"), ParamKind::Bias);
                }
            }
            ModelSpec::Cnn {
                in_channels,
                height,
                width,
                conv_channels,
                num_classes,
            } => {
                let (c1, c2) = *conv_channels;
                let w0 = he(&[c1, *in_channels, 3, 3], in_channels * 9);
                p.push(w0, "conv0.w".into(), ParamKind::Weight);
                p.push(Tensor::full(&[c1], 1.0), "bn0.gamma".into(), ParamKind::BnGamma);
                p.push(Tensor::zeros(&[c1]), "bn0.beta".into(), ParamKind::BnBeta);
                let w1 = he(&[c2, c1, 3, 3], c1 * 9);
                p.push(w1, "conv1.w".into(), ParamKind::Weight);
                p.push(Tensor::full(&[c2], 1.0), "bn1.gamma".into(), ParamKind::BnGamma);
                p.push(Tensor::zeros(&[c2]), "bn1.beta".into(), ParamKind::BnBeta);
                let feat = c2 * (height / 4) * (width / 4);
                let wh = he(&[feat, *num_classes], feat);
                p.push(wh, "head.w".into(), ParamKind::Weight);
                p.push(Tensor::zeros(&[*num_classes]), "head.b".into(), ParamKind::Bias);
            }
        }
        Ok(p)
    }

    fn push(&mut self, t: Tensor, name: String, kind: ParamKind) {
        let lars_exempt = !matches!(kind, ParamKind::Weight);
        self.tensors.push(t);
        self.meta.push(ParamMeta {
            name,
            kind,
            lars_exempt,
        });
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Per-parameter gradients, parallel to `ModelParams::tensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, c: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(c);
        }
    }

    /// Euclidean norm over all parameters, summed in tensor order.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

// ---------------------------------------------------------------------------
// split batch normalization state
// ---------------------------------------------------------------------------

/// Running statistics for one batch-norm layer, kept separately per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats {
    pub main_mean: Vec<f64>,
    pub main_var: Vec<f64>,
    pub aux_mean: Vec<f64>,
    pub aux_var: Vec<f64>,
}

/// Shared gamma/beta live in [`ModelParams`]; this holds only the two sets
/// of running statistics. A batch routed to one branch never touches the
/// other branch's numbers. `momentum` is the decay factor of the old value.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatchNormState {
    pub layers: Vec<BnLayerStats>,
    pub momentum: f64,
    pub eps: f64,
}

impl DualBatchNormState {
    pub fn init(spec: &ModelSpec) -> Self {
        let layers = spec
            .bn_channels()
            .into_iter()
            .map(|c| BnLayerStats {
                main_mean: vec![0.0; c],
                main_var: vec![1.0; c],
                aux_mean: vec![0.0; c],
                aux_var: vec![1.0; c],
            })
            .collect();
        Self {
            layers,
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    fn branch_stats(&self, layer: usize, branch: BnBranch) -> (&[f64], &[f64]) {
        let l = &self.layers[layer];
        match branch {
            BnBranch::Main => (&l.main_mean, &l.main_var),
            BnBranch::Aux => (&l.aux_mean, &l.aux_var),
        }
    }

    fn update_branch(&mut self, layer: usize, branch: BnBranch, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        let l = &mut self.layers[layer];
        let (rm, rv) = match branch {
            BnBranch::Main => (&mut l.main_mean, &mut l.main_var),
            BnBranch::Aux => (&mut l.aux_mean, &mut l.aux_var),
        };
        for (r, b) in rm.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in rv.iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

// ---------------------------------------------------------------------------
// graph construction
// ---------------------------------------------------------------------------

pub(crate) struct BuiltModel {
    pub graph: Graph,
    /// Node id per parameter tensor; `None` when bound as constants.
    pub param_ids: Vec<Option<NodeId>>,
    /// `BatchNormTrain` node ids in layer order (empty in Eval phase).
    pub bn_nodes: Vec<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
}

/// One graph serves every chunk size: the leading batch extent is inferred
/// at bind time (reshape extent 0).
pub(crate) fn build_model_graph(
    params: &ModelParams,
    bn: &DualBatchNormState,
    branch: BnBranch,
    phase: Phase,
    trainable: bool,
    with_loss: bool,
) -> BuiltModel {
    let mut g = Graph::new();
    let x_in = g.input("x");
    let mut param_ids: Vec<Option<NodeId>> = vec![None; params.tensors.len()];
    let param_node = |g: &mut Graph, idx: usize, ids: &mut Vec<Option<NodeId>>| -> NodeId {
        if trainable {
            let id = g.input(&params.meta[idx].name);
            ids[idx] = Some(id);
            id
        } else {
            g.constant(params.tensors[idx].clone())
        }
    };
    let mut bn_nodes = Vec::new();
    let mut bn_layer = 0usize;
    let add_bn = |g: &mut Graph,
                      x: NodeId,
                      gamma_idx: usize,
                      ids: &mut Vec<Option<NodeId>>,
                      bn_nodes: &mut Vec<NodeId>,
                      bn_layer: &mut usize|
     -> NodeId {
        let gamma = if trainable {
            let id = g.input(&params.meta[gamma_idx].name);
            ids[gamma_idx] = Some(id);
            id
        } else {
            g.constant(params.tensors[gamma_idx].clone())
        };
        let beta = if trainable {
            let id = g.input(&params.meta[gamma_idx + 1].name);
            ids[gamma_idx + 1] = Some(id);
            id
        } else {
            g.constant(params.tensors[gamma_idx + 1].clone())
        };
        let out = match phase {
            Phase::Train => {
                let node = g.batch_norm_train(x, gamma, beta, bn.eps);
                bn_nodes.push(node);
                node
            }
            Phase::Eval => {
                let (mean, var) = bn.branch_stats(*bn_layer, branch);
                let m = g.constant(Tensor::from_vec(mean.to_vec()));
                let v = g.constant(Tensor::from_vec(var.to_vec()));
                g.batch_norm_eval(x, gamma, beta, m, v, bn.eps)
            }
        };
        *bn_layer += 1;
        out
    };

    let logits = match &params.spec {
        ModelSpec::Mlp {
            input_dim, hidden, ..
        } => {
            let mut h = g.reshape(x_in, &[0, *input_dim]);
            let n_layers = hidden.len() + 1;
            for i in 0..n_layers {
                let w = param_node(&mut g, 2 * i, &mut param_ids);
                let b = param_node(&mut g, 2 * i + 1, &mut param_ids);
                h = g.matmul(h, w);
                h = g.add_row(h, b);
                if i + 1 < n_layers {
                    h = g.relu(h);
                }
            }
            h
        }
        ModelSpec::Cnn {
            in_channels,
            height,
            width,
            conv_channels,
            ..
        } => {
            let (c1, c2) = *conv_channels;
            let x = g.reshape(x_in, &[0, *in_channels, *height, *width]);
            let w0 = param_node(&mut g, 0, &mut param_ids);
            let mut h = g.conv2d(x, w0, Padding::Same);
            h = add_bn(&mut g, h, 1, &mut param_ids, &mut bn_nodes, &mut bn_layer);
            h = g.relu(h);
            h = g.max_pool_2x2(h);
            let w1 = param_node(&mut g, 3, &mut param_ids);
            h = g.conv2d(h, w1, Padding::Same);
            h = add_bn(&mut g, h, 4, &mut param_ids, &mut bn_nodes, &mut bn_layer);
            h = g.relu(h);
            h = g.max_pool_2x2(h);
            let feat = c2 * (height / 4) * (width / 4);
            let _ = c1;
            h = g.reshape(h, &[0, feat]);
            let wh = param_node(&mut g, 6, &mut param_ids);
            let bh = param_node(&mut g, 7, &mut param_ids);
            h = g.matmul(h, wh);
            g.add_row(h, bh)
        }
    };
    g.mark_output("logits", logits);

    let loss = with_loss.then(|| {
        let y = g.input("y");
        let l = g.softmax_cross_entropy(logits, y);
        g.mark_output("loss", l);
        l
    });

    BuiltModel {
        graph: g,
        param_ids,
        bn_nodes,
        logits,
        loss,
    }
}

fn bind_params(params: &ModelParams, built: &BuiltModel, bindings: &mut BTreeMap<String, Tensor>) {
    for (idx, id) in built.param_ids.iter().enumerate() {
        if id.is_some() {
            bindings.insert(params.meta[idx].name.clone(), params.tensors[idx].clone());
        }
    }
}

// ---------------------------------------------------------------------------
// model-level passes
// ---------------------------------------------------------------------------

/// Forward a batch through the model.
///
/// In `Train` phase the selected branch's running statistics are updated
/// (returned as a new state); `Eval` reads running statistics and returns
/// the state unchanged.
pub fn model_forward(
    params: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
    branch: BnBranch,
    phase: Phase,
) -> Result<(Tensor, DualBatchNormState)> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall(0));
    }
    if phase == Phase::Train && batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    batch.check_labels(params.num_classes())?;

    let built = build_model_graph(params, bn, branch, phase, false, false);
    let mut new_bn = bn.clone();
    let z = params.num_classes();
    let mut logits = Tensor::zeros(&[batch.len(), z]);
    let mut bindings = BTreeMap::new();
    for (start, end) in chunk_ranges(batch.len()) {
        let chunk = batch.slice(start, end);
        bindings.insert("x".to_string(), chunk.inputs);
        // Train-phase BN reads batch statistics, so the graph built from the
        // initial state stays valid across chunks; Eval stats are constants.
        let eval = built.graph.forward(&bindings)?;
        if phase == Phase::Train {
            for (layer, &node) in built.bn_nodes.iter().enumerate() {
                let (mean, var) = eval.batch_stats(node).expect("train BN node");
                new_bn.update_branch(layer, branch, mean, var);
            }
        }
        let out = eval.value(built.logits);
        logits.data_mut()[start * z..end * z].copy_from_slice(out.data());
    }
    Ok((logits, new_bn))
}

/// Outcome of one supervised pass (one branch, train phase).
struct PassResult {
    mean_loss: f64,
    grads: GradientSet,
    bn: DualBatchNormState,
}

/// Mean cross-entropy and parameter gradients of `batch` through `branch`,
/// updating that branch's running statistics. Chunked; contributions are
/// merged in chunk order with weights `chunk_len / batch_len`.
fn supervised_pass(
    params: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
    branch: BnBranch,
) -> Result<PassResult> {
    let built = build_model_graph(params, bn, branch, Phase::Train, true, true);
    let loss_node = built.loss.unwrap();
    let z = params.num_classes();
    let n = batch.len();
    let mut total_loss = 0.0;
    let mut grads = GradientSet::zeros_like(params);
    let mut new_bn = bn.clone();
    let mut bindings = BTreeMap::new();
    bind_params(params, &built, &mut bindings);
    for (start, end) in chunk_ranges(n) {
        let chunk = batch.slice(start, end);
        let weight = (end - start) as f64 / n as f64;
        bindings.insert("y".to_string(), chunk.onehot(z));
        bindings.insert("x".to_string(), chunk.inputs);
        let eval = built.graph.forward(&bindings)?;
        for (layer, &node) in built.bn_nodes.iter().enumerate() {
            let (mean, var) = eval.batch_stats(node).expect("train BN node");
            new_bn.update_branch(layer, branch, mean, var);
        }
        total_loss += weight * eval.value(loss_node).item();
        let g = built.graph.backward(&eval, loss_node)?;
        accumulate_param_grads(&built, &g, weight, &mut grads);
    }
    Ok(PassResult {
        mean_loss: total_loss,
        grads,
        bn: new_bn,
    })
}

fn accumulate_param_grads(built: &BuiltModel, g: &Gradients, weight: f64, out: &mut GradientSet) {
    for (idx, id) in built.param_ids.iter().enumerate() {
        if let Some(id) = id {
            if let Some(t) = g.get(*id) {
                for (o, v) in out.tensors[idx].data_mut().iter_mut().zip(t.data()) {
                    *o += weight * v;
                }
            }
        }
    }
}

/// Combined clean + adversarial loss and gradients.
pub struct CombinedLoss {
    /// `½·(mean clean CE + mean adversarial CE)`.
    pub loss: f64,
    pub clean_loss: f64,
    pub adv_loss: f64,
    /// `½·(∇ clean + ∇ adv)` over all model parameters.
    pub grads: GradientSet,
    /// Main branch updated by the clean pass, aux branch by the adversarial.
    pub bn: DualBatchNormState,
}

/// The two-branch training objective: clean batch through the main branch,
/// adversarial batch through the auxiliary branch, each halved.
///
/// With `parallel`, the two passes run on separate threads; they share only
/// immutable inputs and merge in a fixed order, so results are bitwise
/// identical to the sequential path.
pub fn loss_and_grads(
    params: &ModelParams,
    bn: &DualBatchNormState,
    clean: &LabeledBatch,
    adv: &LabeledBatch,
    parallel: bool,
) -> Result<CombinedLoss> {
    if clean.len() != adv.len() {
        return Err(Error::BatchSizeMismatch {
            clean: clean.len(),
            adv: adv.len(),
        });
    }
    if clean.len() < 2 {
        return Err(Error::BatchTooSmall(clean.len()));
    }
    clean.check_labels(params.num_classes())?;
    adv.check_labels(params.num_classes())?;

    let (clean_res, adv_res) = if parallel {
        std::thread::scope(|s| {
            let h = s.spawn(|| supervised_pass(params, bn, adv, BnBranch::Aux));
            let c = supervised_pass(params, bn, clean, BnBranch::Main);
            (c, h.join().expect("adversarial pass panicked"))
        })
    } else {
        (
            supervised_pass(params, bn, clean, BnBranch::Main),
            supervised_pass(params, bn, adv, BnBranch::Aux),
        )
    };
    let clean_res = clean_res?;
    let adv_res = adv_res?;

    let mut grads = clean_res.grads;
    grads.scale(0.5);
    grads.add_scaled(&adv_res.grads, 0.5);

    // Each pass updated one branch of its own clone; merge them.
    let mut bn_out = clean_res.bn;
    for (l, src) in bn_out.layers.iter_mut().zip(&adv_res.bn.layers) {
        l.aux_mean.copy_from_slice(&src.aux_mean);
        l.aux_var.copy_from_slice(&src.aux_var);
    }

    Ok(CombinedLoss {
        loss: 0.5 * (clean_res.mean_loss + adv_res.mean_loss),
        clean_loss: clean_res.mean_loss,
        adv_loss: adv_res.mean_loss,
        grads,
        bn: bn_out,
    })
}

/// Clean-only objective (vanilla protocol): mean CE through the main branch,
/// not halved.
pub fn clean_loss_and_grads(
    params: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
) -> Result<(f64, GradientSet, DualBatchNormState)> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    batch.check_labels(params.num_classes())?;
    let res = supervised_pass(params, bn, batch, BnBranch::Main)?;
    Ok((res.mean_loss, res.grads, res.bn))
}

/// Mean CE of `batch` through the chosen branch using *running* statistics,
/// plus the gradient with respect to the inputs. Parameters are baked in as
/// constants so backward skips every weight-gradient path. Used by the
/// adversary.
pub fn input_gradient(
    params: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
    branch: BnBranch,
) -> Result<(f64, Tensor)> {
    batch.check_labels(params.num_classes())?;
    let built = build_model_graph(params, bn, branch, Phase::Eval, false, true);
    let loss_node = built.loss.unwrap();
    let x_id = built.graph.input_id("x").unwrap();
    let z = params.num_classes();
    let n = batch.len();
    let mut dx = Tensor::zeros(batch.inputs.shape());
    let mut total_loss = 0.0;
    let mut bindings = BTreeMap::new();
    let per = batch.inputs.numel() / n;
    for (start, end) in chunk_ranges(n) {
        let chunk = batch.slice(start, end);
        let weight = (end - start) as f64 / n as f64;
        bindings.insert("y".to_string(), chunk.onehot(z));
        bindings.insert("x".to_string(), chunk.inputs);
        let eval = built.graph.forward(&bindings)?;
        total_loss += weight * eval.value(loss_node).item();
        let g = built.graph.backward(&eval, loss_node)?;
        let gx = g.get(x_id).expect("input gradient");
        for (o, v) in dx.data_mut()[start * per..end * per]
            .iter_mut()
            .zip(gx.data())
        {
            *o += weight * v;
        }
    }
    Ok((total_loss, dx))
}

/// Fraction of correctly classified examples (main branch, eval phase).
pub fn eval_accuracy(
    params: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
) -> Result<f64> {
    let (logits, _) = model_forward(params, bn, batch, BnBranch::Main, Phase::Eval)?;
    let z = params.num_classes();
    let mut correct = 0usize;
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = &logits.data()[i * z..(i + 1) * z];
        let mut best = 0;
        for j in 1..z {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_batch(n: usize, d: usize, z: usize, seed: u64) -> LabeledBatch {
        let mut rng = stream(seed, &[99]);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..z)).collect();
        LabeledBatch::new(Tensor::new(vec![n, d], data).unwrap(), labels).unwrap()
    }

    fn cnn_batch(n: usize, c: usize, h: usize, w: usize, z: usize, seed: u64) -> LabeledBatch {
        let mut rng = stream(seed, &[98]);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..z)).collect();
        LabeledBatch::new(Tensor::new(vec![n, c, h, w], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn chunking_never_leaves_a_singleton() {
        assert_eq!(chunk_ranges(5), vec![(0, 5)]);
        assert_eq!(chunk_ranges(CHUNK), vec![(0, CHUNK)]);
        assert_eq!(chunk_ranges(CHUNK + 1), vec![(0, CHUNK + 1)]);
        assert_eq!(
            chunk_ranges(2 * CHUNK + 1),
            vec![(0, CHUNK), (CHUNK, 2 * CHUNK + 1)]
        );
        assert_eq!(
            chunk_ranges(CHUNK + 2),
            vec![(0, CHUNK), (CHUNK, CHUNK + 2)]
        );
    }

    #[test]
    fn train_forward_updates_only_selected_branch() {
        let spec = ModelSpec::cnn_preset(1, 8, 8, 3);
        let params = ModelParams::init(&spec, 1).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let batch = cnn_batch(4, 1, 8, 8, 3, 2);
        let (_, bn_after) = model_forward(&params, &bn, &batch, BnBranch::Main, Phase::Train).unwrap();
        for (l0, l1) in bn.layers.iter().zip(&bn_after.layers) {
            assert_eq!(l0.aux_mean, l1.aux_mean);
            assert_eq!(l0.aux_var, l1.aux_var);
            assert_ne!(l0.main_mean, l1.main_mean);
        }
    }

    #[test]
    fn eval_forward_mutates_nothing() {
        let spec = ModelSpec::cnn_preset(1, 8, 8, 3);
        let params = ModelParams::init(&spec, 1).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let batch = cnn_batch(4, 1, 8, 8, 3, 2);
        let (_, bn_after) = model_forward(&params, &bn, &batch, BnBranch::Main, Phase::Eval).unwrap();
        assert_eq!(bn, bn_after);
    }

    #[test]
    fn fresh_branches_give_identical_logits() {
        // same batch through Main and Aux on freshly initialized identical stats
        let spec = ModelSpec::cnn_preset(1, 8, 8, 3);
        let params = ModelParams::init(&spec, 5).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let batch = cnn_batch(4, 1, 8, 8, 3, 7);
        let (lm, _) = model_forward(&params, &bn, &batch, BnBranch::Main, Phase::Train).unwrap();
        let (la, _) = model_forward(&params, &bn, &batch, BnBranch::Aux, Phase::Train).unwrap();
        assert_eq!(lm.data(), la.data());
    }

    #[test]
    fn train_rejects_batch_of_one() {
        let spec = ModelSpec::mlp_preset(4, 2);
        let params = ModelParams::init(&spec, 1).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let batch = toy_batch(1, 4, 2, 3);
        assert!(matches!(
            model_forward(&params, &bn, &batch, BnBranch::Main, Phase::Train),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let spec = ModelSpec::mlp_preset(4, 2);
        let params = ModelParams::init(&spec, 1).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let batch = LabeledBatch::new(Tensor::zeros(&[2, 4]), vec![0, 5]).unwrap();
        assert!(matches!(
            model_forward(&params, &bn, &batch, BnBranch::Main, Phase::Eval),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn duplicate_batch_equals_plain_clean_loss() {
        // adv == clean with identical branch states: loss == clean CE
        let spec = ModelSpec::mlp_preset(6, 3);
        let params = ModelParams::init(&spec, 11).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let batch = toy_batch(8, 6, 3, 13);
        let combined = loss_and_grads(&params, &bn, &batch, &batch, false).unwrap();
        let (clean_only, _, _) = clean_loss_and_grads(&params, &bn, &batch).unwrap();
        assert!((combined.loss - clean_only).abs() < 1e-15);
        assert!((combined.clean_loss - combined.adv_loss).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_clean_half_is_ln_10() {
        // zeroed weights give uniform logits; clean half of the loss = ln 10
        let spec = ModelSpec::Mlp {
            input_dim: 4,
            hidden: vec![8],
            num_classes: 10,
        };
        let mut params = ModelParams::init(&spec, 1).unwrap();
        for t in &mut params.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bn = DualBatchNormState::init(&spec);
        let batch = toy_batch(6, 4, 10, 3);
        let combined = loss_and_grads(&params, &bn, &batch, &batch, false).unwrap();
        assert!((combined.clean_loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_losses_are_bitwise_equal() {
        let spec = ModelSpec::cnn_preset(1, 8, 8, 3);
        let params = ModelParams::init(&spec, 21).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let clean = cnn_batch(6, 1, 8, 8, 3, 22);
        let adv = cnn_batch(6, 1, 8, 8, 3, 23);
        let a = loss_and_grads(&params, &bn, &clean, &adv, false).unwrap();
        let b = loss_and_grads(&params, &bn, &clean, &adv, true).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads.tensors, b.grads.tensors);
        assert_eq!(a.bn, b.bn);
    }

    #[test]
    fn loss_symmetry_under_role_and_branch_swap() {
        let spec = ModelSpec::cnn_preset(1, 8, 8, 3);
        let params = ModelParams::init(&spec, 31).unwrap();
        let mut bn = DualBatchNormState::init(&spec);
        // make the two branches' states differ
        for l in &mut bn.layers {
            for v in &mut l.aux_mean {
                *v = 0.3;
            }
        }
        let a = cnn_batch(6, 1, 8, 8, 3, 32);
        let b = cnn_batch(6, 1, 8, 8, 3, 33);
        let mut bn_swapped = bn.clone();
        for l in &mut bn_swapped.layers {
            std::mem::swap(&mut l.main_mean, &mut l.aux_mean);
            std::mem::swap(&mut l.main_var, &mut l.aux_var);
        }
        let l1 = loss_and_grads(&params, &bn, &a, &b, false).unwrap();
        let l2 = loss_and_grads(&params, &bn_swapped, &b, &a, false).unwrap();
        // train-phase BN uses batch statistics, so the swap is exact
        assert_eq!(l1.loss, l2.loss);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let spec = ModelSpec::mlp_preset(4, 2);
        let params = ModelParams::init(&spec, 1).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let a = toy_batch(4, 4, 2, 1);
        let b = toy_batch(6, 4, 2, 2);
        assert!(matches!(
            loss_and_grads(&params, &bn, &a, &b, false),
            Err(Error::BatchSizeMismatch { clean: 4, adv: 6 })
        ));
    }

    #[test]
    fn branch_isolation_over_a_sequence_of_main_batches() {
        let spec = ModelSpec::cnn_preset(1, 8, 8, 3);
        let params = ModelParams::init(&spec, 41).unwrap();
        let mut bn = DualBatchNormState::init(&spec);
        let aux_before: Vec<_> = bn
            .layers
            .iter()
            .map(|l| (l.aux_mean.clone(), l.aux_var.clone()))
            .collect();
        for s in 0..5 {
            let batch = cnn_batch(4, 1, 8, 8, 3, 100 + s);
            let (_, next) = model_forward(&params, &bn, &batch, BnBranch::Main, Phase::Train).unwrap();
            bn = next;
        }
        for (l, (am, av)) in bn.layers.iter().zip(&aux_before) {
            assert_eq!(&l.aux_mean, am);
            assert_eq!(&l.aux_var, av);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        use crate::gradcheck::finite_diff_check;
        let spec = ModelSpec::Mlp {
            input_dim: 5,
            hidden: vec![7],
            num_classes: 3,
        };
        let params = ModelParams::init(&spec, 51).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let clean = toy_batch(4, 5, 3, 52);
        let adv = toy_batch(4, 5, 3, 53);
        let combined = loss_and_grads(&params, &bn, &clean, &adv, false).unwrap();
        for (idx, t) in params.tensors.iter().enumerate() {
            let err = finite_diff_check(
                |probe| {
                    let mut p = params.clone();
                    p.tensors[idx] = probe.clone();
                    Ok(loss_and_grads(&p, &bn, &clean, &adv, false)?.loss)
                },
                t,
                1e-5,
                combined.grads.tensors[idx].data(),
            )
            .unwrap();
            assert!(err <= 1e-6, "param {idx} rel err {err}");
        }
    }
}
