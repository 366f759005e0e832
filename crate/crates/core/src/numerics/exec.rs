use std::collections::BTreeMap;

use thiserror::Error;

use super::kernels::{bias_grad, conv2d, conv2d_transpose, conv2d_weight_grad};
use super::params::{ParamRole, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::analysis::{infer_shapes_multi, AnalysisError};
use crate::ir::{Graph, NodeId, PrimOp, TensorShape, UpsampleMode};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error(transparent)]
    Shape(#[from] AnalysisError),
    #[error("graph has {expected} inputs, {got} tensors supplied")]
    InputCount { expected: usize, got: usize },
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: TensorShape,
        got: TensorShape,
    },
    #[error("parameters for {0} are missing or do not match its attributes")]
    BadParams(NodeId),
    #[error("tape does not belong to this graph and parameter state")]
    StaleTape,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("{got} labels supplied for {expected} output positions")]
    LabelCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses batch statistics.
    Train,
    /// Batch normalization uses running statistics.
    Eval,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Activations recorded by [`forward`] for a later [`backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    mode: Mode,
    values: Vec<Tensor<T>>,
    bn: BTreeMap<NodeId, BnCache<T>>,
    argmax: BTreeMap<NodeId, Vec<usize>>,
    order: Vec<NodeId>,
    params_version: u64,
    graph_len: usize,
}

impl<T: Scalar> Tape<T> {
    /// Flags `id` and every node reachable from it.
    pub(crate) fn downstream_of(&self, graph: &Graph, id: NodeId) -> Vec<bool> {
        let mut dirty = vec![false; graph.len()];
        dirty[id.0] = true;
        for &n in &self.order {
            if graph
                .node(n)
                .is_some_and(|node| node.inputs.iter().any(|i| dirty[i.0]))
            {
                dirty[n.0] = true;
            }
        }
        dirty
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Per-channel batch mean and biased variance seen by a batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        self.bn
            .get(&id)
            .map(|c| (c.mean.as_slice(), c.var.as_slice()))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    pub outputs: Vec<Tensor<T>>,
    pub tape: Tape<T>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    pub inputs: Vec<Tensor<T>>,
}

fn weights<T: Scalar>(params: &ParamStore<T>, id: NodeId, role: ParamRole) -> &[T] {
    params
        .values(id, role)
        .expect("layout checked before execution")
}

fn plane_channel(idx: usize, s: TensorShape) -> usize {
    (idx / (s.height * s.width)) % s.channels
}

fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Tensor<T>, BnCache<T>) {
    let s = x.shape();
    let eps = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = plane_channel(i, s);
            (v - mean[c]) * inv_std[c]
        })
        .collect();
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let c = plane_channel(i, s);
            scale[c] * h + shift[c]
        })
        .collect();
    let cache = BnCache {
        xhat,
        inv_std,
        mean: mean.to_vec(),
        var: var.to_vec(),
    };
    (Tensor::from_vec(s, y).unwrap(), cache)
}

fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let m = T::from_count(s.batch * s.height * s.width);
    let mut mean = vec![T::zero(); s.channels];
    for (i, &v) in x.data().iter().enumerate() {
        mean[plane_channel(i, s)] += v;
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![T::zero(); s.channels];
    for (i, &v) in x.data().iter().enumerate() {
        let c = plane_channel(i, s);
        var[c] += (v - mean[c]) * (v - mean[c]);
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn max_pool<T: Scalar>(
    x: &Tensor<T>,
    out: TensorShape,
    kernel: usize,
    stride: usize,
) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let mut y = Tensor::zeros(out);
    let mut arg = vec![0; out.numel()];
    for n in 0..s.batch {
        for c in 0..s.channels {
            for i in 0..out.height {
                for j in 0..out.width {
                    let mut best = None::<(T, usize)>;
                    for hi in i * stride..(i * stride + kernel).min(s.height) {
                        for wj in j * stride..(j * stride + kernel).min(s.width) {
                            let idx = x.offset(n, c, hi, wj);
                            let v = x.data()[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("ceil-mode windows start inside the input");
                    let o = y.offset(n, c, i, j);
                    y.data_mut()[o] = v;
                    arg[o] = idx;
                }
            }
        }
    }
    (y, arg)
}

fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    for n in 0..s.batch {
        for h in 0..s.height {
            for w in 0..s.width {
                let idx: Vec<usize> = (0..s.channels).map(|c| x.offset(n, c, h, w)).collect();
                let max = idx
                    .iter()
                    .map(|&i| x.data()[i])
                    .fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = idx.iter().map(|&i| (x.data()[i] - max).exp()).collect();
                let total: T = exps.iter().copied().sum();
                for (&i, e) in idx.iter().zip(exps) {
                    y.data_mut()[i] = e / total;
                }
            }
        }
    }
    y
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &[T], b: Option<&[T]>, out: TensorShape) -> Tensor<T> {
    let s = x.shape();
    let mut y = Tensor::zeros(out);
    for n in 0..s.batch {
        for h in 0..s.height {
            for wj in 0..s.width {
                for o in 0..out.channels {
                    let mut acc = b.map_or(T::zero(), |b| b[o]);
                    for i in 0..s.channels {
                        acc += w[o * s.channels + i] * x.at(n, i, h, wj);
                    }
                    let off = y.offset(n, o, h, wj);
                    y.data_mut()[off] = acc;
                }
            }
        }
    }
    y
}

fn check_inputs<T: Scalar>(graph: &Graph, inputs: &[Tensor<T>]) -> Result<(), ExecError> {
    if inputs.len() != graph.inputs().len() {
        return Err(ExecError::InputCount {
            expected: graph.inputs().len(),
            got: inputs.len(),
        });
    }
    for (&id, t) in graph.inputs().iter().zip(inputs) {
        if let Some(PrimOp::Input { shape }) = graph.node(id).map(|n| &n.op) {
            if shape.channels != t.shape().channels || !t.shape().is_valid() {
                return Err(ExecError::ShapeMismatch {
                    what: format!("input {id}"),
                    expected: *shape,
                    got: t.shape(),
                });
            }
        }
    }
    Ok(())
}

/// Evaluates every node. Parameters are not modified; see
/// [`update_running_stats`].
pub fn forward<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mode: Mode,
) -> Result<ForwardResult<T>, ExecError> {
    forward_impl(graph, params, inputs, mode, None, None)
}

/// Like [`forward`], but every ReLU and max pool takes the branch recorded
/// in `reference`: the ReLU gate comes from the reference pre-activation
/// sign and the pooled element from the reference argmax. This evaluates
/// the smooth piece of the network that `reference` lies on.
pub fn forward_on_branches<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mode: Mode,
    reference: &Tape<T>,
) -> Result<ForwardResult<T>, ExecError> {
    if reference.graph_len != graph.len() {
        return Err(ExecError::StaleTape);
    }
    forward_impl(graph, params, inputs, mode, Some(reference), None)
}

/// Re-evaluates only the nodes flagged in `dirty`, copying every other
/// value from `base`. The caller guarantees clean nodes are unaffected.
pub(crate) fn forward_partial<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mode: Mode,
    branches: Option<&Tape<T>>,
    base: &Tape<T>,
    dirty: &[bool],
) -> Result<ForwardResult<T>, ExecError> {
    if base.graph_len != graph.len() || dirty.len() != graph.len() {
        return Err(ExecError::StaleTape);
    }
    forward_impl(graph, params, inputs, mode, branches, Some((base, dirty)))
}

fn forward_impl<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mode: Mode,
    reference: Option<&Tape<T>>,
    reuse: Option<(&Tape<T>, &[bool])>,
) -> Result<ForwardResult<T>, ExecError> {
    check_inputs(graph, inputs)?;
    let shapes = infer_shapes_multi(graph, &inputs.iter().map(Tensor::shape).collect::<Vec<_>>())?;
    if let Some(bad) = params.layout_problem(graph) {
        return Err(ExecError::BadParams(bad));
    }
    let order = graph.topo_order().map_err(AnalysisError::from)?;
    let input_pos: BTreeMap<NodeId, usize> = graph
        .inputs()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();

    let mut values: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    let mut bn = BTreeMap::new();
    let mut argmax = BTreeMap::new();
    for &id in &order {
        if let Some((base, dirty)) = reuse {
            if !dirty[id.0] {
                values[id.0] = Some(base.values[id.0].clone());
                if let Some(c) = base.bn.get(&id) {
                    bn.insert(id, c.clone());
                }
                if let Some(a) = base.argmax.get(&id) {
                    argmax.insert(id, a.clone());
                }
                continue;
            }
        }
        let node = graph.node(id).unwrap();
        let args: Vec<&Tensor<T>> = node
            .inputs
            .iter()
            .map(|i| values[i.0].as_ref().unwrap())
            .collect();
        let out = shapes[id];
        let y = match &node.op {
            PrimOp::Input { .. } => inputs[input_pos[&id]].clone(),
            PrimOp::Conv(a) => {
                let bias = a.has_bias.then(|| weights(params, id, ParamRole::Bias));
                conv2d(args[0], weights(params, id, ParamRole::Weight), bias, a)
            }
            PrimOp::BatchNorm { epsilon, .. } => {
                let scale = weights(params, id, ParamRole::Scale);
                let shift = weights(params, id, ParamRole::Shift);
                let (mean, var) = match mode {
                    Mode::Train => channel_moments(args[0]),
                    Mode::Eval => (
                        weights(params, id, ParamRole::RunningMean).to_vec(),
                        weights(params, id, ParamRole::RunningVar).to_vec(),
                    ),
                };
                let (y, cache) = batch_norm(args[0], scale, shift, &mean, &var, *epsilon);
                bn.insert(id, cache);
                y
            }
            PrimOp::Relu => match reference {
                None => args[0].map(|v| v.max(T::zero())),
                Some(r) => {
                    let gate = r.values[node.inputs[0].0].data();
                    let data = args[0].data().iter().zip(gate).map(|(&v, &g)| {
                        if g > T::zero() {
                            v
                        } else {
                            T::zero()
                        }
                    });
                    Tensor::from_vec(out, data.collect()).unwrap()
                }
            },
            PrimOp::MaxPool { kernel, stride, .. } => match reference.map(|r| &r.argmax[&id]) {
                None => {
                    let (y, arg) = max_pool(args[0], out, *kernel, *stride);
                    argmax.insert(id, arg);
                    y
                }
                Some(arg) => {
                    let data = arg.iter().map(|&i| args[0].data()[i]).collect();
                    argmax.insert(id, arg.clone());
                    Tensor::from_vec(out, data).unwrap()
                }
            },
            PrimOp::GlobalAvgPool => {
                let s = args[0].shape();
                let plane = s.height * s.width;
                let data = args[0]
                    .data()
                    .chunks(plane)
                    .map(|c| c.iter().copied().sum::<T>() / T::from_count(plane))
                    .collect();
                Tensor::from_vec(out, data).unwrap()
            }
            PrimOp::Linear { has_bias, .. } => {
                let b = has_bias.then(|| weights(params, id, ParamRole::Bias));
                linear(args[0], weights(params, id, ParamRole::Weight), b, out)
            }
            PrimOp::Concat => {
                let mut y = Tensor::zeros(out);
                let plane = out.height * out.width;
                for n in 0..out.batch {
                    let mut dst = n * out.channels * plane;
                    for a in &args {
                        let len = a.shape().channels * plane;
                        let src = n * len;
                        y.data_mut()[dst..dst + len].copy_from_slice(&a.data()[src..src + len]);
                        dst += len;
                    }
                }
                y
            }
            PrimOp::Add => {
                let mut y = args[0].clone();
                for a in &args[1..] {
                    y.add_assign(a);
                }
                y
            }
            PrimOp::Upsample(u) => conv2d_transpose(
                args[0],
                weights(params, id, ParamRole::Weight),
                &u.as_conv(),
                out,
            ),
            PrimOp::Softmax => softmax(args[0]),
            PrimOp::Output => args[0].clone(),
        };
        debug_assert_eq!(y.shape(), out);
        values[id.0] = Some(y);
    }
    let values: Vec<Tensor<T>> = values
        .into_iter()
        .map(|v| v.expect("all nodes evaluated"))
        .collect();
    let outputs = graph
        .outputs()
        .iter()
        .map(|o| values[o.0].clone())
        .collect();
    let tape = Tape {
        mode,
        values,
        bn,
        argmax,
        order,
        params_version: params.version(),
        graph_len: graph.len(),
    };
    Ok(ForwardResult { outputs, tape })
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reverse-mode gradients of `sum_k <outputs[k], output_grads[k]>`.
pub fn backward<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    tape: &Tape<T>,
    output_grads: &[Tensor<T>],
) -> Result<Gradients<T>, ExecError> {
    if tape.params_version != params.version() || tape.graph_len != graph.len() {
        return Err(ExecError::StaleTape);
    }
    if output_grads.len() != graph.outputs().len() {
        return Err(ExecError::InputCount {
            expected: graph.outputs().len(),
            got: output_grads.len(),
        });
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    for (&o, g) in graph.outputs().iter().zip(output_grads) {
        let expected = tape.values[o.0].shape();
        if g.shape() != expected {
            return Err(ExecError::ShapeMismatch {
                what: format!("gradient for {o}"),
                expected,
                got: g.shape(),
            });
        }
        accumulate(&mut grads[o.0], g.clone());
    }
    let mut pgrads = params.zeros_like();

    for &id in tape.order.iter().rev() {
        let Some(dy) = grads[id.0].take() else {
            continue;
        };
        let node = graph.node(id).unwrap();
        let x = |k: usize| &tape.values[node.inputs[k].0];
        let mut send = |k: usize, g: Tensor<T>| accumulate(&mut grads[node.inputs[k].0], g);
        match &node.op {
            PrimOp::Input { .. } => {
                grads[id.0] = Some(dy);
            }
            PrimOp::Conv(a) => {
                let w = weights(params, id, ParamRole::Weight);
                let dw = conv2d_weight_grad(x(0), &dy, a);
                pgrads
                    .values_mut(id, ParamRole::Weight)
                    .unwrap()
                    .copy_from_slice(&dw);
                if a.has_bias {
                    pgrads
                        .values_mut(id, ParamRole::Bias)
                        .unwrap()
                        .copy_from_slice(&bias_grad(&dy));
                }
                send(0, conv2d_transpose(&dy, w, a, x(0).shape()));
            }
            PrimOp::BatchNorm { channels, .. } => {
                let cache = &tape.bn[&id];
                let scale = weights(params, id, ParamRole::Scale);
                let s = dy.shape();
                let mut dgamma = vec![T::zero(); *channels];
                let mut dbeta = vec![T::zero(); *channels];
                for (i, &g) in dy.data().iter().enumerate() {
                    let c = plane_channel(i, s);
                    dgamma[c] += g * cache.xhat[i];
                    dbeta[c] += g;
                }
                let dx: Vec<T> = match tape.mode {
                    Mode::Eval => dy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| {
                            let c = plane_channel(i, s);
                            g * scale[c] * cache.inv_std[c]
                        })
                        .collect(),
                    // dxhat = scale * dy, so the usual mean terms reduce to dbeta and dgamma.
                    Mode::Train => {
                        let m = T::from_count(s.batch * s.height * s.width);
                        dy.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| {
                                let c = plane_channel(i, s);
                                scale[c]
                                    * cache.inv_std[c]
                                    * (g - dbeta[c] / m - cache.xhat[i] * dgamma[c] / m)
                            })
                            .collect()
                    }
                };
                pgrads
                    .values_mut(id, ParamRole::Scale)
                    .unwrap()
                    .copy_from_slice(&dgamma);
                pgrads
                    .values_mut(id, ParamRole::Shift)
                    .unwrap()
                    .copy_from_slice(&dbeta);
                send(0, Tensor::from_vec(s, dx).unwrap());
            }
            PrimOp::Relu => {
                let y = &tape.values[id.0];
                let dx = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                send(0, Tensor::from_vec(dy.shape(), dx).unwrap());
            }
            PrimOp::MaxPool { .. } => {
                let mut dx = Tensor::zeros(x(0).shape());
                for (&src, &g) in tape.argmax[&id].iter().zip(dy.data()) {
                    dx.data_mut()[src] += g;
                }
                send(0, dx);
            }
            PrimOp::GlobalAvgPool => {
                let s = x(0).shape();
                let plane = s.height * s.width;
                let inv = T::one() / T::from_count(plane);
                let dx = dy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                    .collect();
                send(0, Tensor::from_vec(s, dx).unwrap());
            }
            PrimOp::Linear {
                in_features,
                out_features,
                has_bias,
            } => {
                let w = weights(params, id, ParamRole::Weight);
                let xs = x(0).shape();
                let mut dx = Tensor::zeros(xs);
                let mut dw = vec![T::zero(); in_features * out_features];
                let mut db = vec![T::zero(); *out_features];
                for n in 0..xs.batch {
                    for h in 0..xs.height {
                        for wj in 0..xs.width {
                            for o in 0..*out_features {
                                let g = dy.at(n, o, h, wj);
                                db[o] += g;
                                for i in 0..*in_features {
                                    dw[o * in_features + i] += g * x(0).at(n, i, h, wj);
                                    let off = dx.offset(n, i, h, wj);
                                    dx.data_mut()[off] += g * w[o * in_features + i];
                                }
                            }
                        }
                    }
                }
                pgrads
                    .values_mut(id, ParamRole::Weight)
                    .unwrap()
                    .copy_from_slice(&dw);
                if *has_bias {
                    pgrads
                        .values_mut(id, ParamRole::Bias)
                        .unwrap()
                        .copy_from_slice(&db);
                }
                send(0, dx);
            }
            PrimOp::Concat => {
                let s = dy.shape();
                let plane = s.height * s.width;
                let mut start = 0;
                for k in 0..node.inputs.len() {
                    let xs = x(k).shape();
                    let len = xs.channels * plane;
                    let mut part = Vec::with_capacity(xs.numel());
                    for n in 0..s.batch {
                        let off = n * s.channels * plane + start;
                        part.extend_from_slice(&dy.data()[off..off + len]);
                    }
                    send(k, Tensor::from_vec(xs, part).unwrap());
                    start += len;
                }
            }
            PrimOp::Add => {
                for k in 0..node.inputs.len() {
                    send(k, dy.clone());
                }
            }
            PrimOp::Upsample(u) => {
                let a = u.as_conv();
                let w = weights(params, id, ParamRole::Weight);
                if u.mode == UpsampleMode::LearnedTransposedConv {
                    let dw = conv2d_weight_grad(&dy, x(0), &a);
                    pgrads
                        .values_mut(id, ParamRole::Weight)
                        .unwrap()
                        .copy_from_slice(&dw);
                }
                send(0, conv2d(&dy, w, None, &a));
            }
            PrimOp::Softmax => {
                let y = &tape.values[id.0];
                let s = y.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.batch {
                    for h in 0..s.height {
                        for w in 0..s.width {
                            let dot: T = (0..s.channels)
                                .map(|c| y.at(n, c, h, w) * dy.at(n, c, h, w))
                                .sum();
                            for c in 0..s.channels {
                                let off = y.offset(n, c, h, w);
                                dx.data_mut()[off] = y.data()[off] * (dy.data()[off] - dot);
                            }
                        }
                    }
                }
                send(0, dx);
            }
            PrimOp::Output => send(0, dy),
        }
    }

    let inputs = graph
        .inputs()
        .iter()
        .map(|&i| {
            grads[i.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(tape.values[i.0].shape()))
        })
        .collect();
    Ok(Gradients {
        params: pgrads,
        inputs,
    })
}

/// Folds the batch statistics of a Train-mode tape into the running
/// statistics with momentum [`BN_MOMENTUM`].
pub fn update_running_stats<T: Scalar>(params: &mut ParamStore<T>, tape: &Tape<T>) {
    if tape.mode != Mode::Train {
        return;
    }
    let m = T::from_f64_lossy(BN_MOMENTUM);
    for (&id, cache) in &tape.bn {
        for (role, batch) in [
            (ParamRole::RunningMean, &cache.mean),
            (ParamRole::RunningVar, &cache.var),
        ] {
            if let Some(run) = params.values_mut(id, role) {
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

/// Mean negative log-likelihood of `labels` under per-position class
/// probabilities, one label per (batch, row, column) in row-major order.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T, ExecError> {
    let s = probs.shape();
    let positions = s.batch * s.height * s.width;
    if labels.len() != positions {
        return Err(ExecError::LabelCount {
            expected: positions,
            got: labels.len(),
        });
    }
    let mut total = T::zero();
    for (p, &label) in labels.iter().enumerate() {
        if label >= s.channels {
            return Err(ExecError::BadLabel {
                label,
                classes: s.channels,
            });
        }
        let (n, h, w) = (
            p / (s.height * s.width),
            (p / s.width) % s.height,
            p % s.width,
        );
        total -= probs.at(n, label, h, w).ln();
    }
    Ok(total / T::from_count(positions))
}

fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let s = probs.shape();
    let mut g = Tensor::zeros(s);
    let inv = T::one() / T::from_count(labels.len());
    for (p, &label) in labels.iter().enumerate() {
        let (n, h, w) = (
            p / (s.height * s.width),
            (p / s.width) % s.height,
            p % s.width,
        );
        let off = probs.offset(n, label, h, w);
        g.data_mut()[off] = -inv / probs.data()[off];
    }
    g
}

/// One plain gradient-descent step on the cross-entropy of the first graph
/// output, which must be a probability map. Returns the loss before the
/// step. Running statistics are updated from the same batch.
pub fn sgd_step<T: Scalar>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    input: &Tensor<T>,
    labels: &[usize],
    lr: T,
) -> Result<T, ExecError> {
    let fwd = forward(graph, params, std::slice::from_ref(input), Mode::Train)?;
    let probs = &fwd.outputs[0];
    let loss = cross_entropy(probs, labels)?;
    let mut seeds: Vec<Tensor<T>> = fwd
        .outputs
        .iter()
        .map(|o| Tensor::zeros(o.shape()))
        .collect();
    seeds[0] = cross_entropy_grad(probs, labels);
    let grads = backward(graph, params, &fwd.tape, &seeds)?;
    params.descend(&grads.params, lr);
    update_running_stats(params, &fwd.tape);
    Ok(loss)
}

/// Whether two tapes of the same graph took the same branch at every ReLU
/// and max pool, so the function is smooth between their parameter points.
pub fn same_branches<T: Scalar>(graph: &Graph, a: &Tape<T>, b: &Tape<T>) -> bool {
    if a.argmax != b.argmax {
        return false;
    }
    graph
        .nodes()
        .iter()
        .filter(|n| n.op == PrimOp::Relu)
        .all(|n| {
            let x = &a.values[n.inputs[0].0];
            let y = &b.values[n.inputs[0].0];
            x.data()
                .iter()
                .zip(y.data())
                .all(|(&p, &q)| (p > T::zero()) == (q > T::zero()))
        })
}
