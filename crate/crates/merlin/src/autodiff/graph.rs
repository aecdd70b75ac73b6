//! The computation graph: a topologically ordered node list over named
//! parameters, with cached activations for the backward pass.

use std::collections::HashMap;

use thiserror::Error;

use super::ops::{self, LossKind};
use super::tensor::{Real, Tensor};
use crate::raster::TensorContainer;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: NodeId, detail: String },
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("graph has no designated loss node")]
    NoLoss,
    #[error("graph has no designated output or loss node")]
    NoRoot,
    #[error("loss must be scalar, got {numel} elements")]
    LossNotScalar { numel: usize },
    #[error("{count} parameters exceed the gradient-check limit {limit}")]
    TooManyParams { count: usize, limit: usize },
    #[error("parameter `{0}` missing from container")]
    MissingParam(String),
    #[error("non-finite value produced at node {0}")]
    NonFinite(NodeId),
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Debug)]
pub enum OpKind {
    /// Bound at `forward` time; `channels == 0` accepts any channel count.
    Input { name: String, channels: usize },
    Param { name: String },
    Conv2d,
    LeakyRelu { alpha: f64 },
    MaxPool2,
    Upsample2,
    ConcatChannels,
    Add,
    Sub,
    MulScalar { factor: f64 },
    Exp,
    Log,
    ReduceMean,
    ReduceSum,
    /// Self-supervised likelihood loss node over (prediction, target); the
    /// affine `(lo, hi)` restores the log domain from normalized values.
    MerlinLoss { lo: f64, hi: f64, clamp: f64 },
    /// Supervised full-intensity variant.
    SupervisedLoss { lo: f64, hi: f64, clamp: f64 },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    op: OpKind,
    inputs: Vec<NodeId>,
    out: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ParamSlot<T: Real> {
    pub name: String,
    pub node: NodeId,
    pub value: Tensor<T>,
}

/// A reverse-mode differentiable computation over named parameters.
#[derive(Clone, Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<ParamSlot<T>>,
    param_index: HashMap<String, usize>,
    output: Option<NodeId>,
    loss: Option<NodeId>,
    ran_forward: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            output: None,
            loss: None,
            ran_forward: false,
        }
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>) -> NodeId {
        for &id in &inputs {
            assert!(id < self.nodes.len(), "node input out of order");
        }
        self.nodes.push(Node {
            op,
            inputs,
            out: None,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        self.push(
            OpKind::Input {
                name: name.to_string(),
                channels,
            },
            vec![],
        )
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.param_index.contains_key(name) {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        let node = self.push(
            OpKind::Param {
                name: name.to_string(),
            },
            vec![],
        );
        self.param_index.insert(name.to_string(), self.params.len());
        self.params.push(ParamSlot {
            name: name.to_string(),
            node,
            value,
        });
        Ok(node)
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(OpKind::Conv2d, vec![x, weight, bias])
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        self.push(OpKind::LeakyRelu { alpha }, vec![x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::MaxPool2, vec![x])
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Upsample2, vec![x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::ConcatChannels, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Sub, vec![a, b])
    }

    pub fn mul_scalar(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(OpKind::MulScalar { factor }, vec![x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Exp, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Log, vec![x])
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::ReduceMean, vec![x])
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::ReduceSum, vec![x])
    }

    pub fn merlin_loss(&mut self, pred: NodeId, target: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(
            OpKind::MerlinLoss {
                lo,
                hi,
                clamp: EXP_CLAMP,
            },
            vec![pred, target],
        )
    }

    pub fn supervised_loss(&mut self, pred: NodeId, target: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(
            OpKind::SupervisedLoss {
                lo,
                hi,
                clamp: EXP_CLAMP,
            },
            vec![pred, target],
        )
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn set_loss(&mut self, id: NodeId) {
        self.loss = Some(id);
    }

    pub fn output_id(&self) -> Option<NodeId> {
        self.output
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> &[ParamSlot<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamSlot<T>] {
        &mut self.params
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index
            .get(name)
            .map(|&i| &self.params[i].value)
    }

    pub fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let idx = *self.param_index.get(name)?;
        Some(&mut self.params[idx].value)
    }

    /// Cached activation of a node from the last forward pass.
    pub fn activation(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id).and_then(|n| n.out.as_ref())
    }

    /// Re-type the whole graph (used for 64-bit shadow evaluation).
    pub fn convert<U: Real>(&self) -> Graph<U> {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    op: n.op.clone(),
                    inputs: n.inputs.clone(),
                    out: None,
                })
                .collect(),
            params: self
                .params
                .iter()
                .map(|p| ParamSlot {
                    name: p.name.clone(),
                    node: p.node,
                    value: p.value.convert(),
                })
                .collect(),
            param_index: self.param_index.clone(),
            output: self.output,
            loss: self.loss,
            ran_forward: false,
        }
    }

    /// Copy all parameter tensors into a container under `prefix`.
    pub fn dump_params(&self, prefix: &str) -> TensorContainer {
        let mut tc = TensorContainer::default();
        for p in &self.params {
            let dims: Vec<u32> = p.value.dims.iter().map(|&d| d as u32).collect();
            let data: Vec<f32> = p.value.data.iter().map(|&v| v.to_f32()).collect();
            tc.push(&format!("{prefix}{}", p.name), &dims, data);
        }
        tc
    }

    /// Load parameter tensors from a container written by [`Self::dump_params`].
    pub fn load_params(&mut self, tc: &TensorContainer, prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let entry = tc
                .get(&key)
                .ok_or_else(|| AutodiffError::MissingParam(key.clone()))?;
            let dims: Vec<u32> = p.value.dims.iter().map(|&d| d as u32).collect();
            if entry.dims != dims {
                return Err(AutodiffError::ShapeMismatch {
                    node: p.node,
                    detail: format!("container dims {:?} != {:?} for {key}", entry.dims, dims),
                });
            }
            p.value.data = entry.data.iter().map(|&v| T::from_f32(v)).collect();
            p.value.grad = None;
        }
        Ok(())
    }

    fn out_ref(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id]
            .out
            .as_ref()
            .expect("activation missing; forward ordering bug")
    }

    /// Run the graph on the given inputs and return the designated root
    /// (the loss when set, otherwise the output).
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor<T>>) -> Result<Tensor<T>> {
        let root = self.loss.or(self.output).ok_or(AutodiffError::NoRoot)?;
        for node in self.nodes.iter_mut() {
            node.out = None;
        }
        let mut batch: Option<usize> = None;
        for id in 0..self.nodes.len() {
            let op = self.nodes[id].op.clone();
            let ins = self.nodes[id].inputs.clone();
            let out = match &op {
                OpKind::Input { name, channels } => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| AutodiffError::UnknownInput(name.clone()))?;
                    if *channels != 0 && t.dims[1] != *channels {
                        return Err(AutodiffError::ShapeMismatch {
                            node: id,
                            detail: format!(
                                "input `{name}` expects {channels} channels, got {}",
                                t.dims[1]
                            ),
                        });
                    }
                    match batch {
                        None => batch = Some(t.dims[0]),
                        Some(n) if n != t.dims[0] => {
                            return Err(AutodiffError::ShapeMismatch {
                                node: id,
                                detail: format!("inconsistent batch sizes {n} vs {}", t.dims[0]),
                            })
                        }
                        _ => {}
                    }
                    t.detached()
                }
                OpKind::Param { name } => {
                    let idx = self.param_index[name];
                    self.params[idx].value.detached()
                }
                OpKind::Conv2d => {
                    let (x, w, b) = (self.out_ref(ins[0]), self.out_ref(ins[1]), self.out_ref(ins[2]));
                    let [_, ci, _, _] = x.dims;
                    let [co, wci, kh, kw] = w.dims;
                    if wci != ci || kh != kw || !(kh == 1 || kh == 3) || b.dims != [1, co, 1, 1] {
                        return Err(AutodiffError::ShapeMismatch {
                            node: id,
                            detail: format!(
                                "conv2d x={:?} w={:?} b={:?}",
                                x.dims, w.dims, b.dims
                            ),
                        });
                    }
                    ops::conv2d_forward(x, w, b)
                }
                OpKind::LeakyRelu { alpha } => {
                    ops::leaky_relu_forward(self.out_ref(ins[0]), T::from_f64(*alpha))
                }
                OpKind::MaxPool2 => {
                    let x = self.out_ref(ins[0]);
                    if x.dims[2] % 2 != 0 || x.dims[3] % 2 != 0 {
                        return Err(AutodiffError::ShapeMismatch {
                            node: id,
                            detail: format!("maxpool2 needs even spatial dims, got {:?}", x.dims),
                        });
                    }
                    ops::maxpool2_forward(x)
                }
                OpKind::Upsample2 => ops::upsample2_forward(self.out_ref(ins[0])),
                OpKind::ConcatChannels => {
                    let (a, b) = (self.out_ref(ins[0]), self.out_ref(ins[1]));
                    if a.dims[0] != b.dims[0] || a.dims[2] != b.dims[2] || a.dims[3] != b.dims[3] {
                        return Err(AutodiffError::ShapeMismatch {
                            node: id,
                            detail: format!("concat {:?} vs {:?}", a.dims, b.dims),
                        });
                    }
                    ops::concat_forward(a, b)
                }
                OpKind::Add | OpKind::Sub => {
                    let (a, b) = (self.out_ref(ins[0]), self.out_ref(ins[1]));
                    if a.dims != b.dims {
                        return Err(AutodiffError::ShapeMismatch {
                            node: id,
                            detail: format!("elementwise {:?} vs {:?}", a.dims, b.dims),
                        });
                    }
                    let mut out = a.detached();
                    match op {
                        OpKind::Add => {
                            for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
                                *o = *o + v;
                            }
                        }
                        _ => {
                            for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
                                *o = *o - v;
                            }
                        }
                    }
                    out
                }
                OpKind::MulScalar { factor } => {
                    let mut out = self.out_ref(ins[0]).detached();
                    let f = T::from_f64(*factor);
                    for v in out.data.iter_mut() {
                        *v = *v * f;
                    }
                    out
                }
                OpKind::Exp => {
                    let mut out = self.out_ref(ins[0]).detached();
                    for v in out.data.iter_mut() {
                        *v = v.exp();
                    }
                    out
                }
                OpKind::Log => {
                    let mut out = self.out_ref(ins[0]).detached();
                    for v in out.data.iter_mut() {
                        *v = v.ln();
                    }
                    out
                }
                OpKind::ReduceMean | OpKind::ReduceSum => {
                    let x = self.out_ref(ins[0]);
                    let mut acc = T::ZERO;
                    for &v in &x.data {
                        acc = acc + v;
                    }
                    if matches!(op, OpKind::ReduceMean) {
                        acc = acc / T::from_f64(x.numel() as f64);
                    }
                    Tensor::scalar(acc)
                }
                OpKind::MerlinLoss { lo, hi, clamp } | OpKind::SupervisedLoss { lo, hi, clamp } => {
                    let (p, t) = (self.out_ref(ins[0]), self.out_ref(ins[1]));
                    if p.dims != t.dims {
                        return Err(AutodiffError::ShapeMismatch {
                            node: id,
                            detail: format!("loss {:?} vs {:?}", p.dims, t.dims),
                        });
                    }
                    let kind = match op {
                        OpKind::MerlinLoss { .. } => LossKind::HalfLog,
                        _ => LossKind::FullLog,
                    };
                    let v = ops::likelihood_loss_forward(
                        p,
                        t,
                        T::from_f64(*lo),
                        T::from_f64(hi - lo),
                        T::from_f64(*clamp),
                        kind,
                    );
                    Tensor::scalar(v)
                }
            };
            self.nodes[id].out = Some(out);
        }
        self.ran_forward = true;
        Ok(self.out_ref(root).clone())
    }

    /// Reverse pass: fills `grad` on every parameter with d(loss)/d(param).
    pub fn backward(&mut self) -> Result<()> {
        if !self.ran_forward {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let loss = self.loss.ok_or(AutodiffError::NoLoss)?;
        let loss_out = self.out_ref(loss);
        if !loss_out.is_scalar() {
            return Err(AutodiffError::LossNotScalar {
                numel: loss_out.numel(),
            });
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::ONE]);

        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            let ins = self.nodes[id].inputs.clone();
            let mut contributions: Vec<(NodeId, Vec<T>)> = Vec::new();
            match &op {
                OpKind::Input { .. } => {}
                OpKind::Param { name } => {
                    let idx = self.param_index[name];
                    let slot = &mut self.params[idx];
                    match slot.value.grad.as_mut() {
                        Some(g) => {
                            for (a, &b) in g.iter_mut().zip(gout.iter()) {
                                *a = *a + b;
                            }
                        }
                        None => slot.value.grad = Some(gout),
                    }
                    continue;
                }
                OpKind::Conv2d => {
                    let x = self.out_ref(ins[0]);
                    let w = self.out_ref(ins[1]);
                    let gt = Tensor::from_vec(self.out_ref(id).dims, gout);
                    let (gx, gw, gb) = ops::conv2d_backward(x, w, &gt);
                    contributions.push((ins[0], gx.data));
                    contributions.push((ins[1], gw.data));
                    contributions.push((ins[2], gb.data));
                }
                OpKind::LeakyRelu { alpha } => {
                    let x = self.out_ref(ins[0]);
                    contributions.push((
                        ins[0],
                        ops::leaky_relu_backward(x, &gout, T::from_f64(*alpha)),
                    ));
                }
                OpKind::MaxPool2 => {
                    let x = self.out_ref(ins[0]);
                    contributions.push((ins[0], ops::maxpool2_backward(x, &gout)));
                }
                OpKind::Upsample2 => {
                    let x = self.out_ref(ins[0]);
                    contributions.push((ins[0], ops::upsample2_backward(x, &gout)));
                }
                OpKind::ConcatChannels => {
                    let (a, b) = (self.out_ref(ins[0]), self.out_ref(ins[1]));
                    let (ga, gb) = ops::concat_backward(a, b, &gout);
                    contributions.push((ins[0], ga));
                    contributions.push((ins[1], gb));
                }
                OpKind::Add => {
                    contributions.push((ins[0], gout.clone()));
                    contributions.push((ins[1], gout));
                }
                OpKind::Sub => {
                    contributions.push((ins[0], gout.clone()));
                    contributions.push((ins[1], gout.iter().map(|&g| -g).collect()));
                }
                OpKind::MulScalar { factor } => {
                    let f = T::from_f64(*factor);
                    contributions.push((ins[0], gout.iter().map(|&g| g * f).collect()));
                }
                OpKind::Exp => {
                    let out = self.out_ref(id);
                    contributions.push((
                        ins[0],
                        out.data
                            .iter()
                            .zip(gout.iter())
                            .map(|(&o, &g)| o * g)
                            .collect(),
                    ));
                }
                OpKind::Log => {
                    let x = self.out_ref(ins[0]);
                    contributions.push((
                        ins[0],
                        x.data
                            .iter()
                            .zip(gout.iter())
                            .map(|(&xi, &g)| g / xi)
                            .collect(),
                    ));
                }
                OpKind::ReduceMean => {
                    let x = self.out_ref(ins[0]);
                    let g = gout[0] / T::from_f64(x.numel() as f64);
                    contributions.push((ins[0], vec![g; x.numel()]));
                }
                OpKind::ReduceSum => {
                    let x = self.out_ref(ins[0]);
                    contributions.push((ins[0], vec![gout[0]; x.numel()]));
                }
                OpKind::MerlinLoss { lo, hi, clamp } | OpKind::SupervisedLoss { lo, hi, clamp } => {
                    let (p, t) = (self.out_ref(ins[0]), self.out_ref(ins[1]));
                    let kind = match op {
                        OpKind::MerlinLoss { .. } => LossKind::HalfLog,
                        _ => LossKind::FullLog,
                    };
                    let gp = ops::likelihood_loss_backward(
                        p,
                        t,
                        T::from_f64(*lo),
                        T::from_f64(hi - lo),
                        T::from_f64(*clamp),
                        kind,
                        gout[0],
                    );
                    // The target is observed data, never differentiated.
                    contributions.push((ins[0], gp));
                }
            }
            for (target, g) in contributions {
                match grads[target].as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(g.iter()) {
                            *a = *a + b;
                        }
                    }
                    None => grads[target] = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Zero every parameter gradient (allocating on first use).
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match p.value.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = T::ZERO),
                None => p.value.grad = Some(vec![T::ZERO; p.value.numel()]),
            }
        }
    }
}

/// Upper clamp for loss exponent arguments; the optimum (around `ln 2`) is
/// far below it, but early training can overshoot.
pub const EXP_CLAMP: f64 = 30.0;
