use super::kernels;
use super::tensor::{ParamVector, Segment, Tensor4};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Backward rule for an op defined outside this module.
pub trait BackwardRule {
    /// Gradient with respect to each input, in input order. `None` marks an
    /// input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor4], output: &Tensor4, grad_out: &Tensor4) -> Vec<Option<Tensor4>>;
}

enum Op {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, pad: usize, cols: Option<Vec<f32>> },
    Relu(NodeId),
    Softmax(NodeId),
    MaxPool { input: NodeId, argmax: Vec<u32> },
    Upsample(NodeId),
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Dot(NodeId, Vec<f32>),
    SelectItems { input: NodeId, start: usize },
    Custom { inputs: Vec<NodeId>, rule: Box<dyn BackwardRule> },
}

struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

/// Leaf nodes holding one network's parameters, in segment order.
pub struct ParamNodes {
    ids: Vec<NodeId>,
    layout: Vec<(String, Vec<usize>)>,
}

impl ParamNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.layout.iter().position(|(n, _)| n == name).map(|i| self.ids[i])
    }
}

/// Gradients produced by one backward pass, kept for leaf nodes only.
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor4> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Number of tape nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Gradients laid out like the parameter vector that produced `params`.
    /// Segments that did not influence the loss get zeros.
    pub fn for_params(&self, params: &ParamNodes) -> ParamVector {
        let segments = params
            .ids
            .iter()
            .zip(&params.layout)
            .map(|(id, (name, dims))| match self.get(*id) {
                Some(g) => Segment {
                    name: name.clone(),
                    dims: dims.clone(),
                    data: g.data().to_vec(),
                },
                None => Segment::zeros(name.clone(), dims.clone()),
            })
            .collect();
        ParamVector::new(segments)
    }
}

/// Reverse-mode tape. Values are immutable once recorded; every op appends a
/// node whose inputs were created earlier, so creation order is a valid
/// topological order.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            consumed: false,
        }
    }

    /// A graph that evaluates ops without keeping any backward state.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeState("tape already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.live()?;
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::TapeState(format!("node {} not on this tape", id.0)))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor4> {
        Ok(&self.node(id)?.value)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool) -> NodeId {
        let needs_grad = self.record && needs_grad;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Result<NodeId> {
        self.live()?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor4) -> Result<NodeId> {
        self.live()?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn params(&mut self, params: &ParamVector) -> Result<ParamNodes> {
        self.live()?;
        let mut ids = Vec::with_capacity(params.segments().len());
        let mut layout = Vec::with_capacity(params.segments().len());
        for seg in params.segments() {
            let value = Tensor4::new(seg.dims4(), seg.data.clone())?;
            ids.push(self.push(value, Op::Leaf, true));
            layout.push((seg.name.clone(), seg.dims.clone()));
        }
        Ok(ParamNodes { ids, layout })
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, pad: usize) -> Result<NodeId> {
        let needs = self.record && (self.needs(input) || self.needs(weight) || self.needs(bias));
        let (out, cols) = kernels::conv2d_forward(
            self.value(input)?,
            self.value(weight)?,
            self.value(bias)?.data(),
            pad,
            needs,
        )?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, pad, cols }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::relu_forward(self.value(x)?);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Relu(x), needs))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::softmax_channels_forward(self.value(x)?)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x)?)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { input: x, argmax }, needs))
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::upsample_nearest2x_forward(self.value(x)?);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample(x), needs))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::concat_channels_forward(self.value(a)?, self.value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.dims() != vb.dims() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor4::new(va.dims(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        let v = self.value(x)?;
        let out = Tensor4::new(v.dims(), v.data().iter().map(|e| e * factor).collect())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, factor), needs))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f32 = self.value(x)?.data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor4::scalar(total), Op::Sum(x), needs))
    }

    /// Inner product with a constant tensor of the same length.
    pub fn dot_const(&mut self, x: NodeId, weights: Vec<f32>) -> Result<NodeId> {
        let v = self.value(x)?;
        if v.len() != weights.len() {
            return Err(Error::shape(
                "dot_const",
                format!("{} values against {} weights", v.len(), weights.len()),
            ));
        }
        let total: f32 = v.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor4::scalar(total), Op::Dot(x, weights), needs))
    }

    /// Items `start..start + count` along the batch axis.
    pub fn select_items(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let out = self.value(x)?.select_items(start, count)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SelectItems { input: x, start }, needs))
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor4, rule: Box<dyn BackwardRule>) -> Result<NodeId> {
        for &id in inputs {
            self.node(id)?;
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        ))
    }

    /// Propagates d(loss)/d(node) from a one-element `loss` back to every leaf,
    /// then clears the tape. A consumed tape rejects further use.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.record {
            return Err(Error::TapeState("backward on an inference graph".into()));
        }
        let loss_len = self.value(loss)?.len();
        if loss_len != 1 {
            return Err(Error::TapeState(format!("loss must be scalar, has {loss_len} elements")));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor4>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(1.0));
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient at tape node {idx}")));
            }
            let mut send = |id: NodeId, g: Tensor4| {
                debug_assert!(id.0 < idx, "tape order violated");
                if !nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(grad);
                }
                Op::Conv2d { input, weight, bias, pad, cols } => {
                    let need_input = nodes[input.0].needs_grad;
                    let g = kernels::conv2d_backward(
                        &nodes[input.0].value,
                        &nodes[weight.0].value,
                        *pad,
                        &grad,
                        need_input,
                        cols.as_deref(),
                    )?;
                    if let Some(gi) = g.input {
                        send(*input, gi);
                    }
                    send(*weight, g.weight);
                    let bias_dims = nodes[bias.0].value.dims();
                    send(*bias, Tensor4::new(bias_dims, g.bias)?);
                }
                Op::Relu(x) => send(*x, kernels::relu_backward(&nodes[x.0].value, &grad)),
                Op::Softmax(x) => send(*x, kernels::softmax_channels_backward(&node.value, &grad)),
                Op::MaxPool { input, argmax } => send(
                    *input,
                    kernels::maxpool2x2_backward(nodes[input.0].value.dims(), argmax, &grad),
                ),
                Op::Upsample(x) => send(
                    *x,
                    kernels::upsample_nearest2x_backward(nodes[x.0].value.dims(), &grad),
                ),
                Op::Concat(a, b) => {
                    let (ga, gb) = kernels::concat_channels_backward(
                        nodes[a.0].value.dims(),
                        nodes[b.0].value.dims(),
                        &grad,
                    );
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Add(a, b) => {
                    send(*a, grad.clone());
                    send(*b, grad);
                }
                Op::Scale(x, factor) => {
                    let data = grad.data().iter().map(|g| g * factor).collect();
                    send(*x, Tensor4::new(grad.dims(), data)?);
                }
                Op::Sum(x) => {
                    let g = grad.item();
                    send(*x, Tensor4::filled(nodes[x.0].value.dims(), g));
                }
                Op::Dot(x, weights) => {
                    let g = grad.item();
                    let data = weights.iter().map(|w| w * g).collect();
                    send(*x, Tensor4::new(nodes[x.0].value.dims(), data)?);
                }
                Op::SelectItems { input, start } => {
                    let dims = nodes[input.0].value.dims();
                    let mut full = Tensor4::zeros(dims);
                    let offset = start * dims[1] * dims[2] * dims[3];
                    full.data_mut()[offset..offset + grad.len()].copy_from_slice(grad.data());
                    send(*input, full);
                }
                Op::Custom { inputs, rule } => {
                    let values: Vec<&Tensor4> = inputs.iter().map(|id| &nodes[id.0].value).collect();
                    let input_grads = rule.backward(&values, &node.value, &grad);
                    for (id, g) in inputs.iter().zip(input_grads) {
                        if let Some(g) = g {
                            if g.dims() != nodes[id.0].value.dims() {
                                return Err(Error::shape("custom backward", "gradient dims differ from input"));
                            }
                            send(*id, g);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}
