//! Minimal reverse-mode tape over batched channel-last tensors.

use serde::{Deserialize, Serialize};

use super::kernels;
use super::tensor::Tensor;
use super::ModelError;

/// Named flat parameter tensors. Order is fixed at construction and shared by
/// gradients, optimizer moments and the teacher copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> usize {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "param length");
        self.entries.push(ParamEntry { name: name.into(), dims, data });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads(self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.dims == b.dims)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f32>>);

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    // `relu` marks a fused activation; the stored value is post-activation.
    Conv3 { x: NodeId, w: usize, b: usize, relu: bool },
    Down { x: NodeId, w: usize, b: usize, relu: bool },
    Up { x: NodeId, w: usize, b: usize, relu: bool },
    Pointwise { x: NodeId, w: usize, b: usize },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Upsample { x: NodeId, factor: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass against a borrowed parameter set.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    fn out_channels(&self, w: usize, ci: usize, taps: usize) -> Result<usize, ModelError> {
        let e = &self.params.entries[w];
        let co = e.data.len() / (taps * ci).max(1);
        if co * taps * ci != e.data.len() || co == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "param `{}` ({} values) does not fit {taps} taps x {ci} input channels",
                e.name,
                e.data.len()
            )));
        }
        Ok(co)
    }

    pub fn conv3(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        self.conv3_act(x, w, b, false)
    }

    /// `relu(conv3(x))` as a single node.
    pub fn conv3_relu(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        self.conv3_act(x, w, b, true)
    }

    fn conv3_act(&mut self, x: NodeId, w: usize, b: usize, relu: bool) -> Result<NodeId, ModelError> {
        let xin = self.value(x);
        let ci = xin.channels;
        let co = self.out_channels(w, ci, 27)?;
        let mut out = Tensor::zeros(xin.batch, xin.shape, co);
        let (wd, bd) = (&self.params.entries[w].data, &self.params.entries[b].data);
        for i in 0..xin.batch {
            kernels::conv3_forward(xin.sample(i), xin.shape, ci, wd, bd, co, out.sample_mut(i));
        }
        if relu {
            relu_in_place(&mut out);
        }
        Ok(self.push(out, Op::Conv3 { x, w, b, relu }))
    }

    pub fn down(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        self.down_act(x, w, b, false)
    }

    pub fn down_relu(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        self.down_act(x, w, b, true)
    }

    fn down_act(&mut self, x: NodeId, w: usize, b: usize, relu: bool) -> Result<NodeId, ModelError> {
        let xin = self.value(x);
        if xin.shape.iter().any(|s| s % 2 != 0) {
            return Err(ModelError::BadSpatialSize(format!("cannot halve {:?}", xin.shape)));
        }
        let ci = xin.channels;
        let co = self.out_channels(w, ci, 8)?;
        let coarse = [xin.shape[0] / 2, xin.shape[1] / 2, xin.shape[2] / 2];
        let mut out = Tensor::zeros(xin.batch, coarse, co);
        let (wd, bd) = (&self.params.entries[w].data, &self.params.entries[b].data);
        for i in 0..xin.batch {
            kernels::down_forward(xin.sample(i), xin.shape, ci, wd, bd, co, out.sample_mut(i));
        }
        if relu {
            relu_in_place(&mut out);
        }
        Ok(self.push(out, Op::Down { x, w, b, relu }))
    }

    pub fn up(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        self.up_act(x, w, b, false)
    }

    pub fn up_relu(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        self.up_act(x, w, b, true)
    }

    fn up_act(&mut self, x: NodeId, w: usize, b: usize, relu: bool) -> Result<NodeId, ModelError> {
        let xin = self.value(x);
        let ci = xin.channels;
        let co = self.out_channels(w, ci, 8)?;
        let fine = [xin.shape[0] * 2, xin.shape[1] * 2, xin.shape[2] * 2];
        let mut out = Tensor::zeros(xin.batch, fine, co);
        let (wd, bd) = (&self.params.entries[w].data, &self.params.entries[b].data);
        for i in 0..xin.batch {
            kernels::up_forward(xin.sample(i), xin.shape, ci, wd, bd, co, out.sample_mut(i));
        }
        if relu {
            relu_in_place(&mut out);
        }
        Ok(self.push(out, Op::Up { x, w, b, relu }))
    }

    pub fn pointwise(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        let xin = self.value(x);
        let ci = xin.channels;
        let co = self.out_channels(w, ci, 1)?;
        let mut out = Tensor::zeros(xin.batch, xin.shape, co);
        let (wd, bd) = (&self.params.entries[w].data, &self.params.entries[b].data);
        for i in 0..xin.batch {
            kernels::pointwise_forward(xin.sample(i), ci, wd, bd, co, out.sample_mut(i));
        }
        Ok(self.push(out, Op::Pointwise { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        relu_in_place(&mut out);
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_layout(vb) {
            return Err(ModelError::ShapeMismatch("add operands differ".into()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let xin = self.value(x);
        let shape = xin.shape.map(|s| s * factor);
        let mut out = Tensor::zeros(xin.batch, shape, xin.channels);
        for i in 0..xin.batch {
            let up = kernels::upsample_forward(xin.sample(i), xin.shape, xin.channels, factor);
            out.sample_mut(i).copy_from_slice(&up);
        }
        self.push(out, Op::Upsample { x, factor })
    }

    /// Back-propagates the given output gradients; returns parameter gradients.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<ParamGrads, ModelError> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if !g.same_layout(self.value(id)) {
                return Err(ModelError::ShapeMismatch(format!("seed gradient for node {} has wrong layout", id.0)));
            }
            accumulate(&mut grads[id.0], g);
        }
        let mut out = self.params.zeros_like();
        let needs = |id: NodeId| !matches!(self.nodes[id.0].op, Op::Input);

        for idx in (0..self.nodes.len()).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            if let Op::Conv3 { relu: true, .. } | Op::Down { relu: true, .. } | Op::Up { relu: true, .. } = self.nodes[idx].op {
                relu_mask(&mut g, &self.nodes[idx].value);
            }
            match self.nodes[idx].op {
                Op::Input => {}
                Op::Relu(x) => {
                    relu_mask(&mut g, &self.nodes[idx].value);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    accumulate(&mut grads[a.0], g);
                }
                Op::Upsample { x, factor } => {
                    let xin = self.value(x);
                    let mut dx = Tensor::zeros(xin.batch, xin.shape, xin.channels);
                    for i in 0..xin.batch {
                        let d = kernels::upsample_backward(g.sample(i), xin.shape, xin.channels, factor);
                        dx.sample_mut(i).copy_from_slice(&d);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Conv3 { x, w, b, .. } => {
                    let xin = self.value(x);
                    let (ci, co) = (xin.channels, g.channels);
                    let wd = &self.params.entries[w].data;
                    let mut dw = std::mem::take(&mut out.0[w]);
                    let mut db = std::mem::take(&mut out.0[b]);
                    let mut dx = needs(x).then(|| Tensor::zeros(xin.batch, xin.shape, ci));
                    for i in 0..xin.batch {
                        kernels::conv3_backward_params(xin.sample(i), xin.shape, ci, g.sample(i), co, &mut dw, &mut db);
                        if let Some(dx) = dx.as_mut() {
                            kernels::conv3_backward_input(g.sample(i), xin.shape, ci, wd, co, dx.sample_mut(i));
                        }
                    }
                    out.0[w] = dw;
                    out.0[b] = db;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Down { x, w, b, .. } | Op::Up { x, w, b, .. } | Op::Pointwise { x, w, b } => {
                    let xin = self.value(x);
                    let (ci, co) = (xin.channels, g.channels);
                    let wd = &self.params.entries[w].data;
                    let mut dw = std::mem::take(&mut out.0[w]);
                    let mut db = std::mem::take(&mut out.0[b]);
                    let mut dx = needs(x).then(|| Tensor::zeros(xin.batch, xin.shape, ci));
                    for i in 0..xin.batch {
                        let dxi = dx.as_mut().map(|t| t.sample_mut(i));
                        let (xs, gs) = (xin.sample(i), g.sample(i));
                        match self.nodes[idx].op {
                            Op::Down { .. } => kernels::down_backward(xs, xin.shape, ci, wd, gs, co, dxi, &mut dw, &mut db),
                            Op::Up { .. } => kernels::up_backward(xs, xin.shape, ci, wd, gs, co, dxi, &mut dw, &mut db),
                            _ => kernels::pointwise_backward(xs, ci, wd, gs, co, dxi, &mut dw, &mut db),
                        }
                    }
                    out.0[w] = dw;
                    out.0[b] = db;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn relu_in_place(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the activation output was clamped.
fn relu_mask(g: &mut Tensor, y: &Tensor) {
    for (d, &v) in g.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
