use crate::error::{Error, Result};

use super::tensor::{sigmoid, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[B, n] x [m, n]^T -> [B, m]`
    MatMulBt(NodeId, NodeId),
    /// `[B, m] + [m]` broadcast over rows.
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Zero-padded "same" 1-D convolution over positions.
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_channels: usize,
        positions: usize,
        kernel: usize,
    },
    /// `[B, C * L] -> [B, C]`, mean over positions.
    ChannelMean {
        src: NodeId,
        channels: usize,
        positions: usize,
    },
    /// Mean squared error, scalar output.
    Mse(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations in creation (topological) order.
///
/// Every op evaluates eagerly; [`Graph::backward`] walks the tape in
/// reverse and accumulates gradients for each node that depends on a
/// parameter.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; exactly zero when the loss does not
    /// depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul_bt(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (bsz, n) = self.value(a).dims2();
        let (m, n2) = self.value(w).dims2();
        if n != n2 {
            return Err(shape_err("matmul_bt", format!("[{bsz},{n}] x [{m},{n2}]^T")));
        }
        let av = self.value(a).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; bsz * m];
        for b in 0..bsz {
            let arow = &av[b * n..(b + 1) * n];
            let orow = &mut out[b * m..(b + 1) * m];
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &wv[j * n..(j + 1) * n];
                *o = arow.iter().zip(wrow).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(vec![bsz, m], out)?;
        let rg = self.rg(&[a, w]);
        Ok(self.push(t, Op::MatMulBt(a, w), rg))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (bsz, m) = self.value(a).dims2();
        if self.value(bias).len() != m {
            return Err(shape_err(
                "add_row_bias",
                format!("[{bsz},{m}] + [{}]", self.value(bias).len()),
            ));
        }
        let bv = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![bsz, m], out)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRowBias(a, bias), rg))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|x| sigmoid(*x)).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Columns `start..start + len` of a 2-D node.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (bsz, n) = self.value(src).dims2();
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(bsz * len);
        for b in 0..bsz {
            out.extend_from_slice(&sv[b * n + start..b * n + start + len]);
        }
        let t = Tensor::new(vec![bsz, len], out)?;
        let rg = self.rg(&[src]);
        Ok(self.push(t, Op::SliceCols { src, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let bsz = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).dims2().1).collect();
        if parts.iter().any(|p| self.value(*p).dims2().0 != bsz) {
            return Err(shape_err("concat_cols", "batch sizes differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(bsz * total);
        for b in 0..bsz {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[b * w..(b + 1) * w]);
            }
        }
        let t = Tensor::new(vec![bsz, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `input: [B, C_in * L]`, `weight: [C_out, C_in, K]` (K odd),
    /// `bias: [C_out]` -> `[B, C_out * L]` with zero padding `(K - 1) / 2`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_channels: usize,
        positions: usize,
    ) -> Result<NodeId> {
        let (bsz, width) = self.value(input).dims2();
        let ws = self.value(weight).shape().to_vec();
        if width != in_channels * positions || ws.len() != 3 || ws[1] != in_channels {
            return Err(shape_err(
                "conv1d",
                format!("input [{bsz},{width}] with C_in={in_channels}, L={positions}, weight {ws:?}"),
            ));
        }
        let (c_out, kernel) = (ws[0], ws[2]);
        if kernel % 2 == 0 || self.value(bias).len() != c_out {
            return Err(shape_err("conv1d", format!("kernel {kernel}, bias {}", self.value(bias).len())));
        }
        let pad = (kernel - 1) / 2;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = self.value(bias).data();
        let l = positions;
        let mut out = vec![0.0; bsz * c_out * l];
        for b in 0..bsz {
            let xb = &x[b * in_channels * l..(b + 1) * in_channels * l];
            for co in 0..c_out {
                let orow = &mut out[(b * c_out + co) * l..(b * c_out + co + 1) * l];
                orow.iter_mut().for_each(|o| *o = bv[co]);
                for ci in 0..in_channels {
                    let xrow = &xb[ci * l..(ci + 1) * l];
                    for k in 0..kernel {
                        let wk = w[(co * in_channels + ci) * kernel + k];
                        // output position p reads input p + k - pad
                        let lo = pad.saturating_sub(k);
                        let hi = (l + pad).saturating_sub(k).min(l);
                        for p in lo..hi {
                            orow[p] += wk * xrow[p + k - pad];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, c_out * l], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            t,
            Op::Conv1d {
                input,
                weight,
                bias,
                in_channels,
                positions,
                kernel,
            },
            rg,
        ))
    }

    pub fn channel_mean(&mut self, src: NodeId, channels: usize, positions: usize) -> Result<NodeId> {
        let (bsz, width) = self.value(src).dims2();
        if width != channels * positions {
            return Err(shape_err("channel_mean", format!("{width} != {channels}*{positions}")));
        }
        let sv = self.value(src).data();
        let out = sv
            .chunks(positions)
            .map(|c| c.iter().sum::<f64>() / positions as f64)
            .collect();
        let t = Tensor::new(vec![bsz, channels], out)?;
        let rg = self.rg(&[src]);
        Ok(self.push(
            t,
            Op::ChannelMean {
                src,
                channels,
                positions,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).len() != self.value(target).len() || self.value(pred).is_empty() {
            return Err(shape_err(
                "mse",
                format!("{} vs {} values", self.value(pred).len(), self.value(target).len()),
            ));
        }
        let loss = super::optim::mse_loss(self.value(pred).data(), self.value(target).data())?;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), rg))
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called on a node that was never recorded".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |id: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let dyv = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMulBt(a, w) => {
                let av = self.value(*a);
                let wv = self.value(*w);
                let (bsz, n) = av.dims2();
                let m = wv.dims2().0;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; bsz * n];
                    for b in 0..bsz {
                        let darow = &mut da[b * n..(b + 1) * n];
                        for j in 0..m {
                            let g = dyv[b * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            let wrow = &wv.data()[j * n..(j + 1) * n];
                            for (d, x) in darow.iter_mut().zip(wrow) {
                                *d += g * x;
                            }
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap(), grads);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; m * n];
                    for b in 0..bsz {
                        let arow = &av.data()[b * n..(b + 1) * n];
                        for j in 0..m {
                            let g = dyv[b * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            let dwrow = &mut dw[j * n..(j + 1) * n];
                            for (d, x) in dwrow.iter_mut().zip(arow) {
                                *d += g * x;
                            }
                        }
                    }
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw).unwrap(), grads);
                }
            }
            Op::AddRowBias(a, bias) => {
                acc(*a, dy.clone(), grads);
                if self.nodes[bias.0].requires_grad {
                    let m = self.value(*bias).len();
                    let mut db = vec![0.0; m];
                    for row in dyv.chunks(m) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Mul(a, b) => {
                let shape = dy.shape().to_vec();
                if self.nodes[a.0].requires_grad {
                    let g = dyv.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::new(shape.clone(), g).unwrap(), grads);
                }
                if self.nodes[b.0].requires_grad {
                    let g = dyv.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::new(shape, g).unwrap(), grads);
                }
            }
            Op::Sigmoid(a) => {
                let g = dyv
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                acc(*a, Tensor::new(dy.shape().to_vec(), g).unwrap(), grads);
            }
            Op::Tanh(a) => {
                let g = dyv
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                acc(*a, Tensor::new(dy.shape().to_vec(), g).unwrap(), grads);
            }
            Op::SliceCols { src, start } => {
                if self.nodes[src.0].requires_grad {
                    let (bsz, n) = self.value(*src).dims2();
                    let len = node.value.dims2().1;
                    let mut g = vec![0.0; bsz * n];
                    for b in 0..bsz {
                        g[b * n + start..b * n + start + len].copy_from_slice(&dyv[b * len..(b + 1) * len]);
                    }
                    acc(*src, Tensor::new(self.value(*src).shape().to_vec(), g).unwrap(), grads);
                }
            }
            Op::ConcatCols(parts) => {
                let (bsz, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    if self.nodes[p.0].requires_grad {
                        let mut g = Vec::with_capacity(bsz * w);
                        for b in 0..bsz {
                            g.extend_from_slice(&dyv[b * total + offset..b * total + offset + w]);
                        }
                        acc(*p, Tensor::new(self.value(*p).shape().to_vec(), g).unwrap(), grads);
                    }
                    offset += w;
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                in_channels,
                positions,
                kernel,
            } => {
                let (ci_n, l, k_n) = (*in_channels, *positions, *kernel);
                let pad = (k_n - 1) / 2;
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let c_out = self.value(*weight).shape()[0];
                let bsz = node.value.dims2().0;
                let need_x = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let mut dx = vec![0.0; if need_x { x.len() } else { 0 }];
                let mut dw = vec![0.0; if need_w { w.len() } else { 0 }];
                let mut db = vec![0.0; c_out];
                for b in 0..bsz {
                    for co in 0..c_out {
                        let grow = &dyv[(b * c_out + co) * l..(b * c_out + co + 1) * l];
                        db[co] += grow.iter().sum::<f64>();
                        for ci in 0..ci_n {
                            let xoff = (b * ci_n + ci) * l;
                            for k in 0..k_n {
                                let widx = (co * ci_n + ci) * k_n + k;
                                let lo = pad.saturating_sub(k);
                                let hi = (l + pad).saturating_sub(k).min(l);
                                if need_w {
                                    let mut s = 0.0;
                                    for p in lo..hi {
                                        s += grow[p] * x[xoff + p + k - pad];
                                    }
                                    dw[widx] += s;
                                }
                                if need_x {
                                    let wk = w[widx];
                                    for p in lo..hi {
                                        dx[xoff + p + k - pad] += wk * grow[p];
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    acc(*input, Tensor::new(self.value(*input).shape().to_vec(), dx).unwrap(), grads);
                }
                if need_w {
                    acc(*weight, Tensor::new(self.value(*weight).shape().to_vec(), dw).unwrap(), grads);
                }
                acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db).unwrap(), grads);
            }
            Op::ChannelMean {
                src,
                channels,
                positions,
            } => {
                let bsz = node.value.dims2().0;
                let mut g = Vec::with_capacity(bsz * channels * positions);
                for v in dyv {
                    g.extend(std::iter::repeat_n(v / *positions as f64, *positions));
                }
                acc(*src, Tensor::new(self.value(*src).shape().to_vec(), g).unwrap(), grads);
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = 2.0 * dyv[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                if self.nodes[target.0].requires_grad {
                    let dt = dp.iter().map(|v| -v).collect();
                    acc(*target, Tensor::new(self.value(*target).shape().to_vec(), dt).unwrap(), grads);
                }
                acc(*pred, Tensor::new(self.value(*pred).shape().to_vec(), dp).unwrap(), grads);
            }
        }
    }
}
