//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Every forward builder appends one node holding the output value and the
//! recorded operation; [`Tape::backward`] walks the nodes once in reverse.
//! Nodes are addressed by [`NodeId`], so graphs are plain `Vec` arenas with
//! no reference counting.

use crate::error::{CsError, Result};
use crate::kernels;
use crate::tensor::{shape_str, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Forward-pass mode: train uses batch statistics in batchnorm and updates
/// running state; eval uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    Spatial,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    MulScalar {
        t: NodeId,
        s: NodeId,
    },
    MulBroadcast {
        a: NodeId,
        b: NodeId,
    },
    /// out = x * w^T, x: [B,n], w: [m,n]
    Dense {
        x: NodeId,
        w: NodeId,
    },
    /// out = x * w, x: [B,m], w: [m,n]
    DenseT {
        x: NodeId,
        w: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Pool {
        x: NodeId,
        axis: PoolAxis,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Charbonnier {
        a: NodeId,
        b: NodeId,
        eps: f64,
    },
    Sum(NodeId),
    Reshape(NodeId),
    ConcatChannels(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, addressable by node or by the
/// name a parameter leaf was bound under.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(String, NodeId)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.get(*id))
    }
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, NodeId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Insert a tensor as a leaf; gradient tracking follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Insert a gradient-tracked leaf and remember it under `name` so the
    /// gradient can be read back by name after `backward`.
    pub fn leaf_named(&mut self, name: &str, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t, true);
        self.bindings.push((name.to_string(), id));
        id
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn require_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CsError::dimension(format!(
                "{op}: shapes {} and {} differ",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::ScaleConst(a, c), value, rg)
    }

    /// Multiply tensor `t` by a one-element tensor `s`.
    pub fn mul_scalar(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(CsError::dimension(format!(
                "mul_scalar: scale has shape {}, want one element",
                shape_str(self.value(s).shape())
            )));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(t).data().iter().map(|v| v * sv).collect();
        let value = Tensor::from_vec(self.value(t).shape(), data)?;
        let rg = self.rg(t) || self.rg(s);
        Ok(self.push(Op::MulScalar { t, s }, value, rg))
    }

    /// Elementwise multiply with broadcasting: `b` must have the same rank
    /// as `a`, each axis equal or 1.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sa.len() != sb.len()
            || sa.iter().zip(&sb).any(|(&da, &db)| db != da && db != 1)
        {
            return Err(CsError::dimension(format!(
                "mul_broadcast: {} does not broadcast over {}",
                shape_str(&sb),
                shape_str(&sa)
            )));
        }
        let mut data = vec![0.0; self.value(a).numel()];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            broadcast_zip(&sa, &sb, |ia, ib| data[ia] = av[ia] * bv[ib]);
        }
        let value = Tensor::from_vec(&sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MulBroadcast { a, b }, value, rg))
    }

    /// Fully-connected map: out = x * w^T with x: [B,n] (or [n]) and
    /// w: [m,n]. Returns [B,m] (or [m]).
    pub fn dense(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (b, n, one_d) = rows_of(self.value(x))?;
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != n {
            return Err(CsError::dimension(format!(
                "dense: input {} incompatible with weight {}",
                shape_str(self.value(x).shape()),
                shape_str(ws)
            )));
        }
        let m = ws[0];
        let data = kernels::mat_bt(self.value(x).data(), self.value(w).data(), b, n, m);
        let shape = if one_d { vec![m] } else { vec![b, m] };
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Dense { x, w }, value, rg))
    }

    /// Transposed-weight map: out = x * w with x: [B,m] (or [m]) and
    /// w: [m,n]. Returns [B,n] (or [n]).
    pub fn dense_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (b, m, one_d) = rows_of(self.value(x))?;
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != m {
            return Err(CsError::dimension(format!(
                "dense_t: input {} incompatible with weight {}",
                shape_str(self.value(x).shape()),
                shape_str(ws)
            )));
        }
        let n = ws[1];
        let data = kernels::mat_bb(self.value(x).data(), self.value(w).data(), b, m, n);
        let shape = if one_d { vec![n] } else { vec![b, n] };
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::DenseT { x, w }, value, rg))
    }

    /// 3x3 convolution, zero padding 1, stride 1: x [B,CI,H,W],
    /// k [CO,CI,3,3], bias [CO] -> [B,CO,H,W].
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = dims4(self.value(x), "conv2d input")?;
        let ks = dims4(self.value(k), "conv2d kernel")?;
        if ks.2 != 3 || ks.3 != 3 {
            return Err(CsError::dimension(format!(
                "conv2d: kernel spatial size must be 3x3, got {}",
                shape_str(self.value(k).shape())
            )));
        }
        if ks.1 != xs.1 {
            return Err(CsError::dimension(format!(
                "conv2d: input channels {} do not match kernel channels {}",
                xs.1, ks.1
            )));
        }
        if self.value(bias).shape() != [ks.0] {
            return Err(CsError::dimension(format!(
                "conv2d: bias {} must have shape [{}]",
                shape_str(self.value(bias).shape()),
                ks.0
            )));
        }
        let data = kernels::conv3x3_forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(bias).data(),
            (xs.0, xs.1, xs.2, xs.3),
            ks.0,
        );
        let value = Tensor::from_vec(&[xs.0, ks.0, xs.2, xs.3], data)?;
        let rg = self.rg(x) || self.rg(k) || self.rg(bias);
        Ok(self.push(Op::Conv2d { x, k, bias }, value, rg))
    }

    /// Channel batchnorm over (B,H,W). In train mode, normalizes with batch
    /// statistics and (unless `update_stats` is false) folds them into
    /// `state` by exponential moving average. Eval mode normalizes with the
    /// stored running statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
        mode: Mode,
        update_stats: bool,
    ) -> Result<NodeId> {
        let xs = dims4(self.value(x), "batchnorm input")?;
        let c = xs.1;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(CsError::dimension(format!(
                "batchnorm: gamma {} / beta {} must have shape [{}]",
                shape_str(self.value(gamma).shape()),
                shape_str(self.value(beta).shape()),
                c
            )));
        }
        if state.running_mean.len() != c {
            return Err(CsError::dimension(format!(
                "batchnorm: state tracks {} channels, input has {}",
                state.running_mean.len(),
                c
            )));
        }
        let train = mode == Mode::Train;
        let (mean, var) = if train {
            let (m, v) = kernels::channel_stats(self.value(x).data(), xs);
            if update_stats {
                for ch in 0..c {
                    state.running_mean[ch] =
                        BN_MOMENTUM * state.running_mean[ch] + (1.0 - BN_MOMENTUM) * m[ch];
                    state.running_var[ch] =
                        BN_MOMENTUM * state.running_var[ch] + (1.0 - BN_MOMENTUM) * v[ch];
                }
            }
            (m, v)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let data = kernels::bn_normalize(
            self.value(x).data(),
            xs,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            BN_EPS,
        );
        let value = Tensor::from_vec(self.value(x).shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| kernels::sigmoid(v))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape();
        let n = *shape.last().ok_or_else(|| {
            CsError::dimension("softmax: zero-rank tensor".to_string())
        })?;
        let rows = self.value(a).numel() / n;
        let data = kernels::softmax_rows(self.value(a).data(), rows, n);
        let value = Tensor::from_vec(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), value, rg))
    }

    /// Global pooling of an NCHW tensor. Spatial pooling reduces HxW to 1x1
    /// per channel; channel pooling reduces C to 1 per spatial position.
    /// Max pooling routes its gradient to the first-occurrence argmax.
    pub fn pool_global(&mut self, x: NodeId, axis: PoolAxis, kind: PoolKind) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(x), "pool_global input")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut argmax = Vec::new();
        let (data, shape) = match axis {
            PoolAxis::Spatial => {
                let mut out = vec![0.0; b * c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let win = &xv[base..base + hw];
                        out[bi * c + ch] = match kind {
                            PoolKind::Avg => win.iter().sum::<f64>() / hw as f64,
                            PoolKind::Max => {
                                let (off, &mx) = first_max(win);
                                argmax.push(base + off);
                                mx
                            }
                        };
                    }
                }
                (out, vec![b, c, 1, 1])
            }
            PoolAxis::Channel => {
                let mut out = vec![0.0; b * hw];
                for bi in 0..b {
                    for p in 0..hw {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        let mut sum = 0.0;
                        for ch in 0..c {
                            let idx = (bi * c + ch) * hw + p;
                            let v = xv[idx];
                            sum += v;
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                        out[bi * hw + p] = match kind {
                            PoolKind::Avg => sum / c as f64,
                            PoolKind::Max => {
                                argmax.push(best_idx);
                                best
                            }
                        };
                    }
                }
                (out, vec![b, 1, h, w])
            }
        };
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            Op::Pool {
                x,
                axis,
                kind,
                argmax,
            },
            value,
            rg,
        ))
    }

    /// Mean over all elements of sqrt((a-b)^2 + eps^2). Returns a scalar.
    pub fn charbonnier(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        self.require_same_shape(a, b, "charbonnier")?;
        if eps <= 0.0 {
            return Err(CsError::parameter(format!(
                "charbonnier: eps must be positive, got {eps}"
            )));
        }
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| ((x - y) * (x - y) + eps * eps).sqrt())
            .sum();
        let value = Tensor::from_vec(&[1], vec![s / n])?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Charbonnier { a, b, eps }, value, rg))
    }

    /// Sum of all elements. Returns a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let value = Tensor::from_vec(&[1], vec![s]).expect("scalar");
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = dims4(self.value(a), "concat_channels lhs")?;
        let (bb, cb, hb, wb) = dims4(self.value(b), "concat_channels rhs")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(CsError::dimension(format!(
                "concat_channels: {} vs {}",
                shape_str(self.value(a).shape()),
                shape_str(self.value(b).shape())
            )));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * ba * hw);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..ba {
            data.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatChannels(a, b), value, rg))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// gradient-tracked node; parameters bound with [`Tape::leaf_named`] are
    /// retrievable by name.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(CsError::Contract(format!(
                "backward: loss must be scalar, got shape {}",
                shape_str(self.value(loss).shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::from_vec(&[1], vec![1.0])?);
            for idx in (0..=loss.0).rev() {
                if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                    continue;
                }
                let g = grads[idx].take().expect("checked above");
                self.propagate(idx, &g, &mut grads);
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.shape(), gv.to_vec());
                self.acc(grads, *b, g.shape(), gv.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.shape(), gv.to_vec());
                self.acc(grads, *b, g.shape(), gv.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(
                    grads,
                    *a,
                    g.shape(),
                    gv.iter().zip(bv).map(|(x, y)| x * y).collect(),
                );
                self.acc(
                    grads,
                    *b,
                    g.shape(),
                    gv.iter().zip(av).map(|(x, y)| x * y).collect(),
                );
            }
            Op::ScaleConst(a, c) => {
                self.acc(grads, *a, g.shape(), gv.iter().map(|v| v * c).collect());
            }
            Op::MulScalar { t, s } => {
                let sv = self.value(*s).data()[0];
                let tv = self.value(*t).data();
                self.acc(grads, *t, self.value(*t).shape(), gv.iter().map(|v| v * sv).collect());
                let ds: f64 = gv.iter().zip(tv).map(|(x, y)| x * y).sum();
                self.acc(grads, *s, &[1], vec![ds]);
            }
            Op::MulBroadcast { a, b } => {
                let (sa, sb) = (
                    self.value(*a).shape().to_vec(),
                    self.value(*b).shape().to_vec(),
                );
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                broadcast_zip(&sa, &sb, |ia, ib| {
                    ga[ia] = gv[ia] * bv[ib];
                    gb[ib] += gv[ia] * av[ia];
                });
                self.acc(grads, *a, &sa, ga);
                self.acc(grads, *b, &sb, gb);
            }
            Op::Dense { x, w } => {
                let (b, n, _) = rows_of(self.value(*x)).expect("validated in forward");
                let m = self.value(*w).shape()[0];
                let gx = kernels::mat_bb(gv, self.value(*w).data(), b, m, n);
                let gw = kernels::outer_acc(gv, self.value(*x).data(), b, m, n);
                self.acc(grads, *x, self.value(*x).shape(), gx);
                self.acc(grads, *w, &[m, n], gw);
            }
            Op::DenseT { x, w } => {
                let (b, m, _) = rows_of(self.value(*x)).expect("validated in forward");
                let n = self.value(*w).shape()[1];
                let gx = kernels::mat_bt(gv, self.value(*w).data(), b, n, m);
                let gw = kernels::outer_acc(self.value(*x).data(), gv, b, m, n);
                self.acc(grads, *x, self.value(*x).shape(), gx);
                self.acc(grads, *w, &[m, n], gw);
            }
            Op::Conv2d { x, k, bias } => {
                let xs = dims4(self.value(*x), "conv2d").expect("validated");
                let co = self.value(*k).shape()[0];
                let gx = kernels::conv3x3_backward_x(gv, self.value(*k).data(), xs, co);
                let gk = kernels::conv3x3_backward_k(gv, self.value(*x).data(), xs, co);
                let gb = kernels::conv3x3_backward_bias(gv, (xs.0, co, xs.2, xs.3));
                self.acc(grads, *x, self.value(*x).shape(), gx);
                self.acc(grads, *k, self.value(*k).shape(), gk);
                self.acc(grads, *bias, &[co], gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            } => {
                let xs = dims4(self.value(*x), "batchnorm").expect("validated");
                let (gx, ggamma, gbeta) = if *train {
                    kernels::bn_backward_train(
                        gv,
                        self.value(*x).data(),
                        xs,
                        mean,
                        var,
                        self.value(*gamma).data(),
                        BN_EPS,
                    )
                } else {
                    kernels::bn_backward_eval(
                        gv,
                        self.value(*x).data(),
                        xs,
                        mean,
                        var,
                        self.value(*gamma).data(),
                        BN_EPS,
                    )
                };
                self.acc(grads, *x, self.value(*x).shape(), gx);
                self.acc(grads, *gamma, &[xs.1], ggamma);
                self.acc(grads, *beta, &[xs.1], gbeta);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.shape(),
                    gv.iter()
                        .zip(av)
                        .map(|(&gg, &v)| if v > 0.0 { gg } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[idx].value.data();
                self.acc(
                    grads,
                    *a,
                    g.shape(),
                    gv.iter().zip(yv).map(|(&gg, &y)| gg * y * (1.0 - y)).collect(),
                );
            }
            Op::Softmax(a) => {
                let y = self.nodes[idx].value.data();
                let n = *self.nodes[idx].value.shape().last().expect("validated");
                let rows = y.len() / n;
                let gx = kernels::softmax_backward(gv, y, rows, n);
                self.acc(grads, *a, self.value(*a).shape(), gx);
            }
            Op::Pool {
                x,
                axis,
                kind,
                argmax,
            } => {
                let (b, c, h, w) = dims4(self.value(*x), "pool").expect("validated");
                let hw = h * w;
                let mut gx = vec![0.0; self.value(*x).numel()];
                match (axis, kind) {
                    (PoolAxis::Spatial, PoolKind::Avg) => {
                        for bi in 0..b {
                            for ch in 0..c {
                                let gvv = gv[bi * c + ch] / hw as f64;
                                let base = (bi * c + ch) * hw;
                                for e in gx[base..base + hw].iter_mut() {
                                    *e = gvv;
                                }
                            }
                        }
                    }
                    (PoolAxis::Spatial, PoolKind::Max) => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            gx[src] += gv[slot];
                        }
                    }
                    (PoolAxis::Channel, PoolKind::Avg) => {
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * hw;
                                for p in 0..hw {
                                    gx[base + p] = gv[bi * hw + p] / c as f64;
                                }
                            }
                        }
                    }
                    (PoolAxis::Channel, PoolKind::Max) => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            gx[src] += gv[slot];
                        }
                    }
                }
                self.acc(grads, *x, self.value(*x).shape(), gx);
            }
            Op::Charbonnier { a, b, eps } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = av.len() as f64;
                let g0 = gv[0];
                let mut ga = vec![0.0; av.len()];
                for i in 0..av.len() {
                    let d = av[i] - bv[i];
                    ga[i] = g0 * d / ((d * d + eps * eps).sqrt() * n);
                }
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                self.acc(grads, *a, self.value(*a).shape(), ga);
                self.acc(grads, *b, self.value(*b).shape(), gb);
            }
            Op::Sum(a) => {
                let g0 = gv[0];
                self.acc(
                    grads,
                    *a,
                    self.value(*a).shape(),
                    vec![g0; self.value(*a).numel()],
                );
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, self.value(*a).shape(), gv.to_vec());
            }
            Op::ConcatChannels(a, b) => {
                let (ba, ca, ha, wa) = dims4(self.value(*a), "concat").expect("validated");
                let cb = self.value(*b).shape()[1];
                let hw = ha * wa;
                let mut ga = vec![0.0; self.value(*a).numel()];
                let mut gb = vec![0.0; self.value(*b).numel()];
                for bi in 0..ba {
                    let src = bi * (ca + cb) * hw;
                    ga[bi * ca * hw..(bi + 1) * ca * hw]
                        .copy_from_slice(&gv[src..src + ca * hw]);
                    gb[bi * cb * hw..(bi + 1) * cb * hw]
                        .copy_from_slice(&gv[src + ca * hw..src + (ca + cb) * hw]);
                }
                self.acc(grads, *a, self.value(*a).shape(), ga);
                self.acc(grads, *b, self.value(*b).shape(), gb);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(&data) {
                    *e += v;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape"));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// Interpret a tensor as rows: [B,n] gives (B, n, false), [n] gives (1, n, true).
fn rows_of(t: &Tensor) -> Result<(usize, usize, bool)> {
    match t.shape() {
        [n] => Ok((1, *n, true)),
        [b, n] => Ok((*b, *n, false)),
        s => Err(CsError::dimension(format!(
            "expected 1-D or 2-D tensor, got {}",
            shape_str(s)
        ))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(CsError::dimension(format!(
            "{what}: expected 4-D NCHW tensor, got {}",
            shape_str(s)
        ))),
    }
}

fn first_max(win: &[f64]) -> (usize, &f64) {
    let mut best = 0;
    for (i, v) in win.iter().enumerate() {
        if *v > win[best] {
            best = i;
        }
    }
    (best, &win[best])
}

/// Walk two same-rank shapes where `b` axes are equal or 1, yielding the
/// flat index pair for every element of `a`.
pub(crate) fn broadcast_zip(
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        b_strides[ax] = if b_shape[ax] == 1 { 0 } else { s };
        s *= b_shape[ax];
    }
    let n: usize = a_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut b_off = 0usize;
    for flat in 0..n {
        f(flat, b_off);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            b_off += b_strides[ax];
            if idx[ax] < a_shape[ax] {
                break;
            }
            idx[ax] = 0;
            b_off -= b_strides[ax] * a_shape[ax];
        }
    }
}
