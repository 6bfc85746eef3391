use std::collections::HashMap;

use crate::autodiff::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Gather,
    Reshape,
    Permute,
    MaskedFill,
    Sum,
    Mean,
    CrossEntropy,
    Mse,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::MaskedFill,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::CrossEntropy,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::MaskedFill => "masked_fill",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

enum Op {
    Leaf {
        param: Option<String>,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Gelu {
        a: usize,
        tanh: Vec<f64>,
    },
    Softmax {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Every node's inputs have smaller ids than the node itself, so a single
/// reverse sweep over ids visits nodes in a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<OpKind>,
    bound: HashMap<String, Var>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scales the input gradients produced by `kind` by 1.5 so
    /// that gradient checks can be shown to catch a broken derivative.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t, false)
    }

    /// An unnamed leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t, true)
    }

    /// Records a parameter leaf; its gradient is later routed back to the
    /// parameter of the same name by [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        self.push(
            Op::Leaf {
                param: Some(p.name.clone()),
            },
            p.value.clone(),
            true,
        )
    }

    /// Makes later [`Tape::param`] calls for `name` return `var` instead of
    /// recording a new leaf. Used to differentiate with respect to a
    /// perturbed copy of a parameter.
    pub fn bind_param(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// `a @ b` over the last two axes. `a` is `[.., m, k]`; `b` is either a
    /// shared `[k, n]` matrix or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_batched = sb.len() > 2;
        if k != kb || (b_batched && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape(format!("matmul mismatch {sa:?} @ {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let b_off = if b_batched { bi * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..],
                    false,
                    &bv[b_off..],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!(
                "{op}: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        Ok(())
    }

    /// Elementwise `a + b`, where `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(nb)
            .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, t, rg))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(nb)
            .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x * y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, t, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Scale { a: a.0, c }, t, rg)
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let tanh: Vec<f64> = x.iter().map(|&x| gelu_tanh(x)).collect();
        let data = x.iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Gelu { a: a.0, tanh }, t, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} on rank {}", shape.len())));
        }
        let x = self.value(a);
        if !x.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = x.data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let max = (0..axis_len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..axis_len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::Softmax {
                a: a.0,
                outer,
                axis_len,
                inner,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Layer normalization over the last axis, population variance, with
    /// `eps` added inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} vs last dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).len() / d.max(1);
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Gathers rows of a `[V, H]` table: the embedding lookup.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape(format!("gather needs a [V, H] table, got {shape:?}")));
        }
        let (v, h) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Label(format!("row id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&tv[i * h..(i + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), h], out)?,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape { a: a.0 }, t, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {}", shape.len())));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            Tensor::new(out_shape, data)?,
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        if d0 >= perm.len() || d1 >= perm.len() {
            return Err(Error::shape(format!("transpose axes {d0},{d1} on rank {}", perm.len())));
        }
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    /// Replaces elements where `mask` is true with `value`; those positions
    /// pass no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(format!(
                "mask of length {} for tensor of length {}",
                mask.len(),
                self.value(a).len()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            Op::MaskedFill {
                a: a.0,
                mask: mask.to_vec(),
            },
            t,
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Op::Mean { a: a.0 }, Tensor::scalar(s), rg)
    }

    /// Mean negative log-softmax probability of the target class over rows
    /// whose target is not `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} vs {} targets",
                targets.len()
            )));
        }
        let c = shape[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Label(format!("target {bad} out of range for {c} classes")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        if !lv.all_finite() {
            return Err(Error::Numeric("cross_entropy logits are not finite".into()));
        }
        let lv = lv.data();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            if let Some(t) = t {
                total += max + z.ln() - row[*t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            Tensor::scalar(total / count as f64),
            rg,
        ))
    }

    /// Mean squared error between two equal-length tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::shape(format!(
                "mse: prediction length {} vs target length {}",
                p.len(),
                t.len()
            )));
        }
        let n = p.len() as f64;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
            Tensor::scalar(s),
            rg,
        ))
    }

    /// Reverse sweep from `loss`, populating gradients of every ancestor
    /// that requires one. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let fault = self.fault;
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let mut contribs = backward_node(&self.nodes, node, &g);
            if fault == Some(node.op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (input, c) in contribs {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut self.grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of parameter leaves into the matching parameters
    /// (matched by name). Parameters absent from the tape are left as is.
    pub fn accumulate_param_grads(&self, params: &mut [&mut Param]) -> Result<()> {
        if !self.backward_done {
            return Err(Error::State("accumulate_param_grads before backward".into()));
        }
        let index: HashMap<&str, usize> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(&i) = index.get(name.as_str()) {
                    hits.push((i, id));
                }
            }
        }
        for (i, id) in hits {
            match &self.grads[id] {
                Some(g) => params[i].accumulate_grad(g)?,
                None => params[i].accumulate_grad(&vec![0.0; self.nodes[id].value.len()])?,
            }
        }
        Ok(())
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Input-gradient contributions of one node given its output gradient.
fn backward_node(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| nodes[i].value.data();
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf { .. } => Vec::new(),
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            let mut out = Vec::new();
            if needs(a) {
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..],
                        false,
                        &val(b)[b_off..],
                        true,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
                out.push((a, da));
            }
            if needs(b) {
                let mut db = vec![0.0; if b_batched { batch * k * n } else { k * n }];
                for bi in 0..batch {
                    let (off, acc) = if b_batched { (bi * k * n, false) } else { (0, bi > 0) };
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        &val(a)[bi * m * k..],
                        true,
                        &g[bi * m * n..],
                        false,
                        &mut db[off..off + k * n],
                        acc,
                    );
                }
                out.push((b, db));
            }
            out
        }
        &Op::Add { a, b } => {
            let mut out = Vec::new();
            if needs(a) {
                out.push((a, g.to_vec()));
            }
            if needs(b) {
                let nb = val(b).len().max(1);
                let mut db = vec![0.0; nb];
                for c in g.chunks(nb) {
                    db.iter_mut().zip(c).for_each(|(d, gi)| *d += gi);
                }
                out.push((b, db));
            }
            out
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let nb = bv.len().max(1);
            let mut out = Vec::new();
            if needs(a) {
                out.push((a, g.chunks(nb).flat_map(|c| c.iter().zip(bv).map(|(gi, y)| gi * y)).collect()));
            }
            if needs(b) {
                let mut db = vec![0.0; nb];
                for (c, ac) in g.chunks(nb).zip(av.chunks(nb)) {
                    for ((d, gi), x) in db.iter_mut().zip(c).zip(ac) {
                        *d += gi * x;
                    }
                }
                out.push((b, db));
            }
            out
        }
        &Op::Scale { a, c } => vec![(a, g.iter().map(|x| x * c).collect())],
        Op::Gelu { a, tanh } => vec![(
            *a,
            g.iter().zip(val(*a)).zip(tanh).map(|((gi, &x), &t)| gi * gelu_grad(x, t)).collect(),
        )],
        &Op::Softmax {
            a,
            outer,
            axis_len,
            inner,
        } => {
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * axis_len * inner + j * inner + i;
                    let dot: f64 = (0..axis_len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..axis_len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![(a, dx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let gv = val(gamma);
            let d = gv.len();
            let rows = inv_std.len();
            let mut out = Vec::new();
            if needs(x) {
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[r * d + j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        dx[r * d + j] = scale * (d as f64 * dh - s1 - xhat[r * d + j] * s2);
                    }
                }
                out.push((x, dx));
            }
            if needs(gamma) {
                let mut dg = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    dg[i % d] += gi * xhat[i];
                }
                out.push((gamma, dg));
            }
            if needs(beta) {
                let mut db = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
                out.push((beta, db));
            }
            out
        }
        Op::Gather { table, ids } => {
            let h = nodes[*table].value.shape()[1];
            let mut dt = vec![0.0; nodes[*table].value.len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..h {
                    dt[id * h + j] += g[r * h + j];
                }
            }
            vec![(*table, dt)]
        }
        &Op::Reshape { a } => vec![(a, g.to_vec())],
        Op::Permute { a, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, dx) = permute_data(g, node.value.shape(), &inverse);
            vec![(*a, dx)]
        }
        Op::MaskedFill { a, mask } => vec![(
            *a,
            g.iter()
                .zip(mask)
                .map(|(&gi, &m)| if m { 0.0 } else { gi })
                .collect(),
        )],
        &Op::Sum { a } => vec![(a, vec![g[0]; nodes[a].value.len()])],
        &Op::Mean { a } => {
            let n = nodes[a].value.len();
            vec![(a, vec![g[0] / n as f64; n])]
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let c = nodes[*logits].value.shape()[1];
            let scale = g[0] / *count as f64;
            let mut dl = vec![0.0; probs.len()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    for j in 0..c {
                        dl[r * c + j] = scale * probs[r * c + j];
                    }
                    dl[r * c + t] -= scale;
                }
            }
            vec![(*logits, dl)]
        }
        &Op::Mse { pred, target } => {
            let (p, t) = (val(pred), val(target));
            let scale = 2.0 * g[0] / p.len() as f64;
            let diff: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
            let mut out = Vec::new();
            if needs(target) {
                out.push((target, diff.iter().map(|d| -d).collect()));
            }
            if needs(pred) {
                out.push((pred, diff));
            }
            out
        }
    }
}

/// `c (+)= op(a) · op(b)` for one `m×k` by `k×n` product. A transposed
/// operand is stored row-major in its untransposed (`k×m` / `n×k`) layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides address exactly the m×k, k×n
    // and m×n element ranges of the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        let mut o = offset;
        for _ in 0..inner_len {
            out.push(data[o]);
            o += inner_stride;
        }
        // advance the multi-index over all axes except the last
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}
