use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// A[..., k] · B[k, n]; leading dimensions of A are flattened.
    Matmul,
    /// Per-batch A_s[m, k] · B_s[k, n] (or · B_s[n, k]ᵀ with `tb`).
    Bmm { tb: bool },
    Add,
    Mul,
    /// X[..., n] + bias[n].
    AddBias,
    Scale(f64),
    /// Softmax over the last dim after dividing by `scale`. The causal
    /// mask, when applied, leaves zeros in the output, so backward needs
    /// no record of it.
    Softmax { scale: f64 },
    Gelu,
    LayerNorm { inv_std: Vec<f64> },
    ConcatLast { widths: Vec<usize> },
    /// [S, N, B] -> [S, B] at a fixed position.
    TakePosition { pos: usize },
    CrossEntropy { targets: Vec<u32>, weights: Option<Vec<f64>>, probs: Vec<f64> },
    Sum,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Record of primitive applications in execution (= topological) order.
/// Backward replays the record once, in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaf
/// gradients are retained; intermediate buffers are dropped as the
/// sweep passes them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, if any path connected it to the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, densified to zeros when disconnected.
    pub fn dense(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient (data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable input; `backward` reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() < 2 || bv.ndim() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, out.data_mut());
        Ok(self.push(Op::Matmul, vec![a, b], out))
    }

    /// Batched product A[S, m, k] · B[S, k, n].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, false)
    }

    /// Batched product against transposed blocks: A[S, m, k] · B[S, n, k]ᵀ.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: NodeId, b: NodeId, tb: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ok = av.ndim() == 3
            && bv.ndim() == 3
            && av.shape()[0] == bv.shape()[0]
            && if tb { av.shape()[2] == bv.shape()[2] } else { av.shape()[2] == bv.shape()[1] };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (s, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = if tb { bv.shape()[1] } else { bv.shape()[2] };
        let mut out = Tensor::zeros(&[s, m, n]);
        kernels::bmm(s, m, k, n, av.data(), false, bv.data(), tb, 0.0, out.data_mut());
        Ok(self.push(Op::Bmm { tb }, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, which: &'static str) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: which,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        match which {
            "add" => {
                for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
                    *o += x;
                }
                Ok(self.push(Op::Add, vec![a, b], out))
            }
            _ => {
                for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
                    *o *= x;
                }
                Ok(self.push(Op::Mul, vec![a, b], out))
            }
        }
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.ndim() != 1 || bv.len() != xv.last_dim() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias, vec![x, bias], out))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        self.push(Op::Scale(factor), vec![x], out)
    }

    /// Rows of the last dimension divided by `scale`, exponentiated with
    /// max-subtraction, normalized to sum 1.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.softmax_impl(x, scale, false)
    }

    /// [`Self::softmax_rows`] with the upper triangle of each trailing
    /// square block masked out: position i attends only to j <= i.
    pub fn causal_softmax_rows(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.softmax_impl(x, scale, true)
    }

    fn softmax_impl(&mut self, x: NodeId, scale: f64, causal: bool) -> Result<NodeId> {
        if scale <= 0.0 {
            return Err(Error::Contract(format!("softmax scale must be > 0, got {scale}")));
        }
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let block = xv.shape()[xv.ndim() - 2];
        let cols = xv.last_dim();
        if causal && block != cols {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![block, block],
            });
        }
        let rows = xv.leading();
        let mut out = Tensor::zeros(xv.shape());
        kernels::softmax_fwd(
            xv.data(),
            rows,
            cols,
            scale,
            causal.then_some(block),
            out.data_mut(),
        );
        Ok(self.push(Op::Softmax { scale }, vec![x], out))
    }

    /// Elementwise exact-erf GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        kernels::gelu_fwd(xv.data(), out.data_mut());
        self.push(Op::Gelu, vec![x], out)
    }

    /// Last dimension normalized to zero mean, unit variance; fixed unit
    /// gain and zero bias (nothing trainable).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.last_dim() < 2 {
            return Err(Error::Contract(format!(
                "layer_norm needs a last dimension of at least 2, got shape {:?}",
                xv.shape()
            )));
        }
        let (rows, cols) = (xv.leading(), xv.last_dim());
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::new();
        kernels::layer_norm_fwd(xv.data(), rows, cols, eps, out.data_mut(), &mut inv_std);
        Ok(self.push(Op::LayerNorm { inv_std }, vec![x], out))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last of zero tensors".into()));
        }
        let lead_shape = self.value(parts[0]).shape()[..self.value(parts[0]).ndim() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape()[..v.ndim() - 1] != lead_shape[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead_shape.iter().product();
        let mut shape = lead_shape;
        shape.push(total);
        let mut out = Tensor::zeros(&shape);
        {
            let data = out.data_mut();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.nodes[p.0].value.data();
                for r in 0..rows {
                    data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        Ok(self.push(Op::ConcatLast { widths }, parts.to_vec(), out))
    }

    /// Selects one sequence position: [S, N, B] -> [S, B].
    pub fn take_position(&mut self, x: NodeId, pos: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 3 || pos >= xv.shape()[1] {
            return Err(Error::Contract(format!(
                "take_position({pos}) on shape {:?}",
                xv.shape()
            )));
        }
        let (s, n, b) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[s, b]);
        for i in 0..s {
            out.data_mut()[i * b..(i + 1) * b]
                .copy_from_slice(&xv.data()[(i * n + pos) * b..(i * n + pos) * b + b]);
        }
        Ok(self.push(Op::TakePosition { pos }, vec![x], out))
    }

    /// Negative log softmax probability of `target` for 1-D logits.
    pub fn cross_entropy(&mut self, logits: NodeId, target: u32) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        self.cross_entropy_impl(logits, vec![target], None, lv.len())
    }

    /// Mean cross-entropy over the rows of [..., T] logits (leading
    /// dimensions flattened); optional per-row weights (the mean is
    /// weight-normalized).
    pub fn cross_entropy_mean(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        weights: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() < 2 || lv.leading() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(w) = &weights {
            if w.len() != targets.len() || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Contract("cross-entropy weights must cover rows with positive total".into()));
            }
        }
        let cols = lv.last_dim();
        self.cross_entropy_impl(logits, targets.to_vec(), weights, cols)
    }

    fn cross_entropy_impl(
        &mut self,
        logits: NodeId,
        targets: Vec<u32>,
        weights: Option<Vec<f64>>,
        cols: usize,
    ) -> Result<NodeId> {
        for &t in &targets {
            if t as usize >= cols {
                return Err(Error::TokenOutOfRange { token: t, vocab: cols });
            }
        }
        let lv = self.value(logits);
        let rows = targets.len();
        let mut probs = vec![0.0; rows * cols];
        let loss = kernels::cross_entropy_fwd(
            lv.data(),
            rows,
            cols,
            &targets,
            weights.as_deref(),
            &mut probs,
        );
        Ok(self.push(
            Op::CrossEntropy { targets, weights, probs },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    /// Reverse-mode sweep from a scalar loss. Visits the record once in
    /// reverse; leaves without a path to the loss simply report no
    /// gradient (densified to zeros by [`Gradients::dense`]).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue; // keep the gradient for the caller
            }
            let dy = grads[i].take().expect("grad present");
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let ensure = |grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize]| {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(shape));
            }
        };
        match &node.op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
                if wants(a) {
                    ensure(grads, a, av.shape());
                    let da = grads[a.0].as_mut().unwrap();
                    kernels::gemm(m, n, k, dy.data(), false, bv.data(), true, 1.0, da.data_mut());
                }
                if wants(b) {
                    ensure(grads, b, bv.shape());
                    let db = grads[b.0].as_mut().unwrap();
                    kernels::gemm(k, m, n, av.data(), true, dy.data(), false, 1.0, db.data_mut());
                }
            }
            Op::Bmm { tb } => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let (s, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = dy.shape()[2];
                if wants(a) {
                    ensure(grads, a, av.shape());
                    let da = grads[a.0].as_mut().unwrap();
                    // dA = dY·Bᵀ (plain) or dY·B (tb).
                    kernels::bmm(s, m, n, k, dy.data(), false, bv.data(), !tb, 1.0, da.data_mut());
                }
                if wants(b) {
                    ensure(grads, b, bv.shape());
                    let db = grads[b.0].as_mut().unwrap();
                    if *tb {
                        // dB = dYᵀ·A, blocks [n, m]·[m, k].
                        kernels::bmm(s, n, m, k, dy.data(), true, av.data(), false, 1.0, db.data_mut());
                    } else {
                        // dB = Aᵀ·dY, blocks [k, m]·[m, n].
                        kernels::bmm(s, k, m, n, av.data(), true, dy.data(), false, 1.0, db.data_mut());
                    }
                }
            }
            Op::Add => {
                for &input in &node.inputs {
                    if wants(input) {
                        ensure(grads, input, dy.shape());
                        let g = grads[input.0].as_mut().unwrap();
                        for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                for (this, other) in [(a, b), (b, a)] {
                    if wants(this) {
                        ensure(grads, this, dy.shape());
                        let other_data: Vec<f64> = self.value(other).data().to_vec();
                        let g = grads[this.0].as_mut().unwrap();
                        for ((o, &d), &x) in g.data_mut().iter_mut().zip(dy.data()).zip(&other_data) {
                            *o += d * x;
                        }
                    }
                }
            }
            Op::AddBias => {
                let (x, bias) = (node.inputs[0], node.inputs[1]);
                if wants(x) {
                    ensure(grads, x, dy.shape());
                    let g = grads[x.0].as_mut().unwrap();
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                }
                if wants(bias) {
                    let n = self.value(bias).len();
                    ensure(grads, bias, &[n]);
                    let g = grads[bias.0].as_mut().unwrap();
                    for row in dy.data().chunks(n) {
                        for (o, &d) in g.data_mut().iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Scale(factor) => {
                let x = node.inputs[0];
                if wants(x) {
                    ensure(grads, x, dy.shape());
                    let g = grads[x.0].as_mut().unwrap();
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += factor * d;
                    }
                }
            }
            Op::Softmax { scale } => {
                let x = node.inputs[0];
                if wants(x) {
                    let (rows, cols) = (node.value.leading(), node.value.last_dim());
                    ensure(grads, x, node.value.shape());
                    let g = grads[x.0].as_mut().unwrap();
                    kernels::softmax_bwd(node.value.data(), dy.data(), rows, cols, *scale, g.data_mut());
                }
            }
            Op::Gelu => {
                let x = node.inputs[0];
                if wants(x) {
                    ensure(grads, x, node.value.shape());
                    let xv: Vec<f64> = self.value(x).data().to_vec();
                    let g = grads[x.0].as_mut().unwrap();
                    kernels::gelu_bwd(&xv, dy.data(), g.data_mut());
                }
            }
            Op::LayerNorm { inv_std } => {
                let x = node.inputs[0];
                if wants(x) {
                    let (rows, cols) = (node.value.leading(), node.value.last_dim());
                    ensure(grads, x, node.value.shape());
                    let g = grads[x.0].as_mut().unwrap();
                    kernels::layer_norm_bwd(node.value.data(), inv_std, dy.data(), rows, cols, g.data_mut());
                }
            }
            Op::ConcatLast { widths } => {
                let total: usize = widths.iter().sum();
                let rows = node.value.leading();
                let mut offset = 0;
                for (&input, &w) in node.inputs.iter().zip(widths) {
                    if wants(input) {
                        ensure(grads, input, self.value(input).shape());
                        let g = grads[input.0].as_mut().unwrap();
                        for r in 0..rows {
                            let src = &dy.data()[r * total + offset..r * total + offset + w];
                            for (o, &d) in g.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::TakePosition { pos } => {
                let x = node.inputs[0];
                if wants(x) {
                    let xv_shape = self.value(x).shape().to_vec();
                    let (n, b) = (xv_shape[1], xv_shape[2]);
                    ensure(grads, x, &xv_shape);
                    let g = grads[x.0].as_mut().unwrap();
                    for (s, row) in dy.data().chunks(b).enumerate() {
                        let base = (s * n + pos) * b;
                        for (o, &d) in g.data_mut()[base..base + b].iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                }
            }
            Op::CrossEntropy { targets, weights, probs } => {
                let logits = node.inputs[0];
                if wants(logits) {
                    let cols = probs.len() / targets.len();
                    ensure(grads, logits, self.value(logits).shape());
                    let g = grads[logits.0].as_mut().unwrap();
                    kernels::cross_entropy_bwd(
                        probs,
                        targets.len(),
                        cols,
                        targets,
                        weights.as_deref(),
                        dy.item(),
                        g.data_mut(),
                    );
                }
            }
            Op::Sum => {
                let x = node.inputs[0];
                if wants(x) {
                    ensure(grads, x, self.value(x).shape());
                    let g = grads[x.0].as_mut().unwrap();
                    let d = dy.item();
                    for o in g.data_mut() {
                        *o += d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check::{finite_difference_gradient, max_relative_error};
    use crate::rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng::stream(seed))
    }

    /// Finite-difference check of d(sum ∘ build)/dx against backward.
    fn check_grad<F>(x: &Tensor, build: F) -> f64
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let out = build(&mut g, xid);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.dense(&g, xid);

        let numeric = finite_difference_gradient(
            |probe| {
                let mut g = Graph::new();
                let xid = g.leaf(probe.clone());
                let out = build(&mut g, xid);
                let loss = g.sum(out);
                g.value(loss).item()
            },
            x,
            1e-5,
        )
        .unwrap();
        max_relative_error(&analytic, &numeric)
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prod = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_bt() {
        // d sum(A·B)/dA = 1·Bᵀ.
        let a = randn(&[3, 4], 1);
        let b = randn(&[4, 2], 2);
        let mut g = Graph::new();
        let aid = g.leaf(a.clone());
        let bid = g.constant(b.clone());
        let prod = g.matmul(aid, bid).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let da = grads.dense(&g, aid);
        for i in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|c| b.at(j, c)).sum();
                assert!((da.at(i, j) - expect).abs() < 1e-12);
            }
        }

        let err = check_grad(&a, |g, x| {
            let b = g.constant(randn(&[4, 2], 2));
            g.matmul(x, b).unwrap()
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn primitives_pass_finite_difference_on_random_shapes() {
        // Every differentiable primitive, 20+ random small shapes each.
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let rows = 2 + (seed as usize % 3);
            let cols = 2 + (seed as usize % 4);

            let x = randn(&[rows, cols], 100 + seed);
            worst = worst.max(check_grad(&x, |g, x| {
                let w = g.constant(randn(&[2 + (seed as usize % 4), 3], 200 + seed));
                g.matmul(x, w).unwrap()
            }));
            worst = worst.max(check_grad(&x, |g, x| g.softmax_rows(x, 2.0).unwrap()));
            worst = worst.max(check_grad(&x, |g, x| g.gelu(x)));
            worst = worst.max(check_grad(&x, |g, x| g.layer_norm(x, 1e-5).unwrap()));
            worst = worst.max(check_grad(&x, |g, x| {
                let y = g.constant(randn(&[rows, cols], 300 + seed));
                g.mul(x, y).unwrap()
            }));
            worst = worst.max(check_grad(&x, |g, x| {
                let b = g.constant(randn(&[cols], 400 + seed));
                g.add_bias(x, b).unwrap()
            }));

            let sq = randn(&[2, rows, rows], 500 + seed);
            worst = worst.max(check_grad(&sq, |g, x| g.causal_softmax_rows(x, 1.5).unwrap()));
            worst = worst.max(check_grad(&sq, |g, x| {
                let other = g.constant(randn(&[2, rows, 3], 600 + seed));
                g.bmm(x, other).unwrap()
            }));
            worst = worst.max(check_grad(&sq, |g, x| {
                let other = g.constant(randn(&[2, 4, rows], 700 + seed));
                g.bmm_nt(x, other).unwrap()
            }));
            worst = worst.max(check_grad(&sq, |g, x| g.take_position(x, rows - 1).unwrap()));

            let logits = randn(&[cols], 800 + seed);
            let target = (seed as u32) % cols as u32;
            let mut g = Graph::new();
            let lid = g.leaf(logits.clone());
            let loss = g.cross_entropy(lid, target).unwrap();
            let grads = g.backward(loss).unwrap();
            let analytic = grads.dense(&g, lid);
            let numeric = finite_difference_gradient(
                |probe| {
                    let mut g = Graph::new();
                    let lid = g.leaf(probe.clone());
                    let loss = g.cross_entropy(lid, target).unwrap();
                    g.value(loss).item()
                },
                &logits,
                1e-5,
            )
            .unwrap();
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        assert!(worst < 1e-4, "max rel err over primitives: {worst}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = randn(&[7], 42);
        let target = 3u32;
        let mut g = Graph::new();
        let lid = g.leaf(logits.clone());
        let loss = g.cross_entropy(lid, target).unwrap();
        let grads = g.backward(loss).unwrap();
        let dl = grads.dense(&g, lid);

        let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..7 {
            let expect = exps[j] / sum - if j == target as usize { 1.0 } else { 0.0 };
            assert!((dl.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_trivial_values() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[128]));
        let loss = g.cross_entropy(uniform, 5).unwrap();
        assert!((g.value(loss).item() - (128.0f64).ln()).abs() < 1e-12);

        let mut onehot = Tensor::zeros(&[16]);
        onehot.data_mut()[3] = 1e4;
        let hot = g.constant(onehot);
        let loss = g.cross_entropy(hot, 3).unwrap();
        assert!(g.value(loss).item() < 1e-10);

        let bad = g.constant(Tensor::zeros(&[4]));
        assert!(g.cross_entropy(bad, 4).is_err());
    }

    #[test]
    fn softmax_rows_trivial_values() {
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[1, 4]));
        let sm = g.softmax_rows(zeros, 1.0).unwrap();
        for &v in g.value(sm).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        // No overflow on an extreme logit gap.
        let spike = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let sm = g.softmax_rows(spike, 1.0).unwrap();
        assert!((g.value(sm).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(sm).data()[1].abs() < 1e-12);

        // Scaled row matches direct evaluation of softmax([0.5, 1, 1.5]).
        let row = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let sm = g.softmax_rows(row, 2.0).unwrap();
        let exps = [0.5f64.exp(), 1.0f64.exp(), 1.5f64.exp()];
        let total: f64 = exps.iter().sum();
        for (j, &e) in exps.iter().enumerate() {
            assert!((g.value(sm).at(0, j) - e / total).abs() < 1e-15);
        }

        assert!(g.softmax_rows(row, 0.0).is_err());
    }

    #[test]
    fn gelu_trivial_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
        let y = g.gelu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_trivial_values() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![1, 3], vec![7.0, 7.0, 7.0]).unwrap());
        let ln = g.layer_norm(c, 1e-5).unwrap();
        for &v in g.value(ln).data() {
            assert_eq!(v, 0.0);
        }

        let pm = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let ln = g.layer_norm(pm, 1e-12).unwrap();
        assert!((g.value(ln).data()[0] - 1.0).abs() < 1e-6);
        assert!((g.value(ln).data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn grad_of_sum_is_ones_and_disconnected_leaf_is_zero() {
        let mut g = Graph::new();
        let w = g.leaf(randn(&[3, 3], 9));
        let orphan = g.leaf(randn(&[2, 2], 10));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        for &v in grads.dense(&g, w).data() {
            assert_eq!(v, 1.0);
        }
        assert!(grads.get(orphan).is_none());
        for &v in grads.dense(&g, orphan).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn loss_of_matmul_square_matches_finite_difference() {
        let x = randn(&[2, 2], 11);
        let err = check_grad(&x, |g, x| {
            let w = g.constant(randn(&[2, 2], 12));
            let y = g.matmul(x, w).unwrap();
            g.mul(y, y).unwrap()
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::new();
        let w = g.leaf(randn(&[2, 2], 13));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_bit_exact_on_reevaluation() {
        let x = randn(&[4, 6], 21);
        let run = || {
            let mut g = Graph::new();
            let xid = g.constant(x.clone());
            let sm = g.softmax_rows(xid, 3.0).unwrap();
            let gl = g.gelu(sm);
            let ln = g.layer_norm(gl, 1e-5).unwrap();
            g.value(ln).clone()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
        assert!(first.all_finite());
    }

    #[test]
    fn concat_last_roundtrips_parts() {
        let a = randn(&[2, 3, 2], 31);
        let b = randn(&[2, 3, 4], 32);
        let mut g = Graph::new();
        let aid = g.leaf(a.clone());
        let bid = g.leaf(b.clone());
        let cat = g.concat_last(&[aid, bid]).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 3, 6]);
        assert_eq!(g.value(cat).at(0, 0), a.at(0, 0));
        assert_eq!(g.value(cat).at(0, 2), b.at(0, 0));

        let loss = g.sum(cat);
        let grads = g.backward(loss).unwrap();
        for &v in grads.dense(&g, aid).data() {
            assert_eq!(v, 1.0);
        }
        for &v in grads.dense(&g, bid).data() {
            assert_eq!(v, 1.0);
        }
    }
}
