//! Tape-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order. Leaves are named slots bound at
//! forward time; constants are embedded when the graph is built. Shapes are
//! inferred eagerly, so most mismatches surface while the graph is being
//! assembled, and binding mismatches surface in [`Graph::forward`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::math::{self, PadSpec};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Padding mode for the convolution primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

impl From<Padding> for PadSpec {
    fn from(p: Padding) -> PadSpec {
        match p {
            Padding::Valid => PadSpec::Valid,
            Padding::Same => PadSpec::Same,
        }
    }
}

enum Op<R> {
    Leaf { name: String },
    Constant(Tensor<R>),
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    ScalarAdd(f64),
    ClampMin(f64),
    MatMul,
    Conv2d(Padding),
    DepthwiseConv2d(Padding),
    AvgPool { ph: usize, pw: usize },
    Elu,
    BatchNormTrain { eps: f64 },
    BatchNormEval { eps: f64, mean: Vec<R>, var: Vec<R> },
    Dropout { p: f64, seed: u64 },
    Softmax,
    Log,
    Exp,
    Sum,
    Mean,
    SumAxis { axis: usize, keepdim: bool },
    Reshape,
    Transpose,
    Concat { axis: usize },
    /// Test-only op with a deliberately wrong backward rule, used as the
    /// negative control for the gradient checker.
    #[cfg(test)]
    CorruptScale(f64),
}

/// Per-node data cached during forward and needed by backward.
enum Aux<R> {
    BatchNorm { mean: Vec<R>, var: Vec<R> },
    DropoutMask(Vec<bool>),
}

struct Node<R> {
    op: Op<R>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor<R>>,
    grad: Option<Tensor<R>>,
    aux: Option<Aux<R>>,
}

/// Reverse-mode tape.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    leaves: BTreeMap<String, NodeId>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op<R>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value: None,
            grad: None,
            aux: None,
        });
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node, available after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Option<&Tensor<R>> {
        self.nodes[id.0].value.as_ref()
    }

    /// Batch statistics of a train-mode batch-norm node, available after
    /// forward. Returns `(mean, var)` per channel (biased variance).
    pub fn bn_stats(&self, id: NodeId) -> Option<(&[R], &[R])> {
        match &self.nodes[id.0].aux {
            Some(Aux::BatchNorm { mean, var }) => Some((mean, var)),
            _ => None,
        }
    }

    // -- graph construction ------------------------------------------------

    /// Named leaf with a declared shape. Re-declaring the same name returns
    /// the existing node; the shape must agree.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(Error::shape(
                    id.0,
                    "leaf",
                    format!(
                        "leaf '{}' re-declared with shape {:?}, previously {:?}",
                        name, shape, self.nodes[id.0].shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Embedded constant; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), vec![], shape)
    }

    fn binary_broadcast_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        math::broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::shape(
                self.nodes.len(),
                op,
                format!(
                    "cannot broadcast {:?} with {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            )
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_broadcast_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_broadcast_shape("sub", a, b)?;
        Ok(self.push(Op::Sub, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_broadcast_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarMul(c), vec![a], shape)
    }

    pub fn scalar_add(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarAdd(c), vec![a], shape)
    }

    /// Elementwise `max(x, c)`; gradient passes only where `x > c`.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::ClampMin(c), vec![a], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            ([m, k], [kb, n]) if k == kb => {
                let shape = vec![*m, *n];
                Ok(self.push(Op::MatMul, vec![a, b], shape))
            }
            _ => Err(Error::shape(
                self.nodes.len(),
                "matmul",
                format!("expected (m,k)x(k,n), got {sa:?} x {sb:?}"),
            )),
        }
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 {
            return Err(Error::shape(
                self.nodes.len(),
                "conv2d",
                format!("kernel must be 4-D (co,ci,kh,kw), got {ks:?}"),
            ));
        }
        let d = math::conv_dims(self.shape(input), ks[2], ks[3], padding.into())
            .map_err(|e| self.wrap_shape("conv2d", e))?;
        if ks[1] != d.ci {
            return Err(Error::shape(
                self.nodes.len(),
                "conv2d",
                format!("kernel expects {} input channels, input has {}", ks[1], d.ci),
            ));
        }
        let shape = vec![d.n, ks[0], d.oh, d.ow];
        Ok(self.push(Op::Conv2d(padding), vec![input, kernel], shape))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 {
            return Err(Error::shape(
                self.nodes.len(),
                "depthwise_conv2d",
                format!("kernel must be 4-D (c,m,kh,kw), got {ks:?}"),
            ));
        }
        let d = math::conv_dims(self.shape(input), ks[2], ks[3], padding.into())
            .map_err(|e| self.wrap_shape("depthwise_conv2d", e))?;
        if ks[0] != d.ci {
            return Err(Error::shape(
                self.nodes.len(),
                "depthwise_conv2d",
                format!("kernel has {} channels, input has {}", ks[0], d.ci),
            ));
        }
        let shape = vec![d.n, d.ci * ks[1], d.oh, d.ow];
        Ok(self.push(Op::DepthwiseConv2d(padding), vec![input, kernel], shape))
    }

    pub fn avg_pool(&mut self, input: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        let shape = math::avg_pool_out_shape(self.shape(input), ph, pw)
            .map_err(|e| self.wrap_shape("avg_pool", e))?;
        Ok(self.push(Op::AvgPool { ph, pw }, vec![input], shape))
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Elu, vec![a], shape)
    }

    /// Train-mode batch normalization over the channel axis of a 4-D input.
    /// `gamma` and `beta` are per-channel parameter nodes.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.check_bn("batch_norm_train", x, gamma, beta)?;
        Ok(self.push(Op::BatchNormTrain { eps }, vec![x, gamma, beta], shape))
    }

    /// Eval-mode batch normalization using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[R],
        running_var: &[R],
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.check_bn("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != shape[1] || running_var.len() != shape[1] {
            return Err(Error::shape(
                self.nodes.len(),
                "batch_norm_eval",
                format!(
                    "running stats have {} channels, input has {}",
                    running_mean.len(),
                    shape[1]
                ),
            ));
        }
        Ok(self.push(
            Op::BatchNormEval {
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
            vec![x, gamma, beta],
            shape,
        ))
    }

    fn check_bn(&self, op: &str, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<Vec<usize>> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(
                self.nodes.len(),
                op,
                format!("input must be 4-D (n,c,h,w), got {xs:?}"),
            ));
        }
        let c = xs[1];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(
                    self.nodes.len(),
                    op,
                    format!(
                        "{name} must have shape [{c}], got {:?}",
                        self.shape(id)
                    ),
                ));
            }
        }
        Ok(xs)
    }

    /// Inverted dropout; train-mode only. The mask is a pure function of
    /// `seed`, so repeated forwards are reproducible.
    pub fn dropout(&mut self, a: NodeId, p: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Dropout { p, seed }, vec![a], shape))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax, vec![a], shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log, vec![a], shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp, vec![a], shape)
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a], vec![])
    }

    /// Full mean reduction to a rank-0 scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a], vec![])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(
                self.nodes.len(),
                "sum_axis",
                format!("axis {axis} out of range for shape {s:?}"),
            ));
        }
        let mut shape = s.to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self.push(Op::SumAxis { axis, keepdim }, vec![a], shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let from: usize = self.shape(a).iter().product();
        let to: usize = shape.iter().product();
        if from != to || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                self.nodes.len(),
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape(a)),
            ));
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        match self.shape(a) {
            &[r, c] => Ok(self.push(Op::Transpose, vec![a], vec![c, r])),
            s => Err(Error::shape(
                self.nodes.len(),
                "transpose",
                format!("expected 2-D tensor, got {s:?}"),
            )),
        }
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat: no inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                self.nodes.len(),
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    self.nodes.len(),
                    "concat",
                    format!("incompatible input shapes {first:?} vs {s:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, inputs.to_vec(), shape))
    }

    #[cfg(test)]
    pub(crate) fn corrupt_scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::CorruptScale(c), vec![a], shape)
    }

    fn wrap_shape(&self, op: &str, e: Error) -> Error {
        match e {
            Error::InvalidArgument(msg) => Error::shape(self.nodes.len(), op, msg),
            other => other,
        }
    }

    // -- execution -----------------------------------------------------------

    /// Evaluate every node in tape order and return the value of `root`.
    ///
    /// All named leaves must be bound; binding shapes must match the declared
    /// leaf shapes.
    pub fn forward(&mut self, root: NodeId, bindings: &BTreeMap<String, Tensor<R>>) -> Result<Tensor<R>> {
        for (name, &id) in &self.leaves {
            match bindings.get(name) {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "forward: leaf '{name}' is not bound"
                    )))
                }
                Some(t) if t.shape() != self.nodes[id.0].shape => {
                    return Err(Error::shape(
                        id.0,
                        "leaf",
                        format!(
                            "leaf '{}' bound with shape {:?}, declared {:?}",
                            name,
                            t.shape(),
                            self.nodes[id.0].shape
                        ),
                    ));
                }
                Some(_) => {}
            }
        }
        for i in 0..self.nodes.len() {
            self.eval_node(i, bindings)?;
        }
        Ok(self.nodes[root.0].value.clone().expect("root evaluated"))
    }

    fn eval_node(&mut self, i: usize, bindings: &BTreeMap<String, Tensor<R>>) -> Result<()> {
        let inputs = self.nodes[i].inputs.clone();
        let val = |g: &Self, id: NodeId| -> Tensor<R> {
            g.nodes[id.0]
                .value
                .clone()
                .expect("tape order guarantees inputs are evaluated")
        };
        let (value, aux) = match &self.nodes[i].op {
            Op::Leaf { name } => (bindings[name].clone(), None),
            Op::Constant(t) => (t.clone(), None),
            Op::Add => {
                let (a, b) = (val(self, inputs[0]), val(self, inputs[1]));
                (
                    math::binary_broadcast(&a, &b, &self.nodes[i].shape, |x, y| x + y),
                    None,
                )
            }
            Op::Sub => {
                let (a, b) = (val(self, inputs[0]), val(self, inputs[1]));
                (
                    math::binary_broadcast(&a, &b, &self.nodes[i].shape, |x, y| x - y),
                    None,
                )
            }
            Op::Mul => {
                let (a, b) = (val(self, inputs[0]), val(self, inputs[1]));
                (
                    math::binary_broadcast(&a, &b, &self.nodes[i].shape, |x, y| x * y),
                    None,
                )
            }
            Op::ScalarMul(c) => {
                let c = R::of_f64(*c);
                (val(self, inputs[0]).map(|x| x * c), None)
            }
            Op::ScalarAdd(c) => {
                let c = R::of_f64(*c);
                (val(self, inputs[0]).map(|x| x + c), None)
            }
            Op::ClampMin(c) => {
                let c = R::of_f64(*c);
                (
                    val(self, inputs[0]).map(|x| if x > c { x } else { c }),
                    None,
                )
            }
            Op::MatMul => {
                let (a, b) = (val(self, inputs[0]), val(self, inputs[1]));
                (math::matmul(&a, &b)?, None)
            }
            Op::Conv2d(p) => {
                let (x, k) = (val(self, inputs[0]), val(self, inputs[1]));
                (math::conv2d_forward(&x, &k, (*p).into())?, None)
            }
            Op::DepthwiseConv2d(p) => {
                let (x, k) = (val(self, inputs[0]), val(self, inputs[1]));
                (math::depthwise_forward(&x, &k, (*p).into())?, None)
            }
            Op::AvgPool { ph, pw } => {
                let x = val(self, inputs[0]);
                (math::avg_pool_forward(&x, *ph, *pw)?, None)
            }
            Op::Elu => (math::elu_forward(&val(self, inputs[0])), None),
            Op::BatchNormTrain { eps } => {
                let x = val(self, inputs[0]);
                let gamma = val(self, inputs[1]);
                let beta = val(self, inputs[2]);
                let out = math::bn_forward_train(&x, gamma.data(), beta.data(), *eps)?;
                (
                    out.y,
                    Some(Aux::BatchNorm {
                        mean: out.mean,
                        var: out.var,
                    }),
                )
            }
            Op::BatchNormEval { eps, mean, var } => {
                let x = val(self, inputs[0]);
                let gamma = val(self, inputs[1]);
                let beta = val(self, inputs[2]);
                (
                    math::bn_forward_eval(&x, gamma.data(), beta.data(), mean, var, *eps)?,
                    None,
                )
            }
            Op::Dropout { p, seed } => {
                let x = val(self, inputs[0]);
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mask: Vec<bool> = (0..x.numel()).map(|_| rng.gen::<f64>() >= *p).collect();
                let scale = R::of_f64(1.0 / (1.0 - p));
                let data = x
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &keep)| if keep { v * scale } else { R::zero() })
                    .collect();
                (
                    Tensor::new(x.shape().to_vec(), data)?,
                    Some(Aux::DropoutMask(mask)),
                )
            }
            Op::Softmax => (math::softmax_forward(&val(self, inputs[0])), None),
            Op::Log => (val(self, inputs[0]).map(|x| x.ln()), None),
            Op::Exp => (val(self, inputs[0]).map(|x| x.exp()), None),
            Op::Sum => {
                let x = val(self, inputs[0]);
                (Tensor::scalar(math::sum_all(&x)), None)
            }
            Op::Mean => {
                let x = val(self, inputs[0]);
                let n = R::of_f64(x.numel() as f64);
                (Tensor::scalar(math::sum_all(&x) / n), None)
            }
            Op::SumAxis { axis, keepdim } => {
                let x = val(self, inputs[0]);
                (math::sum_axis_forward(&x, *axis, *keepdim), None)
            }
            Op::Reshape => {
                let x = val(self, inputs[0]);
                (
                    Tensor::new(self.nodes[i].shape.clone(), x.data().to_vec())?,
                    None,
                )
            }
            Op::Transpose => (math::transpose2d(&val(self, inputs[0]))?, None),
            Op::Concat { axis } => {
                let vals: Vec<Tensor<R>> = inputs.iter().map(|&id| val(self, id)).collect();
                (concat_forward(&vals, *axis, &self.nodes[i].shape), None)
            }
            #[cfg(test)]
            Op::CorruptScale(c) => {
                let c = R::of_f64(*c);
                (val(self, inputs[0]).map(|x| x * c), None)
            }
        };
        self.nodes[i].value = Some(value);
        self.nodes[i].aux = aux;
        Ok(())
    }

    /// Reverse pass from a scalar root. Returns the gradient of the root
    /// w.r.t. every named leaf; leaves not on a path to the root get an
    /// exactly-zero gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<BTreeMap<String, Tensor<R>>> {
        if self.nodes[root.0].value.is_none() {
            return Err(Error::InvalidArgument(
                "backward called before forward".into(),
            ));
        }
        if !self.nodes[root.0].shape.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(R::one()));

        for i in (0..=root.0).rev() {
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.leaves {
            let g = match &self.nodes[id.0].grad {
                Some(g) => g.clone(),
                None => Tensor::zeros(&self.nodes[id.0].shape),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<R>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o = *o + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, grad: &Tensor<R>) -> Result<()> {
        let inputs = self.nodes[i].inputs.clone();
        let val = |g: &Self, id: NodeId| -> Tensor<R> {
            g.nodes[id.0].value.clone().expect("forward has run")
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Constant(_) => {}
            Op::Add => {
                let da = math::reduce_to_shape(grad, &self.nodes[inputs[0].0].shape.clone());
                let db = math::reduce_to_shape(grad, &self.nodes[inputs[1].0].shape.clone());
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::Sub => {
                let da = math::reduce_to_shape(grad, &self.nodes[inputs[0].0].shape.clone());
                let neg = grad.map(|x| -x);
                let db = math::reduce_to_shape(&neg, &self.nodes[inputs[1].0].shape.clone());
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::Mul => {
                let a = val(self, inputs[0]);
                let b = val(self, inputs[1]);
                let ga = math::binary_broadcast(grad, &b, grad.shape(), |g, y| g * y);
                let gb = math::binary_broadcast(grad, &a, grad.shape(), |g, x| g * x);
                let da = math::reduce_to_shape(&ga, &self.nodes[inputs[0].0].shape.clone());
                let db = math::reduce_to_shape(&gb, &self.nodes[inputs[1].0].shape.clone());
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::ScalarMul(c) => {
                let c = R::of_f64(*c);
                self.accumulate(inputs[0], grad.map(|g| g * c));
            }
            Op::ScalarAdd(_) => {
                self.accumulate(inputs[0], grad.clone());
            }
            Op::ClampMin(c) => {
                let c = R::of_f64(*c);
                let x = val(self, inputs[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > c { g } else { R::zero() })
                    .collect();
                self.accumulate(inputs[0], Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::MatMul => {
                let a = val(self, inputs[0]);
                let b = val(self, inputs[1]);
                let da = math::matmul_abt(grad, &b)?;
                let db = math::matmul_atb(&a, grad)?;
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::Conv2d(p) => {
                let x = val(self, inputs[0]);
                let k = val(self, inputs[1]);
                let (dx, dk) = math::conv2d_backward(&x, &k, grad, (*p).into())?;
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], dk);
            }
            Op::DepthwiseConv2d(p) => {
                let x = val(self, inputs[0]);
                let k = val(self, inputs[1]);
                let (dx, dk) = math::depthwise_backward(&x, &k, grad, (*p).into())?;
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], dk);
            }
            Op::AvgPool { ph, pw } => {
                let shape = self.nodes[inputs[0].0].shape.clone();
                let dx = math::avg_pool_backward(&shape, grad, *ph, *pw)?;
                self.accumulate(inputs[0], dx);
            }
            Op::Elu => {
                let x = val(self, inputs[0]);
                self.accumulate(inputs[0], math::elu_backward(&x, grad));
            }
            Op::BatchNormTrain { eps } => {
                let eps = *eps;
                let x = val(self, inputs[0]);
                let gamma = val(self, inputs[1]);
                let (mean, var) = match &self.nodes[i].aux {
                    Some(Aux::BatchNorm { mean, var }) => (mean.clone(), var.clone()),
                    _ => unreachable!("bn aux cached in forward"),
                };
                let (dx, dgamma, dbeta) =
                    math::bn_backward_train(&x, gamma.data(), &mean, &var, eps, grad)?;
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], Tensor::new(vec![dgamma.len()], dgamma)?);
                self.accumulate(inputs[2], Tensor::new(vec![dbeta.len()], dbeta)?);
            }
            Op::BatchNormEval { eps, mean, var } => {
                let (eps, mean, var) = (*eps, mean.clone(), var.clone());
                let x = val(self, inputs[0]);
                let gamma = val(self, inputs[1]);
                let (dx, dgamma, dbeta) =
                    math::bn_backward_eval(&x, gamma.data(), &mean, &var, eps, grad)?;
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], Tensor::new(vec![dgamma.len()], dgamma)?);
                self.accumulate(inputs[2], Tensor::new(vec![dbeta.len()], dbeta)?);
            }
            Op::Dropout { p, .. } => {
                let scale = R::of_f64(1.0 / (1.0 - p));
                let mask = match &self.nodes[i].aux {
                    Some(Aux::DropoutMask(m)) => m.clone(),
                    _ => unreachable!("dropout mask cached in forward"),
                };
                let data = grad
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &keep)| if keep { g * scale } else { R::zero() })
                    .collect();
                self.accumulate(inputs[0], Tensor::new(grad.shape().to_vec(), data)?);
            }
            Op::Softmax => {
                let y = val(self, NodeId(i));
                self.accumulate(inputs[0], math::softmax_backward(&y, grad));
            }
            Op::Log => {
                let x = val(self, inputs[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| g / v)
                    .collect();
                self.accumulate(inputs[0], Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Exp => {
                let y = val(self, NodeId(i));
                let data = y
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| g * v)
                    .collect();
                self.accumulate(inputs[0], Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::Sum => {
                let shape = self.nodes[inputs[0].0].shape.clone();
                let g = grad.scalar_value();
                self.accumulate(inputs[0], Tensor::filled(&shape, g));
            }
            Op::Mean => {
                let shape = self.nodes[inputs[0].0].shape.clone();
                let n: usize = shape.iter().product();
                let g = grad.scalar_value() / R::of_f64(n as f64);
                self.accumulate(inputs[0], Tensor::filled(&shape, g));
            }
            Op::SumAxis { axis, keepdim } => {
                let shape = self.nodes[inputs[0].0].shape.clone();
                // reinstate the reduced axis so the backward kernel can expand
                let g = if *keepdim {
                    grad.clone()
                } else {
                    let mut s = grad.shape().to_vec();
                    s.insert(*axis, 1);
                    Tensor::new(s, grad.data().to_vec())?
                };
                self.accumulate(inputs[0], math::sum_axis_backward(&shape, *axis, &g));
            }
            Op::Reshape => {
                let shape = self.nodes[inputs[0].0].shape.clone();
                self.accumulate(inputs[0], Tensor::new(shape, grad.data().to_vec())?);
            }
            Op::Transpose => {
                self.accumulate(inputs[0], math::transpose2d(grad)?);
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let shapes: Vec<Vec<usize>> = inputs
                    .iter()
                    .map(|&id| self.nodes[id.0].shape.clone())
                    .collect();
                let parts = concat_backward(grad, axis, &shapes);
                for (&id, part) in inputs.iter().zip(parts) {
                    self.accumulate(id, part);
                }
            }
            #[cfg(test)]
            Op::CorruptScale(c) => {
                // wrong on purpose: uses c+1 instead of c
                let c = R::of_f64(*c + 1.0);
                self.accumulate(inputs[0], grad.map(|g| g * c));
            }
        }
        Ok(())
    }

    /// Names of all declared leaves.
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|s| s.as_str())
    }

}

fn concat_forward<R: Real>(vals: &[Tensor<R>], axis: usize, out_shape: &[usize]) -> Tensor<R> {
    let (outer, _, inner) = math::axis_split(out_shape, axis);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for o in 0..outer {
        for v in vals {
            let mid = v.shape()[axis];
            let start = o * mid * inner;
            data.extend_from_slice(&v.data()[start..start + mid * inner]);
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

fn concat_backward<R: Real>(grad: &Tensor<R>, axis: usize, shapes: &[Vec<usize>]) -> Vec<Tensor<R>> {
    let (outer, _, inner) = math::axis_split(grad.shape(), axis);
    let mut parts: Vec<Tensor<R>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let mut offset = 0;
    let total_mid = grad.shape()[axis];
    for (part, shape) in parts.iter_mut().zip(shapes) {
        let mid = shape[axis];
        for o in 0..outer {
            let src = &grad.data()[(o * total_mid + offset) * inner..][..mid * inner];
            part.data_mut()[o * mid * inner..(o + 1) * mid * inner].copy_from_slice(src);
        }
        offset += mid;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor<f64>)]) -> BTreeMap<String, Tensor<f64>> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn forward_identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf("a", &[2, 2]).unwrap();
        let b = g.leaf("b", &[2, 2]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let out = g
            .forward(
                c,
                &bind(&[
                    ("a", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                    ("b", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
                ]),
            )
            .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn forward_softmax_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[3]).unwrap();
        let s = g.softmax(x);
        let out = g
            .forward(s, &bind(&[("x", Tensor::zeros(&[3]))]))
            .unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_mean_square() {
        // mean(square(x)) at x=[1,2,3] is 14/3
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[3]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        let out = g
            .forward(
                m,
                &bind(&[("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())]),
            )
            .unwrap();
        assert!((out.scalar_value() - 14.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn forward_missing_binding_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[3]).unwrap();
        let m = g.mean(x);
        assert!(g.forward(m, &BTreeMap::new()).is_err());
    }

    #[test]
    fn forward_binding_shape_mismatch_names_leaf() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[3]).unwrap();
        let m = g.mean(x);
        let err = g
            .forward(m, &bind(&[("x", Tensor::zeros(&[4]))]))
            .unwrap_err();
        assert!(err.to_string().contains("leaf 'x'"), "got: {err}");
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2, 3]).unwrap();
        let s = g.sum(x);
        g.forward(s, &bind(&[("x", Tensor::filled(&[2, 3], 2.0))]))
            .unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_dot_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.forward(
            s,
            &bind(&[("x", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())]),
        )
        .unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2]).unwrap();
        let s = g.sum(x);
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2]).unwrap();
        let y = g.scalar_mul(x, 2.0);
        g.forward(y, &bind(&[("x", Tensor::zeros(&[2]))])).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn unreached_leaf_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2]).unwrap();
        let y = g.leaf("y", &[2]).unwrap();
        let s = g.sum(x);
        g.forward(
            s,
            &bind(&[("x", Tensor::zeros(&[2])), ("y", Tensor::filled(&[2], 5.0))]),
        )
        .unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["y"].data(), &[0.0, 0.0]);
        let _ = y;
    }

    #[test]
    fn dropout_deterministic_given_seed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[64]).unwrap();
        let d = g.dropout(x, 0.5, 42).unwrap();
        let b = bind(&[("x", Tensor::filled(&[64], 1.0))]);
        let y1 = g.forward(d, &b).unwrap();
        let y2 = g.forward(d, &b).unwrap();
        assert_eq!(y1, y2);
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf("x", &[64]).unwrap();
        let d2 = g2.dropout(x2, 0.5, 42).unwrap();
        let y3 = g2.forward(d2, &b).unwrap();
        assert_eq!(y1, y3);
    }

    #[test]
    fn concat_roundtrip_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf("a", &[1, 2]).unwrap();
        let b = g.leaf("b", &[1, 3]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        let s = g.sum(c);
        g.forward(
            s,
            &bind(&[
                ("a", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()),
                ("b", Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap()),
            ]),
        )
        .unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["a"].numel(), 2);
        assert_eq!(grads["b"].numel(), 3);
    }

    #[test]
    fn matmul_shape_error_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf("a", &[2, 3]).unwrap();
        let b = g.leaf("b", &[4, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "got: {msg}");
    }
}
