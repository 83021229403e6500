use super::kernels::{self, ConvDims};
use super::{AutodiffError, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, dims: ConvDims },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    GroupSum { input: Var, groups: Vec<Vec<usize>> },
    Nll { probs: Var, labels: Vec<usize>, weights: Vec<f64> },
    Kl { pred: Var, target: Vec<f64>, weights: Vec<f64> },
    KlPredFirst { pred: Var, target: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Execution record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass. `None` for constants, or before
    /// backward has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d";
        let (cin, h, w) = self.value(input).dims3(OP)?;
        let kshape = self.value(kernel).shape().to_vec();
        let [cout, kcin, k, k2] = kshape[..] else {
            return Err(AutodiffError::shape(OP, format!("kernel must be [Cout,Cin,k,k], got {kshape:?}")));
        };
        if k != k2 {
            return Err(AutodiffError::shape(OP, format!("non-square kernel {kshape:?}")));
        }
        if k % 2 == 0 {
            return Err(AutodiffError::invalid(OP, format!("kernel size {k} is even")));
        }
        if kcin != cin {
            return Err(AutodiffError::shape(OP, format!("kernel expects {kcin} input channels, input has {cin}")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(AutodiffError::shape(
                OP,
                format!("bias shape {:?} does not match {cout} output channels", self.value(bias).shape()),
            ));
        }
        let dims = ConvDims { cin, cout, h, w, k };
        let out = kernels::conv2d_forward(
            dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let t = Tensor::from_parts(vec![cout, h, w], out);
        self.push_op(OP, t, &[input, kernel, bias], Op::Conv2d { input, kernel, bias, dims })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), kernels::relu_forward(v.data()));
        self.push_op("relu", t, &[x], Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push_op("add", t, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push_op("mul", t, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        self.push_op("scale", t, &[x], Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_op("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Softmax over the leading (channel) axis of a `[C, H, W]` tensor.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        const OP: &str = "softmax_channels";
        let (c, h, w) = self.value(logits).dims3(OP)?;
        if c < 2 {
            return Err(AutodiffError::invalid(OP, format!("need at least 2 channels, got {c}")));
        }
        let out = kernels::softmax_forward(c, h * w, self.value(logits).data());
        let t = Tensor::from_parts(vec![c, h, w], out);
        self.push_op(OP, t, &[logits], Op::Softmax(logits))
    }

    /// Output channel `j` is the sum of input channels `groups[j]`.
    pub fn channel_group_sum(&mut self, input: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        const OP: &str = "channel_group_sum";
        let (c, h, w) = self.value(input).dims3(OP)?;
        if groups.is_empty() || groups.iter().flatten().any(|&ch| ch >= c) {
            return Err(AutodiffError::shape(OP, format!("groups {groups:?} invalid for {c} channels")));
        }
        let out = kernels::group_sum_forward(h * w, self.value(input).data(), &groups);
        let t = Tensor::from_parts(vec![groups.len(), h, w], out);
        self.push_op(OP, t, &[input], Op::GroupSum { input, groups })
    }

    fn check_pixel_weights(&self, op: &'static str, probs: Var, weights: &[f64]) -> Result<(usize, usize)> {
        let (c, h, w) = self.value(probs).dims3(op)?;
        if weights.len() != h * w {
            return Err(AutodiffError::shape(op, format!("{} weights for {}x{} pixels", weights.len(), h, w)));
        }
        if weights.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(AutodiffError::invalid(op, "pixel weights must be finite and nonnegative"));
        }
        Ok((c, h * w))
    }

    /// Pixel-mean of `w · (−ln max(p[label], 1e-12))`.
    pub fn weighted_nll(&mut self, probs: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        const OP: &str = "weighted_nll";
        let (c, plane) = self.check_pixel_weights(OP, probs, weights)?;
        if labels.len() != plane {
            return Err(AutodiffError::shape(OP, format!("{} labels for {plane} pixels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::invalid(OP, format!("label {bad} out of range for {c} classes")));
        }
        let v = kernels::weighted_nll(plane, self.value(probs).data(), labels, weights);
        let op = Op::Nll { probs, labels: labels.to_vec(), weights: weights.to_vec() };
        self.push_op(OP, Tensor::scalar(v), &[probs], op)
    }

    /// Pixel-mean of `w · KL(target ‖ pred)`; `target` is a constant.
    pub fn weighted_kl(&mut self, target: &Tensor, pred: Var, weights: &[f64]) -> Result<Var> {
        const OP: &str = "weighted_kl";
        let (c, plane) = self.check_pixel_weights(OP, pred, weights)?;
        if target.shape() != self.value(pred).shape() {
            return Err(AutodiffError::shape(
                OP,
                format!("target {:?} vs prediction {:?}", target.shape(), self.value(pred).shape()),
            ));
        }
        let v = kernels::weighted_kl(c, plane, target.data(), self.value(pred).data(), weights);
        let op = Op::Kl { pred, target: target.data().to_vec(), weights: weights.to_vec() };
        self.push_op(OP, Tensor::scalar(v), &[pred], op)
    }

    /// Pixel-mean of `w · KL(pred ‖ target)`; `target` is a strictly positive
    /// constant.
    pub fn weighted_kl_pred_first(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        const OP: &str = "weighted_kl_pred_first";
        let (c, plane) = self.check_pixel_weights(OP, pred, weights)?;
        if target.shape() != self.value(pred).shape() {
            return Err(AutodiffError::shape(
                OP,
                format!("target {:?} vs prediction {:?}", target.shape(), self.value(pred).shape()),
            ));
        }
        if target.data().iter().any(|&g| g <= 0.0) {
            return Err(AutodiffError::invalid(OP, "target distribution contains zeros"));
        }
        let v = kernels::weighted_kl_pred_first(c, plane, self.value(pred).data(), target.data(), weights);
        let op = Op::KlPredFirst { pred, target: target.data().to_vec(), weights: weights.to_vec() };
        self.push_op(OP, Tensor::scalar(v), &[pred], op)
    }

    /// Fill the gradient of every trainable node reachable from `loss`.
    ///
    /// Gradients accumulate additively over fan-out. A graph supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if !shape.is_empty() {
            return Err(AutodiffError::NotScalar(shape));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            let node = &mut self.nodes[i];
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            t.check_finite("backward")?;
            node.grad = Some(t);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Lazily allocated gradient buffer of an input, or None if the input
        // does not need one.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>]| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            true
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, dims } => {
                let want_input = slot(*input, grads);
                let mut gk = vec![0.0; nodes[kernel.0].value.len()];
                let mut gb = vec![0.0; nodes[bias.0].value.len()];
                let mut gi = want_input.then(|| grads[input.0].take().unwrap());
                kernels::conv2d_backward(
                    *dims,
                    nodes[input.0].value.data(),
                    nodes[kernel.0].value.data(),
                    g,
                    gi.as_deref_mut(),
                    &mut gk,
                    &mut gb,
                );
                if let Some(gi) = gi {
                    grads[input.0] = Some(gi);
                }
                for (v, delta) in [(*kernel, gk), (*bias, gb)] {
                    if slot(v, grads) {
                        accumulate(grads[v.0].as_mut().unwrap(), &delta);
                    }
                }
            }
            Op::Relu(x) => {
                if slot(*x, grads) {
                    kernels::relu_backward(nodes[x.0].value.data(), g, grads[x.0].as_mut().unwrap());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if slot(v, grads) {
                        accumulate(grads[v.0].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if slot(a, grads) {
                    let other = nodes[b.0].value.data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for ((d, gv), o) in dst.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if slot(b, grads) {
                    let other = nodes[a.0].value.data();
                    let dst = grads[b.0].as_mut().unwrap();
                    for ((d, gv), o) in dst.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if slot(*x, grads) {
                    for (d, gv) in grads[x.0].as_mut().unwrap().iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::Sum(x) => {
                if slot(*x, grads) {
                    for d in grads[x.0].as_mut().unwrap().iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Softmax(x) => {
                if slot(*x, grads) {
                    let shape = node.value.shape();
                    let (c, plane) = (shape[0], shape[1] * shape[2]);
                    kernels::softmax_backward(c, plane, node.value.data(), g, grads[x.0].as_mut().unwrap());
                }
            }
            Op::GroupSum { input, groups } => {
                if slot(*input, grads) {
                    let shape = node.value.shape();
                    let plane = shape[1] * shape[2];
                    kernels::group_sum_backward(plane, groups, g, grads[input.0].as_mut().unwrap());
                }
            }
            Op::Nll { probs, labels, weights } => {
                if slot(*probs, grads) {
                    let v = &nodes[probs.0].value;
                    let plane = v.shape()[1] * v.shape()[2];
                    kernels::weighted_nll_backward(
                        plane,
                        v.data(),
                        labels,
                        weights,
                        g[0],
                        grads[probs.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Kl { pred, target, weights } => {
                if slot(*pred, grads) {
                    let v = &nodes[pred.0].value;
                    let (c, plane) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
                    kernels::weighted_kl_backward(
                        c,
                        plane,
                        target,
                        v.data(),
                        weights,
                        g[0],
                        grads[pred.0].as_mut().unwrap(),
                    );
                }
            }
            Op::KlPredFirst { pred, target, weights } => {
                if slot(*pred, grads) {
                    let v = &nodes[pred.0].value;
                    let (c, plane) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
                    kernels::weighted_kl_pred_first_backward(
                        c,
                        plane,
                        v.data(),
                        target,
                        weights,
                        g[0],
                        grads[pred.0].as_mut().unwrap(),
                    );
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[0.3, -1.0, 7.0]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.5, -2.0]));
        let a = g.scale(w, 3.0).unwrap();
        let b = g.scale(w, -0.5).unwrap();
        let c = g.add(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(w), Err(AutodiffError::NotScalar(vec![2])));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutodiffError::GraphConsumed));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.leaf(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let m = g.mul(c, w).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[4], &[-1.0, -0.1, -3.0, -2.0]));
        let r = g.relu(x).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_pointwise_and_padding() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 3, 3], 2.0));
        let k = g.leaf(t(&[1, 1, 1, 1], &[3.0]));
        let b = g.leaf(t(&[1], &[1.0]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0; 9]);

        let x = g.leaf(t(&[1, 1, 1], &[5.0]));
        let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3, 3], 1.0));
        let even = g.leaf(Tensor::full(&[1, 2, 2, 2], 1.0));
        let wrong_cin = g.leaf(Tensor::full(&[1, 3, 3, 3], 1.0));
        let b = g.leaf(t(&[1], &[0.0]));
        assert!(matches!(g.conv2d(x, even, b), Err(AutodiffError::InvalidArgument { .. })));
        assert!(matches!(g.conv2d(x, wrong_cin, b), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn non_finite_results_error() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[1e300]));
        assert_eq!(g.scale(x, 1e300), Err(AutodiffError::NonFinite { op: "scale" }));
    }
}
