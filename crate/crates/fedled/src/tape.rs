//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] records every operation as a node whose parents always have
//! smaller indices, so one reverse sweep over the node list propagates
//! vector-Jacobian products to every leaf. Gradient buffers are accumulated
//! in a fixed order, which makes the backward pass deterministic:
//! identical tapes produce bit-identical gradients.
//!
//! Only what the training objective needs is implemented: rank-1/2 tensors,
//! scalar and bias-row broadcasting, and a handful of fused ops (stable
//! softmax, cross-entropy, per-row entropy, log-sigmoid) whose naive
//! compositions would overflow or produce NaN on saturated inputs.

use crate::parallel::for_each_row;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    /// Elementwise add, same shape.
    Add(Var, Var),
    /// Tensor + one-element tensor.
    AddScalar(Var, Var),
    /// Matrix + row vector, broadcast across rows.
    AddRowBias(Var, Var),
    /// Tensor + compile-time constant; the constant vanishes in backward.
    AddConst(Var),
    /// Elementwise product, same shape.
    Mul(Var, Var),
    /// Tensor * one-element tensor.
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Recip(Var),
    SoftmaxRows(Var),
    RowSum(Var),
    Sum(Var),
    Reshape(Var),
    OuterFlatten(Var, Var),
    GradReverse(Var, f64),
    CrossEntropy(Var, Vec<u32>),
    EntropyRows(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like its value when the backward
    /// sweep never reached it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.rank() == 2 && bv.rank() == 2 && av.shape()[1] == bv.shape()[0],
            "dimension error: matmul {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), m, k, bv.data(), n, &mut out);
        self.push(Op::Matmul(a, b), Tensor::new([m, n], out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2, "dimension error: transpose of rank-1 tensor");
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        transpose_acc(xv.data(), m, n, &mut out);
        self.push(Op::Transpose(x), Tensor::new([n, m], out))
    }

    /// Elementwise add with scalar and bias-row broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash == bsh {
            let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            return self.push(Op::Add(a, b), Tensor::new(ash, data));
        }
        if self.value(b).len() == 1 {
            let s = self.value(b).item();
            let data = self.value(a).data().iter().map(|x| x + s).collect();
            return self.push(Op::AddScalar(a, b), Tensor::new(ash, data));
        }
        if self.value(a).len() == 1 {
            let s = self.value(a).item();
            let data = self.value(b).data().iter().map(|x| x + s).collect();
            return self.push(Op::AddScalar(b, a), Tensor::new(bsh, data));
        }
        if ash.len() == 2 && bsh.len() == 1 && ash[1] == bsh[0] {
            let (n, d) = (ash[0], ash[1]);
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    out[i * d + j] = av[i * d + j] + bv[j];
                }
            }
            return self.push(Op::AddRowBias(a, b), Tensor::new(ash, out));
        }
        panic!("dimension error: add {ash:?} + {bsh:?}");
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v + c).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::AddConst(x), Tensor::new(shape, data))
    }

    /// Elementwise product with scalar broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash == bsh {
            let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
            return self.push(Op::Mul(a, b), Tensor::new(ash, data));
        }
        if self.value(b).len() == 1 {
            let s = self.value(b).item();
            let data = self.value(a).data().iter().map(|x| x * s).collect();
            return self.push(Op::MulScalar(a, b), Tensor::new(ash, data));
        }
        if self.value(a).len() == 1 {
            let s = self.value(a).item();
            let data = self.value(b).data().iter().map(|x| x * s).collect();
            return self.push(Op::MulScalar(b, a), Tensor::new(bsh, data));
        }
        panic!("dimension error: mul {ash:?} * {bsh:?}");
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Scale(x, c), Tensor::new(shape, data))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Relu(x), Tensor::new(shape, data))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.exp()).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Exp(x), Tensor::new(shape, data))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(
            xv.data().iter().all(|&v| v > 0.0),
            "domain error: log of non-positive value"
        );
        let data = xv.data().iter().map(|v| v.ln()).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Log(x), Tensor::new(shape, data))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Sigmoid(x), Tensor::new(shape, data))
    }

    /// `ln(sigmoid(x))`, computed without ever materializing `sigmoid(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| log_sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::LogSigmoid(x), Tensor::new(shape, data))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(
            xv.data().iter().all(|&v| v != 0.0),
            "domain error: reciprocal of zero"
        );
        let data = xv.data().iter().map(|v| 1.0 / v).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Recip(x), Tensor::new(shape, data))
    }

    /// Row-wise softmax with max-subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2, "dimension error: softmax_rows needs a matrix");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; n * c];
        let data = xv.data();
        for_each_row(&mut out, c, |i, row| {
            softmax_row(&data[i * c..(i + 1) * c], row);
        });
        self.push(Op::SoftmaxRows(x), Tensor::new([n, c], out))
    }

    /// Sum over each row of a matrix: `[n, c] -> [n]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2, "dimension error: row_sum needs a matrix");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let data = xv.data();
        let out = (0..n).map(|i| data[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::RowSum(x), Tensor::new([n], out))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Mean of all elements (sum followed by a constant scale).
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let xv = self.value(x);
        let elems: usize = shape.iter().product();
        assert_eq!(
            elems,
            xv.len(),
            "dimension error: reshape {:?} -> {:?}",
            xv.shape(),
            shape
        );
        let value = Tensor::new(shape, xv.data().to_vec());
        self.push(Op::Reshape(x), value)
    }

    /// Per-row outer product, flattened: `out[i, j*c + k] = f[i,j] * g[i,k]`.
    pub fn outer_flatten(&mut self, f: Var, g: Var) -> Var {
        let (fv, gv) = (self.value(f), self.value(g));
        assert!(
            fv.rank() == 2 && gv.rank() == 2 && fv.shape()[0] == gv.shape()[0],
            "dimension error: outer_flatten {:?} x {:?}",
            fv.shape(),
            gv.shape()
        );
        let (n, d, c) = (fv.shape()[0], fv.shape()[1], gv.shape()[1]);
        let (fd, gd) = (fv.data(), gv.data());
        let mut out = vec![0.0; n * d * c];
        for_each_row(&mut out, d * c, |i, row| {
            let fr = &fd[i * d..(i + 1) * d];
            let gr = &gd[i * c..(i + 1) * c];
            for j in 0..d {
                for k in 0..c {
                    row[j * c + k] = fr[j] * gr[k];
                }
            }
        });
        self.push(Op::OuterFlatten(f, g), Tensor::new([n, d * c], out))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(Op::GradReverse(x, lambda), value)
    }

    /// Mean softmax cross-entropy of `logits` against integer labels,
    /// fused for numerical stability.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2, "dimension error: cross_entropy needs logits matrix");
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "dimension error: {} labels for {} rows", labels.len(), n);
        assert!(
            labels.iter().all(|&y| (y as usize) < c),
            "contract error: label out of range for {c} classes"
        );
        let data = lv.data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(Op::CrossEntropy(logits, labels.to_vec()), value)
    }

    /// Shannon entropy of each row of a probability matrix, with the
    /// `0·ln 0 = 0` convention so one-hot rows give exactly zero.
    pub fn entropy_rows(&mut self, p: Var) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.rank(), 2, "dimension error: entropy_rows needs a matrix");
        let (n, c) = (pv.shape()[0], pv.shape()[1]);
        let data = pv.data();
        assert!(
            data.iter().all(|&v| v >= 0.0),
            "domain error: entropy of negative probability"
        );
        let out = (0..n)
            .map(|i| {
                -data[i * c..(i + 1) * c]
                    .iter()
                    .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .collect();
        self.push(Op::EntropyRows(p), Tensor::new([n], out))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root, seeded with 1.
    ///
    /// Panics if `root` is not a one-element tensor. Leaves the sweep never
    /// reaches have no gradient; [`Grads::get_or_zeros`] maps them to zero.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).len(),
            1,
            "contract error: backward root must be scalar"
        );
        self.backward_impl(root, Tensor::scalar(1.0))
    }

    /// Reverse sweep from any node, seeded with an externally supplied
    /// upstream gradient of the same shape (the cross-party chain rule).
    pub fn backward_seeded(&self, root: Var, seed: &Tensor) -> Grads {
        assert_eq!(
            self.value(root).shape(),
            seed.shape(),
            "dimension error: seed shape {:?} vs node {:?}",
            seed.shape(),
            self.value(root).shape()
        );
        self.backward_impl(root, seed.clone())
    }

    fn backward_impl(&self, root: Var, seed: Tensor) -> Grads {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            // Parents always precede children, so by the time `id` is
            // visited its gradient is final.
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                {
                    let da = grad_slot(grads, *a, av.shape());
                    matmul_gbt_acc(gd, m, n, bv.data(), k, da.data_mut());
                }
                let db = grad_slot(grads, *b, bv.shape());
                matmul_atg_acc(av.data(), m, k, gd, n, db.data_mut());
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let dx = grad_slot(grads, *x, xv.shape()).data_mut();
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] += gd[i * m + j];
                    }
                }
            }
            Op::Add(a, b) => {
                acc_into(grad_slot(grads, *a, g.shape()), gd, |_, u| u);
                acc_into(grad_slot(grads, *b, g.shape()), gd, |_, u| u);
            }
            Op::AddScalar(x, s) => {
                acc_into(grad_slot(grads, *x, g.shape()), gd, |_, u| u);
                grad_slot(grads, *s, &[1]).data_mut()[0] += gd.iter().sum::<f64>();
            }
            Op::AddRowBias(x, b) => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                acc_into(grad_slot(grads, *x, g.shape()), gd, |_, u| u);
                let db = grad_slot(grads, *b, &[d]).data_mut();
                for i in 0..n {
                    for j in 0..d {
                        db[j] += gd[i * d + j];
                    }
                }
            }
            Op::AddConst(x) => {
                acc_into(grad_slot(grads, *x, g.shape()), gd, |_, u| u);
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                acc_into(grad_slot(grads, *a, g.shape()), gd, |i, u| u * bv[i]);
                acc_into(grad_slot(grads, *b, g.shape()), gd, |i, u| u * av[i]);
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |_, u| u * sv);
                grad_slot(grads, *s, &[1]).data_mut()[0] +=
                    gd.iter().zip(&xv).map(|(u, x)| u * x).sum::<f64>();
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc_into(grad_slot(grads, *x, g.shape()), gd, |_, u| u * c);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |i, u| {
                    if xv[i] > 0.0 {
                        u
                    } else {
                        0.0
                    }
                });
            }
            Op::Exp(x) => {
                let out = self.nodes[id].value.data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |i, u| u * out[i]);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |i, u| u / xv[i]);
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[id].value.data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |i, u| {
                    u * out[i] * (1.0 - out[i])
                });
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |i, u| u * sigmoid(-xv[i]));
            }
            Op::Recip(x) => {
                let out = self.nodes[id].value.data().to_vec();
                acc_into(grad_slot(grads, *x, g.shape()), gd, |i, u| -u * out[i] * out[i]);
            }
            Op::SoftmaxRows(x) => {
                let out = self.nodes[id].value.data();
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let dx = grad_slot(grads, *x, g.shape()).data_mut();
                for i in 0..n {
                    let s = &out[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] += s[j] * (gr[j] - dot);
                    }
                }
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let dx = grad_slot(grads, *x, xv.shape()).data_mut();
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] += gd[i];
                    }
                }
            }
            Op::Sum(x) => {
                let u = gd[0];
                let xv_shape = self.value(*x).shape().to_vec();
                for v in grad_slot(grads, *x, &xv_shape).data_mut() {
                    *v += u;
                }
            }
            Op::Reshape(x) => {
                let xv_shape = self.value(*x).shape().to_vec();
                let dx = grad_slot(grads, *x, &xv_shape).data_mut();
                for (v, u) in dx.iter_mut().zip(gd) {
                    *v += u;
                }
            }
            Op::OuterFlatten(f, gg) => {
                let (fv, gv) = (self.value(*f), self.value(*gg));
                let (n, d, c) = (fv.shape()[0], fv.shape()[1], gv.shape()[1]);
                let (fd0, gd0) = (fv.data().to_vec(), gv.data().to_vec());
                {
                    let df = grad_slot(grads, *f, fv.shape()).data_mut();
                    for i in 0..n {
                        for j in 0..d {
                            let mut acc = 0.0;
                            for k in 0..c {
                                acc += gd[i * d * c + j * c + k] * gd0[i * c + k];
                            }
                            df[i * d + j] += acc;
                        }
                    }
                }
                let dg = grad_slot(grads, *gg, gv.shape()).data_mut();
                for i in 0..n {
                    for k in 0..c {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += gd[i * d * c + j * c + k] * fd0[i * d + j];
                        }
                        dg[i * c + k] += acc;
                    }
                }
            }
            Op::GradReverse(x, lambda) => {
                let lambda = *lambda;
                acc_into(grad_slot(grads, *x, g.shape()), gd, |_, u| -lambda * u);
            }
            Op::CrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let (n, c) = (lv.shape()[0], lv.shape()[1]);
                let data = lv.data().to_vec();
                let u = gd[0] / n as f64;
                let dl = grad_slot(grads, *logits, lv.shape()).data_mut();
                let mut soft = vec![0.0; c];
                for (i, &y) in labels.iter().enumerate() {
                    softmax_row(&data[i * c..(i + 1) * c], &mut soft);
                    for j in 0..c {
                        let ind = if j == y as usize { 1.0 } else { 0.0 };
                        dl[i * c + j] += u * (soft[j] - ind);
                    }
                }
            }
            Op::EntropyRows(p) => {
                let pv = self.value(*p);
                let (n, c) = (pv.shape()[0], pv.shape()[1]);
                let pd = pv.data().to_vec();
                let dp = grad_slot(grads, *p, pv.shape()).data_mut();
                for i in 0..n {
                    for j in 0..c {
                        let pij = pd[i * c + j];
                        if pij > 0.0 {
                            dp[i * c + j] += gd[i] * -(pij.ln() + 1.0);
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()));
    }
    slot.as_mut().unwrap()
}

fn acc_into(t: &mut Tensor, upstream: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (v, &u)) in t.data_mut().iter_mut().zip(upstream).enumerate() {
        *v += f(i, u);
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// ── numeric kernels ─────────────────────────────────────────────────────
// All kernels accumulate into `out` and parallelize only over output rows,
// keeping per-element evaluation order fixed.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (l, &ail) in ar.iter().enumerate() {
            let br = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += ail * bv;
            }
        }
    });
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn matmul_gbt_acc(g: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * k);
    for_each_row(out, k, |i, row| {
        let gr = &g[i * n..(i + 1) * n];
        for (l, o) in row.iter_mut().enumerate() {
            let br = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in gr.iter().zip(br) {
                acc += gv * bv;
            }
            *o += acc;
        }
    });
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_atg_acc(a: &[f64], m: usize, k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for_each_row(out, n, |l, row| {
        for i in 0..m {
            let ail = a[i * k + l];
            let gr = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(gr) {
                *o += ail * gv;
            }
        }
    });
}

fn transpose_acc(x: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] += x[i * n + j];
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
