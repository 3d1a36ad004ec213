use super::conv::{conv2d_backward, conv2d_forward};
use super::{Scalar, Tensor};
use crate::error::{EscError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Scramble {
        input: Var,
        mapping: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep over the node list is a valid topological order for backprop.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || state.running_mean.len() != c {
            return Err(EscError::Shape(format!(
                "batch norm over {c} channels got mismatched parameters"
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::of_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        match mode {
            NormMode::Train => {
                let momentum = T::of_f64(BN_MOMENTUM);
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        sum += x.data()[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = sum / count as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        sq += x.data()[off..off + hw]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    mean[ch] = T::of_f64(m);
                    inv_std[ch] = T::of_f64(1.0 / (var + BN_EPS).sqrt());
                    let unbiased = if count > 1 {
                        var * count as f64 / (count - 1) as f64
                    } else {
                        var
                    };
                    state.running_mean[ch] =
                        momentum * state.running_mean[ch] + (T::one() - momentum) * T::of_f64(m);
                    state.running_var[ch] = momentum * state.running_var[ch]
                        + (T::one() - momentum) * T::of_f64(unbiased);
                }
            }
            NormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = state.running_mean[ch];
                    inv_std[ch] = T::one() / (state.running_var[ch] + eps).sqrt();
                }
            }
        }
        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma_v[ch] * xh + beta_v[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == NormMode::Train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(EscError::Shape(format!(
                "residual add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let scale = T::of_f64(1.0 / hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// `x[N,C] * W[K,C]^T + b[K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, c) = match x.shape() {
            [n, c] => (*n, *c),
            s => return Err(EscError::Shape(format!("dense expects [N,C], got {s:?}"))),
        };
        let k = match wt.shape() {
            [k, wc] if *wc == c => *k,
            s => {
                return Err(EscError::Shape(format!(
                    "dense weight {s:?} does not match {c} input features"
                )))
            }
        };
        if b.numel() != k {
            return Err(EscError::Shape("dense bias length mismatch".into()));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        T::gemm(n, c, k, x.data(), c as isize, 1, wt.data(), 1, c as isize, T::one(), &mut out, k as isize, 1);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![n, k], out)?,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    /// Returns the scalar loss node; class probabilities are available via
    /// [`Graph::probs`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, k) = match l.shape() {
            [n, k] => (*n, *k),
            s => return Err(EscError::Shape(format!("logits must be [N,K], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(EscError::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(EscError::Label { label: bad, classes: k });
        }
        let probs = softmax_rows(l);
        let mut loss = 0.0f64;
        for (row, &y) in labels.iter().enumerate() {
            let p = probs.data()[row * k + y].as_f64();
            loss -= p.max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::of_f64(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn probs(&self, loss: Var) -> Option<&Tensor<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Moves the C-vector at spatial location `l` to location `mapping[l]`.
    pub fn scramble(&mut self, input: Var, mapping: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if mapping.len() != h * w {
            return Err(EscError::Shape(format!(
                "permutation over {} locations applied to {h}x{w} grid",
                mapping.len()
            )));
        }
        let out = permute_locations(x, mapping, n, c, h * w);
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::Scramble {
                input,
                mapping: mapping.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(EscError::Shape("backward() needs a scalar root".into()));
        }
        self.backward_with(root, vec![T::one()])
    }

    /// Backpropagates an arbitrary seed gradient from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(EscError::Shape("seed gradient has wrong length".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let need_params = self.rg(weight) || self.rg(bias);
                let (dx, dw, db) = conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    *stride,
                    g,
                    self.rg(input),
                    need_params,
                );
                if let Some(dx) = dx {
                    self.accumulate(input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(weight, dw);
                }
                if let Some(db) = db {
                    self.accumulate(bias, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (n, c, h, w) = node.value.dims4().expect("4-D");
                let hw = h * w;
                let count = T::of_f64((n * hw) as f64);
                let gv = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = if *train {
                                gv[ch] * inv_std[ch] / count
                                    * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                g[i] * gv[ch] * inv_std[ch]
                            };
                        }
                    }
                }
                self.accumulate(input, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Relu { input } => {
                let input = *input;
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| if y > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(input, dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                let (_, _, h, w) = self.value(input).dims4().expect("4-D");
                let hw = h * w;
                let scale = T::of_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gi in g {
                    dx.extend(std::iter::repeat_n(gi * scale, hw));
                }
                self.accumulate(input, dx);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let x = self.value(input);
                let wt = self.value(weight);
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let k = wt.shape()[0];
                let dx = self.rg(input).then(|| {
                    let mut dx = vec![T::zero(); n * c];
                    T::gemm(n, k, c, g, k as isize, 1, wt.data(), c as isize, 1, T::zero(), &mut dx, c as isize, 1);
                    dx
                });
                let dw = self.rg(weight).then(|| {
                    let mut dw = vec![T::zero(); k * c];
                    T::gemm(k, n, c, g, 1, k as isize, x.data(), c as isize, 1, T::zero(), &mut dw, c as isize, 1);
                    dw
                });
                let mut db = vec![T::zero(); k];
                for row in g.chunks(k) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(weight, dw);
                }
                self.accumulate(bias, db);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let k = probs.shape()[1];
                let n = labels.len();
                let scale = g[0] / T::of_f64(n as f64);
                let mut dl: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    dl[row * k + y] = dl[row * k + y] - scale;
                }
                self.accumulate(logits, dl);
            }
            Op::Scramble { input, mapping } => {
                let input = *input;
                let (n, c, h, w) = node.value.dims4().expect("4-D");
                let hw = h * w;
                let mut dx = vec![T::zero(); g.len()];
                for plane in 0..n * c {
                    let off = plane * hw;
                    for (l, &dst) in mapping.iter().enumerate() {
                        dx[off + l] = g[off + dst];
                    }
                }
                self.accumulate(input, dx);
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).as_f64().exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of_f64(e / total)));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn permute_locations<T: Scalar>(
    x: &Tensor<T>,
    mapping: &[usize],
    n: usize,
    c: usize,
    hw: usize,
) -> Tensor<T> {
    let mut out = vec![T::zero(); x.numel()];
    for plane in 0..n * c {
        let off = plane * hw;
        for (l, &dst) in mapping.iter().enumerate() {
            out[off + dst] = x.data()[off + l];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
