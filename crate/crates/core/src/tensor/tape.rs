use rand::{Rng, RngExt};

use super::linalg::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        /// im2col buffer per batch item, `[N][C_in·k·k][H'·W']`.
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Hadamard(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; node inputs always precede their outputs.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`. `None` only for values that
    /// were not tracked; every tracked leaf has an entry (zero when disconnected).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `y = x·W + b` for `x: [N×D_in]`, `W: [D_in×D_out]`, `b: [D_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let ok = vx.rank() == 2
            && vw.rank() == 2
            && vb.rank() == 1
            && vx.shape()[1] == vw.shape()[0]
            && vw.shape()[1] == vb.shape()[0];
        if !ok {
            return Err(mismatch(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (n, d_in, d_out) = (vx.shape()[0], vw.shape()[0], vw.shape()[1]);
        let mut data = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            data.extend_from_slice(vb.data());
        }
        matmul_acc(vx.data(), vw.data(), &mut data, n, d_in, d_out);
        let out = Tensor::new(&[n, d_out], data)?;
        Ok(self.push(out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// Cross-correlation of `x: [N×C_in×H×W]` with `kernel: [C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        if vx.rank() != 4 || vk.rank() != 4 || vk.shape()[2] != vk.shape()[3] {
            return Err(mismatch(
                "conv2d",
                format!("input {:?}, kernel {:?}", vx.shape(), vk.shape()),
            ));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let [n, c_in, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [c_out, kc, k, _] = [vk.shape()[0], vk.shape()[1], vk.shape()[2], vk.shape()[3]];
        if kc != c_in {
            return Err(mismatch(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        let (Some(h_out), Some(w_out)) = (
            conv_out_extent(h, k, stride, padding),
            conv_out_extent(w, k, stride, padding),
        ) else {
            return Err(TensorError::KernelTooLarge {
                kernel: k,
                height: h + 2 * padding,
                width: w + 2 * padding,
            });
        };
        let ckk = c_in * k * k;
        let hw_out = h_out * w_out;
        let mut cols = vec![T::zero(); n * ckk * hw_out];
        let mut out = vec![T::zero(); n * c_out * hw_out];
        for b in 0..n {
            let img = &vx.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
            let col = &mut cols[b * ckk * hw_out..(b + 1) * ckk * hw_out];
            im2col(img, col, c_in, h, w, k, stride, padding, h_out, w_out);
            matmul_acc(
                vk.data(),
                col,
                &mut out[b * c_out * hw_out..(b + 1) * c_out * hw_out],
                c_out,
                ckk,
                hw_out,
            );
        }
        let out = Tensor::new(&[n, c_out, h_out, w_out], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                cols,
            },
            &[x, kernel],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Elementwise product. `b` may also be `[N×C]` against `a: [N×C×H×W]`,
    /// in which case each `b[n][c]` scales the whole `(n, c)` plane of `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::new(va.shape(), data)?
        } else if va.rank() == 4 && vb.rank() == 2 && va.shape()[..2] == vb.shape()[..] {
            let plane = va.shape()[2] * va.shape()[3];
            let data = va
                .data()
                .chunks(plane)
                .zip(vb.data())
                .flat_map(|(chunk, &s)| chunk.iter().map(move |&v| v * s))
                .collect();
            Tensor::new(va.shape(), data)?
        } else {
            return Err(mismatch(
                "hadamard",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        };
        Ok(self.push(out, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `[N×C×H×W] → [N×C]`, mean over each spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(mismatch(
                "global_avg_pool",
                format!("expected rank 4, got {:?}", vx.shape()),
            ));
        }
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let plane = vx.shape()[2] * vx.shape()[3];
        let scale = T::of_usize(plane);
        let data = vx
            .data()
            .chunks(plane)
            .map(|chunk| chunk.iter().copied().sum::<T>() / scale)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Inverted dropout. Returns `x` itself when not training or when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != labels.len() {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", vl.shape(), labels.len()),
            ));
        }
        let k = vl.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax_rows(vl.data(), k);
        let mut total = T::zero();
        for (row, &label) in vl.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_sum = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total = total + (log_sum - row[label]);
        }
        let loss = total / T::of_usize(labels.len());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.sum() / T::of_usize(vx.len()));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Sign pattern (`input > 0`) of every ReLU element recorded so far.
    /// Finite-difference checks use it to detect perturbations that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > T::zero())),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Reverse-mode sweep from a single-valued `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |acc| add_into(acc, gd));
                }
            }
            Op::Affine { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, d_in, d_out) = (vx.shape()[0], vw.shape()[0], vw.shape()[1]);
                self.accumulate(grads, *x, |acc| {
                    matmul_nt_acc(gd, vw.data(), acc, n, d_out, d_in)
                });
                self.accumulate(grads, *w, |acc| {
                    matmul_tn_acc(vx.data(), gd, acc, d_in, n, d_out)
                });
                self.accumulate(grads, *b, |acc| {
                    for row in gd.chunks(d_out) {
                        add_into(acc, row);
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                cols,
            } => {
                let vx = self.value(*x);
                let vk = self.value(*kernel);
                let [n, c_in, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                let (c_out, k) = (vk.shape()[0], vk.shape()[2]);
                let (h_out, w_out) = (g.shape()[2], g.shape()[3]);
                let ckk = c_in * k * k;
                let hw_out = h_out * w_out;
                self.accumulate(grads, *kernel, |acc| {
                    for b in 0..n {
                        matmul_nt_acc(
                            &gd[b * c_out * hw_out..(b + 1) * c_out * hw_out],
                            &cols[b * ckk * hw_out..(b + 1) * ckk * hw_out],
                            acc,
                            c_out,
                            hw_out,
                            ckk,
                        );
                    }
                });
                self.accumulate(grads, *x, |acc| {
                    let mut dcol = vec![T::zero(); ckk * hw_out];
                    for b in 0..n {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        matmul_tn_acc(
                            vk.data(),
                            &gd[b * c_out * hw_out..(b + 1) * c_out * hw_out],
                            &mut dcol,
                            ckk,
                            c_out,
                            hw_out,
                        );
                        col2im(
                            &dcol,
                            &mut acc[b * c_in * h * w..(b + 1) * c_in * h * w],
                            c_in,
                            h,
                            w,
                            k,
                            *stride,
                            *padding,
                            h_out,
                            w_out,
                        );
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(gd).zip(vx.data()) {
                        if xv > T::zero() {
                            *a = *a + gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gv), &s) in acc.iter_mut().zip(gd).zip(out) {
                        *a = *a + gv * s * (T::one() - s);
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if va.shape() == vb.shape() {
                    self.accumulate(grads, *a, |acc| {
                        for ((d, &gv), &bv) in acc.iter_mut().zip(gd).zip(vb.data()) {
                            *d = *d + gv * bv;
                        }
                    });
                    self.accumulate(grads, *b, |acc| {
                        for ((d, &gv), &av) in acc.iter_mut().zip(gd).zip(va.data()) {
                            *d = *d + gv * av;
                        }
                    });
                } else {
                    let plane = va.shape()[2] * va.shape()[3];
                    self.accumulate(grads, *a, |acc| {
                        for ((d, g_chunk), &s) in
                            acc.chunks_mut(plane).zip(gd.chunks(plane)).zip(vb.data())
                        {
                            for (dv, &gv) in d.iter_mut().zip(g_chunk) {
                                *dv = *dv + gv * s;
                            }
                        }
                    });
                    self.accumulate(grads, *b, |acc| {
                        for ((d, g_chunk), a_chunk) in acc
                            .iter_mut()
                            .zip(gd.chunks(plane))
                            .zip(va.data().chunks(plane))
                        {
                            let dot = g_chunk
                                .iter()
                                .zip(a_chunk)
                                .fold(T::zero(), |s, (&gv, &av)| s + gv * av);
                            *d = *d + dot;
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[*axis]).collect();
                let pieces = g
                    .split(*axis, &sizes)
                    .expect("concat gradient matches forward shape");
                for (&p, piece) in parts.iter().zip(&pieces) {
                    self.accumulate(grads, p, |acc| add_into(acc, piece.data()));
                }
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let plane = vx.shape()[2] * vx.shape()[3];
                let scale = T::of_usize(plane);
                self.accumulate(grads, *x, |acc| {
                    for (chunk, &gv) in acc.chunks_mut(plane).zip(gd) {
                        let share = gv / scale;
                        chunk.iter_mut().for_each(|a| *a = *a + share);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gv), &m) in acc.iter_mut().zip(gd).zip(mask) {
                        *a = *a + gv * m;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / T::of_usize(labels.len());
                self.accumulate(grads, *logits, |acc| {
                    for (row, (p_row, &label)) in acc.chunks_mut(k).zip(probs.chunks(k).zip(labels))
                    {
                        for (j, (a, &p)) in row.iter_mut().zip(p_row).enumerate() {
                            let target = if j == label { T::one() } else { T::zero() };
                            *a = *a + scale * (p - target);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate(grads, *x, |acc| acc.iter_mut().for_each(|a| *a = *a + gv));
            }
            Op::Mean(x) => {
                let share = gd[0] / T::of_usize(self.value(*x).len());
                self.accumulate(grads, *x, |acc| {
                    acc.iter_mut().for_each(|a| *a = *a + share)
                });
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    col: &mut [T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &img[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    img: &mut [T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            let o = (c * h + iy as usize) * w + ix as usize;
                            img[o] = img[o] + src[oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
