use super::{Parameter, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Depth-wise reduction rule for [`Tape::channel_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    padding: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Range of output columns whose input column `ox*stride + kx - padding`
    /// lands inside `[0, w)`.
    fn valid_range(&self, kx: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.padding as isize;
        // ox*s + off >= 0  and  ox*s + off <= len_in - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_num = len_in as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(len_out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let n_out = self.out_len();
        let mut cols = vec![T::zero(); self.patch_len() * n_out];
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, self.h_out);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, self.w_out);
                    if ox_lo == ox_hi {
                        continue;
                    }
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let out_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if self.stride == 1 {
                            let ix0 = ox_lo + kx - self.padding;
                            out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] = src[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let n_out = self.out_len();
        for ci in 0..self.c_in {
            let plane = &mut grad_input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, self.h_out);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, self.w_out);
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * self.stride + kx - self.padding;
                            dst[ix] = dst[ix] + src[oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        /// im2col patches; kept only when the kernel needs a gradient.
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelReduce {
        input: Var,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    Stack {
        a: Var,
        b: Var,
    },
    BroadcastMul {
        input: Var,
        mask: Var,
    },
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
    BceClass {
        preds: Vec<Var>,
        labels: Vec<T>,
        eps: T,
    },
    BceAttention {
        preds: Vec<Var>,
        targets: Vec<Option<Tensor<T>>>,
        eps: T,
    },
    WeightedSum(Vec<(Var, T)>),
    GradScale {
        input: Var,
        factor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed ops, replayed in reverse by [`Tape::backward`].
///
/// A tape belongs to one training step. Create a fresh one per step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Clamped per-element binary cross-entropy.
pub(crate) fn bce_elem<T: Scalar>(p: T, y: T, eps: T) -> T {
    let one = T::one();
    let pc = p.max(eps).min(one - eps);
    -(y * pc.ln() + (one - y) * (one - pc).ln())
}

/// Derivative of [`bce_elem`] with respect to `p`; zero where the clamp is active.
pub(crate) fn bce_elem_grad<T: Scalar>(p: T, y: T, eps: T) -> T {
    let one = T::one();
    if p < eps || p > one - eps {
        T::zero()
    } else {
        -y / p + (one - y) / (one - p)
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn expect_rank(op: &'static str, t: &[usize], rank: usize) -> Result<()> {
    if t.len() != rank {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a rank-{rank} tensor, got shape {t:?}"),
        });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// A tape that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A forward-only tape: nothing requires a gradient and ops skip saving
    /// backward state.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a parameter's current value.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.value.clone(), true)
    }

    /// Zero-padded 2-D cross-correlation of a `C_in×H×W` input with a
    /// `C_out×C_in×K×K` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        expect_rank(OP, &xs, 3)?;
        expect_rank(OP, &ks, 4)?;
        if ks[1] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (input channels vs kernel C_in)",
                lhs: xs,
                rhs: ks,
            });
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("kernel must be square with odd size, got {ks:?}"),
            });
        }
        if bs != [ks[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (bias vs kernel C_out)",
                lhs: bs,
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride must be at least 1".into(),
            });
        }
        let k = ks[2];
        let out_dim = |n: usize| -> Result<usize> {
            let span = n + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                return Err(TensorError::InvalidArgument {
                    op: OP,
                    msg: format!(
                        "input extent {n} with padding {padding}, kernel {k}, stride {stride} \
                         does not give an integral output size"
                    ),
                });
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            k,
            padding,
            stride,
            h_out: out_dim(xs[1])?,
            w_out: out_dim(xs[2])?,
        };

        let cols = geom.im2col(self.value(input).data());
        let n_out = geom.out_len();
        let mut out = vec![T::zero(); geom.c_out * n_out];
        T::gemm(
            false,
            false,
            geom.c_out,
            geom.patch_len(),
            n_out,
            T::one(),
            self.value(kernel).data(),
            &cols,
            T::zero(),
            &mut out,
        );
        for (row, &b) in out.chunks_mut(n_out).zip(self.value(bias).data()) {
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        let value = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        let needs = self.any_grad(&[input, kernel, bias]);
        let cols = if needs && self.needs_grad(kernel) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(T::zero()));
        let needs = self.needs_grad(input);
        self.push(value, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid_scalar);
        let needs = self.needs_grad(input);
        self.push(value, Op::Sigmoid(input), needs)
    }

    /// Non-overlapping 2×2 max pooling of a `C×H×W` tensor with even `H`, `W`.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        expect_rank("maxpool2", &s, 3)?;
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2",
                msg: format!("spatial dims must be even, got {s:?}"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        let needs = self.needs_grad(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Per-channel mean over the spatial dims: `C×H×W → C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        expect_rank("global_avg_pool", &s, 3)?;
        let hw = s[1] * s[2];
        let inv = T::one() / T::from_f64(hw as f64);
        let out = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[s[0]], out)?;
        let needs = self.needs_grad(input);
        Ok(self.push(value, Op::GlobalAvgPool(input), needs))
    }

    /// `W·x + b` for `x` of length `D`, `W` of shape `O×D`, `b` of length `O`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ws = self.value(weight).shape().to_vec();
        let xs = self.value(input).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        expect_rank("dense", &ws, 2)?;
        if xs.len() != 1 || xs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "dense (input vs weight columns)",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "dense (bias vs weight rows)",
                lhs: bs,
                rhs: ws,
            });
        }
        let (o, d) = (ws[0], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let out = (0..o)
            .map(|r| {
                w[r * d..(r + 1) * d]
                    .iter()
                    .zip(x)
                    .fold(b[r], |acc, (&wv, &xv)| acc + wv * xv)
            })
            .collect();
        let value = Tensor::new(&[o], out)?;
        let needs = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Reduces `C×H×W` across channels to `1×H×W`.
    pub fn channel_reduce(&mut self, input: Var, mode: ReduceMode) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        expect_rank("channel_reduce", &s, 3)?;
        let (c, hw) = (s[0], s[1] * s[2]);
        let xd = x.data();
        let mut out = vec![T::zero(); hw];
        let mut argmax = Vec::new();
        match mode {
            ReduceMode::Max => {
                argmax = vec![0usize; hw];
                out.copy_from_slice(&xd[..hw]);
                for ci in 1..c {
                    let plane = &xd[ci * hw..(ci + 1) * hw];
                    for (p, &v) in plane.iter().enumerate() {
                        if v > out[p] {
                            out[p] = v;
                            argmax[p] = ci;
                        }
                    }
                }
            }
            ReduceMode::Mean => {
                for plane in xd.chunks(hw) {
                    for (o, &v) in out.iter_mut().zip(plane) {
                        *o = *o + v;
                    }
                }
                let inv = T::one() / T::from_f64(c as f64);
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let value = Tensor::new(&[1, s[1], s[2]], out)?;
        let needs = self.needs_grad(input);
        Ok(self.push(
            value,
            Op::ChannelReduce {
                input,
                mode,
                argmax,
            },
            needs,
        ))
    }

    /// Stacks two `1×H×W` maps into a `2×H×W` tensor (channel 0 = `a`).
    pub fn stack_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa != sb || sa.len() != 3 || sa[0] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "stack_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&[2, sa[1], sa[2]], data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Stack { a, b }, needs))
    }

    /// `out[c,i,j] = input[c,i,j] * mask[0,i,j]`.
    pub fn broadcast_mul(&mut self, input: Var, mask: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ms = self.value(mask).shape().to_vec();
        if xs.len() != 3 || ms.len() != 3 || ms[0] != 1 || xs[1..] != ms[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_mul",
                lhs: xs,
                rhs: ms,
            });
        }
        let hw = xs[1] * xs[2];
        let m = self.value(mask).data();
        let out = self
            .value(input)
            .data()
            .chunks(hw)
            .flat_map(|plane| plane.iter().zip(m).map(|(&x, &mv)| x * mv))
            .collect();
        let value = Tensor::new(&xs, out)?;
        let needs = self.any_grad(&[input, mask]);
        Ok(self.push(value, Op::BroadcastMul { input, mask }, needs))
    }

    /// Scalar `Σ input·weights`; a fixed random projection turns any tensor
    /// into a scalar objective for gradient checking.
    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let xs = self.value(input).shape();
        if xs != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: xs.to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let v = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&x, &w)| acc + x * w);
        let needs = self.needs_grad(input);
        Ok(self.push(Tensor::scalar(v), Op::Dot { input, weights }, needs))
    }

    /// Mean clamped binary cross-entropy of scalar predictions against labels.
    pub fn bce_class(&mut self, preds: &[Var], labels: &[T], eps: T) -> Result<Var> {
        if preds.is_empty() || preds.len() != labels.len() {
            return Err(TensorError::InvalidArgument {
                op: "bce_class",
                msg: format!(
                    "need equal non-empty lengths, got {} predictions and {} labels",
                    preds.len(),
                    labels.len()
                ),
            });
        }
        let mut total = T::zero();
        for (&p, &y) in preds.iter().zip(labels) {
            let pv = self.value(p);
            if pv.len() != 1 {
                return Err(TensorError::NonScalarRoot(pv.shape().to_vec()));
            }
            total = total + bce_elem(pv.item(), y, eps);
        }
        let value = total / T::from_f64(preds.len() as f64);
        let needs = self.any_grad(preds);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceClass {
                preds: preds.to_vec(),
                labels: labels.to_vec(),
                eps,
            },
            needs,
        ))
    }

    /// Mean per-cell clamped binary cross-entropy over the samples that have
    /// a target. Zero, with no gradient, when none do.
    pub fn bce_attention(
        &mut self,
        preds: &[Var],
        targets: &[Option<Tensor<T>>],
        eps: T,
    ) -> Result<Var> {
        if preds.len() != targets.len() {
            return Err(TensorError::InvalidArgument {
                op: "bce_attention",
                msg: format!(
                    "{} predicted masks but {} targets",
                    preds.len(),
                    targets.len()
                ),
            });
        }
        let mut total = T::zero();
        let mut cells = 0usize;
        for (&p, t) in preds.iter().zip(targets) {
            let Some(t) = t else { continue };
            let pv = self.value(p);
            if pv.len() != t.len() || pv.shape().last() != t.shape().last() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_attention",
                    lhs: pv.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            for (&a, &y) in pv.data().iter().zip(t.data()) {
                total = total + bce_elem(a, y, eps);
            }
            cells += t.len();
        }
        let contributing = targets.iter().any(Option::is_some);
        let value = if contributing {
            total / T::from_f64(cells as f64)
        } else {
            T::zero()
        };
        let needs = contributing && self.any_grad(preds);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceAttention {
                preds: preds.to_vec(),
                targets: targets.to_vec(),
                eps,
            },
            needs,
        ))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(TensorError::InvalidArgument {
                op: "weighted_sum",
                msg: "no terms".into(),
            });
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![T::zero(); self.value(first).len()];
        for &(v, w) in terms {
            let x = self.value(v);
            if x.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: x.shape().to_vec(),
                });
            }
            for (o, &xv) in out.iter_mut().zip(x.data()) {
                *o = *o + w * xv;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.any_grad(&vars);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Identity forward; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).clone();
        let needs = self.needs_grad(input);
        self.push(value, Op::GradScale { input, factor }, needs)
    }

    /// Reverse pass from a scalar root. Gradients of leaves are retained;
    /// intermediate gradients are released once propagated.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut order = Vec::new();
        grads[root.0] = Some(Tensor::filled(rv.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || grads[i].is_none() {
                continue;
            }
            order.push(i);
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, order })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
                .data_mut(),
        )
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let n_out = geom.out_len();
                if let Some(db) = self.slot(grads, *bias) {
                    for (d, row) in db.iter_mut().zip(gd.chunks(n_out)) {
                        *d = *d + row.iter().copied().sum::<T>();
                    }
                }
                if let Some(dk) = self.slot(grads, *kernel) {
                    T::gemm(
                        false,
                        true,
                        geom.c_out,
                        n_out,
                        geom.patch_len(),
                        T::one(),
                        gd,
                        cols,
                        T::one(),
                        dk,
                    );
                }
                if self.needs_grad(*input) {
                    let mut dcols = vec![T::zero(); geom.patch_len() * n_out];
                    T::gemm(
                        true,
                        false,
                        geom.patch_len(),
                        geom.c_out,
                        n_out,
                        T::one(),
                        self.value(*kernel).data(),
                        gd,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = self.slot(grads, *input).expect("needs grad");
                    geom.col2im_add(&dcols, dx);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(gd) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(gd) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (&idx, &gv) in argmax.iter().zip(gd) {
                        dx[idx] = dx[idx] + gv;
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                let s = self.value(*input).shape();
                let hw = s[1] * s[2];
                let inv = T::one() / T::from_f64(hw as f64);
                if let Some(dx) = self.slot(grads, *input) {
                    for (plane, &gv) in dx.chunks_mut(hw).zip(gd) {
                        let d = gv * inv;
                        plane.iter_mut().for_each(|v| *v = *v + d);
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let d = self.value(*input).len();
                if let Some(db) = self.slot(grads, *bias) {
                    for (b, &gv) in db.iter_mut().zip(gd) {
                        *b = *b + gv;
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    let x = self.value(*input).data();
                    for (row, &gv) in dw.chunks_mut(d).zip(gd) {
                        for (w, &xv) in row.iter_mut().zip(x) {
                            *w = *w + gv * xv;
                        }
                    }
                }
                if self.needs_grad(*input) {
                    let w = self.value(*weight).data().to_vec();
                    let dx = self.slot(grads, *input).expect("needs grad");
                    for (row, &gv) in w.chunks(d).zip(gd) {
                        for (xg, &wv) in dx.iter_mut().zip(row) {
                            *xg = *xg + gv * wv;
                        }
                    }
                }
            }
            Op::ChannelReduce {
                input,
                mode,
                argmax,
            } => {
                let c = self.value(*input).shape()[0];
                let hw = gd.len();
                if let Some(dx) = self.slot(grads, *input) {
                    match mode {
                        ReduceMode::Max => {
                            for (p, (&ch, &gv)) in argmax.iter().zip(gd).enumerate() {
                                let idx = ch * hw + p;
                                dx[idx] = dx[idx] + gv;
                            }
                        }
                        ReduceMode::Mean => {
                            let inv = T::one() / T::from_f64(c as f64);
                            for plane in dx.chunks_mut(hw) {
                                for (d, &gv) in plane.iter_mut().zip(gd) {
                                    *d = *d + gv * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Stack { a, b } => {
                let hw = gd.len() / 2;
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(&gd[..hw]) {
                        *d = *d + gv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(&gd[hw..]) {
                        *d = *d + gv;
                    }
                }
            }
            Op::BroadcastMul { input, mask } => {
                let hw = self.value(*mask).len();
                if self.needs_grad(*input) {
                    let m = self.value(*mask).data();
                    let dx = self.slot(grads, *input).expect("needs grad");
                    for (dplane, gplane) in dx.chunks_mut(hw).zip(gd.chunks(hw)) {
                        for ((d, &gv), &mv) in dplane.iter_mut().zip(gplane).zip(m) {
                            *d = *d + gv * mv;
                        }
                    }
                }
                if self.needs_grad(*mask) {
                    let x = self.value(*input).data();
                    let dm = self.slot(grads, *mask).expect("needs grad");
                    for (xplane, gplane) in x.chunks(hw).zip(gd.chunks(hw)) {
                        for ((d, &gv), &xv) in dm.iter_mut().zip(gplane).zip(xplane) {
                            *d = *d + gv * xv;
                        }
                    }
                }
            }
            Op::Dot { input, weights } => {
                let gv = gd[0];
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &w) in dx.iter_mut().zip(weights.data()) {
                        *d = *d + gv * w;
                    }
                }
            }
            Op::BceClass { preds, labels, eps } => {
                let scale = gd[0] / T::from_f64(preds.len() as f64);
                for (&p, &y) in preds.iter().zip(labels) {
                    let pv = self.value(p).item();
                    if let Some(dp) = self.slot(grads, p) {
                        dp[0] = dp[0] + scale * bce_elem_grad(pv, y, *eps);
                    }
                }
            }
            Op::BceAttention {
                preds,
                targets,
                eps,
            } => {
                let cells: usize = targets.iter().flatten().map(Tensor::len).sum();
                let scale = gd[0] / T::from_f64(cells as f64);
                for (&p, t) in preds.iter().zip(targets) {
                    let Some(t) = t else { continue };
                    if !self.needs_grad(p) {
                        continue;
                    }
                    let pv = self.value(p).data().to_vec();
                    let dp = self.slot(grads, p).expect("needs grad");
                    for ((d, &a), &y) in dp.iter_mut().zip(&pv).zip(t.data()) {
                        *d = *d + scale * bce_elem_grad(a, y, *eps);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(dv) = self.slot(grads, v) {
                        for (d, &gv) in dv.iter_mut().zip(gd) {
                            *d = *d + w * gv;
                        }
                    }
                }
            }
            Op::GradScale { input, factor } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &gv) in dx.iter_mut().zip(gd) {
                        *d = *d + *factor * gv;
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the leaf does not require one or the
    /// root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Node indices in the order the reverse pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 3, 3], 1.0));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_zero_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 5], |i| i as f64 - 7.0));
        let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 5, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Direct sliding-window sum, independent of the im2col route.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &[f64],
        pad: usize,
        stride: usize,
    ) -> Tensor<f64> {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, ks) = (k.shape()[0], k.shape()[2]);
        let ho = (h + 2 * pad - ks) / stride + 1;
        let wo = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[c, iy as usize, ix as usize])
                                        * k.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones_kernel_same_padding() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let oracle = conv_oracle(&x, &k, &[0.0], 1, 1);
        assert_eq!(oracle.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x), tape.constant(k));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(xv, kv, b, 1, 1).unwrap();
        assert_eq!(tape.value(y), &oracle);
    }

    #[test]
    fn conv_matches_oracle_with_stride() {
        let x = Tensor::from_fn(&[2, 7, 7], |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 - 3.0);
        let b = [0.5, -1.0, 2.0];
        for (pad, stride) in [(0, 1), (1, 1), (1, 2), (0, 2), (2, 1)] {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let bv = tape.constant(t(&[3], &b));
            let y = tape.conv2d(xv, kv, bv, pad, stride).unwrap();
            assert_eq!(tape.value(y), &conv_oracle(&x, &k, &b, pad, stride));
        }
    }

    #[test]
    fn conv_kernel_wider_than_input() {
        let x = Tensor::from_fn(&[2, 2, 2], |i| i as f64 - 3.0);
        let k = Tensor::from_fn(&[1, 2, 7, 7], |i| ((i * 5) % 9) as f64 - 4.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone(), true), tape.leaf(k.clone(), true));
        let bv = tape.constant(t(&[1], &[0.25]));
        let y = tape.conv2d(xv, kv, bv, 3, 1).unwrap();
        assert_eq!(tape.value(y), &conv_oracle(&x, &k, &[0.25], 3, 1));
        let root = tape.global_avg_pool(y).unwrap();
        assert!(tape.backward(root).is_ok());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[3, 4, 4]") && err.contains("[1, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_rejects_even_kernel_and_fractional_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let k2 = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k3 = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv2d(x, k2, b, 0, 1).is_err());
        assert!(tape.conv2d(x, k3, b, 0, 2).is_err());
        assert!(tape.conv2d(x, k3, b, 0, 0).is_err());
    }

    #[test]
    fn relu_boundaries() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.dot(y, t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[5], &[0.0, 100.0, -1e4, 1e4, -3.0]));
        let y = tape.sigmoid(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() <= 1e-6);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[4] + sigmoid_scalar(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let ramp = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let y = tape.maxpool2(ramp).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);

        let c = tape.constant(Tensor::filled(&[2, 4, 6], 3.0));
        let y = tape.maxpool2(c).unwrap();
        assert_eq!(tape.value(y), &Tensor::filled(&[2, 2, 3], 3.0));

        let odd = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 2, 2], 1.0), true);
        let y = tape.maxpool2(x).unwrap();
        let s = tape.dot(y, Tensor::filled(&[1, 1, 1], 1.0)).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let c = tape.constant(Tensor::filled(&[3, 4, 4], -0.25));
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.25; 3]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[0.0, 1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 8.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let x2 = tape.constant(t(&[2], &[-3.0, 0.7]));
        let y = tape.dense(x2, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[-3.0, 0.7]);

        let zw = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.dense(x2, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0]);

        let x3 = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.dense(x3, w, b).is_err());
    }

    #[test]
    fn channel_reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 6.0]));
        let mx = tape.channel_reduce(x, ReduceMode::Max).unwrap();
        let mn = tape.channel_reduce(x, ReduceMode::Mean).unwrap();
        assert_eq!(tape.value(mx).data(), &[5.0, 2.0, 3.0, 6.0]);
        assert_eq!(tape.value(mn).data(), &[3.0, 1.0, 1.5, 5.0]);
        assert_eq!(tape.value(mx).shape(), &[1, 2, 2]);

        let single = tape.constant(t(&[1, 1, 3], &[-1.0, 0.5, 2.0]));
        for mode in [ReduceMode::Max, ReduceMode::Mean] {
            let r = tape.channel_reduce(single, mode).unwrap();
            assert_eq!(tape.value(r), tape.value(single));
        }
    }

    #[test]
    fn stack_compositions() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 8, 8], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[1, 8, 8], |i| 64.0 - 2.0 * i as f64));
        let s = tape.stack_channels(a, b).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 8, 8]);
        let m = tape.channel_reduce(s, ReduceMode::Mean).unwrap();
        for (i, &v) in tape.value(m).data().iter().enumerate() {
            assert_eq!(v, (i as f64 + 64.0 - 2.0 * i as f64) / 2.0);
        }
        let aa = tape.stack_channels(a, a).unwrap();
        let mx = tape.channel_reduce(aa, ReduceMode::Max).unwrap();
        assert_eq!(tape.value(mx), tape.value(a));

        let c = tape.constant(Tensor::zeros(&[1, 4, 8]));
        assert!(tape.stack_channels(a, c).is_err());
    }

    #[test]
    fn broadcast_mul_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64 - 4.0));
        let ones = tape.constant(Tensor::filled(&[1, 2, 2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let y = tape.broadcast_mul(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = tape.broadcast_mul(x, zeros).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(tape.broadcast_mul(x, bad).is_err());
    }

    #[test]
    fn backward_visits_in_reverse_creation_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 4, 4], |i| (i as f64).sin()), true);
        let mx = tape.channel_reduce(x, ReduceMode::Max).unwrap();
        let mn = tape.channel_reduce(x, ReduceMode::Mean).unwrap();
        let st = tape.stack_channels(mx, mn).unwrap();
        let r = tape.relu(st);
        let p = tape.maxpool2(r).unwrap();
        let s = tape.dot(p, Tensor::filled(&[2, 2, 2], 1.0)).unwrap();
        let g = tape.backward(s).unwrap();
        let order = g.visit_order();
        assert_eq!(order.first(), Some(&s.index()));
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.last(), Some(&x.index()));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::filled(&[1], 2.0), true);
        assert!(!tape.needs_grad(x));
    }

    #[test]
    fn bce_attention_all_absent_is_zero() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::filled(&[1, 2, 2], 0.3), true);
        let l = tape.bce_attention(&[m], &[None], 1e-7).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(m).is_none());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn relu_idempotent(v in vec_strategy(24)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[24], v).unwrap());
            let a = tape.relu(x);
            let b = tape.relu(a);
            prop_assert_eq!(tape.value(a), tape.value(b));
        }

        #[test]
        fn sigmoid_symmetric(v in prop::collection::vec(-50.0f64..50.0, 16)) {
            let mut tape = Tape::new();
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let x = tape.constant(Tensor::new(&[16], v).unwrap());
            let nx = tape.constant(Tensor::new(&[16], neg).unwrap());
            let (a, b) = (tape.sigmoid(x), tape.sigmoid(nx));
            for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
                prop_assert!((p + q - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn broadcast_mul_contracts(v in vec_strategy(2 * 9), m in prop::collection::vec(0.0f64..=1.0, 9)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[2, 3, 3], v).unwrap());
            let mask = tape.constant(Tensor::new(&[1, 3, 3], m).unwrap());
            let y = tape.broadcast_mul(x, mask).unwrap();
            for (o, i) in tape.value(y).data().iter().zip(tape.value(x).data()) {
                prop_assert!(o.abs() <= i.abs());
            }
        }

        #[test]
        fn gap_mean_matches_global_mean(v in vec_strategy(3 * 16)) {
            let mut tape = Tape::new();
            let total: f64 = v.iter().sum::<f64>() / 48.0;
            let x = tape.constant(Tensor::new(&[3, 4, 4], v).unwrap());
            let y = tape.global_avg_pool(x).unwrap();
            let mean = tape.value(y).sum() / 3.0;
            prop_assert!((mean - total).abs() < 1e-12);
        }

        #[test]
        fn finite_for_large_inputs(v in prop::collection::vec(-1e4f64..1e4, 2 * 16)) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[2, 4, 4], v).unwrap(), true);
            let m = tape.channel_reduce(x, ReduceMode::Max).unwrap();
            let a = tape.channel_reduce(x, ReduceMode::Mean).unwrap();
            let s = tape.stack_channels(m, a).unwrap();
            let k = tape.leaf(Tensor::filled(&[1, 2, 3, 3], 0.01), true);
            let b = tape.leaf(Tensor::zeros(&[1]), true);
            let c = tape.conv2d(s, k, b, 1, 1).unwrap();
            let sg = tape.sigmoid(c);
            let g = tape.broadcast_mul(x, sg).unwrap();
            let loss = tape.dot(g, Tensor::filled(&[2, 4, 4], 1.0)).unwrap();
            let grads = tape.backward(loss).unwrap();
            prop_assert!(tape.value(loss).all_finite());
            prop_assert!(grads.get(x).unwrap().all_finite());
            prop_assert!(grads.get(k).unwrap().all_finite());
        }
    }
}
