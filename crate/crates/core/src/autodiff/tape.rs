use std::fmt;

use crate::autodiff::kernels::{self, ConvGeometry, GroupStats};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Backward rule of a custom op: maps the output gradient to one gradient
/// per input, each shaped like that input.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T: Real> {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Resize {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Silu {
        input: Var,
    },
    GroupNorm {
        input: Var,
        gain: Var,
        shift: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    MeanSquare {
        a: Var,
        b: Var,
    },
    Sum {
        parts: Vec<Var>,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::Silu { .. } => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::MeanSquare { .. } => "mean_square",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Resize { input, .. }
            | Op::Silu { input }
            | Op::Slice { input, .. }
            | Op::Reshape { input }
            | Op::Scale { input, .. } => vec![*input],
            Op::GroupNorm {
                input, gain, shift, ..
            } => vec![*input, *gain, *shift],
            Op::Binary { a, b, .. } | Op::MeanSquare { a, b } => vec![*a, *b],
            Op::Concat { parts, .. } | Op::Sum { parts } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradient store produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_of<T: Real>(t: &Tensor<T>) -> &[usize] {
    t.shape()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Errors when `var` holds NaN or infinity.
    pub fn check_finite(&self, var: Var) -> Result<()> {
        let node = &self.nodes[var.0];
        if node.value.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                what: format!("value of node {} ({})", var.0, node.op.name()),
            })
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d weight {:?} does not fit input {:?} (odd square kernels only)",
                self.shape(weight),
                self.shape(input)
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::config(format!(
                "conv2d bias {:?} should be [{cout}]",
                self.shape(bias)
            )));
        }
        let (oh, ow) = match (
            kernels::conv_output_size(h, kh, stride, pad),
            kernels::conv_output_size(w, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::config(format!(
                    "conv2d kernel {kh} larger than padded input {h}x{w}"
                )))
            }
        };
        let geom = ConvGeometry {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
            out_height: oh,
            out_width: ow,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![b, cout, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Bilinear resize with the align-corners-false convention.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::config("bilinear_resize sizes must be positive"));
        }
        let out = kernels::resize_forward(
            b * c,
            (h, w),
            (out_h, out_w),
            self.value(input).data(),
        );
        let value = Tensor::new(vec![b, c, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Resize {
                input,
                planes: b * c,
                from: (h, w),
                to: (out_h, out_w),
            },
        ))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| v / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Silu { input })
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gain: Var,
        shift: Var,
        eps: T,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let c = dims[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::config(format!(
                "group_norm: gain/shift must be [{c}]"
            )));
        }
        if eps <= T::zero() {
            return Err(Error::config("group_norm: eps must be positive"));
        }
        let (out, stats) = kernels::group_norm_forward(
            dims,
            groups,
            eps,
            self.value(input).data(),
            self.value(gain).data(),
            self.value(shift).data(),
        );
        let value = Tensor::new(dims.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gain,
                shift,
                groups,
                stats,
            },
        ))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::config(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::config(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::config(format!(
                    "concat: shape {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Channel concatenation of NCHW arrays.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for p in parts {
            self.value(*p).dims4()?;
        }
        self.concat(parts, 1)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::config(format!(
                "slice [{start}, {}) of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { input, axis, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// Mean of squared differences, as a scalar.
    pub fn mean_square(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::config(format!(
                "mean_square shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = va.numel().max(1);
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::lit(s / n as f64));
        Ok(self.push(value, Op::MeanSquare { a, b }))
    }

    /// Elementwise sum of equally shaped arrays.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("sum of zero parts"))?;
        let mut acc = self.value(*first).clone();
        for p in &parts[1..] {
            let v = self.value(*p);
            if v.shape() != acc.shape() {
                return Err(Error::config(format!(
                    "sum shapes differ: {:?} vs {:?}",
                    v.shape(),
                    acc.shape()
                )));
            }
            acc.add_assign(v);
        }
        Ok(self.push(
            acc,
            Op::Sum {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { input, factor })
    }

    /// `Σ x·w` for a fixed weight tensor of the same shape, as a scalar.
    pub fn dot_const(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::config(format!(
                "dot_const shapes differ: {:?} vs {:?}",
                x.shape(),
                weights.shape()
            )));
        }
        let s: T = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let w = weights.clone();
        let backward = Box::new(move |g: &Tensor<T>| {
            let k = g.item();
            let data = w.data().iter().map(|&v| v * k).collect();
            vec![Tensor::new(w.shape().to_vec(), data).expect("same shape")]
        });
        Ok(self.custom("dot_const", &[input], Tensor::scalar(s), backward))
    }

    /// Appends an externally computed node with a hand-written backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(Error::Numeric {
                what: format!("loss node {}", loss.0),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(node, &g)?;
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if !contrib.is_finite() {
                    return Err(Error::Numeric {
                        what: format!(
                            "gradient flowing from node {id} ({}) into node {}",
                            node.op.name(),
                            var.0
                        ),
                    });
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        // Only leaves keep gradients; interior ones are dropped to save memory.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*weight).data(),
                    g.data(),
                );
                vec![
                    (*input, Tensor::new(shape_of(val(*input)).to_vec(), gi)?),
                    (*weight, Tensor::new(shape_of(val(*weight)).to_vec(), gw)?),
                    (*bias, Tensor::new(shape_of(val(*bias)).to_vec(), gb)?),
                ]
            }
            Op::Resize {
                input,
                planes,
                from,
                to,
            } => {
                let gi = kernels::resize_backward(*planes, *from, *to, g.data());
                vec![(*input, Tensor::new(shape_of(val(*input)).to_vec(), gi)?)]
            }
            Op::Silu { input } => {
                let x = val(*input);
                let gi = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &go)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        go * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                vec![(*input, Tensor::new(x.shape().to_vec(), gi)?)]
            }
            Op::GroupNorm {
                input,
                gain,
                shift,
                groups,
                stats,
            } => {
                let x = val(*input);
                let (gi, gg, gs) = kernels::group_norm_backward(
                    x.dims4()?,
                    *groups,
                    x.data(),
                    val(*gain).data(),
                    stats,
                    g.data(),
                );
                let c = x.shape()[1];
                vec![
                    (*input, Tensor::new(x.shape().to_vec(), gi)?),
                    (*gain, Tensor::new(vec![c], gg)?),
                    (*shift, Tensor::new(vec![c], gs)?),
                ]
            }
            Op::Binary { a, b, kind } => {
                let shape = g.shape().to_vec();
                match kind {
                    BinaryKind::Add => vec![(*a, g.clone()), (*b, g.clone())],
                    BinaryKind::Sub => {
                        let neg = g.data().iter().map(|&v| -v).collect();
                        vec![(*a, g.clone()), (*b, Tensor::new(shape, neg)?)]
                    }
                    BinaryKind::Mul => {
                        let mut res = Vec::new();
                        if needs(*a) {
                            let ga = g
                                .data()
                                .iter()
                                .zip(val(*b).data())
                                .map(|(&x, &y)| x * y)
                                .collect();
                            res.push((*a, Tensor::new(shape.clone(), ga)?));
                        }
                        if needs(*b) {
                            let gb = g
                                .data()
                                .iter()
                                .zip(val(*a).data())
                                .map(|(&x, &y)| x * y)
                                .collect();
                            res.push((*b, Tensor::new(shape, gb)?));
                        }
                        res
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let shape = val(*p).shape().to_vec();
                    let dim = shape[*axis];
                    if needs(*p) {
                        let mut data = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + dim * inner]);
                        }
                        res.push((*p, Tensor::new(shape, data)?));
                    }
                    offset += dim;
                }
                res
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape().to_vec();
                let (outer, dim, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*input, Tensor::new(shape, data)?)]
            }
            Op::Reshape { input } => {
                let shape = val(*input).shape().to_vec();
                vec![(*input, g.clone().reshape(&shape)?)]
            }
            Op::MeanSquare { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let n = T::lit(va.numel().max(1) as f64);
                let go = g.item();
                let two = T::lit(2.0);
                let ga: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| two * (x - y) / n * go)
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![
                    (*a, Tensor::new(va.shape().to_vec(), ga)?),
                    (*b, Tensor::new(vb.shape().to_vec(), gb)?),
                ]
            }
            Op::Sum { parts } => parts.iter().map(|p| (*p, g.clone())).collect(),
            Op::Scale { input, factor } => {
                let data = g.data().iter().map(|&v| v * *factor).collect();
                vec![(*input, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Custom {
                name,
                inputs,
                backward,
            } => {
                let gs = backward(g);
                if gs.len() != inputs.len() {
                    return Err(Error::usage(format!(
                        "custom op {name} returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(&gs) {
                    if gi.shape() != val(*v).shape() {
                        return Err(Error::usage(format!(
                            "custom op {name} gradient shape {:?} != input shape {:?}",
                            gi.shape(),
                            val(*v).shape()
                        )));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_1x1_conv_returns_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.1 - 3.0).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.constant(t(&[3, 3, 1, 1], &eye));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn zero_conv_gives_zero_output_of_right_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 7, 7], 3.0));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_config() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(Error::Config(_))));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, b, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = tape.constant(t(&[1, 1, 3, 4], &data));
        let y = tape.bilinear_resize(x, 3, 4).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());

        let c = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
        let y = tape.bilinear_resize(c, 8, 5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 10.0]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 10.0).abs() < 1e-3);
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 4, 3, 3], 2.5));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let s = tape.constant(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, 2, g, s, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            tape.group_norm(x, 3, g, s, 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 9).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let x = tape.constant(t(&[2, 4, 3, 3], &data));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let s = tape.constant(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, 2, g, s, 1e-12).unwrap();
        for chunk in tape.value(y).data().chunks(18) {
            let mean: f64 = chunk.iter().sum::<f64>() / 18.0;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let o = tape.constant(Tensor::full(&[3], 1.0));
        let a = tape.add(x, z).unwrap();
        let m = tape.mul(x, o).unwrap();
        let s = tape.sub(x, x).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(x).data());
        assert_eq!(tape.value(m).data(), tape.value(x).data());
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(x, bad), Err(Error::Config(_))));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| i as f32).collect()).unwrap();
        let b = Tensor::new(vec![1, 6, 2, 2], (0..24).map(|i| -(i as f32)).collect()).unwrap();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let single = tape.concat_channels(&[va]).unwrap();
        assert_eq!(tape.value(single), &a);
        let c = tape.concat_channels(&[va, vb]).unwrap();
        assert_eq!(tape.shape(c), &[1, 9, 2, 2]);
        let sa = tape.slice(c, 1, 0, 3).unwrap();
        let sb = tape.slice(c, 1, 3, 6).unwrap();
        assert_eq!(tape.value(sa), &a);
        assert_eq!(tape.value(sb), &b);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(
            tape.concat_channels(&[va, odd]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mean_square_values_and_hand_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 1.0]));
        let l = tape.mean_square(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let same = tape.mean_square(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let l = tape.mean_square(x, zero).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_is_linear_over_summed_losses() {
        let build = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(t(&[3], &[0.3, -1.2, 2.0]));
            let y = tape.silu(x);
            let c = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
            let l1 = tape.mean_square(y, c).unwrap();
            let p = tape.mul(x, x).unwrap();
            let l2 = tape.mean_square(p, c).unwrap();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.sum(&[l1, l2]).unwrap(),
            };
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (g1, g2, g) = (build(1), build(2), build(0));
        for i in 0..3 {
            assert!((g.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.silu(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
        let n = tape.leaf(t(&[1], &[f64::NAN]));
        let z = tape.constant(Tensor::zeros(&[1]));
        let l = tape.mean_square(n, z).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Numeric { .. })));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let x = tape.leaf(t(&[1, 1, 4, 4], &data));
        let w = tape.leaf(t(&[1, 1, 3, 3], &[0.1; 9]));
        let b = tape.leaf(t(&[1], &[0.2]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let y = tape.silu(y);
        let r = tape.bilinear_resize(y, 2, 2).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let l = tape.mean_square(r, z).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(x).data(), data.as_slice());
        assert_eq!(tape.value(w).data(), &[0.1; 9]);
    }
}
