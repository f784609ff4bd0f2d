use std::rc::Rc;

use super::{GradError, Node, NodeRef, Result, Tape, Tensor};

/// Primitive operations understood by the tape, with their static arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    Sum,
    SumAxis(usize),
    Mean,
    MeanAxis(usize),
    Square,
    Exp,
    Log,
    Expm1,
    Sigmoid,
    Softplus,
    PowConst(f64),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::MatMul => "matmul",
            OpKind::Sum | OpKind::SumAxis(_) => "sum",
            OpKind::Mean | OpKind::MeanAxis(_) => "mean",
            OpKind::Square => "square",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Expm1 => "expm1",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::PowConst(_) => "pow_const",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
        }
    }

    /// Applies the primitive to `operands`, recording it if any operand is tracked.
    pub fn apply(&self, operands: &[&Tensor]) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(GradError::InvalidArgument {
                    op: self.name(),
                    detail: format!("expected {n} operands, got {}", operands.len()),
                })
            }
        };
        match *self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => arity(2)?,
            OpKind::Concat(_) => {
                if operands.is_empty() {
                    return Err(GradError::InvalidArgument {
                        op: "concat",
                        detail: "no operands".into(),
                    });
                }
            }
            _ => arity(1)?,
        }
        let a = operands[0];
        match *self {
            OpKind::Add => a.add(operands[1]),
            OpKind::Sub => a.sub(operands[1]),
            OpKind::Mul => a.mul(operands[1]),
            OpKind::MatMul => a.matmul(operands[1]),
            OpKind::ScalarMul(k) => a.scalar_mul(k),
            OpKind::Sum => a.sum(),
            OpKind::SumAxis(axis) => a.sum_axis(axis),
            OpKind::Mean => a.mean(),
            OpKind::MeanAxis(axis) => a.mean_axis(axis),
            OpKind::Square => a.square(),
            OpKind::Exp => a.exp(),
            OpKind::Log => a.log(),
            OpKind::Expm1 => a.expm1(),
            OpKind::Sigmoid => a.sigmoid(),
            OpKind::Softplus => a.softplus(),
            OpKind::PowConst(p) => a.pow_const(p),
            OpKind::Concat(axis) => Tensor::concat(operands, axis),
            OpKind::Slice { axis, start, end } => a.slice(axis, start, end),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if x >= 0.0 {
        r
    } else {
        e * r
    }
}

/// `ln(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy)]
pub(super) enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone, Copy)]
pub(super) enum Unary {
    Square,
    Exp,
    Log,
    Expm1,
    Sigmoid,
    Softplus,
    Pow(f64),
}

pub(super) enum Recorded {
    Leaf,
    Add {
        a: Option<usize>,
        b: Option<usize>,
        bcast: Bcast,
        sign_b: f64,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        bcast: Bcast,
        av: Rc<Vec<f64>>,
        bv: Rc<Vec<f64>>,
    },
    ScalarMul {
        a: usize,
        k: f64,
    },
    MatMul {
        a: Option<usize>,
        b: Option<usize>,
        m: usize,
        k: usize,
        n: usize,
        av: Rc<Vec<f64>>,
        bv: Rc<Vec<f64>>,
    },
    Reduce {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        scale: f64,
    },
    Elementwise {
        a: usize,
        kind: Unary,
        /// Input for square/log/softplus/pow, output for exp/expm1/sigmoid.
        saved: Rc<Vec<f64>>,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        end: usize,
    },
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].numel]);
    f(slot);
}

impl Recorded {
    pub(super) fn backward(&self, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
        match self {
            Recorded::Leaf => {}
            Recorded::Add {
                a,
                b,
                bcast,
                sign_b,
            } => {
                if let Some(a) = *a {
                    accumulate(grads, nodes, a, |ga| match bcast {
                        Bcast::LeftScalar => ga[0] += g.iter().sum::<f64>(),
                        _ => ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi),
                    });
                }
                if let Some(b) = *b {
                    accumulate(grads, nodes, b, |gb| match bcast {
                        Bcast::RightScalar => gb[0] += sign_b * g.iter().sum::<f64>(),
                        _ => gb.iter_mut().zip(g).for_each(|(x, gi)| *x += sign_b * gi),
                    });
                }
            }
            Recorded::Mul {
                a,
                b,
                bcast,
                av,
                bv,
            } => {
                if let Some(a) = *a {
                    accumulate(grads, nodes, a, |ga| match bcast {
                        Bcast::Same => {
                            for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv.iter()) {
                                *x += gi * bi;
                            }
                        }
                        Bcast::LeftScalar => {
                            ga[0] += g.iter().zip(bv.iter()).map(|(gi, bi)| gi * bi).sum::<f64>()
                        }
                        Bcast::RightScalar => {
                            let s = bv[0];
                            ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * s);
                        }
                    });
                }
                if let Some(b) = *b {
                    accumulate(grads, nodes, b, |gb| match bcast {
                        Bcast::Same => {
                            for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av.iter()) {
                                *x += gi * ai;
                            }
                        }
                        Bcast::RightScalar => {
                            gb[0] += g.iter().zip(av.iter()).map(|(gi, ai)| gi * ai).sum::<f64>()
                        }
                        Bcast::LeftScalar => {
                            let s = av[0];
                            gb.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * s);
                        }
                    });
                }
            }
            Recorded::ScalarMul { a, k } => {
                accumulate(grads, nodes, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += k * gi)
                });
            }
            Recorded::MatMul {
                a,
                b,
                m,
                k,
                n,
                av,
                bv,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(a) = *a {
                    // dA = G · Bᵀ
                    accumulate(grads, nodes, a, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                }
                if let Some(b) = *b {
                    // dB = Aᵀ · G
                    accumulate(grads, nodes, b, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let out = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    out[j] += aip * grow[j];
                                }
                            }
                        }
                    });
                }
            }
            Recorded::Reduce {
                a,
                outer,
                axis_len,
                inner,
                scale,
            } => {
                accumulate(grads, nodes, *a, |ga| {
                    for o in 0..*outer {
                        for r in 0..*axis_len {
                            let base = (o * axis_len + r) * inner;
                            for i in 0..*inner {
                                ga[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Recorded::Elementwise { a, kind, saved } => {
                accumulate(grads, nodes, *a, |ga| {
                    let it = ga.iter_mut().zip(g).zip(saved.iter());
                    match *kind {
                        Unary::Square => it.for_each(|((x, gi), v)| *x += 2.0 * v * gi),
                        Unary::Exp => it.for_each(|((x, gi), y)| *x += y * gi),
                        Unary::Log => it.for_each(|((x, gi), v)| *x += gi / v),
                        Unary::Expm1 => it.for_each(|((x, gi), y)| *x += (y + 1.0) * gi),
                        Unary::Sigmoid => it.for_each(|((x, gi), y)| *x += y * (1.0 - y) * gi),
                        Unary::Softplus => it.for_each(|((x, gi), v)| *x += sigmoid(*v) * gi),
                        Unary::Pow(p) => it.for_each(|((x, gi), v)| *x += p * v.powf(p - 1.0) * gi),
                    }
                });
            }
            Recorded::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|(_, len)| len).sum();
                let mut offset = 0;
                for &(id, len) in parts {
                    if let Some(id) = id {
                        accumulate(grads, nodes, id, |gp| {
                            for o in 0..*outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                for (x, gi) in gp[dst..dst + len * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + len * inner])
                                {
                                    *x += gi;
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Recorded::Slice {
                a,
                outer,
                axis_len,
                inner,
                start,
                end,
            } => {
                let width = end - start;
                accumulate(grads, nodes, *a, |ga| {
                    for o in 0..*outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * width * inner;
                        for (x, gi) in ga[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&g[src..src + width * inner])
                        {
                            *x += gi;
                        }
                    }
                });
            }
        }
    }
}

fn common_tape<'a>(operands: impl IntoIterator<Item = &'a Tensor>) -> Result<Option<Tape>> {
    let mut tape: Option<&Tape> = None;
    for t in operands {
        if let Some(node) = &t.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) if existing.same(&node.tape) => {}
                Some(_) => return Err(GradError::TapeMismatch),
            }
        }
    }
    Ok(tape.cloned())
}

fn node_id(t: &Tensor) -> Option<usize> {
    t.node.as_ref().map(|n| n.id)
}

fn finish(
    tape: Option<Tape>,
    shape: Vec<usize>,
    values: Vec<f64>,
    record: impl FnOnce() -> Recorded,
) -> Result<Tensor> {
    let mut out = Tensor::from_parts(shape, values);
    if let Some(tape) = tape {
        let id = tape.record(out.numel(), record())?;
        out.node = Some(NodeRef { tape, id });
    }
    Ok(out)
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(GradError::InvalidArgument {
            op,
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tensor {
    fn broadcast(&self, other: &Tensor, op: &'static str) -> Result<(Bcast, Vec<usize>)> {
        if self.shape == other.shape {
            Ok((Bcast::Same, self.shape.clone()))
        } else if self.numel() == 1 {
            Ok((Bcast::LeftScalar, other.shape.clone()))
        } else if other.numel() == 1 {
            Ok((Bcast::RightScalar, self.shape.clone()))
        } else {
            Err(GradError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    fn zip_values(&self, other: &Tensor, bcast: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        match bcast {
            Bcast::Same => self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
            Bcast::LeftScalar => {
                let a = self.data[0];
                other.data.iter().map(|&b| f(a, b)).collect()
            }
            Bcast::RightScalar => {
                let b = other.data[0];
                self.data.iter().map(|&a| f(a, b)).collect()
            }
        }
    }

    fn add_like(&self, other: &Tensor, sign_b: f64, op: &'static str) -> Result<Tensor> {
        let (bcast, shape) = self.broadcast(other, op)?;
        let tape = common_tape([self, other])?;
        let values = if sign_b > 0.0 {
            self.zip_values(other, bcast, |a, b| a + b)
        } else {
            self.zip_values(other, bcast, |a, b| a - b)
        };
        finish(tape, shape, values, || Recorded::Add {
            a: node_id(self),
            b: node_id(other),
            bcast,
            sign_b,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.add_like(other, 1.0, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add_like(other, -1.0, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (bcast, shape) = self.broadcast(other, "mul")?;
        let tape = common_tape([self, other])?;
        let values = self.zip_values(other, bcast, |a, b| a * b);
        finish(tape, shape, values, || Recorded::Mul {
            a: node_id(self),
            b: node_id(other),
            bcast,
            av: Rc::clone(&self.data),
            bv: Rc::clone(&other.data),
        })
    }

    pub fn scalar_mul(&self, k: f64) -> Result<Tensor> {
        if !k.is_finite() {
            return Err(GradError::InvalidArgument {
                op: "scalar_mul",
                detail: format!("factor {k} is not finite"),
            });
        }
        let tape = common_tape([self])?;
        let values = self.data.iter().map(|v| k * v).collect();
        finish(tape, self.shape.clone(), values, || Recorded::ScalarMul {
            a: node_id(self).unwrap(),
            k,
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scalar_mul(-1.0)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let tape = common_tape([self, other])?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = self.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        finish(tape, vec![m, n], out, || Recorded::MatMul {
            a: node_id(self),
            b: node_id(other),
            m,
            k,
            n,
            av: Rc::clone(&self.data),
            bv: Rc::clone(&other.data),
        })
    }

    fn reduce_all(&self, scale: f64) -> Result<Tensor> {
        let tape = common_tape([self])?;
        let s: f64 = self.data.iter().sum::<f64>() * scale;
        finish(tape, Vec::new(), vec![s], || Recorded::Reduce {
            a: node_id(self).unwrap(),
            outer: 1,
            axis_len: self.numel(),
            inner: 1,
            scale,
        })
    }

    fn reduce_axis(&self, axis: usize, mean: bool, op: &'static str) -> Result<Tensor> {
        let (outer, axis_len, inner) = split_axis(&self.shape, axis, op)?;
        if axis_len == 0 {
            return Err(GradError::InvalidArgument {
                op,
                detail: "reduction over an empty axis".into(),
            });
        }
        let scale = if mean { 1.0 / axis_len as f64 } else { 1.0 };
        let tape = common_tape([self])?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..axis_len {
                let base = (o * axis_len + r) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        finish(tape, shape, out, || Recorded::Reduce {
            a: node_id(self).unwrap(),
            outer,
            axis_len,
            inner,
            scale,
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.reduce_all(1.0)
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(GradError::InvalidArgument {
                op: "mean",
                detail: "mean of an empty tensor".into(),
            });
        }
        self.reduce_all(1.0 / self.numel() as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false, "sum")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true, "mean")
    }

    fn elementwise(
        &self,
        kind: Unary,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        save_output: bool,
    ) -> Result<Tensor> {
        let tape = common_tape([self])?;
        let values: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            if self.data[i].is_finite() {
                return Err(GradError::Domain {
                    op,
                    detail: format!("result is not finite at input {}", self.data[i]),
                });
            }
        }
        let out_rc = Rc::new(values);
        let saved = if save_output {
            Rc::clone(&out_rc)
        } else {
            Rc::clone(&self.data)
        };
        let mut out = Tensor {
            shape: self.shape.clone(),
            data: out_rc,
            node: None,
        };
        if let Some(tape) = tape {
            let id = tape.record(
                out.numel(),
                Recorded::Elementwise {
                    a: node_id(self).unwrap(),
                    kind,
                    saved,
                },
            )?;
            out.node = Some(NodeRef { tape, id });
        }
        Ok(out)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.elementwise(Unary::Square, "square", |v| v * v, false)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.elementwise(Unary::Exp, "exp", f64::exp, true)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| !(v > 0.0)) {
            return Err(GradError::Domain {
                op: "log",
                detail: format!("log of non-positive value {v}"),
            });
        }
        self.elementwise(Unary::Log, "log", f64::ln, false)
    }

    pub fn expm1(&self) -> Result<Tensor> {
        self.elementwise(Unary::Expm1, "expm1", f64::exp_m1, true)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.elementwise(Unary::Sigmoid, "sigmoid", sigmoid, true)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.elementwise(Unary::Softplus, "softplus", softplus, false)
    }

    /// `x^p` for a constant exponent. Negative bases need an integer exponent and
    /// zero needs `p >= 1` so the derivative stays finite.
    pub fn pow_const(&self, p: f64) -> Result<Tensor> {
        if !p.is_finite() {
            return Err(GradError::InvalidArgument {
                op: "pow_const",
                detail: format!("exponent {p} is not finite"),
            });
        }
        for &v in self.data.iter() {
            if (v < 0.0 && p.fract() != 0.0) || (v == 0.0 && p < 1.0) {
                return Err(GradError::Domain {
                    op: "pow_const",
                    detail: format!("{v}^{p} is outside the differentiable domain"),
                });
            }
        }
        self.elementwise(Unary::Pow(p), "pow_const", |v| v.powf(p), false)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| GradError::InvalidArgument {
            op: "concat",
            detail: "no operands".into(),
        })?;
        let (outer, _, inner) = split_axis(&first.shape, axis, "concat")?;
        for p in parts {
            let same_rank = p.shape.len() == first.shape.len();
            let same_rest = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let tape = common_tape(parts.iter().copied())?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        finish(tape, shape, out, || Recorded::Concat {
            parts: parts.iter().map(|p| (node_id(p), p.shape[axis])).collect(),
            outer,
            inner,
        })
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (outer, axis_len, inner) = split_axis(&self.shape, axis, "slice")?;
        if start > end || end > axis_len {
            return Err(GradError::InvalidArgument {
                op: "slice",
                detail: format!("range {start}..{end} out of bounds for extent {axis_len}"),
            });
        }
        let tape = common_tape([self])?;
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&self.data[base..base + width * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        finish(tape, shape, out, || Recorded::Slice {
            a: node_id(self).unwrap(),
            outer,
            axis_len,
            inner,
            start,
            end,
        })
    }
}
