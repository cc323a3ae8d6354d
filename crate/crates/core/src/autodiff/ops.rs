use super::{Node, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Log(usize),
    Exp(usize),
    Tanh(usize),
    Pow(usize, f64),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Softmax(usize, usize),
    Sum(usize),
    SumAxis(usize, usize),
    MaskedMean(usize, Vec<bool>),
    SelectColumns(usize, Vec<usize>),
}

/// (outer, axis length, inner) strides for reducing over `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// Fallible, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Tensor<'g> {
    fn node_shape_values(&self) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.clone())
    }

    fn unary(self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Tensor<'g> {
        let rg = self.requires_grad();
        self.graph.push(shape, value, op, rg)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Tensor<'g> {
        let (shape, mut value) = self.node_shape_values();
        value.iter_mut().for_each(|v| *v = f(*v));
        self.unary(op, shape, value)
    }

    fn binary(self, other: Tensor<'g>, kind: BinaryKind) -> Result<Tensor<'g>> {
        assert!(std::ptr::eq(self.graph, other.graph), "operands belong to different graphs");
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let (shape, value) = if a.shape == b.shape {
                (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
            } else if b.value.len() == 1 {
                let y = b.value[0];
                (a.shape.clone(), a.value.iter().map(|&x| f(x, y)).collect())
            } else if a.value.len() == 1 {
                let x = a.value[0];
                (b.shape.clone(), b.value.iter().map(|&y| f(x, y)).collect())
            } else {
                let op = match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                    BinaryKind::Div => "div",
                };
                return Err(Error::ShapeMismatch {
                    op,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            };
            (shape, value, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(shape, value, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn neg(self) -> Tensor<'g> {
        self.map(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, k: f64) -> Tensor<'g> {
        self.map(Op::Scale(self.id, k), |x| k * x)
    }

    pub fn add_scalar(self, k: f64) -> Tensor<'g> {
        self.map(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn log(self) -> Tensor<'g> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn exp(self) -> Tensor<'g> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(self) -> Tensor<'g> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn pow(self, gamma: f64) -> Tensor<'g> {
        self.map(Op::Pow(self.id, gamma), |x| if gamma == 0.0 { 1.0 } else { x.powf(gamma) })
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero where the
    /// input lies outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Tensor<'g> {
        self.map(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `log(clamp(x, PROB_EPS, 1))`, the only way losses take logarithms of
    /// probabilities.
    pub fn safe_log(self) -> Tensor<'g> {
        self.clamp(super::PROB_EPS, 1.0).log()
    }

    pub fn matmul(self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (vec![m, n], matmul_raw(&a.value, &b.value, m, k, n), a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(shape, value, Op::MatMul(self.id, other.id), rg))
    }

    /// Adds `bias[i]` to every entry of row `i` of a matrix.
    pub fn add_bias(self, bias: Tensor<'g>) -> Result<Tensor<'g>> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            if a.shape.len() != 2 || b.value.len() != a.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let value = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.value[i / cols])
                .collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(shape, value, Op::AddBias(self.id, bias.id), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Tensor<'g>> {
        let (shape, mut value) = self.node_shape_values();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { op: "softmax", axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| value[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (value[idx(k)] - max).exp();
                    value[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    value[idx(k)] /= total;
                }
            }
        }
        Ok(self.unary(Op::Softmax(self.id, axis), shape, value))
    }

    pub fn sum(self) -> Tensor<'g> {
        let total = self.values().iter().sum();
        self.unary(Op::Sum(self.id), vec![1], vec![total])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Tensor<'g>> {
        let (shape, value) = self.node_shape_values();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::InvalidAxis { op: "sum_axis", axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += value[(o * len + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.unary(Op::SumAxis(self.id, axis), out_shape, out))
    }

    /// Mean over the entries selected by `mask`. An empty selection yields 0
    /// and passes no gradient.
    pub fn masked_mean(self, mask: &[bool]) -> Result<Tensor<'g>> {
        let (shape, value) = self.node_shape_values();
        if mask.len() != value.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                left: shape,
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mean = if count == 0 {
            0.0
        } else {
            value.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / count as f64
        };
        Ok(self.unary(Op::MaskedMean(self.id, mask.to_vec()), vec![1], vec![mean]))
    }

    /// Gathers columns of a matrix: `out[:, j] = self[:, columns[j]]`.
    /// Columns may repeat; gradients of repeats are summed.
    pub fn select_columns(self, columns: &[usize]) -> Result<Tensor<'g>> {
        let (shape, value) = self.node_shape_values();
        if shape.len() != 2 || columns.iter().any(|&c| c >= shape[1]) {
            return Err(Error::ShapeMismatch {
                op: "select_columns",
                left: shape,
                right: vec![columns.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(rows * columns.len());
        for r in 0..rows {
            out.extend(columns.iter().map(|&c| value[r * cols + c]));
        }
        Ok(self.unary(Op::SelectColumns(self.id, columns.to_vec()), vec![rows, columns.len()], out))
    }

    /// Same values, no gradient path back to the ancestors.
    pub fn detach(self) -> Tensor<'g> {
        let (shape, value) = self.node_shape_values();
        self.graph.push(shape, value, Op::Leaf, false)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Folds a full-size gradient onto an operand that was broadcast from a
/// single element.
fn reduce_to(grad: Vec<f64>, operand_len: usize) -> Vec<f64> {
    if grad.len() == operand_len {
        grad
    } else {
        vec![grad.iter().sum()]
    }
}

impl Op {
    /// Vector-Jacobian products for each parent of `node`.
    pub(crate) fn backward(&self, nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let val = |id: usize| nodes[id].value.as_slice();
        let zip_map = |id: usize, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            val(id).iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect()
        };
        match *self {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(a), val(b));
                let len = g.len();
                let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    BinaryKind::Mul => (
                        (0..len).map(|i| g[i] * at(bv, i)).collect(),
                        (0..len).map(|i| g[i] * at(av, i)).collect(),
                    ),
                    BinaryKind::Div => (
                        (0..len).map(|i| g[i] / at(bv, i)).collect(),
                        (0..len)
                            .map(|i| -g[i] * at(av, i) / (at(bv, i) * at(bv, i)))
                            .collect(),
                    ),
                };
                vec![(a, reduce_to(ga, av.len())), (b, reduce_to(gb, bv.len()))]
            }
            Op::Neg(a) => vec![(a, g.iter().map(|x| -x).collect())],
            Op::Scale(a, k) => vec![(a, g.iter().map(|x| k * x).collect())],
            Op::AddScalar(a) => vec![(a, g.to_vec())],
            Op::Log(a) => vec![(a, zip_map(a, &|x, gi| gi / x))],
            Op::Exp(a) => vec![(a, node.value.iter().zip(g).map(|(y, gi)| gi * y).collect())],
            Op::Tanh(a) => vec![(a, node.value.iter().zip(g).map(|(y, gi)| gi * (1.0 - y * y)).collect())],
            Op::Pow(a, gamma) => {
                if gamma == 0.0 {
                    vec![(a, vec![0.0; g.len()])]
                } else {
                    vec![(a, zip_map(a, &|x, gi| gi * gamma * x.powf(gamma - 1.0)))]
                }
            }
            Op::Clamp(a, lo, hi) => vec![(a, zip_map(a, &|x, gi| if x < lo || x > hi { 0.0 } else { gi }))],
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let n = nodes[b].shape[1];
                let bt = transpose(val(b), k, n);
                let at = transpose(val(a), m, k);
                vec![(a, matmul_raw(g, &bt, m, n, k)), (b, matmul_raw(&at, g, k, m, n))]
            }
            Op::AddBias(a, b) => {
                let cols = nodes[a].shape[1];
                let mut gb = vec![0.0; nodes[b].value.len()];
                for (i, gi) in g.iter().enumerate() {
                    gb[i / cols] += gi;
                }
                vec![(a, g.to_vec()), (b, gb)]
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(a, gx)]
            }
            Op::Sum(a) => vec![(a, vec![g[0]; nodes[a].value.len()])],
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&nodes[a].shape, axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(a, gx)]
            }
            Op::MaskedMean(a, ref mask) => {
                let count = mask.iter().filter(|&&m| m).count();
                let w = if count == 0 { 0.0 } else { g[0] / count as f64 };
                vec![(a, mask.iter().map(|&m| if m { w } else { 0.0 }).collect())]
            }
            Op::SelectColumns(a, ref columns) => {
                let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                let k = columns.len();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for (j, &c) in columns.iter().enumerate() {
                        gx[r * cols + c] += g[r * k + j];
                    }
                }
                vec![(a, gx)]
            }
        }
    }
}
