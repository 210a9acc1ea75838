//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar variable walks the tape in reverse and
//! returns a [`Gradients`] table. Tapes are meant to live for one training
//! step; dropping the tape frees the graph.
//!
//! Leaves created with [`Tape::param`] receive gradients; leaves created with
//! [`Tape::constant`] (and everything computed only from constants) are
//! skipped during the reverse pass.
//!
//! Image rotation is an input transform and lives on [`Array::rotate90`]; it
//! has no tape counterpart.

use std::cell::{Ref, RefCell};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    LogSoftmax(usize),
    Mean(usize),
    Sum(usize),
    SumSq(usize),
    AddRow(usize, usize),
    Gather(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    RowNormalize(usize),
}

struct Node<S> {
    value: Array<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations for a single reverse pass.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Array<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Array<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(Array::scalar(value))
    }

    /// Stacks 2-D variables with equal widths.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.nodes.borrow();
            let arrays: Vec<&Array<S>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Array::concat_rows(&arrays)?
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    fn push(&self, value: Array<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Array::full(root_value.shape(), S::one()));
        }

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            propagate(&nodes, &node.op, &node.value, &g, &mut grads)?;
        }

        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Array<S>>],
    id: usize,
    contribution: Array<S>,
) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    op: &Op<S>,
    out: &Array<S>,
    g: &Array<S>,
    grads: &mut [Option<Array<S>>],
) -> Result<()> {
    let val = |id: usize| &nodes[id].value;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.scale(-S::one()))?;
        }
        Op::Mul(a, b) => {
            let ga = g.zip_map(val(*b), "mul", |g, b| g * b)?;
            let gb = g.zip_map(val(*a), "mul", |g, a| g * a)?;
            accumulate(nodes, grads, *a, ga)?;
            accumulate(nodes, grads, *b, gb)?;
        }
        Op::Scale(a, k) => accumulate(nodes, grads, *a, g.scale(*k))?,
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone())?,
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.matmul(&val(*b).transpose()?)?;
                accumulate(nodes, grads, *a, ga)?;
            }
            if nodes[*b].requires_grad {
                let gb = val(*a).transpose()?.matmul(g)?;
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()?)?,
        Op::Relu(a) => {
            let ga = g.zip_map(val(*a), "relu", |g, x| if x > S::zero() { g } else { S::zero() })?;
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut ga = g.clone();
            for (grow, orow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                let total: S = grow.iter().copied().sum();
                for (gv, &y) in grow.iter_mut().zip(orow) {
                    *gv -= y.exp() * total;
                }
            }
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::Mean(a) => {
            let n = S::count(val(*a).len());
            accumulate(nodes, grads, *a, Array::full(val(*a).shape(), g.item() / n))?;
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, Array::full(val(*a).shape(), g.item()))?,
        Op::SumSq(a) => {
            let k = g.item() + g.item();
            accumulate(nodes, grads, *a, val(*a).scale(k))?;
        }
        Op::AddRow(a, b) => {
            let c = g.cols();
            let mut gb = vec![S::zero(); c];
            for row in g.data().chunks(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, Array::new(val(*b).shape().to_vec(), gb)?)?;
        }
        Op::Gather(a, idx) => {
            let mut ga = Array::zeros(val(*a).shape());
            let data = ga.data_mut();
            for (&i, &gv) in idx.iter().zip(g.data()) {
                data[i] += gv;
            }
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::SelectCols(a, cols) => {
            let src = val(*a);
            let width = src.cols();
            let mut ga = Array::zeros(src.shape());
            let data = ga.data_mut();
            for (i, grow) in g.data().chunks(cols.len()).enumerate() {
                for (&j, &gv) in cols.iter().zip(grow) {
                    data[i * width + j] += gv;
                }
            }
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                accumulate(nodes, grads, p, Array::new(val(p).shape().to_vec(), slice)?)?;
                offset += rows;
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.reshape(val(*a).shape())?)?,
        Op::RowNormalize(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut ga = Array::zeros(x.shape());
            for ((grow, yrow), (xrow, dst)) in g
                .data()
                .chunks(c)
                .zip(out.data().chunks(c))
                .zip(x.data().chunks(c).zip(ga.data_mut().chunks_mut(c)))
            {
                let norm = row_norm(xrow);
                let dot: S = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                for ((d, &gv), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                    *d = (gv - y * dot) / norm;
                }
            }
            accumulate(nodes, grads, *a, ga)?;
        }
    }
    Ok(())
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
    n.max(S::lit(1e-12))
}

/// Gradients produced by one reverse pass.
pub struct Gradients<S> {
    grads: Vec<Option<Array<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_, S>) -> Array<S> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array::zeros(var.value().shape()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

// Arithmetic is fallible (shape checks), so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array<S>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a scalar variable.
    pub fn item(&self) -> S {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Array<S>, op: Op<S>) -> Self {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Self, value: Array<S>, op: Op<S>) -> Self {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let v = self.value().zip_map(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, k: S) -> Self {
        let v = self.value().scale(k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn neg(self) -> Self {
        self.scale(-S::one())
    }

    pub fn add_scalar(self, k: S) -> Self {
        let v = self.value().map(|x| x + k);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Self> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| x.max(S::zero()));
        self.unary(v, Op::Relu(self.id))
    }

    /// Row-wise log-softmax of a 2-D variable.
    pub fn log_softmax(self) -> Self {
        let v = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        };
        self.unary(v, Op::LogSoftmax(self.id))
    }

    pub fn mean(self) -> Self {
        let v = {
            let x = self.value();
            Array::scalar(x.sum() / S::count(x.len()))
        };
        self.unary(v, Op::Mean(self.id))
    }

    pub fn sum(self) -> Self {
        let v = Array::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn sum_sq(self) -> Self {
        let v = Array::scalar(self.value().sum_sq());
        self.unary(v, Op::SumSq(self.id))
    }

    /// Adds a 1-D `bias` to every row of a 2-D variable.
    pub fn add_row(self, bias: Self) -> Result<Self> {
        let v = {
            let x = self.value();
            let b = bias.value();
            if x.shape().len() != 2 || b.len() != x.cols() {
                return Err(Error::shape("add_row", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            let c = x.cols();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Picks entries by flat row-major index into a 1-D variable.
    pub fn gather(self, flat: Vec<usize>) -> Result<Self> {
        let v = {
            let x = self.value();
            if flat.is_empty() {
                return Err(Error::Invalid("gather: empty index list".into()));
            }
            if let Some(&bad) = flat.iter().find(|&&i| i >= x.len()) {
                return Err(Error::shape("gather", x.shape(), &[bad]));
            }
            let data = flat.iter().map(|&i| x.data()[i]).collect();
            Array::new(vec![flat.len()], data)?
        };
        Ok(self.unary(v, Op::Gather(self.id, flat)))
    }

    /// Keeps the given columns of a 2-D variable, in order.
    pub fn select_cols(self, cols: Vec<usize>) -> Result<Self> {
        let v = self.value().select_cols(&cols)?;
        Ok(self.unary(v, Op::SelectCols(self.id, cols)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Scales each row of a 2-D variable to unit Euclidean norm.
    pub fn row_normalize(self) -> Self {
        let v = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                let n = row_norm(row);
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            out
        };
        self.unary(v, Op::RowNormalize(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: &[&[f64]]) -> Array<f64> {
        Array::from_rows(rows).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Array::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let tape = Tape::new();
        let x = tape.param(Array::<f64>::zeros(&[2, 2]));
        let c = tape.scalar(4.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x), Array::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.param(Array::<f64>::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn build_op_values() {
        let tape = Tape::new();
        let a = tape.constant(arr(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(arr(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(*a.matmul(i).unwrap().value(), arr(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let r = tape.constant(Array::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.relu().value().data(), &[0.0, 0.0, 2.0]);
        let s = tape.constant(Array::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(s.sum_sq().item(), 25.0);
    }

    #[test]
    fn elementwise_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Array::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Array::<f64>::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x + x => dy/dx = 3
        let tape = Tape::new();
        let x = tape.param(Array::scalar(1.5));
        let y = x.add(x).unwrap().add(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 3.0);
    }

    #[test]
    fn unreachable_leaf_zero() {
        let tape = Tape::new();
        let x = tape.param(Array::scalar(2.0));
        let unused = tape.param(Array::<f64>::zeros(&[3]));
        let g = tape.backward(x.sum_sq()).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Array::scalar(2.0));
        let c = tape.constant(Array::scalar(5.0));
        let y = x.mul(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 5.0);
        assert_eq!(g.wrt(c).item(), 0.0);
    }
}
