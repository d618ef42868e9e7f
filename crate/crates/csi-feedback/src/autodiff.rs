//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are evaluated eagerly and recorded on a per-graph tape; a
//! single reverse sweep accumulates gradients into the bound parameter
//! slots. The op set is exactly what the end-to-end pipeline needs: dense
//! algebra, row/column broadcasts, pointwise nonlinearities, the standard
//! normal CDF, and reductions.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    SubRow(usize, usize),
    MulRow(usize, usize),
    DivRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    NormCdf(usize),
    ClampMin(usize, f64),
    SumAxis0(usize),
    MeanAxis0(usize),
    SumAxis1(usize),
    SumAll(usize),
    BroadcastCol(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward computation. Dropped (or reset) after the backward sweep.
pub struct Graph {
    nodes: Vec<Node>,
    /// (node id, parameter slot) bindings.
    bound: Vec<(usize, usize)>,
    swept: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            swept: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    /// Mount a parameter slot onto the tape; backward accumulates into its
    /// gradient.
    pub fn param(&mut self, ps: &ParameterSet, slot: usize) -> Var {
        let v = self.push(ps.value(slot).clone(), Op::Leaf);
        self.bound.push((v.0, slot));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let t = self.nodes[a.0].value.zip(&self.nodes[b.0].value, f);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| -x);
        self.push(t, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| c * x);
        self.push(t, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + c);
        self.push(t, Op::AddScalar(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(t, Op::MatMul(a.0, b.0))
    }

    fn rowwise(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let m = &self.nodes[a.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(m.cols(), r.len(), "row broadcast width mismatch");
        let cols = m.cols();
        let data = m
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r.values()[i % cols]))
            .collect();
        let t = Tensor::new(m.shape().to_vec(), data).unwrap();
        self.push(t, op)
    }

    /// `[m×n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.rowwise(a, row, |x, y| x + y, Op::AddRow(a.0, row.0))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        self.rowwise(a, row, |x, y| x - y, Op::SubRow(a.0, row.0))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.rowwise(a, row, |x, y| x * y, Op::MulRow(a.0, row.0))
    }

    pub fn div_row(&mut self, a: Var, row: Var) -> Var {
        self.rowwise(a, row, |x, y| x / y, Op::DivRow(a.0, row.0))
    }

    fn colwise(&mut self, a: Var, col: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let m = &self.nodes[a.0].value;
        let c = &self.nodes[col.0].value;
        assert_eq!(m.rows(), c.len(), "column broadcast height mismatch");
        let cols = m.cols();
        let data = m
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, c.values()[i / cols]))
            .collect();
        let t = Tensor::new(m.shape().to_vec(), data).unwrap();
        self.push(t, op)
    }

    /// `[m×n] ∘ [m×1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        self.colwise(a, col, |x, y| x * y, Op::MulCol(a.0, col.0))
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        self.colwise(a, col, |x, y| x / y, Op::DivCol(a.0, col.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(t, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(softplus);
        self.push(t, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::exp);
        self.push(t, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::ln);
        self.push(t, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::sqrt);
        self.push(t, Op::Sqrt(a.0))
    }

    pub fn norm_cdf(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(normal_cdf);
        self.push(t, Op::NormCdf(a.0))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.max(floor));
        self.push(t, Op::ClampMin(a.0, floor))
    }

    /// Column sums: `[m×n] -> [1×n]`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (rows, cols) = (m.rows(), m.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += m.at(r, c);
            }
        }
        let t = Tensor::new(vec![1, cols], out).unwrap();
        self.push(t, Op::SumAxis0(a.0))
    }

    /// Column means: `[m×n] -> [1×n]`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (rows, cols) = (m.rows(), m.cols());
        let inv = 1.0 / rows as f64;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += m.at(r, c) * inv;
            }
        }
        let t = Tensor::new(vec![1, cols], out).unwrap();
        self.push(t, Op::MeanAxis0(a.0))
    }

    /// Row sums: `[m×n] -> [m×1]`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let (rows, cols) = (m.rows(), m.cols());
        let out: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| m.at(r, c)).sum())
            .collect();
        let t = Tensor::new(vec![rows, 1], out).unwrap();
        self.push(t, Op::SumAxis1(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.values().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m×1] -> [m×n]` replicated columns.
    pub fn broadcast_col(&mut self, a: Var, n: usize) -> Var {
        let c = &self.nodes[a.0].value;
        let rows = c.len();
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            out.extend(std::iter::repeat(c.values()[r]).take(n));
        }
        let t = Tensor::new(vec![rows, n], out).unwrap();
        self.push(t, Op::BroadcastCol(a.0, n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                let c = t.cols();
                out.extend_from_slice(&t.values()[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::new(vec![rows, total], out).unwrap();
        self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Columns `[from, to)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let m = &self.nodes[a.0].value;
        let (rows, cols) = (m.rows(), m.cols());
        assert!(from < to && to <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * (to - from));
        for r in 0..rows {
            out.extend_from_slice(&m.values()[r * cols + from..r * cols + to]);
        }
        let t = Tensor::new(vec![rows, to - from], out).unwrap();
        self.push(t, Op::SliceCols(a.0, from, to))
    }

    /// log₂ x = ln x / ln 2.
    pub fn log2(&mut self, a: Var) -> Var {
        let l = self.ln(a);
        self.scale(l, std::f64::consts::LOG2_E)
    }

    /// Reverse sweep from a scalar loss; gradients accumulate into the
    /// bound slots of `ps`. The tape can only be swept once.
    pub fn backward(&mut self, loss: Var, ps: &mut ParameterSet) -> Result<()> {
        if self.swept {
            return Err(Error::Usage(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage("backward requires a scalar loss".into()));
        }
        if !self.nodes[loss.0].value.values()[0].is_finite() {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        self.swept = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_to_parents(id, &g, &mut grads);
            if self.bound.iter().any(|&(n, _)| n == id) {
                for &(n, slot) in &self.bound {
                    if n == id {
                        ps.grad_mut(slot).add_assign(&g);
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn push_to_parents(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                Self::accum(grads, *a, g.zip(val(*b), |gx, y| gx * y));
                Self::accum(grads, *b, g.zip(val(*a), |gx, x| gx * x));
            }
            Op::Div(a, b) => {
                Self::accum(grads, *a, g.zip(val(*b), |gx, y| gx / y));
                let da = g.zip(val(*a), |gx, x| gx * x);
                Self::accum(grads, *b, da.zip(val(*b), |n, y| -n / (y * y)));
            }
            Op::Neg(a) => Self::accum(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                Self::accum(grads, *a, g.map(|x| c * x));
            }
            Op::AddScalar(a) => Self::accum(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                Self::accum(grads, *a, matmul_nt(g, val(*b)));
                Self::accum(grads, *b, matmul_tn(val(*a), g));
            }
            Op::AddRow(a, r) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *r, col_sums(g, val(*r).shape()));
            }
            Op::SubRow(a, r) => {
                Self::accum(grads, *a, g.clone());
                let mut s = col_sums(g, val(*r).shape());
                s.values_mut().iter_mut().for_each(|x| *x = -*x);
                Self::accum(grads, *r, s);
            }
            Op::MulRow(a, r) => {
                let cols = g.cols();
                let rv = val(*r).values();
                let da = g
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &gx)| gx * rv[i % cols])
                    .collect();
                Self::accum(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), da).unwrap(),
                );
                let prod = g.zip(val(*a), |gx, x| gx * x);
                Self::accum(grads, *r, col_sums(&prod, val(*r).shape()));
            }
            Op::DivRow(a, r) => {
                let cols = g.cols();
                let rv = val(*r).values();
                let da = g
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &gx)| gx / rv[i % cols])
                    .collect();
                Self::accum(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), da).unwrap(),
                );
                let prod = g.zip(val(*a), |gx, x| gx * x);
                let mut s = col_sums(&prod, val(*r).shape());
                for (j, x) in s.values_mut().iter_mut().enumerate() {
                    *x = -*x / (rv[j] * rv[j]);
                }
                Self::accum(grads, *r, s);
            }
            Op::MulCol(a, c) => {
                let cols = g.cols();
                let cv = val(*c).values();
                let da = g
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &gx)| gx * cv[i / cols])
                    .collect();
                Self::accum(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), da).unwrap(),
                );
                let prod = g.zip(val(*a), |gx, x| gx * x);
                Self::accum(grads, *c, row_sums(&prod, val(*c).shape()));
            }
            Op::DivCol(a, c) => {
                let cols = g.cols();
                let cv = val(*c).values();
                let da = g
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &gx)| gx / cv[i / cols])
                    .collect();
                Self::accum(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), da).unwrap(),
                );
                let prod = g.zip(val(*a), |gx, x| gx * x);
                let mut s = row_sums(&prod, val(*c).shape());
                for (i, x) in s.values_mut().iter_mut().enumerate() {
                    *x = -*x / (cv[i] * cv[i]);
                }
                Self::accum(grads, *c, s);
            }
            Op::Relu(a) => {
                Self::accum(grads, *a, g.zip(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            Op::Softplus(a) => {
                Self::accum(grads, *a, g.zip(val(*a), |gx, x| gx * sigmoid(x)));
            }
            Op::Exp(a) => Self::accum(grads, *a, g.zip(val(id), |gx, y| gx * y)),
            Op::Ln(a) => Self::accum(grads, *a, g.zip(val(*a), |gx, x| gx / x)),
            Op::Sqrt(a) => Self::accum(grads, *a, g.zip(val(id), |gx, y| gx / (2.0 * y))),
            Op::NormCdf(a) => {
                Self::accum(
                    grads,
                    *a,
                    g.zip(val(*a), |gx, x| gx * INV_SQRT_2PI * (-0.5 * x * x).exp()),
                );
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                Self::accum(
                    grads,
                    *a,
                    g.zip(val(*a), |gx, x| if x > floor { gx } else { 0.0 }),
                );
            }
            Op::SumAxis0(a) => {
                let rows = val(*a).rows();
                let mut out = Vec::with_capacity(rows * g.len());
                for _ in 0..rows {
                    out.extend_from_slice(g.values());
                }
                Self::accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), out).unwrap());
            }
            Op::MeanAxis0(a) => {
                let rows = val(*a).rows();
                let inv = 1.0 / rows as f64;
                let mut out = Vec::with_capacity(rows * g.len());
                for _ in 0..rows {
                    out.extend(g.values().iter().map(|&x| x * inv));
                }
                Self::accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), out).unwrap());
            }
            Op::SumAxis1(a) => {
                let (rows, cols) = (val(*a).rows(), val(*a).cols());
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend(std::iter::repeat(g.values()[r]).take(cols));
                }
                Self::accum(grads, *a, Tensor::new(val(*a).shape().to_vec(), out).unwrap());
            }
            Op::SumAll(a) => {
                let s = g.values()[0];
                Self::accum(grads, *a, Tensor::full(val(*a).shape().to_vec(), s));
            }
            Op::BroadcastCol(a, n) => {
                let src = val(*a);
                let out: Vec<f64> = (0..src.len())
                    .map(|r| g.values()[r * n..(r + 1) * n].iter().sum())
                    .collect();
                Self::accum(grads, *a, Tensor::new(src.shape().to_vec(), out).unwrap());
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut out = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        let base = r * g.cols() + offset;
                        out.extend_from_slice(&g.values()[base..base + pc]);
                    }
                    Self::accum(grads, p, Tensor::new(val(p).shape().to_vec(), out).unwrap());
                    offset += pc;
                }
            }
            Op::SliceCols(a, from, to) => {
                let (rows, cols) = (val(*a).rows(), val(*a).cols());
                let mut out = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    for (j, c) in (*from..*to).enumerate() {
                        out.set(r, c, g.at(r, j));
                    }
                }
                Self::accum(grads, *a, out);
            }
        }
    }
}

fn col_sums(g: &Tensor, target_shape: &[usize]) -> Tensor {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += g.at(r, c);
        }
    }
    Tensor::new(target_shape.to_vec(), out).unwrap()
}

fn row_sums(g: &Tensor, target_shape: &[usize]) -> Tensor {
    let (rows, cols) = (g.rows(), g.cols());
    let out: Vec<f64> = (0..rows)
        .map(|r| (0..cols).map(|c| g.at(r, c)).sum())
        .collect();
    Tensor::new(target_shape.to_vec(), out).unwrap()
}
