//! Dense double-precision tensors with reverse-mode autodiff.
//!
//! Every tensor is a 2-D row-major array; scalars are [1,1] and vectors [1,n].
//! Ops build a define-by-run DAG: a node holds `Arc`s to its parents, so the
//! graph lives exactly as long as some downstream tensor does. Nodes whose
//! parents are all untracked constants are folded into fresh leaves, which
//! keeps pure numeric code (oracles, samplers with no grads) graph-free.
//!
//! Arithmetic follows IEEE semantics; finiteness is enforced where values
//! enter from outside (constructors, container loads) and re-checked by the
//! training loops and samplers that own an abort contract.

mod backward;
mod kernels;

pub use backward::{finite_diff_gradient, Gradients};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

struct Inner {
    id: u64,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Recorded operation; variants carry parent tensors plus whatever the
/// backward rule needs beyond cached outputs.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Exp(Tensor),
    Log(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Square(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    RowSum(Tensor),
    GaussLogPdf(Tensor),
    ConcatCols(Tensor, Tensor),
    ConcatRows(Tensor, Tensor),
    SliceCols(Tensor, usize),
    Reshape(Tensor),
    BroadcastRows(Tensor),
    PermuteCols(Tensor, Arc<Vec<usize>>),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | ConcatCols(a, b)
            | ConcatRows(a, b) => vec![a, b],
            Exp(a) | Log(a) | Tanh(a) | Relu(a) | Square(a) | Scale(a, _) | AddScalar(a)
            | Sum(a) | Mean(a) | RowSum(a) | GaussLogPdf(a) | SliceCols(a, _) | Reshape(a)
            | BroadcastRows(a) | PermuteCols(a, _) => vec![a],
        }
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn from_parts(rows: usize, cols: usize, data: Vec<f64>, op: Op, tracked: bool) -> Tensor {
        assert_eq!(data.len(), rows * cols, "element count must match shape");
        // Constant-only subgraphs carry no gradient; fold them to leaves so
        // their parents can be freed.
        let op = if tracked { op } else { Op::Leaf };
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                rows,
                cols,
                data,
                op,
                tracked,
            }),
        }
    }

    /// Untracked leaf; gradients do not flow into it.
    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite constant");
        Tensor::from_parts(rows, cols, data, Op::Leaf, false)
    }

    /// Tracked leaf: a parameter or a designated input that `backward`
    /// reports a gradient for.
    pub fn var(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite var");
        Tensor::from_parts(rows, cols, data, Op::Leaf, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(1, 1, vec![v])
    }

    /// [1,n] constant row vector.
    pub fn row(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::constant(1, n, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Tensor {
        Tensor::constant(rows, cols, vec![v; rows * cols])
    }

    pub fn randn(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Tensor {
        Tensor::constant(rows, cols, rng.normal_vec(rows * cols))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }
    pub fn rows(&self) -> usize {
        self.inner.rows
    }
    pub fn cols(&self) -> usize {
        self.inner.cols
    }
    pub fn len(&self) -> usize {
        self.inner.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }
    pub fn shape(&self) -> [usize; 2] {
        [self.inner.rows, self.inner.cols]
    }
    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }
    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }
    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.inner.data[r * self.inner.cols + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a {:?} tensor", self.shape());
        self.inner.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Detached copy: same values, no graph history, untracked.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.rows(), self.cols(), self.inner.data.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn same_shape(&self, other: &Tensor, op: &str) {
        assert!(
            self.rows() == other.rows() && self.cols() == other.cols(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.inner.data.iter().map(|&v| f(v)).collect();
        Tensor::from_parts(self.rows(), self.cols(), data, op, self.inner.tracked)
    }

    fn binary(&self, other: &Tensor, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.same_shape(other, name);
        let data = self
            .inner
            .data
            .iter()
            .zip(&other.inner.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let tracked = self.inner.tracked || other.inner.tracked;
        Tensor::from_parts(self.rows(), self.cols(), data, op, tracked)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, "add", Op::Add(self.clone(), other.clone()), |a, b| {
            a + b
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, "sub", Op::Sub(self.clone(), other.clone()), |a, b| {
            a - b
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, "mul", Op::Mul(self.clone(), other.clone()), |a, b| {
            a * b
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, "div", Op::Div(self.clone(), other.clone()), |a, b| {
            a / b
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols(),
            other.rows(),
            "matmul: inner dims {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.inner.data, &other.inner.data, m, k, n, &mut out);
        let tracked = self.inner.tracked || other.inner.tracked;
        Tensor::from_parts(m, n, out, Op::Matmul(self.clone(), other.clone()), tracked)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.clone()), f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(Op::Log(self.clone()), f64::ln)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.clone()), f64::tanh)
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.clone()), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn square(&self) -> Tensor {
        self.unary(Op::Square(self.clone()), |v| v * v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.clone(), c), |v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(self.clone()), |v| v + c)
    }

    /// Sum of all elements, as [1,1].
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.inner.data.iter().sum();
        Tensor::from_parts(1, 1, vec![s], Op::Sum(self.clone()), self.inner.tracked)
    }

    /// Mean of all elements, as [1,1].
    pub fn mean(&self) -> Tensor {
        let s: f64 = self.inner.data.iter().sum();
        let m = s / self.len() as f64;
        Tensor::from_parts(1, 1, vec![m], Op::Mean(self.clone()), self.inner.tracked)
    }

    /// Per-row sums: [m,n] -> [m,1].
    pub fn row_sum(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let data = (0..m)
            .map(|i| self.inner.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        Tensor::from_parts(m, 1, data, Op::RowSum(self.clone()), self.inner.tracked)
    }

    /// Standard-normal log-density of the flattened tensor:
    /// −(len/2)·log 2π − ½Σxᵢ², as [1,1]. On a [B,d] batch this is the sum of
    /// the B per-row log-densities.
    pub fn gaussian_logpdf(&self) -> Tensor {
        let n = self.len() as f64;
        let sq: f64 = self.inner.data.iter().map(|v| v * v).sum();
        let v = -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq;
        Tensor::from_parts(
            1,
            1,
            vec![v],
            Op::GaussLogPdf(self.clone()),
            self.inner.tracked,
        )
    }

    /// [m,p] ++ [m,q] -> [m,p+q].
    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.rows(),
            other.rows(),
            "concat_cols: row mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let (m, p, q) = (self.rows(), self.cols(), other.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&self.inner.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&other.inner.data[i * q..(i + 1) * q]);
        }
        let tracked = self.inner.tracked || other.inner.tracked;
        Tensor::from_parts(
            m,
            p + q,
            data,
            Op::ConcatCols(self.clone(), other.clone()),
            tracked,
        )
    }

    /// [p,n] ++ [q,n] -> [p+q,n].
    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols(),
            other.cols(),
            "concat_rows: col mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let mut data = self.inner.data.clone();
        data.extend_from_slice(&other.inner.data);
        let tracked = self.inner.tracked || other.inner.tracked;
        Tensor::from_parts(
            self.rows() + other.rows(),
            self.cols(),
            data,
            Op::ConcatRows(self.clone(), other.clone()),
            tracked,
        )
    }

    /// Columns [start, end) of every row.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(
            start < end && end <= self.cols(),
            "slice_cols: [{start},{end}) of {} cols",
            self.cols()
        );
        let (m, n, w) = (self.rows(), self.cols(), end - start);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.inner.data[i * n + start..i * n + end]);
        }
        Tensor::from_parts(
            m,
            w,
            data,
            Op::SliceCols(self.clone(), start),
            self.inner.tracked,
        )
    }

    /// (cols [0,at), cols [at,n)).
    pub fn split_cols(&self, at: usize) -> (Tensor, Tensor) {
        (self.slice_cols(0, at), self.slice_cols(at, self.cols()))
    }

    /// Same flat data, new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(
            rows * cols,
            self.len(),
            "reshape: {:?} -> [{rows},{cols}]",
            self.shape()
        );
        Tensor::from_parts(
            rows,
            cols,
            self.inner.data.clone(),
            Op::Reshape(self.clone()),
            self.inner.tracked,
        )
    }

    /// Tile a [1,n] row to [rows,n]. Used to add bias vectors to batches.
    pub fn broadcast_rows(&self, rows: usize) -> Tensor {
        assert_eq!(
            self.rows(),
            1,
            "broadcast_rows needs [1,n], got {:?}",
            self.shape()
        );
        let n = self.cols();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.inner.data);
        }
        Tensor::from_parts(
            rows,
            n,
            data,
            Op::BroadcastRows(self.clone()),
            self.inner.tracked,
        )
    }

    /// out[:,j] = self[:,perm[j]]; perm must be a permutation of 0..cols.
    pub fn permute_cols(&self, perm: &Arc<Vec<usize>>) -> Tensor {
        assert_eq!(perm.len(), self.cols(), "permute_cols: perm length");
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.inner.data[i * n..(i + 1) * n];
            data.extend(perm.iter().map(|&p| row[p]));
        }
        Tensor::from_parts(
            m,
            n,
            data,
            Op::PermuteCols(self.clone(), Arc::clone(perm)),
            self.inner.tracked,
        )
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        self.inner.op.parents()
    }

    /// Reverse-mode gradients of this scalar w.r.t. every tracked leaf.
    pub fn backward(&self) -> crate::error::Result<Gradients> {
        backward::run(self)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor[{}x{}, id={}{}]",
            self.rows(),
            self.cols(),
            self.id(),
            if self.is_tracked() { ", tracked" } else { "" }
        )?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}
