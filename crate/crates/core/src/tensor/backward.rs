//! Reverse-mode pass over the op DAG plus the finite-difference oracle used
//! to verify it.

use std::collections::{HashMap, HashSet};

use super::{kernels, Op, Tensor};
use crate::error::{Error, Result};

/// Gradient of a scalar root w.r.t. each tracked tensor, keyed by tensor id.
pub struct Gradients {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient as a constant tensor of the argument's shape.
    pub fn tensor_wrt(&self, t: &Tensor) -> Option<Tensor> {
        self.wrt(t)
            .map(|g| Tensor::constant(t.rows(), t.cols(), g.to_vec()))
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.by_id.contains_key(&t.id())
    }

    /// Scale every stored gradient in place. Used for global-norm clipping.
    pub fn scale_all(&mut self, c: f64) {
        for g in self.by_id.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    /// l2 norm over the gradients of the given tensors (missing entries
    /// contribute zero).
    pub fn global_norm<'a>(&self, over: impl Iterator<Item = &'a Tensor>) -> f64 {
        let mut sq = 0.0;
        for t in over {
            if let Some(g) = self.wrt(t) {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_id
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Children-before-parents order over the tracked subgraph, by iterative DFS.
/// Reversing DFS post-order gives each node before everything it reads, so a
/// single sweep completes every adjoint before it is propagated.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    enum Phase {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![Phase::Enter(root.clone())];
    while let Some(phase) = stack.pop() {
        match phase {
            Phase::Enter(t) => {
                if !seen.insert(t.id()) {
                    continue;
                }
                stack.push(Phase::Exit(t.clone()));
                for p in t.parents() {
                    if p.is_tracked() && !seen.contains(&p.id()) {
                        stack.push(Phase::Enter(p.clone()));
                    }
                }
            }
            Phase::Exit(t) => order.push(t),
        }
    }
    order.reverse();
    order
}

pub(super) fn run(root: &Tensor) -> Result<Gradients> {
    if root.len() != 1 {
        return Err(Error::InvalidArg(format!(
            "backward root must be scalar, got {:?}",
            root.shape()
        )));
    }
    let mut by_id: HashMap<u64, Vec<f64>> = HashMap::new();
    if !root.is_tracked() {
        // Constant root: zero gradient everywhere, nothing to traverse.
        return Ok(Gradients { by_id });
    }
    by_id.insert(root.id(), vec![1.0]);

    for node in topo_order(&root.clone()) {
        let g = match by_id.get(&node.id()) {
            Some(g) => g.clone(),
            // Tracked but unreachable from the root's value (can't happen
            // with a single-root DFS, kept as a guard).
            None => continue,
        };
        propagate(&node, &g, &mut by_id);
    }
    Ok(Gradients { by_id })
}

fn acc<'m>(
    by_id: &'m mut HashMap<u64, Vec<f64>>,
    t: &Tensor,
) -> Option<&'m mut Vec<f64>> {
    if !t.is_tracked() {
        return None;
    }
    Some(by_id.entry(t.id()).or_insert_with(|| vec![0.0; t.len()]))
}

/// Push the node's adjoint `g` into its parents.
fn propagate(node: &Tensor, g: &[f64], by_id: &mut HashMap<u64, Vec<f64>>) {
    let out = node.data();
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(by_id, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(gb) = acc(by_id, b) {
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(by_id, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(gb) = acc(by_id, b) {
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data().to_vec(), b.data().to_vec());
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            if let Some(gb) = acc(by_id, b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
        }
        Op::Div(a, b) => {
            let bd = b.data().to_vec();
            let od = out.to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bd[i];
                }
            }
            if let Some(gb) = acc(by_id, b) {
                // d(a/b)/db = −a/b² = −out/b
                for i in 0..g.len() {
                    gb[i] -= g[i] * od[i] / bd[i];
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let (ad, bd) = (a.data().to_vec(), b.data().to_vec());
            if let Some(ga) = acc(by_id, a) {
                // dA = G · Bᵀ
                kernels::matmul_nt_acc(g, &bd, m, n, k, ga);
            }
            if let Some(gb) = acc(by_id, b) {
                // dB = Aᵀ · G
                kernels::matmul_tn_acc(&ad, g, m, k, n, gb);
            }
        }
        Op::Exp(a) => {
            let od = out.to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * od[i];
                }
            }
        }
        Op::Log(a) => {
            let ad = a.data().to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / ad[i];
                }
            }
        }
        Op::Tanh(a) => {
            let od = out.to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - od[i] * od[i]);
                }
            }
        }
        Op::Relu(a) => {
            let ad = a.data().to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    if ad[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Square(a) => {
            let ad = a.data().to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * ad[i];
                }
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * c;
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i];
                }
            }
        }
        Op::Sum(a) => {
            let g0 = g[0];
            if let Some(ga) = acc(by_id, a) {
                for d in ga.iter_mut() {
                    *d += g0;
                }
            }
        }
        Op::Mean(a) => {
            let g0 = g[0] / a.len() as f64;
            if let Some(ga) = acc(by_id, a) {
                for d in ga.iter_mut() {
                    *d += g0;
                }
            }
        }
        Op::RowSum(a) => {
            let n = a.cols();
            if let Some(ga) = acc(by_id, a) {
                for (i, &gi) in g.iter().enumerate() {
                    for d in ga[i * n..(i + 1) * n].iter_mut() {
                        *d += gi;
                    }
                }
            }
        }
        Op::GaussLogPdf(a) => {
            let g0 = g[0];
            let ad = a.data().to_vec();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..ad.len() {
                    ga[i] -= g0 * ad[i];
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (m, p, q) = (a.rows(), a.cols(), b.cols());
            let w = p + q;
            if let Some(ga) = acc(by_id, a) {
                for i in 0..m {
                    for j in 0..p {
                        ga[i * p + j] += g[i * w + j];
                    }
                }
            }
            if let Some(gb) = acc(by_id, b) {
                for i in 0..m {
                    for j in 0..q {
                        gb[i * q + j] += g[i * w + p + j];
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = a.len();
            if let Some(ga) = acc(by_id, a) {
                for i in 0..split {
                    ga[i] += g[i];
                }
            }
            if let Some(gb) = acc(by_id, b) {
                for (i, d) in gb.iter_mut().enumerate() {
                    *d += g[split + i];
                }
            }
        }
        Op::SliceCols(a, start) => {
            let (m, n, w) = (node.rows(), a.cols(), node.cols());
            let start = *start;
            if let Some(ga) = acc(by_id, a) {
                for i in 0..m {
                    for j in 0..w {
                        ga[i * n + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(by_id, a) {
                for i in 0..g.len() {
                    ga[i] += g[i];
                }
            }
        }
        Op::BroadcastRows(a) => {
            let (m, n) = (node.rows(), node.cols());
            if let Some(ga) = acc(by_id, a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[j] += g[i * n + j];
                    }
                }
            }
        }
        Op::PermuteCols(a, perm) => {
            let (m, n) = (node.rows(), node.cols());
            if let Some(ga) = acc(by_id, a) {
                for i in 0..m {
                    for (j, &p) in perm.iter().enumerate() {
                        ga[i * n + p] += g[i * n + j];
                    }
                }
            }
        }
    }
}

/// Central-difference gradient of `f` at `x`, step `h` per coordinate.
/// Rebuilds an untracked leaf for each perturbation; `f` is expected to be a
/// pure function of the tensor's values.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_diff_gradient: h must be positive");
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::constant(x.rows(), x.cols(), plus));
        let fm = f(&Tensor::constant(x.rows(), x.cols(), minus));
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::constant(x.rows(), x.cols(), grad)
}
