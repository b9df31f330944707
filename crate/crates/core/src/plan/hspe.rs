use nalgebra::{DMatrix, SymmetricEigen};

use super::QueryPlan;
use crate::error::{Error, Result};

pub const DEFAULT_EIGENVECTORS: usize = 10;

/// Eigenvalues at or below this are treated as the Laplacian kernel.
const ZERO_EIGENVALUE: f64 = 1e-8;
const SIGN_EPS: f64 = 1e-9;

/// Positional encoding of one node: normalized BFS depth followed by `k`
/// Laplacian eigenvector coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Hspe {
    pub bfs: f64,
    pub lap: Vec<f64>,
}

impl Hspe {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.lap.len() + 1);
        v.push(self.bfs);
        v.extend_from_slice(&self.lap);
        v
    }
}

/// Root depth 0, each child one deeper, divided by the maximum depth
/// (all zeros for a single node).
pub fn bfs_depths(plan: &QueryPlan) -> Vec<f64> {
    let order = plan.bfs_order();
    let mut depth = vec![0usize; plan.len()];
    let pos: std::collections::HashMap<usize, usize> =
        plan.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    for &i in &order {
        for c in &plan.nodes[i].children {
            if let Some(&ci) = pos.get(c) {
                depth[ci] = depth[i] + 1;
            }
        }
    }
    let max = depth.iter().copied().max().unwrap_or(0);
    depth
        .into_iter()
        .map(|d| if max == 0 { 0.0 } else { d as f64 / max as f64 })
        .collect()
}

/// Unnormalized Laplacian `D - A` of the undirected plan tree.
pub fn laplacian(plan: &QueryPlan) -> DMatrix<f64> {
    let n = plan.len();
    let mut l = DMatrix::zeros(n, n);
    for (a, b) in plan.edges() {
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
    }
    l
}

/// Eigenvector coordinates of the `k` smallest nonzero Laplacian
/// eigenvalues, one row of length `k` per node.
///
/// Missing eigenvectors (plans with at most `k` nodes) leave zero
/// coordinates. Each eigenvector is unit-norm and its sign is fixed so that
/// its first nonzero coordinate in BFS order from the root is positive, which
/// makes the encoding independent of how node ids are assigned.
pub fn spectral_encoding(plan: &QueryPlan, k: usize) -> Result<Vec<Vec<f64>>> {
    let n = plan.len();
    if n == 0 {
        return Err(Error::InvalidPlan(format!("{}: empty plan", plan.query_id)));
    }
    let mut out = vec![vec![0.0; k]; n];
    if n == 1 || k == 0 {
        return Ok(out);
    }
    let eig = SymmetricEigen::try_new(laplacian(plan), 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric(format!("{}: eigensolver did not converge", plan.query_id)))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let bfs = plan.bfs_order();
    let selected = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > ZERO_EIGENVALUE)
        .take(k);
    for (slot, col) in selected.enumerate() {
        let v = eig.eigenvectors.column(col);
        let norm = v.norm();
        let first = bfs.iter().map(|&i| v[i]).find(|x| x.abs() > SIGN_EPS).unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for (i, row) in out.iter_mut().enumerate() {
            row[slot] = sign * v[i] / norm;
        }
    }
    Ok(out)
}

pub fn hspe(plan: &QueryPlan, k: usize) -> Result<Vec<Hspe>> {
    let depths = bfs_depths(plan);
    let lap = spectral_encoding(plan, k)?;
    Ok(depths.into_iter().zip(lap).map(|(bfs, lap)| Hspe { bfs, lap }).collect())
}

/// `true` where two nodes are tree-adjacent or identical.
pub fn adjacency_mask(plan: &QueryPlan) -> Vec<Vec<bool>> {
    let n = plan.len();
    let mut m = vec![vec![false; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = true;
    }
    for (a, b) in plan.edges() {
        m[a][b] = true;
        m[b][a] = true;
    }
    m
}
