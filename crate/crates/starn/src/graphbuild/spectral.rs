//! Algebraic connectivity of the symmetrized segment graph.
//!
//! The operator is the normalized Laplacian I - D^{-1/2} A D^{-1/2} of
//! (A + A^T)/2 with self-loops removed. Its second-smallest eigenvalue is
//! positive iff the graph is connected.

use crate::error::{Result, StarnError};

/// Sparse row adjacency: `adj[i]` lists `(j, weight)` sorted by `j`.
pub type Adjacency = Vec<Vec<(usize, f64)>>;

/// Eigenvalues of a dense symmetric matrix (row-major, n x n) by cyclic
/// Jacobi rotations, ascending. Converges to well below 1e-8 absolute
/// error at the sizes used here.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let idx = |r: usize, c: usize| r * n + c;
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[idx(p, q)] * a[idx(p, q)];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(p, k)] = a[idx(k, p)];
                    a[idx(k, q)] = s * akp + c * akq;
                    a[idx(q, k)] = a[idx(k, q)];
                }
                a[idx(p, p)] -= t * apq;
                a[idx(q, q)] += t * apq;
                a[idx(p, q)] = 0.0;
                a[idx(q, p)] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

/// Second-smallest eigenvalue of the normalized Laplacian. An isolated node
/// (zero degree after removing self-loops) short-circuits to 0, since the
/// graph is then disconnected by definition.
pub fn algebraic_connectivity(adj: &Adjacency) -> Result<f64> {
    let n = adj.len();
    if n < 2 {
        return Err(StarnError::Graph(format!(
            "algebraic connectivity needs at least 2 nodes, got {}",
            n
        )));
    }
    // Symmetrize and drop the diagonal.
    let mut sym = vec![0.0f64; n * n];
    for (i, row) in adj.iter().enumerate() {
        for &(j, w) in row {
            if i != j {
                sym[i * n + j] += w / 2.0;
                sym[j * n + i] += w / 2.0;
            }
        }
    }
    let degrees: Vec<f64> = (0..n).map(|i| (0..n).map(|j| sym[i * n + j]).sum()).collect();
    if degrees.iter().any(|&d| d <= 0.0) {
        return Ok(0.0);
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut lap = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let norm = inv_sqrt[i] * sym[i * n + j] * inv_sqrt[j];
            lap[i * n + j] = if i == j { 1.0 - norm } else { -norm };
        }
    }
    let eig = jacobi_eigenvalues(lap, n);
    Ok(eig[1])
}

/// Connected components of the symmetrized graph, ignoring self-loops.
pub fn component_count(adj: &Adjacency) -> usize {
    let n = adj.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, row) in adj.iter().enumerate() {
        for &(j, _) in row {
            if i != j {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi] = lo;
                }
            }
        }
    }
    (0..n)
        .filter(|&i| find(&mut parent, i) == i)
        .count()
}
