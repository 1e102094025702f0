//! Compressed sparse rows, Dirichlet elimination, and an SPD solver.
//!
//! The direct path reorders with reverse Cuthill-McKee and factors the
//! envelope (profile) of the permuted matrix. If the factorization meets a
//! non-positive pivot, or the residual is not small enough after one round
//! of iterative refinement, Jacobi-preconditioned conjugate gradients takes
//! over.

use std::collections::VecDeque;

use super::FemError;

/// Square sparse matrix in CSR form with sorted, unique columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Sum duplicate `(row, col, value)` entries.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last = None;
        for (r, c, v) in trip {
            assert!(r < n && c < n, "triplet ({}, {}) outside {}x{}", r, c, n, n);
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let trip = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, &v)| (i, j, v)))
            .collect();
        CsrMatrix::from_triplets(n, trip)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol * v.abs().max(1.0)))
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ‖Ku − f‖ / ‖f‖, or ‖Ku‖ when `f` is zero.
pub fn relative_residual(k: &CsrMatrix, u: &[f64], f: &[f64]) -> f64 {
    let r: Vec<f64> = k.matvec(u).iter().zip(f).map(|(a, b)| a - b).collect();
    let nf = norm(f);
    if nf > 0.0 {
        norm(&r) / nf
    } else {
        norm(&r)
    }
}

/// A full assembled system plus its reduction to the free unknowns.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub k_full: CsrMatrix,
    pub f_full: Vec<f64>,
    pub prescribed: Vec<Option<f64>>,
    pub free: Vec<usize>,
    pub k: CsrMatrix,
    pub f: Vec<f64>,
}

impl LinearSystem {
    /// Eliminate prescribed unknowns symmetrically: their columns move to the
    /// right-hand side and their rows are dropped.
    pub fn new(k_full: CsrMatrix, f_full: Vec<f64>, prescribed: Vec<Option<f64>>) -> Result<Self, FemError> {
        let n = k_full.n();
        if prescribed.iter().all(|p| p.is_none()) {
            return Err(FemError::SingularSystem("no prescribed values".into()));
        }
        let mut index = vec![usize::MAX; n];
        let free: Vec<usize> = (0..n).filter(|&i| prescribed[i].is_none()).collect();
        for (r, &i) in free.iter().enumerate() {
            index[i] = r;
        }
        let mut trip = Vec::with_capacity(k_full.nnz());
        let mut f = Vec::with_capacity(free.len());
        for (r, &i) in free.iter().enumerate() {
            let mut fi = f_full[i];
            for (j, v) in k_full.row(i) {
                match prescribed[j] {
                    Some(g) => fi -= v * g,
                    None => trip.push((r, index[j], v)),
                }
            }
            f.push(fi);
        }
        let k = CsrMatrix::from_triplets(free.len(), trip);
        Ok(LinearSystem { k_full, f_full, prescribed, free, k, f })
    }

    /// Full solution vector from the free unknowns.
    pub fn expand(&self, u_free: &[f64]) -> Vec<f64> {
        let mut u: Vec<f64> = self.prescribed.iter().map(|p| p.unwrap_or(0.0)).collect();
        for (&i, &v) in self.free.iter().zip(u_free) {
            u[i] = v;
        }
        u
    }

    /// `K u − f` over all unknowns: zero on free ones, reactions on prescribed ones.
    pub fn reactions(&self, u: &[f64]) -> Vec<f64> {
        self.k_full.matvec(u).iter().zip(&self.f_full).map(|(a, b)| a - b).collect()
    }

    pub fn solve(&self) -> Result<Vec<f64>, FemError> {
        let u = if self.free.is_empty() { Vec::new() } else { solve_sparse(&self.k, &self.f)? };
        Ok(self.expand(&u))
    }
}

pub const RESIDUAL_TOL: f64 = 1e-10;
pub const CG_TOL: f64 = 1e-12;

/// Solve `k u = f` for symmetric positive definite `k`.
pub fn solve_sparse(k: &CsrMatrix, f: &[f64]) -> Result<Vec<f64>, FemError> {
    if f.len() != k.n() {
        return Err(FemError::SolverFailure(format!("rhs length {} for a {}x{} matrix", f.len(), k.n(), k.n())));
    }
    if f.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; f.len()]);
    }
    if let Ok(chol) = EnvelopeCholesky::factor(k) {
        let mut u = chol.solve(f);
        if relative_residual(k, &u, f) > RESIDUAL_TOL {
            let r: Vec<f64> = f.iter().zip(k.matvec(&u)).map(|(a, b)| a - b).collect();
            let du = chol.solve(&r);
            u.iter_mut().zip(du).for_each(|(a, b)| *a += b);
        }
        if relative_residual(k, &u, f) <= RESIDUAL_TOL {
            return Ok(u);
        }
        log::warn!("direct solve left residual {:e}; falling back to conjugate gradients", relative_residual(k, &u, f));
    }
    let u = pcg(k, f, CG_TOL, 10 * k.n() + 100)?;
    let res = relative_residual(k, &u, f);
    if res > RESIDUAL_TOL {
        return Err(FemError::SolverFailure(format!("residual {:e} above {:e}", res, RESIDUAL_TOL)));
    }
    Ok(u)
}

/// Reverse Cuthill-McKee ordering: `perm[new] = old`.
pub fn rcm_order(k: &CsrMatrix) -> Vec<usize> {
    let n = k.n();
    let degree: Vec<usize> = (0..n).map(|i| k.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs_levels = |start: usize, seen: &mut Vec<bool>| -> Vec<usize> {
        // returns the visit order; `seen` is left marked
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        let mut out = Vec::new();
        while let Some(v) = q.pop_front() {
            out.push(v);
            let mut nb: Vec<usize> = k.row(v).map(|(j, _)| j).filter(|&j| !seen[j]).collect();
            nb.sort_by_key(|&j| (degree[j], j));
            for j in nb {
                seen[j] = true;
                q.push_back(j);
            }
        }
        out
    };
    while order.len() < n {
        let seed = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)).unwrap();
        // a couple of sweeps towards a pseudo-peripheral start
        let mut start = seed;
        for _ in 0..2 {
            let mut tmp = visited.clone();
            let o = bfs_levels(start, &mut tmp);
            start = *o.last().unwrap();
        }
        order.extend(bfs_levels(start, &mut visited));
    }
    order.reverse();
    order
}

struct EnvelopeCholesky {
    perm: Vec<usize>,
    /// First stored column of each row.
    first: Vec<usize>,
    /// Offset of row `i`'s first stored entry in `vals`.
    start: Vec<usize>,
    vals: Vec<f64>,
}

impl EnvelopeCholesky {
    fn factor(k: &CsrMatrix) -> Result<Self, FemError> {
        let n = k.n();
        let perm = rcm_order(k);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let first: Vec<usize> = (0..n)
            .map(|i| k.row(perm[i]).map(|(j, _)| inv[j]).filter(|&j| j <= i).min().unwrap_or(i))
            .collect();
        let mut start = vec![0; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut vals = vec![0.0; start[n]];
        for i in 0..n {
            for (j, v) in k.row(perm[i]) {
                let jn = inv[j];
                if jn <= i {
                    vals[start[i] + jn - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let lo = fi.max(first[j]);
                let (head, row_i) = vals.split_at_mut(start[i]);
                let row_j = &head[start[j]..start[j + 1]];
                let s: f64 = (lo..j).map(|c| row_i[c - fi] * row_j[c - first[j]]).sum();
                let diag = row_j[j - first[j]];
                row_i[j - fi] = (row_i[j - fi] - s) / diag;
            }
            let row_i = &mut vals[start[i]..start[i + 1]];
            let d = row_i[i - fi] - row_i[..i - fi].iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(FemError::SolverFailure(format!("non-positive pivot {:e} at row {}", d, i)));
            }
            row_i[i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky { perm, first, start, vals })
    }

    fn solve(&self, f: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&o| f[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.vals[self.start[i]..self.start[i + 1]];
            let s: f64 = (fi..i).map(|c| row[c - fi] * y[c]).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.vals[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for c in fi..i {
                y[c] -= row[c - fi] * yi;
            }
        }
        let mut u = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            u[old] = y[new];
        }
        u
    }
}

/// Jacobi-preconditioned conjugate gradients to `‖r‖ ≤ tol ‖f‖`.
pub fn pcg(k: &CsrMatrix, f: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, FemError> {
    let n = k.n();
    let dinv: Vec<f64> = (0..n)
        .map(|i| {
            let d = k.get(i, i);
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(FemError::SolverFailure(format!("non-positive diagonal {:e} at row {}", d, i)))
            }
        })
        .collect::<Result<_, _>>()?;
    let nf = norm(f);
    let mut x = vec![0.0; n];
    let mut r = f.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        if norm(&r) <= tol * nf {
            return Ok(x);
        }
        let kp = k.matvec(&p);
        let pkp: f64 = p.iter().zip(&kp).map(|(a, b)| a * b).sum();
        if !(pkp > 0.0) {
            return Err(FemError::SolverFailure("matrix is not positive definite".into()));
        }
        let alpha = rz / pkp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
            z[i] = r[i] * dinv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if norm(&r) <= tol * nf {
        Ok(x)
    } else {
        Err(FemError::SolverFailure(format!("conjugate gradients did not converge in {} iterations", max_iter)))
    }
}
