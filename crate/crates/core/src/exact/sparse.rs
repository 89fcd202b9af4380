//! Compressed sparse rows and the linear solvers used on generator blocks.
//!
//! The systems solved here are nonsingular M-matrices (`λ − 𝓛`, or `−𝓛`
//! restricted to a set the chain leaves almost surely). Their structure is
//! symmetric, and Gaussian elimination without pivoting keeps diagonal
//! dominance, so a profile (skyline) LU on a reverse Cuthill–McKee ordering
//! is both stable and compact. Larger systems fall back to BiCGSTAB with a
//! Jacobi preconditioner.

use std::collections::VecDeque;
use std::io::{self, Write};

use super::ExactError;

/// Systems above this size use the iterative solver.
pub const DIRECT_LIMIT: usize = 50_000;

/// Sparse matrix in CSR form with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists; duplicates are summed.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                if cols.len() > *row_ptr.last().unwrap() && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(pos) => self.vals[r.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `xᵀ A`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                out[j] += xi * v;
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                rows[j].push((i, v));
            }
        }
        CsrMatrix::from_rows(self.n, rows)
    }

    /// Principal submatrix on `keep` (in the given order).
    pub fn submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let rows = keep
            .iter()
            .map(|&i| {
                self.row(i)
                    .filter(|&(j, _)| map[j] != usize::MAX)
                    .map(|(j, v)| (map[j], v))
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(keep.len(), rows)
    }

    /// Writes the documented triplet text format: `%`-comment header, a
    /// `rows cols nnz` line, then one `row col value` line per entry.
    pub fn write_triplets<W: Write>(&self, out: &mut W, comment: &str) -> io::Result<()> {
        for line in comment.lines() {
            writeln!(out, "% {line}")?;
        }
        writeln!(out, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(out, "{i} {j} {v:e}")?;
            }
        }
        Ok(())
    }
}

/// Writes a vector as an `n × 1` matrix in the triplet format.
pub fn write_vector_triplets<W: Write>(values: &[f64], out: &mut W, comment: &str) -> io::Result<()> {
    for line in comment.lines() {
        writeln!(out, "% {line}")?;
    }
    writeln!(out, "{} 1 {}", values.len(), values.len())?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i} 0 {v:e}")?;
    }
    Ok(())
}

/// Reverse Cuthill–McKee permutation of a structurally symmetric matrix:
/// `perm[new] = old`.
pub fn rcm_order(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let mut queue = VecDeque::new();
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]).collect();
            nb.sort_by_key(|&j| (degree[j], j));
            for j in nb {
                if !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    order.reverse();
    order
}

/// Profile LU factors `P A Pᵀ = L U` (`L` unit lower).
#[derive(Debug, Clone)]
pub struct SkylineLu {
    perm: Vec<usize>,
    env: Vec<usize>,
    /// Row `i` of `L`, columns `env[i]..i`.
    lower: Vec<Vec<f64>>,
    /// Column `j` of `U`, rows `env[j]..j`.
    upper: Vec<Vec<f64>>,
    diag: Vec<f64>,
}

impl SkylineLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, ExactError> {
        let n = a.n();
        let perm = rcm_order(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut env: Vec<usize> = (0..n).collect();
        for (new, &old) in perm.iter().enumerate() {
            for (j, _) in a.row(old) {
                let jn = inv[j];
                // symmetric envelope: row `new` reaches column `jn`, and
                // column `new` reaches row `jn`
                env[new] = env[new].min(jn);
                env[jn] = env[jn].min(new);
            }
        }
        let mut lower: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; i - env[i]]).collect();
        let mut upper: Vec<Vec<f64>> = (0..n).map(|j| vec![0.0; j - env[j]]).collect();
        let mut diag = vec![0.0; n];
        let mut scale = vec![0.0f64; n];
        for (new, &old) in perm.iter().enumerate() {
            for (j, v) in a.row(old) {
                let jn = inv[j];
                scale[new] = scale[new].max(v.abs());
                if jn == new {
                    diag[new] += v;
                } else if jn < new {
                    lower[new][jn - env[new]] += v;
                } else {
                    upper[jn][new - env[jn]] += v;
                }
            }
        }

        for j in 0..n {
            let ej = env[j];
            // column j of U
            for i in ej..j {
                let ei = env[i];
                let lo = ei.max(ej);
                let mut s = upper[j][i - ej];
                let li = &lower[i];
                let uj = &upper[j];
                for k in lo..i {
                    s -= li[k - ei] * uj[k - ej];
                }
                upper[j][i - ej] = s;
            }
            // row j of L
            for k in ej..j {
                let ek = env[k];
                let lo = ek.max(ej);
                let mut s = lower[j][k - ej];
                let lj = &lower[j];
                let uk = &upper[k];
                for m in lo..k {
                    s -= lj[m - ej] * uk[m - ek];
                }
                lower[j][k - ej] = s / diag[k];
            }
            let mut d = diag[j];
            for k in ej..j {
                d -= lower[j][k - ej] * upper[j][k - ej];
            }
            if !(d.abs() > 1e-300 && d.is_finite()) || d.abs() < 1e-14 * scale[j] {
                let cond = condition_estimate(&diag[..j]);
                return Err(ExactError::SolveFailed {
                    reason: format!("pivot {d:e} at step {j} of {n}"),
                    condition_estimate: cond,
                });
            }
            diag[j] = d;
        }
        Ok(SkylineLu {
            perm,
            env,
            lower,
            upper,
            diag,
        })
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// Ratio of the largest to the smallest pivot.
    pub fn pivot_ratio(&self) -> f64 {
        condition_estimate(&self.diag)
    }

    pub fn profile(&self) -> usize {
        self.lower.iter().map(Vec::len).sum::<usize>() * 2 + self.n()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let ei = self.env[i];
            let mut s = y[i];
            for (k, l) in (ei..i).zip(&self.lower[i]) {
                s -= l * y[k];
            }
            y[i] = s;
        }
        for j in (0..n).rev() {
            let xj = y[j] / self.diag[j];
            y[j] = xj;
            let ej = self.env[j];
            for (i, u) in (ej..j).zip(&self.upper[j]) {
                y[i] -= u * xj;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // Uᵀ is lower triangular with column j of U as row j
        for j in 0..n {
            let ej = self.env[j];
            let mut s = y[j];
            for (k, u) in (ej..j).zip(&self.upper[j]) {
                s -= u * y[k];
            }
            y[j] = s / self.diag[j];
        }
        // Lᵀ is unit upper triangular with row i of L as column i
        for i in (0..n).rev() {
            let xi = y[i];
            let ei = self.env[i];
            for (k, l) in (ei..i).zip(&self.lower[i]) {
                y[k] -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

fn condition_estimate(pivots: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &p in pivots {
        lo = lo.min(p.abs());
        hi = hi.max(p.abs());
    }
    if pivots.is_empty() {
        1.0
    } else if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Componentwise backward error `max_i |b − A x|_i / (|A||x| + |b|)_i`.
pub fn backward_error(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.n() {
        let mut r = b[i];
        let mut s = b[i].abs();
        for (j, v) in a.row(i) {
            r -= v * x[j];
            s += (v * x[j]).abs();
        }
        if s > 0.0 {
            worst = worst.max(r.abs() / s);
        } else if r != 0.0 {
            return f64::INFINITY;
        }
    }
    worst
}

/// Max-norm residual `‖b − A x‖_∞`.
pub fn residual_inf(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    a.mul_vec(x)
        .iter()
        .zip(b)
        .map(|(ax, bi)| (bi - ax).abs())
        .fold(0.0, f64::max)
}

/// How a system was solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub direct: bool,
    pub backward_error: f64,
    pub condition_estimate: f64,
}

/// Solves `A x = b` (or `Aᵀ x = b`), direct below [`DIRECT_LIMIT`] with two
/// rounds of iterative refinement, BiCGSTAB above.
pub fn solve(a: &CsrMatrix, b: &[f64], transposed: bool) -> Result<(Vec<f64>, SolveInfo), ExactError> {
    if a.n() > DIRECT_LIMIT {
        let at;
        let m = if transposed {
            at = a.transpose();
            &at
        } else {
            a
        };
        let x = bicgstab(m, b, 1e-13, 20 * a.n().max(100))?;
        let be = backward_error(m, &x, b);
        return Ok((
            x,
            SolveInfo {
                direct: false,
                backward_error: be,
                condition_estimate: f64::NAN,
            },
        ));
    }
    let lu = SkylineLu::factor(a)?;
    let apply = |v: &[f64]| if transposed { lu.solve_transposed(v) } else { lu.solve(v) };
    let mut x = apply(b);
    let at = if transposed { Some(a.transpose()) } else { None };
    let m = at.as_ref().unwrap_or(a);
    for _ in 0..2 {
        let ax = m.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let dx = apply(&r);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
    }
    let be = backward_error(m, &x, b);
    Ok((
        x,
        SolveInfo {
            direct: true,
            backward_error: be,
            condition_estimate: lu.pivot_ratio(),
        },
    ))
}

/// Jacobi-preconditioned BiCGSTAB.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, ExactError> {
    let n = a.n();
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d != 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };
    let dot = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(a, b)| a * b).sum() };
    let norm = |u: &[f64]| dot(u, u).sqrt();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        v = a.mul_vec(&p_hat);
        alpha = rho_new / dot(&r_hat, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) <= tol * b_norm {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok(x);
        }
        let s_hat = precond(&s);
        let t = a.mul_vec(&s_hat);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rho = rho_new;
        if norm(&r) <= tol * b_norm {
            return Ok(x);
        }
        if omega == 0.0 {
            break;
        }
    }
    Err(ExactError::SolveFailed {
        reason: "BiCGSTAB did not converge".into(),
        condition_estimate: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Random diagonally dominant matrix on a ring-with-chords pattern.
    fn test_matrix(n: usize) -> CsrMatrix {
        let mut rows = vec![Vec::new(); n];
        for i in 0..n {
            for &off in &[1usize, 7] {
                let j = (i + off) % n;
                let v1 = -(((i * 31 + j * 17) % 13 + 1) as f64);
                let v2 = -(((j * 29 + i * 11) % 7 + 1) as f64);
                rows[i].push((j, v1));
                rows[j].push((i, v2));
            }
        }
        for (i, row) in rows.iter_mut().enumerate() {
            let s: f64 = row.iter().map(|e| e.1.abs()).sum();
            row.push((i, s + 0.5));
        }
        CsrMatrix::from_rows(n, rows)
    }

    #[test]
    fn direct_solve_round_trip() {
        let a = test_matrix(60);
        let x_true: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x_true);
        let (x, info) = solve(&a, &b, false).unwrap();
        assert!(info.direct);
        for (u, v) in x.iter().zip(&x_true) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
        let bt = a.vec_mul(&x_true);
        let (xt, _) = solve(&a, &bt, true).unwrap();
        for (u, v) in xt.iter().zip(&x_true) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn bicgstab_matches_direct() {
        let a = test_matrix(80);
        let b: Vec<f64> = (0..80).map(|i| (i % 5) as f64 - 2.0).collect();
        let direct = SkylineLu::factor(&a).unwrap().solve(&b);
        let iter = bicgstab(&a, &b, 1e-14, 2000).unwrap();
        for (u, v) in direct.iter().zip(&iter) {
            assert_relative_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let rows = vec![vec![(0, 1.0), (1, -1.0)], vec![(0, -1.0), (1, 1.0)]];
        let a = CsrMatrix::from_rows(2, rows);
        assert!(matches!(SkylineLu::factor(&a), Err(ExactError::SolveFailed { .. })));
    }

    #[test]
    fn triplet_format() {
        let a = CsrMatrix::from_rows(2, vec![vec![(0, 2.0)], vec![(0, -1.0), (1, 3.0)]]);
        let mut out = Vec::new();
        a.write_triplets(&mut out, "test").unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "% test");
        assert_eq!(lines[1], "2 2 3");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("1 0 "));
    }

    #[test]
    fn rcm_is_permutation() {
        let a = test_matrix(50);
        let mut p = rcm_order(&a);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
