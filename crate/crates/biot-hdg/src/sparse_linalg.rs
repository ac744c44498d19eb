//! Sparse symmetric linear algebra: CSR storage and an LDLᵀ direct solver.
//!
//! The solver targets the symmetric indefinite saddle-point systems produced
//! by the discretization: it combines a fill-reducing (approximate minimum
//! degree) ordering, symmetric equilibration, an up-looking LDLᵀ
//! factorization with dynamic regularization of tiny pivots, and iterative
//! refinement against the unfactored matrix. Every accepted solve satisfies
//! the normwise relative residual bound `‖Ax−b‖ ≤ RESIDUAL_TOL·(‖A‖‖x‖+‖b‖)`;
//! anything worse is reported as an error rather than returned silently.
//!
//! The time loop of the solver factors its step matrix once and reuses the
//! factorization across all steps, so `Factorization::solve` takes `&self`
//! and is deterministic: identical inputs produce bitwise identical outputs.

use std::io::{self, Write};

use thiserror::Error;

/// Relative residual bound enforced on every accepted solve.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// Pivots smaller than this (after equilibration) are perturbed.
const PIVOT_EPS: f64 = 1e-13;

/// Magnitude assigned to a perturbed pivot.
const PIVOT_DELTA: f64 = 1e-13;

/// Maximum number of iterative refinement passes per solve.
const MAX_REFINEMENTS: usize = 4;

/// Errors produced by the sparse factorization and solve.
#[derive(Debug, Error)]
pub enum SparseError {
    /// The matrix has an identically zero row/column and cannot be factored.
    #[error("structurally singular matrix: row {pivot} has no nonzero entries")]
    SingularMatrix { pivot: usize },
    /// The refined solution still violates the residual bound; the matrix is
    /// numerically singular or far too ill-conditioned for this solver.
    #[error("solve residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
}

/// Square sparse matrix in compressed sparse row form.
///
/// Column indices within each row are sorted and duplicate-free; explicit
/// zeros are retained so that patterns stay stable under linear combination.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Builds a matrix from (row, column, value) triplets, summing duplicates.
    ///
    /// `symmetric` records that the caller guarantees `A = Aᵀ` (both pattern
    /// and values); the factorization requires it.
    ///
    /// # Panics
    /// Panics if any index is out of range.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], symmetric: bool) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&t| (triplets[t].0, triplets[t].1));

        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last = None;
        for &t in &order {
            let (i, j, v) = triplets[t];
            assert!(i < n && j < n, "triplet index ({i}, {j}) out of range for n = {n}");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix { n, row_ptr, col_idx, values, symmetric }
    }

    /// Matrix dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries (including explicit zeros).
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Whether the matrix was declared symmetric at construction.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Returns the entry at (i, j), zero if not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Computes `y = A·x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "matvec dimension mismatch");
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    /// Iterates the stored entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(|k| (self.col_idx[k], self.values[k]))
    }

    /// Maximum absolute row sum (operator ∞-norm).
    pub fn inf_norm(&self) -> f64 {
        let mut norm: f64 = 0.0;
        for i in 0..self.n {
            let row_sum: f64 =
                self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().map(|v| v.abs()).sum();
            norm = norm.max(row_sum);
        }
        norm
    }

    /// Transposed copy.
    pub fn transpose(&self) -> SparseMatrix {
        let mut count = vec![0usize; self.n + 1];
        for &j in &self.col_idx {
            count[j + 1] += 1;
        }
        for j in 0..self.n {
            count[j + 1] += count[j];
        }
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = count.clone();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let dst = next[j];
                col_idx[dst] = i;
                values[dst] = self.values[k];
                next[j] += 1;
            }
        }
        SparseMatrix { n: self.n, row_ptr: count, col_idx, values, symmetric: self.symmetric }
    }

    /// Forms `Σ scaleₜ·Aₜ` over matrices of equal dimension.
    ///
    /// The result is flagged symmetric only if every term is.
    pub fn linear_combination(terms: &[(f64, &SparseMatrix)]) -> SparseMatrix {
        assert!(!terms.is_empty(), "linear_combination requires at least one term");
        let n = terms[0].1.n;
        assert!(
            terms.iter().all(|(_, m)| m.n == n),
            "linear_combination dimension mismatch"
        );
        let symmetric = terms.iter().all(|(_, m)| m.symmetric);

        let mut marker = vec![usize::MAX; n];
        let mut accum = vec![0.0; n];
        let mut row_cols: Vec<usize> = Vec::new();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            row_cols.clear();
            for &(scale, m) in terms {
                for k in m.row_ptr[i]..m.row_ptr[i + 1] {
                    let j = m.col_idx[k];
                    if marker[j] != i {
                        marker[j] = i;
                        accum[j] = 0.0;
                        row_cols.push(j);
                    }
                    accum[j] += scale * m.values[k];
                }
            }
            row_cols.sort_unstable();
            for &j in &row_cols {
                col_idx.push(j);
                values.push(accum[j]);
            }
            row_ptr.push(col_idx.len());
            // Guard against marker collision with the sentinel on absurd sizes.
            debug_assert!(i != usize::MAX);
        }
        SparseMatrix { n, row_ptr, col_idx, values, symmetric }
    }

    /// Extracts the square principal submatrix selected by `map`.
    ///
    /// `map[old] = Some(new)` keeps row/column `old` at position `new`;
    /// `None` drops it. `new_n` is the dimension of the result and the `new`
    /// indices must be a bijection onto `0..new_n`.
    pub fn restrict(&self, map: &[Option<usize>], new_n: usize) -> SparseMatrix {
        assert_eq!(map.len(), self.n, "restriction map dimension mismatch");
        let mut triplets = Vec::new();
        for i in 0..self.n {
            let Some(ni) = map[i] else { continue };
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if let Some(nj) = map[self.col_idx[k]] {
                    triplets.push((ni, nj, self.values[k]));
                }
            }
        }
        SparseMatrix::from_triplets(new_n, &triplets, self.symmetric)
    }

    /// Dense copy, for small oracles and debugging.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut dense = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                dense[(i, self.col_idx[k])] += self.values[k];
            }
        }
        dense
    }

    /// Writes the matrix in Matrix Market coordinate format (1-based).
    ///
    /// Symmetric matrices are written with the `symmetric` qualifier and only
    /// their lower triangle; others use `general` with all entries.
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> io::Result<()> {
        let qualifier = if self.symmetric { "symmetric" } else { "general" };
        writeln!(out, "%%MatrixMarket matrix coordinate real {qualifier}")?;
        let keep = |i: usize, j: usize| !self.symmetric || i >= j;
        let mut nnz = 0usize;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if keep(i, self.col_idx[k]) {
                    nnz += 1;
                }
            }
        }
        writeln!(out, "{} {} {}", self.n, self.n, nnz)?;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if keep(i, j) {
                    writeln!(out, "{} {} {:.17e}", i + 1, j + 1, self.values[k])?;
                }
            }
        }
        Ok(())
    }
}

/// Reusable LDLᵀ factorization of a symmetric sparse matrix.
///
/// Holds the fill-reducing permutation, equilibration scaling, the unit
/// lower-triangular factor (strict part, by columns), the inverse pivots, and
/// a copy of the original matrix for iterative refinement.
#[derive(Debug)]
pub struct Factorization {
    n: usize,
    /// `perm[k]` = original index eliminated k-th.
    perm: Vec<usize>,
    scale: Vec<f64>,
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    l_values: Vec<f64>,
    d_inv: Vec<f64>,
    matrix: SparseMatrix,
    matrix_inf_norm: f64,
    perturbations: usize,
}

/// Factors a symmetric matrix as `P S A S Pᵀ = L D Lᵀ`.
///
/// `S` is a diagonal equilibration, `P` an approximate-minimum-degree
/// permutation. Pivots below `PIVOT_EPS` (in equilibrated units) are replaced
/// by `±PIVOT_DELTA`; the perturbation count is recorded and the damage is
/// repaired by iterative refinement inside [`Factorization::solve`].
///
/// # Panics
/// Panics if the matrix was not flagged symmetric.
pub fn factorize(a: &SparseMatrix) -> Result<Factorization, SparseError> {
    assert!(a.symmetric, "factorize requires a symmetric matrix");
    let n = a.n;
    if n == 0 {
        return Ok(Factorization {
            n,
            perm: Vec::new(),
            scale: Vec::new(),
            l_colptr: vec![0],
            l_rowidx: Vec::new(),
            l_values: Vec::new(),
            d_inv: Vec::new(),
            matrix: a.clone(),
            matrix_inf_norm: 0.0,
            perturbations: 0,
        });
    }

    // Structural singularity and equilibration scaling in one sweep.
    let mut scale = vec![0.0; n];
    for i in 0..n {
        let row_max = a.values[a.row_ptr[i]..a.row_ptr[i + 1]]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if row_max == 0.0 {
            return Err(SparseError::SingularMatrix { pivot: i });
        }
        scale[i] = 1.0 / row_max.sqrt();
    }

    // Fill-reducing ordering on the full symmetric pattern. The CSR arrays of
    // a symmetric matrix double as its CSC arrays. AMD only fails on invalid
    // input, which construction rules out.
    let perm: Vec<usize> = if n == 1 {
        vec![0]
    } else {
        let (p, _pinv, _info) = amd::order(n, &a.row_ptr, &a.col_idx, &amd::Control::default())
            .expect("AMD ordering failed on a structurally valid pattern");
        p
    };
    let mut iperm = vec![0usize; n];
    for (k, &orig) in perm.iter().enumerate() {
        iperm[orig] = k;
    }

    // Upper triangle of P·S·A·S·Pᵀ in CSC form with sorted rows and an
    // explicit diagonal entry in every column.
    let mut col_count = vec![0usize; n];
    let mut has_diag = vec![false; n];
    for i in 0..n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k];
            let (ni, nj) = (iperm[i], iperm[j]);
            if ni < nj {
                col_count[nj] += 1;
            } else if ni == nj {
                col_count[nj] += 1;
                has_diag[nj] = true;
            }
        }
    }
    for j in 0..n {
        if !has_diag[j] {
            col_count[j] += 1;
        }
    }
    let mut up_colptr = vec![0usize; n + 1];
    for j in 0..n {
        up_colptr[j + 1] = up_colptr[j] + col_count[j];
    }
    let total = up_colptr[n];
    let mut up_rowidx = vec![0usize; total];
    let mut up_values = vec![0.0; total];
    let mut next = up_colptr.clone();
    for i in 0..n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k];
            let (ni, nj) = (iperm[i], iperm[j]);
            if ni <= nj {
                let dst = next[nj];
                up_rowidx[dst] = ni;
                up_values[dst] = scale[i] * a.values[k] * scale[j];
                next[nj] += 1;
            }
        }
    }
    for j in 0..n {
        if !has_diag[j] {
            let dst = next[j];
            up_rowidx[dst] = j;
            up_values[dst] = 0.0;
            next[j] += 1;
        }
    }
    for j in 0..n {
        let lo = up_colptr[j];
        let hi = up_colptr[j + 1];
        let mut pairs: Vec<(usize, f64)> =
            (lo..hi).map(|k| (up_rowidx[k], up_values[k])).collect();
        pairs.sort_unstable_by_key(|&(r, _)| r);
        for (offset, (r, v)) in pairs.into_iter().enumerate() {
            up_rowidx[lo + offset] = r;
            up_values[lo + offset] = v;
        }
    }

    // Elimination tree and column counts of L.
    let unknown = usize::MAX;
    let mut etree = vec![unknown; n];
    let mut l_count = vec![0usize; n];
    let mut visited = vec![unknown; n];
    for j in 0..n {
        visited[j] = j;
        for k in up_colptr[j]..up_colptr[j + 1] {
            let mut i = up_rowidx[k];
            while visited[i] != j {
                if etree[i] == unknown {
                    etree[i] = j;
                }
                l_count[i] += 1;
                visited[i] = j;
                i = etree[i];
            }
        }
    }

    let mut l_colptr = vec![0usize; n + 1];
    for i in 0..n {
        l_colptr[i + 1] = l_colptr[i] + l_count[i];
    }
    let l_nnz = l_colptr[n];
    let mut l_rowidx = vec![0usize; l_nnz];
    let mut l_values = vec![0.0; l_nnz];
    let mut d = vec![0.0; n];
    let mut d_inv = vec![0.0; n];
    let mut perturbations = 0usize;

    // Up-looking factorization: row k of L solves L(0..k,0..k)·y = b with b
    // the strict upper part of column k, visiting only the etree reach.
    let mut y_used = vec![false; n];
    let mut y_vals = vec![0.0; n];
    let mut y_idx = vec![0usize; n];
    let mut reach = vec![0usize; n];
    let mut next_slot = l_colptr[..n].to_vec();

    let regularize = |dk: &mut f64, count: &mut usize| {
        if dk.abs() < PIVOT_EPS {
            *dk = if dk.is_sign_negative() { -PIVOT_DELTA } else { PIVOT_DELTA };
            *count += 1;
        }
    };

    d[0] = up_values[up_colptr[0]];
    regularize(&mut d[0], &mut perturbations);
    d_inv[0] = 1.0 / d[0];

    for k in 1..n {
        let mut nnz_y = 0usize;
        for e in up_colptr[k]..up_colptr[k + 1] {
            let b_idx = up_rowidx[e];
            if b_idx == k {
                d[k] = up_values[e];
                continue;
            }
            y_vals[b_idx] = up_values[e];
            if !y_used[b_idx] {
                y_used[b_idx] = true;
                reach[0] = b_idx;
                let mut len = 1usize;
                let mut node = etree[b_idx];
                while node != unknown && node < k && !y_used[node] {
                    y_used[node] = true;
                    reach[len] = node;
                    len += 1;
                    node = etree[node];
                }
                while len > 0 {
                    len -= 1;
                    y_idx[nnz_y] = reach[len];
                    nnz_y += 1;
                }
            }
        }

        // Process the reach in topological order (deepest dependency first).
        for idx in (0..nnz_y).rev() {
            let c = y_idx[idx];
            let yc = y_vals[c];
            let slot = next_slot[c];
            for e in l_colptr[c]..slot {
                y_vals[l_rowidx[e]] -= l_values[e] * yc;
            }
            let l_kc = yc * d_inv[c];
            l_values[slot] = l_kc;
            l_rowidx[slot] = k;
            next_slot[c] += 1;
            d[k] -= yc * l_kc;
            y_vals[c] = 0.0;
            y_used[c] = false;
        }

        regularize(&mut d[k], &mut perturbations);
        d_inv[k] = 1.0 / d[k];
    }

    Ok(Factorization {
        n,
        perm,
        scale,
        l_colptr,
        l_rowidx,
        l_values,
        d_inv,
        matrix: a.clone(),
        matrix_inf_norm: a.inf_norm(),
        perturbations,
    })
}

impl Factorization {
    /// Dimension of the factored matrix.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of pivots that required perturbation during factorization.
    pub fn perturbation_count(&self) -> usize {
        self.perturbations
    }

    /// Single triangular solve pass in equilibrated, permuted coordinates.
    fn raw_solve(&self, b: &[f64], work: &mut [f64], x: &mut [f64]) {
        for k in 0..self.n {
            let orig = self.perm[k];
            work[k] = self.scale[orig] * b[orig];
        }
        // (L + I) z = v
        for i in 0..self.n {
            let zi = work[i];
            if zi != 0.0 {
                for e in self.l_colptr[i]..self.l_colptr[i + 1] {
                    work[self.l_rowidx[e]] -= self.l_values[e] * zi;
                }
            }
        }
        for i in 0..self.n {
            work[i] *= self.d_inv[i];
        }
        // (L + I)ᵀ w = z
        for i in (0..self.n).rev() {
            let mut acc = work[i];
            for e in self.l_colptr[i]..self.l_colptr[i + 1] {
                acc -= self.l_values[e] * work[self.l_rowidx[e]];
            }
            work[i] = acc;
        }
        for k in 0..self.n {
            let orig = self.perm[k];
            x[orig] = self.scale[orig] * work[k];
        }
    }

    /// Normwise relative residual `‖Ax−b‖ / (‖A‖‖x‖ + ‖b‖)` (∞-norms).
    fn relative_residual(&self, x: &[f64], b: &[f64], residual: &mut [f64]) -> f64 {
        let ax = self.matrix.matvec(x);
        let mut r_norm: f64 = 0.0;
        let mut x_norm: f64 = 0.0;
        let mut b_norm: f64 = 0.0;
        for i in 0..self.n {
            residual[i] = b[i] - ax[i];
            r_norm = r_norm.max(residual[i].abs());
            x_norm = x_norm.max(x[i].abs());
            b_norm = b_norm.max(b[i].abs());
        }
        if r_norm == 0.0 {
            0.0
        } else {
            r_norm / (self.matrix_inf_norm * x_norm + b_norm).max(f64::MIN_POSITIVE)
        }
    }

    /// Solves `A x = b` with iterative refinement.
    ///
    /// Returns [`SparseError::ResidualTooLarge`] if the refined solution
    /// fails the residual bound [`RESIDUAL_TOL`]; this is the signal that the
    /// (possibly perturbed) factorization does not represent an invertible
    /// matrix well enough to trust.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        assert_eq!(b.len(), self.n, "solve dimension mismatch");
        let mut x = vec![0.0; self.n];
        if self.n == 0 {
            return Ok(x);
        }
        let mut work = vec![0.0; self.n];
        let mut residual = vec![0.0; self.n];
        let mut correction = vec![0.0; self.n];

        self.raw_solve(b, &mut work, &mut x);
        let mut best_x = x.clone();
        let mut best_rel = self.relative_residual(&x, b, &mut residual);

        for _ in 0..MAX_REFINEMENTS {
            if best_rel <= 1e-15 {
                break;
            }
            self.raw_solve(&residual, &mut work, &mut correction);
            for i in 0..self.n {
                x[i] += correction[i];
            }
            let rel = self.relative_residual(&x, b, &mut residual);
            if rel < best_rel {
                best_rel = rel;
                best_x.copy_from_slice(&x);
            } else {
                break;
            }
        }

        if best_rel <= RESIDUAL_TOL {
            Ok(best_x)
        } else {
            Err(SparseError::ResidualTooLarge { residual: best_rel, tol: RESIDUAL_TOL })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_of(triplets: &[(usize, usize, f64)], n: usize) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for &(i, j, v) in triplets {
            m[(i, j)] += v;
        }
        m
    }

    #[test]
    fn triplets_are_sorted_and_merged() {
        let a = SparseMatrix::from_triplets(
            3,
            &[(2, 1, 4.0), (0, 0, 1.0), (2, 1, -1.5), (0, 2, 2.0), (1, 1, 3.0), (0, 0, 0.5)],
            false,
        );
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.get(0, 0), 1.5);
        assert_eq!(a.get(0, 2), 2.0);
        assert_eq!(a.get(1, 1), 3.0);
        assert_eq!(a.get(2, 1), 2.5);
        assert_eq!(a.get(2, 2), 0.0);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let triplets: Vec<_> = (0..5).map(|i| (i, i, 1.0)).collect();
        let a = SparseMatrix::from_triplets(5, &triplets, true);
        let fact = factorize(&a).unwrap();
        let b = vec![3.0, -1.0, 0.5, 2.0, -7.0];
        let x = fact.solve(&b).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(x[i], b[i], epsilon = 1e-14);
        }
        assert_eq!(fact.perturbation_count(), 0);
    }

    #[test]
    fn saddle_two_by_two() {
        let a = SparseMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)], true);
        let fact = factorize(&a).unwrap();
        let x = fact.solve(&[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-12);
        assert!(fact.perturbation_count() >= 1);
    }

    #[test]
    fn random_spd_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 50;
        // A = Mᵀ M + n·I with a sparse random M keeps A safely positive definite.
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.random::<f64>() < 0.15 {
                    m[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let spd = m.transpose() * &m + nalgebra::DMatrix::identity(n, n) * n as f64;
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if spd[(i, j)] != 0.0 {
                    triplets.push((i, j, spd[(i, j)]));
                }
            }
        }
        let a = SparseMatrix::from_triplets(n, &triplets, true);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = factorize(&a).unwrap().solve(&b).unwrap();
        let oracle = spd
            .clone()
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&b))
            .expect("dense oracle solve");
        for i in 0..n {
            assert_abs_diff_eq!(x[i], oracle[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let a = SparseMatrix::from_triplets(
            3,
            &[(0, 0, 2.0), (1, 1, -3.0), (2, 2, 5.0), (0, 1, 0.5), (1, 0, 0.5)],
            true,
        );
        let x = factorize(&a).unwrap().solve(&[0.0; 3]).unwrap();
        assert_eq!(x, vec![0.0; 3]);
    }

    #[test]
    fn recovers_known_solution_of_indefinite_kkt() {
        // KKT system [[I, Bᵀ], [B, 0]] with random B: indefinite, needs
        // perturbation-tolerant pivoting plus refinement.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 20;
        let c = 8;
        let n = m + c;
        let mut triplets = Vec::new();
        for i in 0..m {
            triplets.push((i, i, 1.0));
        }
        for r in 0..c {
            for i in 0..m {
                if rng.random::<f64>() < 0.3 {
                    let v = rng.random_range(-1.0..1.0);
                    triplets.push((m + r, i, v));
                    triplets.push((i, m + r, v));
                }
            }
            // Keep every constraint row nonempty.
            let i = rng.random_range(0..m);
            triplets.push((m + r, i, 1.0));
            triplets.push((i, m + r, 1.0));
        }
        let a = SparseMatrix::from_triplets(n, &triplets, true);
        let x_known: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = a.matvec(&x_known);
        let x = factorize(&a).unwrap().solve(&b).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(x[i], x_known[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn factor_reuse_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, 4.0 + rng.random::<f64>()));
            if i + 1 < n {
                let v = rng.random_range(-1.0..1.0);
                triplets.push((i, i + 1, v));
                triplets.push((i + 1, i, v));
            }
        }
        let a = SparseMatrix::from_triplets(n, &triplets, true);
        let fact = factorize(&a).unwrap();
        let rhs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for b in &rhs {
            let x_reused = fact.solve(b).unwrap();
            let x_again = fact.solve(b).unwrap();
            let x_fresh = factorize(&a).unwrap().solve(b).unwrap();
            let bits =
                |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x_reused), bits(&x_again));
            assert_eq!(bits(&x_reused), bits(&x_fresh));
        }
    }

    #[test]
    fn amd_ordering_is_deterministic() {
        let mut triplets = Vec::new();
        let n = 40;
        for i in 0..n {
            triplets.push((i, i, 2.0));
            triplets.push((i, (i * 7 + 3) % n, 0.1));
            triplets.push(((i * 7 + 3) % n, i, 0.1));
        }
        let a = SparseMatrix::from_triplets(n, &triplets, true);
        let f1 = factorize(&a).unwrap();
        let f2 = factorize(&a).unwrap();
        assert_eq!(f1.perm, f2.perm);
    }

    #[test]
    fn zero_row_reports_singular_matrix() {
        let a = SparseMatrix::from_triplets(3, &[(0, 0, 1.0), (2, 2, 1.0)], true);
        match factorize(&a) {
            Err(SparseError::SingularMatrix { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn accepted_solves_satisfy_residual_contract_even_when_singular() {
        // Rank-one matrix with inconsistent RHS: the perturbed factorization
        // returns a large backward-stable vector. The contract is the
        // normwise relative residual bound, which must hold on any Ok result.
        let a = SparseMatrix::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
            true,
        );
        let fact = factorize(&a).unwrap();
        let b = [1.0, 0.0];
        let x = fact.solve(&b).unwrap();
        let ax = a.matvec(&x);
        let r_norm = (0..2).map(|i| (b[i] - ax[i]).abs()).fold(0.0f64, f64::max);
        let x_norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(r_norm <= RESIDUAL_TOL * (a.inf_norm() * x_norm + 1.0));
    }

    #[test]
    fn overflowing_solve_reports_residual_too_large() {
        // A subnormal 1×1 system whose solution overflows: the residual can
        // never meet the bound, so the solve must fail rather than return
        // non-finite values.
        let a = SparseMatrix::from_triplets(1, &[(0, 0, 1e-320)], true);
        let fact = factorize(&a).unwrap();
        match fact.solve(&[1.0]) {
            Err(SparseError::ResidualTooLarge { residual, tol }) => {
                assert!(!(residual <= tol));
            }
            other => panic!("expected ResidualTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn matrix_market_output_roundtrips() {
        let a = SparseMatrix::from_triplets(
            3,
            &[(0, 0, 1.5), (1, 0, -2.0), (0, 1, -2.0), (2, 2, 4.0)],
            true,
        );
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "%%MatrixMarket matrix coordinate real symmetric"
        );
        assert_eq!(lines.next().unwrap(), "3 3 3");
        let mut recovered = nalgebra::DMatrix::zeros(3, 3);
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (i, j): (usize, usize) =
                (parts[0].parse().unwrap(), parts[1].parse().unwrap());
            let v: f64 = parts[2].parse().unwrap();
            recovered[(i - 1, j - 1)] = v;
            recovered[(j - 1, i - 1)] = v;
        }
        assert_eq!(recovered, a.to_dense());
    }

    #[test]
    fn restrict_extracts_principal_submatrix() {
        let triplets =
            [(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0), (2, 0, 2.0), (2, 2, 4.0), (3, 3, 5.0)];
        let a = SparseMatrix::from_triplets(4, &triplets, true);
        let map = [Some(0), None, Some(1), None];
        let sub = a.restrict(&map, 2);
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.get(0, 0), 1.0);
        assert_eq!(sub.get(0, 1), 2.0);
        assert_eq!(sub.get(1, 0), 2.0);
        assert_eq!(sub.get(1, 1), 4.0);
    }

    proptest! {
        #[test]
        fn matvec_matches_dense_oracle(
            n in 1usize..12,
            entries in proptest::collection::vec((0usize..12, 0usize..12, -5.0f64..5.0), 0..50),
            xs in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let triplets: Vec<_> = entries
                .into_iter()
                .map(|(i, j, v)| (i % n, j % n, v))
                .collect();
            let a = SparseMatrix::from_triplets(n, &triplets, false);
            let dense = dense_of(&triplets, n);
            let x = &xs[..n];
            let y = a.matvec(x);
            let y_oracle = dense * nalgebra::DVector::from_column_slice(x);
            for i in 0..n {
                prop_assert!((y[i] - y_oracle[i]).abs() <= 1e-13_f64.max(1e-13 * y_oracle[i].abs()));
            }
        }

        #[test]
        fn linear_combination_matches_dense(
            n in 1usize..10,
            ea in proptest::collection::vec((0usize..10, 0usize..10, -5.0f64..5.0), 0..30),
            eb in proptest::collection::vec((0usize..10, 0usize..10, -5.0f64..5.0), 0..30),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let ta: Vec<_> = ea.into_iter().map(|(i, j, v)| (i % n, j % n, v)).collect();
            let tb: Vec<_> = eb.into_iter().map(|(i, j, v)| (i % n, j % n, v)).collect();
            let a = SparseMatrix::from_triplets(n, &ta, false);
            let b = SparseMatrix::from_triplets(n, &tb, false);
            let combo = SparseMatrix::linear_combination(&[(alpha, &a), (beta, &b)]);
            let dense = dense_of(&ta, n) * alpha + dense_of(&tb, n) * beta;
            let diff = (combo.to_dense() - dense).abs().max();
            prop_assert!(diff <= 1e-12);
        }

        #[test]
        fn transpose_matches_dense(
            n in 1usize..10,
            entries in proptest::collection::vec((0usize..10, 0usize..10, -5.0f64..5.0), 0..40),
        ) {
            let triplets: Vec<_> = entries.into_iter().map(|(i, j, v)| (i % n, j % n, v)).collect();
            let a = SparseMatrix::from_triplets(n, &triplets, false);
            let diff = (a.transpose().to_dense() - dense_of(&triplets, n).transpose()).abs().max();
            prop_assert!(diff == 0.0);
        }
    }
}
