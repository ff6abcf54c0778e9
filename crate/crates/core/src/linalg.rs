use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub fn principal(s: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| s[(idx[a], idx[b])])
}

pub fn block(s: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| s[(rows[a], cols[b])])
}

pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

pub fn max_asymmetry(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(s: &DMatrix<f64>) -> f64 {
    s.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn cholesky(s: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(s)
}

/// `log det` from the Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Eigenvalues sorted descending with matching eigenvector columns.
pub fn sorted_eigen(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(s));
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// `log det` after clamping eigenvalues below `floor`.
pub fn clamped_logdet(s: &DMatrix<f64>, floor: f64) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(s));
    eig.eigenvalues.iter().map(|&l| l.max(floor).ln()).sum()
}

pub fn logdet(s: &DMatrix<f64>, floor: f64) -> f64 {
    match cholesky(s.clone()) {
        Some(c) => chol_logdet(&c),
        None => clamped_logdet(s, floor),
    }
}
