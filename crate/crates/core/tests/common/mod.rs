//! Test-side oracles and synthetic data. Everything here works on plain
//! row-major `Vec<f64>` so it shares no code with the library's linear algebra.
#![allow(dead_code)]

use benchsel::ScoreMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `G G^T / n + 0.05 I` with standard normal `G`.
pub fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..n * n).map(|_| normal(&mut rng)).collect();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v: f64 =
                (0..n).map(|t| g[i * n + t] * g[j * n + t]).sum::<f64>() / n as f64 + if i == j { 0.05 } else { 0.0 };
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

pub fn to_rows(s: &DMatrix<f64>) -> Vec<f64> {
    let n = s.nrows();
    (0..n * n).map(|k| s[(k / n, k % n)]).collect()
}

pub fn principal(s: &DMatrix<f64>, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| idx.iter().map(move |&j| s[(i, j)])).collect()
}

/// Textbook Cholesky; `None` when not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for t in 0..j {
                sum -= l[i * n + t] * l[j * n + t];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

pub fn logdet(a: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let l = cholesky(a, n).expect("oracle: matrix not positive definite");
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

pub fn entropy(s: &DMatrix<f64>, a: &[usize]) -> f64 {
    0.5 * (a.len() as f64 * LN_2PI_E + logdet(&principal(s, a), a.len()))
}

pub fn complement(n: usize, a: &[usize]) -> Vec<usize> {
    (0..n).filter(|j| !a.contains(j)).collect()
}

pub fn mutual_information(s: &DMatrix<f64>, a: &[usize]) -> f64 {
    let n = s.nrows();
    let c = complement(n, a);
    0.5 * (logdet(&principal(s, a), a.len()) + logdet(&principal(s, &c), c.len()) - logdet(&to_rows(s), n))
}

/// `Var(x_v | x_a)` by Gaussian elimination on the bordered system.
pub fn cond_var(s: &DMatrix<f64>, v: usize, a: &[usize]) -> f64 {
    let k = a.len();
    if k == 0 {
        return s[(v, v)];
    }
    let mut m = principal(s, a);
    let mut b: Vec<f64> = a.iter().map(|&i| s[(i, v)]).collect();
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&x, &y| m[x * k + col].abs().total_cmp(&m[y * k + col].abs()))
            .unwrap();
        for t in 0..k {
            m.swap(col * k + t, piv * k + t);
        }
        b.swap(col, piv);
        for r in col + 1..k {
            let f = m[r * k + col] / m[col * k + col];
            for t in col..k {
                m[r * k + t] -= f * m[col * k + t];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let tail: f64 = (r + 1..k).map(|t| m[r * k + t] * x[t]).sum();
        x[r] = (b[r] - tail) / m[r * k + r];
    }
    s[(v, v)] - a.iter().zip(&x).map(|(&i, xi)| s[(i, v)] * xi).sum::<f64>()
}

/// Max-pivot pivoted Cholesky by explicit column construction. Returns the
/// pivot order and `tr(S - L_k L_k^T)`.
pub fn pivoted_cholesky(s: &DMatrix<f64>, k: usize) -> (Vec<usize>, f64) {
    let n = s.nrows();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut order = Vec::new();
    for _ in 0..k {
        let resid = |j: usize| s[(j, j)] - cols.iter().map(|c| c[j] * c[j]).sum::<f64>();
        let mut p = usize::MAX;
        for j in (0..n).filter(|j| !order.contains(j)) {
            if p == usize::MAX || resid(j) > resid(p) {
                p = j;
            }
        }
        let piv = resid(p).sqrt();
        let col: Vec<f64> = (0..n)
            .map(|i| (s[(i, p)] - cols.iter().map(|c| c[i] * c[p]).sum::<f64>()) / piv)
            .collect();
        cols.push(col);
        order.push(p);
    }
    let captured: f64 = cols.iter().flat_map(|c| c.iter().map(|v| v * v)).sum();
    (order, s.trace() - captured)
}

/// All subsets of `0..n` as sorted index lists.
pub fn subsets(n: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .map(|mask| (0..n).filter(|&j| mask & (1 << j) != 0).collect())
        .collect()
}

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// `x_ij = mu_j + lambda_j f_i + sigma e_ij`.
pub fn rank_one_matrix(m: usize, n: usize, sigma: f64, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loadings: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let offsets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut cells = Vec::with_capacity(m * n);
    for _ in 0..m {
        let f = normal(&mut rng);
        for j in 0..n {
            cells.push(offsets[j] + loadings[j] * f + sigma * normal(&mut rng));
        }
    }
    ScoreMatrix::from_dense(names("m", m), names("b", n), &cells).unwrap()
}

pub fn independent_matrix(m: usize, n: usize, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<f64> = (0..m * n).map(|_| normal(&mut rng)).collect();
    ScoreMatrix::from_dense(names("m", m), names("b", n), &cells).unwrap()
}

/// Rows drawn from `N(0, sigma)`.
pub fn gaussian_rows(sigma: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = sigma.nrows();
    let l = cholesky(&to_rows(sigma), n).unwrap();
    (0..m)
        .map(|_| {
            let z: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
            (0..n).map(|i| (0..=i).map(|t| l[i * n + t] * z[t]).sum()).collect()
        })
        .collect()
}

/// Gaussian rows with each cell missing independently with probability
/// `missing`; a row that loses everything keeps one random cell.
pub fn mcar_matrix(sigma: &DMatrix<f64>, m: usize, missing: f64, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sigma.nrows();
    let rows = gaussian_rows(sigma, m, &mut rng);
    let mut cells = Vec::with_capacity(m * n);
    for row in rows {
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= missing).collect();
        if !mask.iter().any(|&b| b) {
            mask[rng.random_range(0..n)] = true;
        }
        cells.extend(row.iter().zip(&mask).map(|(&v, &keep)| keep.then_some(v)));
    }
    ScoreMatrix::new(names("m", m), names("b", n), cells).unwrap()
}

pub fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|v| v * v).sum::<f64>().sqrt()
}
