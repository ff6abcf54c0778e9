//! Normality diagnostics: per-column Shapiro-Wilk, Mardia's multivariate
//! skewness and kurtosis, and multiple-testing corrections.
//!
//! Shapiro-Wilk uses Royston's polynomial approximation of the coefficients
//! and of the null distribution of `W`, valid for `3 <= n <= 5000`.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::covariance::{complete_matrix, em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::score_matrix::ScoreMatrix;
use crate::seeding::rng_for;

pub const SHAPIRO_MAX_N: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `c[0] + c[1] x + c[2] x^2 + ...`
fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Antisymmetric Shapiro-Wilk coefficients for the upper half, `a[0]`
/// pairing the extremes.
fn coefficients(n: usize) -> Vec<f64> {
    let half = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let norm = std_normal();
    let nf = n as f64;
    let m: Vec<f64> = (1..=half)
        .map(|i| -norm.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
        .collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / nf.sqrt();
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    let a1 = poly(&C1, rsn) + m[0] / ssumm2;
    let mut a = vec![0.0; half];
    a[0] = a1;
    if n > 5 {
        let a2 = poly(&C2, rsn) + m[1] / ssumm2;
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
        a[1] = a2;
        for i in 2..half {
            a[i] = m[i] / fac;
        }
    } else {
        let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
        for i in 1..half {
            a[i] = m[i] / fac;
        }
    }
    a
}

fn royston_p(w: f64, n: usize) -> f64 {
    if w >= 1.0 {
        return 1.0;
    }
    if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        return p.clamp(0.0, 1.0);
    }
    let nf = n as f64;
    let y = (1.0 - w).ln();
    let (stat, mean, sd) = if n <= 11 {
        let gamma = poly(&[-2.273, 0.459], nf);
        if y >= gamma {
            return 1e-99;
        }
        let mean = poly(&[0.544, -0.39978, 0.025054, -0.0006714], nf);
        let sd = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], nf).exp();
        (-(gamma - y).ln(), mean, sd)
    } else {
        let ln_n = nf.ln();
        let mean = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n);
        let sd = poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp();
        (y, mean, sd)
    };
    std_normal().sf((stat - mean) / sd).clamp(0.0, 1.0)
}

/// Shapiro-Wilk `W` and its p-value.
pub fn shapiro_wilk(x: &[f64]) -> Result<ShapiroWilk> {
    let n = x.len();
    if !(3..=SHAPIRO_MAX_N).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "Shapiro-Wilk needs 3 to {SHAPIRO_MAX_N} values, got {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "Shapiro-Wilk input has non-finite values".into(),
        ));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let range = s[n - 1] - s[0];
    if !(range > 0.0) {
        return Err(Error::InvalidArgument("Shapiro-Wilk input is constant".into()));
    }
    let a = coefficients(n);
    // Squared correlation between the antisymmetric weights and the sorted
    // sample, scaled by the range for conditioning.
    let mean = s.iter().map(|v| v / range).sum::<f64>() / n as f64;
    let ssx: f64 = s.iter().map(|v| (v / range - mean).powi(2)).sum();
    let sax: f64 = a
        .iter()
        .enumerate()
        .map(|(i, ai)| ai * (s[n - 1 - i] - s[i]) / range)
        .sum();
    let ssa = 2.0 * a.iter().map(|v| v * v).sum::<f64>();
    let w = (sax * sax / (ssa * ssx)).clamp(0.0, 1.0);
    Ok(ShapiroWilk { w, p: royston_p(w, n) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mardia {
    pub beta1: f64,
    pub beta2: f64,
    /// `M beta1 / 6`, chi-squared under normality.
    pub skew_stat: f64,
    pub skew_df: f64,
    /// Standardized kurtosis, standard normal under normality.
    pub kurt_stat: f64,
    pub p_skew: f64,
    pub p_kurt: f64,
    pub pseudo_inverse: bool,
}

/// Mardia's statistics with the `1/M` covariance. A singular covariance is
/// handled by a pseudo-inverse and flagged.
pub fn mardia(x: &DMatrix<f64>) -> Result<Mardia> {
    let (m, n) = (x.nrows(), x.ncols());
    if m < 2 || n < 1 {
        return Err(Error::InvalidArgument(format!(
            "Mardia needs at least 2 rows and 1 column, got {m}x{n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::MissingData("Mardia needs a fully observed finite matrix".into()));
    }
    let mf = m as f64;
    let mean: Vec<f64> = (0..n).map(|j| x.column(j).sum() / mf).collect();
    let xc = DMatrix::from_fn(m, n, |i, j| x[(i, j)] - mean[j]);
    let s = linalg::symmetrize(&(xc.transpose() * &xc / mf));

    // Whitened rows y_i with y_i . y_j = d_ij.
    let (y, pseudo_inverse) = match linalg::cholesky(s.clone()) {
        Some(chol) => {
            let y = chol
                .l()
                .solve_lower_triangular(&xc.transpose())
                .ok_or_else(|| Error::Singular("whitening solve failed".into()))?
                .transpose();
            (y, false)
        }
        None => {
            let (values, vectors) = linalg::sorted_eigen(&s);
            let tol = values[0].max(0.0) * 1e-10 * n as f64;
            let keep: Vec<usize> = (0..n).filter(|&i| values[i] > tol).collect();
            if keep.is_empty() {
                return Err(Error::Singular("sample covariance is zero".into()));
            }
            let w = DMatrix::from_fn(n, keep.len(), |r, c| vectors[(r, keep[c])] / values[keep[c]].sqrt());
            (&xc * w, true)
        }
    };

    let rows: Vec<Vec<f64>> = (0..m).map(|i| y.row(i).iter().copied().collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let partial: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let cube: f64 = rows.iter().map(|r| dot(&rows[i], r).powi(3)).sum();
            (cube, dot(&rows[i], &rows[i]).powi(2))
        })
        .collect();
    let (cube_sum, sq_sum) = partial.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let beta1 = cube_sum / (mf * mf);
    let beta2 = sq_sum / mf;
    let nf = n as f64;
    let skew_stat = mf * beta1 / 6.0;
    let skew_df = nf * (nf + 1.0) * (nf + 2.0) / 6.0;
    let kurt_stat = (beta2 - nf * (nf + 2.0)) / (8.0 * nf * (nf + 2.0) / mf).sqrt();
    let chi = ChiSquared::new(skew_df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(Mardia {
        beta1,
        beta2,
        skew_stat,
        skew_df,
        kurt_stat,
        p_skew: chi.sf(skew_stat).clamp(0.0, 1.0),
        p_kurt: (2.0 * std_normal().sf(kurt_stat.abs())).clamp(0.0, 1.0),
        pseudo_inverse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    Bh,
    Bonferroni,
    None,
}

/// Step-up procedure: reject the `i` smallest p-values for the largest `i`
/// with `p_(i) <= i alpha / m`.
pub fn benjamini_hochberg(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let cutoff = (1..=m)
        .rev()
        .find(|&i| p[idx[i - 1]] <= i as f64 * alpha / m as f64)
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &j in &idx[..cutoff] {
        reject[j] = true;
    }
    reject
}

pub fn bonferroni(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len().max(1) as f64;
    p.iter().map(|&v| v <= alpha / m).collect()
}

pub fn reject(p: &[f64], alpha: f64, correction: Correction) -> Vec<bool> {
    match correction {
        Correction::Bh => benjamini_hochberg(p, alpha),
        Correction::Bonferroni => bonferroni(p, alpha),
        Correction::None => p.iter().map(|&v| v <= alpha).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapiroRow {
    pub benchmark: String,
    pub n: usize,
    pub subsampled: bool,
    pub w: f64,
    pub p: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedColumn {
    pub benchmark: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub shapiro: Vec<ShapiroRow>,
    pub skipped: Vec<SkippedColumn>,
    pub mardia: Option<Mardia>,
    /// `"observed"` or `"completed"` (missing cells filled by EM).
    pub mardia_input: String,
    pub alpha: f64,
    pub correction: Correction,
    pub warnings: Vec<String>,
}

/// Shapiro-Wilk on every column (observed cells, subsampled to 5000 when
/// longer) and Mardia on the observed or EM-completed matrix.
pub fn normality_report(m: &ScoreMatrix, alpha: f64, correction: Correction, seed: u64) -> Result<NormalityReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..m.n_benchmarks() {
        let name = m.benchmark_names()[j].clone();
        let mut col = m.column_observed(j);
        let subsampled = col.len() > SHAPIRO_MAX_N;
        if subsampled {
            let mut picked = sample(&mut rng_for(seed, "subsample", &[j as u64]), col.len(), SHAPIRO_MAX_N).into_vec();
            picked.sort_unstable();
            col = picked.into_iter().map(|i| col[i]).collect();
        }
        match shapiro_wilk(&col) {
            Ok(sw) => rows.push(ShapiroRow {
                benchmark: name,
                n: col.len(),
                subsampled,
                w: sw.w,
                p: sw.p,
                rejected: false,
            }),
            Err(e) => skipped.push(SkippedColumn {
                benchmark: name,
                reason: e.to_string(),
            }),
        }
    }
    let pvals: Vec<f64> = rows.iter().map(|r| r.p).collect();
    for (r, rej) in rows.iter_mut().zip(reject(&pvals, alpha, correction)) {
        r.rejected = rej;
    }

    let (x, mardia_input) = if m.is_complete() {
        (m.to_dense()?, "observed")
    } else {
        let model = em_fit(m, &EmConfig::for_matrix(m))?;
        if !model.converged() {
            warnings.push(format!(
                "EM for Mardia stopped after {} iterations without converging",
                model.em_iterations()
            ));
        }
        (complete_matrix(m, &model, EmConfig::default().ridge)?, "completed")
    };
    let mardia = match mardia(&x) {
        Ok(md) => {
            if md.pseudo_inverse {
                warnings.push("sample covariance is singular; Mardia used a pseudo-inverse".into());
            }
            Some(md)
        }
        Err(e) => {
            warnings.push(format!("Mardia skipped: {e}"));
            None
        }
    };
    if m.n_models() <= m.n_benchmarks() {
        warnings.push(format!(
            "Mardia expects more models than benchmarks ({} <= {})",
            m.n_models(),
            m.n_benchmarks()
        ));
    }
    Ok(NormalityReport {
        shapiro: rows,
        skipped,
        mardia,
        mardia_input: mardia_input.into(),
        alpha,
        correction,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn normal_quantiles_give_w_near_one() {
        let norm = std_normal();
        let n = 50;
        let q: Vec<f64> = (1..=n)
            .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (n as f64 + 0.25)))
            .collect();
        let r = shapiro_wilk(&q).unwrap();
        assert!(r.w >= 0.995, "{}", r.w);
    }

    #[test]
    fn bimodal_sample_rejected() {
        let x: Vec<f64> = (0..50).map(|i| if i < 25 { -1.0 } else { 1.0 }).collect();
        let r = shapiro_wilk(&x).unwrap();
        assert!(r.p < 0.01);
    }

    /// Values from scipy.stats.shapiro, an independent implementation.
    #[test]
    fn agrees_with_reference_implementation() {
        let cases: [(Vec<f64>, f64, f64); 5] = [
            (
                (0..50).map(|i| if i < 25 { -1.0 } else { 1.0 }).collect(),
                0.636823649737928,
                7.143776788866587e-10,
            ),
            (vec![1.0, 2.0, 4.0], 0.9642857142857142, 0.6368868450289689),
            (
                vec![2.1, 3.4, 1.9, 5.6, 2.2, 2.8, 3.0],
                0.822157264283789,
                0.06735772803560575,
            ),
            (
                (0..20).map(|i| (i * i) as f64).collect(),
                0.8949288620307665,
                0.03316539297687834,
            ),
            (
                vec![
                    0.1, -0.5, 0.3, 1.2, -0.8, 0.4, -0.2, 0.9, -0.3, 0.6, -0.1, 0.7, -0.4, 0.2, 1.1, -0.6, 0.8, -0.9,
                    0.5, -0.7,
                ],
                0.9587943676154365,
                0.5200541895995189,
            ),
        ];
        for (x, w, p) in cases {
            let r = shapiro_wilk(&x).unwrap();
            assert!((r.w - w).abs() < 1e-5, "W {} vs {w}", r.w);
            assert!(
                (r.p - p).abs() <= 1e-4 * p.max(1e-6) + 1e-12 || (r.p - p).abs() < 1e-5,
                "p {} vs {p}",
                r.p
            );
        }
    }

    #[test]
    fn shapiro_errors() {
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(shapiro_wilk(&[3.0; 10]).is_err());
        assert!(shapiro_wilk(&vec![0.0; 5001]).is_err());
    }

    #[test]
    fn null_rejection_rate() {
        let rejected = (0..1000)
            .filter(|&s| shapiro_wilk(&normals(100, 5000 + s)).unwrap().p <= 0.05)
            .count();
        let rate = rejected as f64 / 1000.0;
        assert!((0.03..=0.07).contains(&rate), "{rate}");
    }

    #[test]
    fn mardia_kurtosis_under_null() {
        let (m, n) = (5000, 3);
        let v = normals(m * n, 77);
        let x = DMatrix::from_row_slice(m, n, &v);
        let r = mardia(&x).unwrap();
        let sd = (8.0 * 15.0 / m as f64).sqrt();
        assert!((r.beta2 - 15.0).abs() <= 3.0 * sd, "{}", r.beta2);
        assert!(!r.pseudo_inverse);
        assert_eq!(r.skew_df, 10.0);
    }

    #[test]
    fn mardia_univariate_matches_moments() {
        let v: Vec<f64> = normals(200, 3).iter().map(|z| z.exp()).collect();
        let r = mardia(&DMatrix::from_column_slice(200, 1, &v)).unwrap();
        let mean = v.iter().sum::<f64>() / 200.0;
        let moment = |k: i32| v.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / 200.0;
        let (m2, m3, m4) = (moment(2), moment(3), moment(4));
        assert!((r.beta1 - m3 * m3 / m2.powi(3)).abs() < 1e-9 * r.beta1.max(1.0));
        assert!((r.beta2 - m4 / (m2 * m2)).abs() < 1e-9 * r.beta2.max(1.0));
    }

    #[test]
    fn mardia_affine_invariant() {
        let (m, n) = (120, 3);
        let v: Vec<f64> = normals(m * n, 8).iter().map(|z| z * z.abs()).collect();
        let x = DMatrix::from_row_slice(m, n, &v);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -1.0, 0.0, 1.5, 0.2, 0.7, -0.4, 3.0]);
        let shifted = &x * a.transpose() + DMatrix::from_fn(m, n, |_, j| [5.0, -2.0, 0.5][j]);
        let (r0, r1) = (mardia(&x).unwrap(), mardia(&shifted).unwrap());
        assert!(
            (r0.beta1 - r1.beta1).abs() < 1e-8 * r0.beta1.max(1.0),
            "{} {}",
            r0.beta1,
            r1.beta1
        );
        assert!((r0.beta2 - r1.beta2).abs() < 1e-8 * r0.beta2.max(1.0));
    }

    #[test]
    fn mardia_singular_uses_pseudo_inverse() {
        let v = normals(60, 4);
        let x = DMatrix::from_fn(30, 3, |i, j| if j == 2 { v[i] + v[30 + i] } else { v[j * 30 + i] });
        assert!(mardia(&x).unwrap().pseudo_inverse);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(
            benjamini_hochberg(&[0.01, 0.02, 0.04, 0.9], 0.05),
            vec![true, true, false, false]
        );
        assert_eq!(benjamini_hochberg(&[0.0; 4], 0.05), vec![true; 4]);
        assert_eq!(benjamini_hochberg(&[1.0; 4], 0.05), vec![false; 4]);
        assert_eq!(
            benjamini_hochberg(&[0.9, 0.01, 0.04, 0.02], 0.05),
            vec![false, true, false, true]
        );
        assert_eq!(bonferroni(&[0.01, 0.03], 0.05), vec![true, false]);
    }

    #[test]
    fn report_skips_constant_columns() {
        let mut cells = Vec::new();
        let v = normals(40, 1);
        for i in 0..20 {
            cells.push(Some(v[i]));
            cells.push(Some(3.0));
            cells.push(Some(v[20 + i]));
        }
        let m = ScoreMatrix::new(
            (0..20).map(|i| format!("m{i}")).collect(),
            vec!["a".into(), "flat".into(), "c".into()],
            cells,
        )
        .unwrap();
        let r = normality_report(&m, 0.05, Correction::Bh, 0).unwrap();
        assert_eq!(r.shapiro.len(), 2);
        assert_eq!(r.skipped[0].benchmark, "flat");
        assert_eq!(r.mardia_input, "observed");
    }

    proptest! {
        #[test]
        fn bh_monotone_in_alpha(p in prop::collection::vec(0.0f64..=1.0, 1..40), a in 0.001f64..0.5, b in 0.001f64..0.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r_lo = benjamini_hochberg(&p, lo);
            let r_hi = benjamini_hochberg(&p, hi);
            for (x, y) in r_lo.iter().zip(&r_hi) {
                prop_assert!(!x || *y);
            }
        }

        #[test]
        fn shapiro_location_scale_invariant(seed in any::<u64>(), n in 3usize..200, a in 0.01f64..100.0, b in -100.0f64..100.0) {
            let x = normals(n, seed);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let (r0, r1) = (shapiro_wilk(&x).unwrap(), shapiro_wilk(&y).unwrap());
            prop_assert!((r0.w - r1.w).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&r0.p) && r0.w > 0.0 && r0.w <= 1.0);
        }
    }
}
