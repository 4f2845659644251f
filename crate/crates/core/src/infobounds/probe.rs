//! Binned mutual-information probes of learned features against the latent
//! factors that generated the data.
//!
//! For every feature column, an affine least-squares readout from the factor
//! group gives a scalar prediction; the plug-in MI between prediction and
//! feature on an equal-width grid is the column's score, and scores are
//! summed over the feature set. The readout keeps each estimate
//! one-dimensional, so its bias stays small even for wide factor groups.
//!
//! Reading features out of factors (rather than factors out of features)
//! rewards disentanglement: a feature driven by one group alone is almost
//! fully predictable from it, while a feature mixing two independent groups
//! is only partly predictable from either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::par;
use crate::synthdata::LatentBatch;

pub const DEFAULT_BINS: usize = 8;

fn bin_index(values: &[f64], bins: usize) -> Option<Vec<usize>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let w = (hi - lo) / bins as f64;
    Some(
        values
            .iter()
            .map(|&v| (((v - lo) / w) as usize).min(bins - 1))
            .collect(),
    )
}

/// Plug-in MI (bits) between two scalars on `bins × bins` equal-width cells.
/// A constant input carries no information and scores 0.
pub fn binned_mi(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(
            "binned MI needs two equally long, non-empty samples",
        ));
    }
    if bins < 2 {
        return Err(Error::invalid("at least two bins are required"));
    }
    let (Some(ia), Some(ib)) = (bin_index(a, bins), bin_index(b, bins)) else {
        return Ok(0.0);
    };
    let n = a.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for (&i, &j) in ia.iter().zip(&ib) {
        joint[i * bins + j] += 1.0;
        pa[i] += 1.0;
        pb[j] += 1.0;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0.0 {
                mi += c / n * (c * n / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Entropy (bits) of a scalar on an equal-width grid: the ceiling of
/// [`binned_mi`] against itself.
pub fn binned_entropy(a: &[f64], bins: usize) -> Result<f64> {
    binned_mi(a, a, bins)
}

/// Solves `A x = b` for symmetric positive definite `A` (Cholesky).
fn spd_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        y[i] = (b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (y[i] - s) / l[(i, i)];
    }
    Some(x)
}

/// Affine least-squares fit of every column of `targets` from `features`;
/// returns the fitted values, one column per target.
fn affine_readout(features: &Matrix, targets: &Matrix) -> Result<Matrix> {
    let n = features.rows();
    let ones = Matrix::from_vec(n, 1, vec![1.0; n])?;
    let design = Matrix::hcat(&[features, &ones])?;
    let mut gram = design.t_matmul(&design)?;
    // a tiny ridge keeps collinear or dead feature columns solvable
    let k = gram.rows();
    let trace: f64 = (0..k).map(|i| gram[(i, i)]).sum();
    let ridge = 1e-10 * trace.max(1.0) / k as f64;
    for i in 0..k {
        gram[(i, i)] += ridge;
    }
    let rhs = design.t_matmul(targets)?;
    let mut coef = Matrix::zeros(k, targets.cols());
    for j in 0..targets.cols() {
        let b = rhs.column(j);
        let x = spd_solve(&gram, &b)
            .ok_or_else(|| Error::numeric("readout system is not positive definite"))?;
        for (i, v) in x.into_iter().enumerate() {
            coef[(i, j)] = v;
        }
    }
    design.matmul(&coef)
}

/// Sum over the columns of `features` of the binned MI between each column
/// and its best affine prediction from `factors`.
pub fn mi_probe(features: &Matrix, factors: &Matrix, bins: usize) -> Result<f64> {
    if features.rows() != factors.rows() {
        return Err(Error::invalid(
            "features and factors must describe the same samples",
        ));
    }
    if bins < 2 {
        return Err(Error::invalid("at least two bins are required"));
    }
    if features.rows() < bins * bins {
        log::warn!(
            "only {} samples for {bins}×{bins} bins; the plug-in estimate will be biased",
            features.rows()
        );
    }
    if !features.is_finite() || !factors.is_finite() {
        return Err(Error::numeric("non-finite values in probe input"));
    }
    let pred = affine_readout(factors, features)?;
    let per = par::map_range(features.cols(), |j| {
        binned_mi(&pred.column(j), &features.column(j), bins)
    });
    per.into_iter().sum()
}

/// Probe scores of one feature set against each factor group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorScores {
    pub w1: f64,
    pub w2: f64,
    pub ws: f64,
}

impl FactorScores {
    pub fn total(&self) -> f64 {
        self.w1 + self.w2 + self.ws
    }
}

/// Probe results for both feature sets; `i_wall` sums all six scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub z1: FactorScores,
    pub z2: FactorScores,
    pub i_wall: f64,
    pub bins: usize,
}

pub fn probe_features(
    z1: &Matrix,
    z2: &Matrix,
    latents: &LatentBatch,
    bins: usize,
) -> Result<ProbeReport> {
    latents.validate()?;
    let scores = |z: &Matrix| -> Result<FactorScores> {
        Ok(FactorScores {
            w1: mi_probe(z, &latents.w1, bins)?,
            w2: mi_probe(z, &latents.w2, bins)?,
            ws: mi_probe(z, &latents.ws, bins)?,
        })
    };
    let (a, b) = (scores(z1)?, scores(z2)?);
    Ok(ProbeReport {
        z1: a,
        z2: b,
        i_wall: a.total() + b.total(),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut r = rng::stream(seed, &[]);
        Matrix::from_vec(rows, cols, rng::normals(&mut r, rows * cols)).unwrap()
    }

    #[test]
    fn copy_reaches_the_ceiling() {
        let w = gaussian(1, 20_000, 3);
        let est = mi_probe(&w, &w, 16).unwrap();
        let ceiling: f64 = (0..3)
            .map(|j| binned_entropy(&w.column(j), 16).unwrap())
            .sum();
        assert!((est - ceiling).abs() <= 0.1 * ceiling, "{est} vs {ceiling}");
    }

    #[test]
    fn independent_features_score_near_zero() {
        let z = gaussian(2, 10_000, 8);
        let w = gaussian(3, 10_000, 8);
        let est = mi_probe(&z, &w, 8).unwrap();
        assert!(est < 0.05, "{est}");
    }

    #[test]
    fn sample_order_does_not_matter() {
        let z = gaussian(4, 2000, 4);
        let w = z.select_cols(0, 2).map(|v| v.tanh() + 0.1);
        let est = mi_probe(&z, &w, 8).unwrap();
        // the two unrelated feature columns add only estimator bias
        assert!(est > mi_probe(&z.select_cols(0, 2), &w, 8).unwrap() - 1e-12);
        let perm: Vec<usize> = (0..2000).rev().collect();
        let est2 = mi_probe(&z.select_rows(&perm), &w.select_rows(&perm), 8).unwrap();
        assert!((est - est2).abs() < 1e-9);
        assert!(est > 1.0);
    }

    #[test]
    fn mixed_features_score_below_pure_ones() {
        let a = gaussian(6, 5000, 2);
        let b = gaussian(7, 5000, 2);
        let pure = a.clone();
        let mixed = Matrix::from_fn(5000, 2, |i, j| (a[(i, j)] + b[(i, j)]) / 2f64.sqrt());
        let p = mi_probe(&pure, &a, 8).unwrap();
        let m = mi_probe(&mixed, &a, 8).unwrap();
        assert!(p > m + 1.0, "{p} vs {m}");
    }

    #[test]
    fn constant_columns_score_zero() {
        let z = Matrix::zeros(500, 3);
        let w = gaussian(5, 500, 2);
        assert_eq!(mi_probe(&z, &w, 8).unwrap(), 0.0);
        assert_eq!(binned_mi(&[1.0; 10], &[2.0; 10], 4).unwrap(), 0.0);
        assert!(binned_mi(&[1.0; 10], &[2.0; 10], 1).is_err());
    }

    #[test]
    fn cholesky_solves() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = spd_solve(&a, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        let bad = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(spd_solve(&bad, &[1.0, 1.0]).is_none());
    }
}
