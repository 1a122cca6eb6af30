//! Fréchet distance between Gaussian fits of feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Error, Result};
use crate::image::ImageBatch;
use crate::providers::FeatureExtractor;

/// Default diagonal loading for covariances that are not positive definite.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Largest negative distance treated as round-off and clamped to zero.
const NEGATIVE_SLACK: f64 = 1e-6;
const EIGEN_TOL: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Fewer samples than `dim + 1` cannot give a full-rank covariance.
    pub fn rank_deficient(&self) -> bool {
        self.n < self.dim() + 1
    }
}

/// Sample mean and unbiased sample covariance of `features` (`n` rows of
/// dimension `d`).
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    let n = features.len();
    if n < 2 {
        return Err(arg_err!("need at least 2 samples to fit a Gaussian, got {n}"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(arg_err!("feature rows must share a positive dimension"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
    symmetrize(&mut sigma);
    let fit = GaussianFit { mu, sigma, n };
    if fit.rank_deficient() {
        log::warn!("Gaussian fit from {n} samples in {d} dimensions is rank deficient");
    }
    Ok(fit)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), EIGEN_TOL, EIGEN_MAX_ITER).ok_or_else(|| {
        Error::Numeric(format!(
            "eigendecomposition of {what} did not converge (Frobenius norm {:.3e})",
            m.norm()
        ))
    })
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let e = eigen(s, "covariance")?;
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

fn loaded(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    if eps == 0.0 {
        m.clone()
    } else {
        m + DMatrix::identity(m.nrows(), m.ncols()) * eps
    }
}

/// Eigenvalues of the symmetric form `A^{1/2} B A^{1/2}`, whose square roots
/// sum to `Tr((A B)^{1/2})`.
fn product_root_trace(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrt_psd(a)?;
    let mut m = &ra * b * &ra;
    symmetrize(&mut m);
    let e = eigen(m, "covariance product")?;
    Ok(e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// `(A B)^{1/2}` for positive definite `A`, as `A^{1/2} S A^{-1/2}` with
/// `S = (A^{1/2} B A^{1/2})^{1/2}`.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ra = sqrt_psd(a)?;
    let ra_inv = ra
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("left covariance is singular".into()))?;
    let s = sqrt_psd(&(&ra * b * &ra))?;
    Ok(&ra * s * ra_inv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    /// Squared Fréchet distance.
    pub distance2: f64,
    pub labels: (String, String),
    pub space: String,
    /// Diagonal loading actually applied (zero when both covariances were
    /// positive definite).
    pub eps_used: f64,
}

/// Squared Fréchet distance between two Gaussian fits.
///
/// Both covariances receive `eps * I` when either of them is not positive
/// definite; otherwise they are used as they are. The reported
/// `eps_used` says which case applied.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit, eps: f64) -> Result<FrechetResult> {
    if a.dim() != b.dim() {
        return Err(arg_err!("fits have dimensions {} and {}", a.dim(), b.dim()));
    }
    if !(eps >= 0.0) {
        return Err(arg_err!("eps must be non-negative"));
    }
    let eps_used = if is_positive_definite(&a.sigma) && is_positive_definite(&b.sigma) {
        0.0
    } else {
        eps
    };
    let sa = loaded(&a.sigma, eps_used);
    let sb = loaded(&b.sigma, eps_used);
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let cross = product_root_trace(&sa, &sb)?;
    let mut d2 = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if d2 < 0.0 {
        if d2 < -NEGATIVE_SLACK * (1.0 + sa.trace() + sb.trace()) {
            return Err(Error::Numeric(format!("negative squared distance {d2:.3e}")));
        }
        d2 = 0.0;
    }
    Ok(FrechetResult {
        distance2: d2,
        labels: (String::new(), String::new()),
        space: String::new(),
        eps_used,
    })
}

/// Pairwise distances between labelled feature sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub space: String,
    pub labels: Vec<String>,
    /// Sample count of each set.
    pub counts: Vec<usize>,
    /// `values[i][j]` for `i != j`; the diagonal is empty.
    pub values: Vec<Vec<Option<f64>>>,
    pub pairs: Vec<FrechetResult>,
}

/// Fits every set and computes all unordered pairs.
pub fn distance_matrix(space: &str, sets: &[(String, Vec<Vec<f64>>)], eps: f64) -> Result<DistanceMatrix> {
    if sets.len() < 2 {
        return Err(arg_err!("need at least 2 datasets, got {}", sets.len()));
    }
    let fits: Vec<GaussianFit> = sets.par_iter().map(|(_, f)| fit_gaussian(f)).collect::<Result<_>>()?;
    let k = sets.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let results: Vec<FrechetResult> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut r = frechet_distance(&fits[i], &fits[j], eps)?;
            r.labels = (sets[i].0.clone(), sets[j].0.clone());
            r.space = space.to_string();
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![vec![None; k]; k];
    for (&(i, j), r) in pairs.iter().zip(&results) {
        values[i][j] = Some(r.distance2);
        values[j][i] = Some(r.distance2);
    }
    Ok(DistanceMatrix {
        space: space.to_string(),
        labels: sets.iter().map(|(l, _)| l.clone()).collect(),
        counts: sets.iter().map(|(_, f)| f.len()).collect(),
        values,
        pairs: results,
    })
}

/// Extracts features for each labelled image set.
pub fn feature_sets(datasets: &[(String, ImageBatch)], extractor: &dyn FeatureExtractor) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    datasets
        .iter()
        .map(|(l, imgs)| Ok((l.clone(), extractor.features_chunked(imgs)?)))
        .collect()
}

/// Text table with `upper` above the diagonal and `lower` below it; the
/// diagonal is marked `X`.
pub fn render_table(upper: &DistanceMatrix, lower: &DistanceMatrix) -> Result<String> {
    if upper.labels != lower.labels {
        return Err(config_err!("both matrices must cover the same datasets"));
    }
    let k = upper.labels.len();
    let width = upper.labels.iter().map(|l| l.len()).max().unwrap_or(1).max(12);
    let mut out = format!(
        "# upper triangle: {} space; lower triangle: {} space (squared Frechet distance)\n",
        upper.space, lower.space
    );
    out.push_str(&format!("{:width$}", ""));
    for l in &upper.labels {
        out.push_str(&format!(" {l:>width$}"));
    }
    out.push('\n');
    for i in 0..k {
        out.push_str(&format!("{:width$}", upper.labels[i]));
        for j in 0..k {
            let cell = match i.cmp(&j) {
                std::cmp::Ordering::Equal => "X".to_string(),
                std::cmp::Ordering::Less => format!("{:.4}", upper.values[i][j].unwrap_or(f64::NAN)),
                std::cmp::Ordering::Greater => format!("{:.4}", lower.values[i][j].unwrap_or(f64::NAN)),
            };
            out.push_str(&format!(" {cell:>width$}"));
        }
        out.push('\n');
    }
    out.push_str("# samples per dataset:");
    for (l, n) in upper.labels.iter().zip(&upper.counts) {
        out.push_str(&format!(" {l}={n}"));
    }
    out.push('\n');
    Ok(out)
}
