//! Fréchet distance between feature distributions, and sample grids.
//!
//! The distance uses the extractor's final tap, globally average-pooled.
//! It is only comparable between runs that share extractor and transform,
//! hence the name proxy-FD.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::write_png;
use crate::error::{ensure, Error, Result};
use crate::metricfn::{FeatureExtractor, MetricTransform};
use crate::tensor::Tensor;

/// Eigenvalues down to this are treated as zero before square roots.
pub const EIGEN_CLAMP: f64 = -1e-6;
/// Pixel gap between grid cells.
pub const GRID_SEPARATOR: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance of the rows of `[n, d]` features.
pub fn stats_from_features(features: &Tensor<f64>) -> Result<FrechetStats> {
    ensure!(features.rank() == 2, "features must be [n, d]");
    let (n, d) = (features.shape()[0], features.shape()[1]);
    ensure!(n >= 2, "need at least two samples for a covariance, got {n}");
    if !features.is_finite() {
        return Err(Error::Numerical("features contain non-finite values".into()));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok(FrechetStats { mean, cov, n })
}

/// Statistics of pooled final-tap features of `[-1, 1]` images.
pub fn feature_stats(
    images: &Tensor<f32>,
    extractor: &FeatureExtractor,
    transform: MetricTransform,
) -> Result<FrechetStats> {
    ensure!(images.batch() >= 2, "need at least two images");
    let chunk = 256;
    let parts = (0..images.batch())
        .step_by(chunk)
        .map(|s| extractor.pooled_features(&images.batch_slice(s, (s + chunk).min(images.batch())), transform))
        .collect::<Result<Vec<_>>>()?;
    stats_from_features(&Tensor::concat_batch(&parts)?)
}

/// Symmetric PSD square root via eigendecomposition.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure!(a.is_square(), "matrix_sqrt_psd: matrix is not square");
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("matrix_sqrt_psd: non-finite entries".into()));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    ensure!(asym <= 1e-8 * scale, "matrix_sqrt_psd: asymmetry {asym:e} beyond tolerance");
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.min();
    if min < EIGEN_CLAMP * scale {
        return Err(Error::Numerical(format!(
            "matrix_sqrt_psd: eigenvalue {min:e} is not PSD within tolerance"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "feature dims differ: {} vs {}", a.dim(), b.dim());
    let dm = (&a.mean - &b.mean).norm_squared();
    let ra = matrix_sqrt_psd(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    if d < -1e-6 * (1.0 + a.cov.trace() + b.cov.trace()) {
        return Err(Error::Numerical(format!("Fréchet distance {d:e} is negative")));
    }
    Ok(d.max(0.0))
}

/// Machine-readable result of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n_ref: usize,
    pub n_gen: usize,
    pub extractor: String,
}

/// proxy-FD between two image sets.
pub fn proxy_fd(
    reference: &Tensor<f32>,
    generated: &Tensor<f32>,
    extractor: &FeatureExtractor,
    transform: MetricTransform,
) -> Result<EvalReport> {
    let a = feature_stats(reference, extractor, transform)?;
    let b = feature_stats(generated, extractor, transform)?;
    Ok(EvalReport {
        metric: "proxy_fd".into(),
        value: frechet_distance(&a, &b)?,
        n_ref: a.n,
        n_gen: b.n,
        extractor: extractor.id().to_string(),
    })
}

/// Tiles `[N, H, W, C]` images row-major into `[H', W', C]` with a white
/// separator between and around cells.
pub fn tile_grid(images: &Tensor<f32>, cols: usize) -> Result<Tensor<f32>> {
    ensure!(images.rank() == 4 && images.batch() >= 1, "grid needs [N, H, W, C] with N >= 1");
    ensure!(cols >= 1, "grid needs at least one column");
    let s = images.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let g = GRID_SEPARATOR;
    let (gh, gw) = (rows * (h + g) + g, cols * (w + g) + g);
    let mut out = Tensor::full([gh, gw, c], 1.0f32);
    let dst = out.data_mut();
    for i in 0..n {
        let (oy, ox) = (g + (i / cols) * (h + g), g + (i % cols) * (w + g));
        for y in 0..h {
            let src = &images.data()[((i * h + y) * w) * c..((i * h + y) * w + w) * c];
            let d0 = ((oy + y) * gw + ox) * c;
            dst[d0..d0 + w * c].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Writes a PNG grid with `cols` columns (default: near-square).
pub fn render_grid(images: &Tensor<f32>, cols: Option<usize>, path: &Path) -> Result<()> {
    let n = images.batch();
    let cols = cols.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
    write_png(path, &tile_grid(images, cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(d: usize, var: f64) -> FrechetStats {
        FrechetStats {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d) * var,
            n: 100,
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let b = matrix_sqrt_psd(&a).unwrap();
        assert!((b[(0, 0)] - 2.0).abs() < 1e-12 && (b[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(b[(0, 1)].abs() < 1e-12);
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn isotropic_closed_form() {
        let d = 5;
        let got = frechet_distance(&iso(d, 0.25), &iso(d, 4.0)).unwrap();
        assert!((got - d as f64 * (0.5f64 - 2.0).powi(2)).abs() < 1e-9);
        assert_eq!(frechet_distance(&iso(d, 1.0), &iso(d, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn duplicated_rows_have_zero_covariance() {
        let f = Tensor::from_fn([4, 3], |i| (i % 3) as f64);
        let s = stats_from_features(&f).unwrap();
        assert_eq!(s.cov.amax(), 0.0);
        assert!(stats_from_features(&Tensor::zeros([1, 3])).is_err());
    }

    #[test]
    fn grid_layout() {
        let imgs = Tensor::from_fn([4, 2, 2, 1], |i| if i < 4 { -1.0 } else { 0.0 });
        let g = tile_grid(&imgs, 2).unwrap();
        assert_eq!(g.shape(), &[2 * 4 + 2, 2 * 4 + 2, 1]);
        assert_eq!(g.data()[2 * 10 + 2], -1.0);
        assert_eq!(g.data()[0], 1.0);
        let one = tile_grid(&imgs.batch_slice(0, 1), 3).unwrap();
        assert_eq!(one.shape(), &[6, 6, 1]);
    }
}
