//! Imperceptibility and success metrics for adversarial videos.
//!
//! MSE and PSNR use the 0-255 scale, SSIM a dynamic range of 255, and the
//! l2,1 sparsity the `[0, 1]` scale the losses see.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::l21_norm;
use crate::tensor::Tensor;
use crate::victim::Classifier;

pub const SCALE_NOTE: &str = "0–255 scale for MSE/PSNR";
pub const FID_JITTER: f64 = 1e-6;

pub fn mse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    x.same_shape(y, "mse")?;
    if x.is_empty() {
        return Err(Error::shape("mse of empty tensors"));
    }
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| ((a as f64 - b as f64) * 255.0).powi(2)).sum();
    Ok(s / x.len() as f64)
}

/// `+inf` when the squared error is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; w * oh];
    for x in 0..w {
        for y in 0..oh {
            rows[x * oh + y] = (0..k).map(|j| g[j] * plane[x * h + y + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for x in 0..ow {
        for y in 0..oh {
            out[x * oh + y] = (0..k).map(|i| g[i] * rows[(x + i) * oh + y]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, g: &[f64]) -> f64 {
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, g);
    let mu_b = filter_valid(b, w, h, g);
    let aa = filter_valid(&prod(a, a), w, h, g);
    let bb = filter_valid(&prod(b, b), w, h, g);
    let ab = filter_valid(&prod(a, b), w, h, g);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM over every frame of every channel, 11x11 Gaussian window
/// (sigma 1.5), shrunk to the largest odd size that fits small frames.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    x.same_shape(y, "ssim")?;
    let [c, t, w, h] = x.dims4()?;
    let side = w.min(h);
    if side == 0 || c * t == 0 {
        return Err(Error::shape("ssim of an empty video"));
    }
    let size = if side >= 11 { 11 } else if side % 2 == 1 { side } else { side - 1 };
    let g = gaussian_window(size, 1.5);
    let plane = w * h;
    let scale = |v: &[f32]| v.iter().map(|&p| p as f64 * 255.0).collect::<Vec<_>>();
    let mut total = 0.0;
    for k in 0..c * t {
        let r = k * plane..(k + 1) * plane;
        total += ssim_plane(&scale(&x.data()[r.clone()]), &scale(&y.data()[r]), w, h, &g);
    }
    Ok(total / (c * t) as f64)
}

/// `(sum_t ||x_a[:, t] - x_c[:, t]|| / T, sum_t ||...||)` on the `[0, 1]` scale.
pub fn l21_sparsity(x_a: &Tensor<f32>, x_c: &Tensor<f32>) -> Result<(f64, f64)> {
    x_a.same_shape(x_c, "l21_sparsity")?;
    let [_, t, ..] = x_a.dims4()?;
    let d: Tensor<f64> = x_a.cast::<f64>().sub(&x_c.cast());
    let sum = l21_norm(&d)?;
    Ok((sum / t as f64, sum))
}

fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::Precondition("fid needs non-empty feature sets".into()))?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows of different widths"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = if n > 1 { centered.transpose() * &centered / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m.clone());
    if e.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { stage: "fid matrix square root".into() });
    }
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

/// `||mu_a - mu_b||^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2)` with `jitter` on
/// both diagonals.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
    jitter: f64,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::shape("frechet distance of mismatched gaussians"));
    }
    let eye = DMatrix::<f64>::identity(d, d) * jitter;
    let a = cov_a + &eye;
    let b = cov_b + &eye;
    let ra = sym_sqrt(&a)?;
    let mid = &ra * &b * &ra;
    let mid = (&mid + mid.transpose()) * 0.5;
    let e = SymmetricEigen::new(mid);
    let tr_cross: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let v = (mu_a - mu_b).norm_squared() + a.trace() + b.trace() - 2.0 * tr_cross;
    if !v.is_finite() {
        return Err(Error::NumericOverflow { stage: "fid".into() });
    }
    Ok(v.max(0.0))
}

/// Frame-level penultimate features of every video, one row per output frame.
pub fn feature_rows<C: Classifier<f32> + ?Sized>(videos: &[Tensor<f32>], f: &C) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for v in videos {
        let feats = f.features(v)?;
        let d = f.feature_dim();
        if d == 0 || feats.len() % d != 0 {
            return Err(Error::shape(format!("features of length {} for width {d}", feats.len())));
        }
        rows.extend(feats.data().chunks(d).map(|r| r.iter().map(|&x| x as f64).collect()));
    }
    Ok(rows)
}

/// Fréchet distance between Gaussian fits of the victim's frame features.
pub fn fid<C: Classifier<f32> + ?Sized>(set_a: &[Tensor<f32>], set_b: &[Tensor<f32>], f: &C) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Precondition("fid needs non-empty video sets".into()));
    }
    let (ma, ca) = gaussian_fit(&feature_rows(set_a, f)?)?;
    let (mb, cb) = gaussian_fit(&feature_rows(set_b, f)?)?;
    frechet_distance(&ma, &ca, &mb, &cb, FID_JITTER)
}

pub fn fooling_rate(success: &[bool]) -> Result<(usize, usize)> {
    if success.is_empty() {
        return Err(Error::Precondition("fooling rate of no attacks".into()));
    }
    Ok((success.iter().filter(|&&s| s).count(), success.len()))
}

/// Per-video comparison of an adversarial video against its clean source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub l21: f64,
    pub l21_sum: f64,
    /// Squared norm of the perturbation's lll band.
    pub lll_energy: f64,
}

impl PairMetrics {
    pub fn compute(x_a: &Tensor<f32>, x_c: &Tensor<f32>) -> Result<Self> {
        let m = mse(x_a, x_c)?;
        let (l21, l21_sum) = l21_sparsity(x_a, x_c)?;
        let d: Tensor<f64> = x_a.cast::<f64>().sub(&x_c.cast());
        let lll = crate::wavelet3d::select_channels(&crate::wavelet3d::haar3_forward(&d)?, 8, 0)?.sq_norm();
        Ok(PairMetrics { mse: m, psnr: psnr_from_mse(m), ssim: ssim(x_a, x_c)?, l21, l21_sum, lll_energy: lll })
    }
}

/// Aggregate over a set of attacks (failures contribute their best iterate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub ssim: f64,
    /// Mean of per-video PSNR, ignoring `inf` entries.
    pub psnr: f64,
    /// PSNR of the mean MSE.
    pub psnr_of_mean_mse: f64,
    pub l21: f64,
    pub l21_sum: f64,
    pub fid: Option<f64>,
    pub fr_numerator: usize,
    pub fr_denominator: usize,
    pub mean_epochs: f64,
    pub scale_note: String,
}

impl MetricReport {
    /// `epochs` pairs with `pairs`; `fid` is supplied by the caller because
    /// it needs the classifier and both video sets.
    pub fn aggregate(pairs: &[PairMetrics], success: &[bool], epochs: &[usize], fid: Option<f64>) -> Result<Self> {
        if pairs.is_empty() || pairs.len() != success.len() || pairs.len() != epochs.len() {
            return Err(Error::Precondition("aggregate needs one success flag and epoch count per pair".into()));
        }
        let n = pairs.len() as f64;
        let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        let finite: Vec<f64> = pairs.iter().map(|p| p.psnr).filter(|v| v.is_finite()).collect();
        let (fr_numerator, fr_denominator) = fooling_rate(success)?;
        let mse = mean(|p| p.mse);
        Ok(MetricReport {
            mse,
            ssim: mean(|p| p.ssim),
            psnr: if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 },
            psnr_of_mean_mse: psnr_from_mse(mse),
            l21: mean(|p| p.l21),
            l21_sum: mean(|p| p.l21_sum),
            fid,
            fr_numerator,
            fr_denominator,
            mean_epochs: epochs.iter().sum::<usize>() as f64 / n,
            scale_note: SCALE_NOTE.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_psnr_extremes() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::full(&[1, 2, 4, 4], 1.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(mse(&a, &b).unwrap(), 65025.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert!((psnr_from_mse(6.93) - 39.7239).abs() < 1e-3);
    }

    #[test]
    fn ssim_identity_constants_and_symmetry() {
        let x = Tensor::from_fn(&[2, 2, 16, 16], |i| ((i * 37) % 101) as f32 / 101.0);
        let y = x.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-9);
        let zero = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
        let full = Tensor::full(&[1, 1, 16, 16], 1.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = c1 / (255.0f64 * 255.0 + c1);
        assert!((ssim(&zero, &full).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_shrinks_window_on_small_frames() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i % 5) as f32 / 5.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l21_single_frame() {
        let c = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
        let mut a = c.clone();
        a.data_mut()[4] = 0.3;
        a.data_mut()[5] = 0.4;
        let (m, s) = l21_sparsity(&a, &c).unwrap();
        assert!((s - 0.5).abs() < 1e-7);
        assert!((m - 0.125).abs() < 1e-7);
    }

    #[test]
    fn frechet_reference_cases() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let four = DMatrix::from_element(1, 1, 4.0);
        let v = frechet_distance(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &four, 0.0).unwrap();
        assert!((v - 2.0).abs() < 1e-12);

        let (ma, ca) = gaussian_fit(&[vec![1.0, 2.0]]).unwrap();
        let (mb, cb) = gaussian_fit(&[vec![4.0, -2.0]]).unwrap();
        let v = frechet_distance(&ma, &ca, &mb, &cb, FID_JITTER).unwrap();
        assert!((v - 25.0).abs() < 1e-9);

        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.1]).collect();
        let (m, c) = gaussian_fit(&rows).unwrap();
        assert!(frechet_distance(&m, &c, &m, &c, FID_JITTER).unwrap() < 1e-6);
    }

    #[test]
    fn fooling_rate_counts() {
        assert_eq!(fooling_rate(&[true, true, false, true]).unwrap(), (3, 4));
        assert_eq!(fooling_rate(&[false; 5]).unwrap(), (0, 5));
        assert_eq!(fooling_rate(&[true; 400]).unwrap(), (400, 400));
        assert!(fooling_rate(&[]).is_err());
    }
}
