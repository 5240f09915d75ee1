//! Image quality scores on the `[0, 1]` scale.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Returned for a perfect reconstruction.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// `10 log10(1 / MSE)` over all elements after clamping to `[0, 1]`,
/// capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_shapes("psnr", pred, target)?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = clamp01(a.as_f64()) - clamp01(b.as_f64());
            d * d
        })
        .sum();
    let mse = sse / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Channel-mean grayscale planes, one per sample, clamped to `[0, 1]`.
fn gray_planes<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let s = x.shape();
    (0..s.n())
        .map(|n| {
            (0..s.plane())
                .map(|i| {
                    let (h, w) = (i / s.w(), i % s.w());
                    let sum: f64 = (0..s.c()).map(|c| clamp01(x.get(n, c, h, w).as_f64())).sum();
                    sum / s.c() as f64
                })
                .collect()
        })
        .collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(a, a), h, w, &taps);
    let e_bb = filter_valid(&prod(b, b), h, w, &taps);
    let e_ab = filter_valid(&prod(a, b), h, w, &taps);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / mu_a.len() as f64
}

/// Single-scale SSIM on channel-mean grayscale: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, unit dynamic range, averaged over
/// valid window positions and then over the batch.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_shapes("ssim", pred, target)?;
    let s = pred.shape();
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return Err(TensorError::Invalid {
            op: "ssim",
            msg: format!("image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h(), s.w()),
        });
    }
    let (pa, pb) = (gray_planes(pred), gray_planes(target));
    let total: f64 = pa.iter().zip(&pb).map(|(a, b)| ssim_plane(a, b, s.h(), s.w())).sum();
    Ok(total / s.n() as f64)
}
