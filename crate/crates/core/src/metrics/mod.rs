//! Image-difference metrics and the edit evaluation report.
//!
//! Convention: pixel values in `[0, 1]`, PSNR peak 1.0, SSIM over 8×8 uniform
//! windows with stride 1 and constants `C1 = (0.01)^2`, `C2 = (0.03)^2`.

mod report;

pub use report::{evaluate, EvalConfig, MetricReport, ReportHeader, ReportRow, RoundTripStats};

use crate::image::ImageGrid;
use crate::probes::Probe;
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Short description of the SSIM convention, written into report headers.
pub const SSIM_CONVENTION: &str = "ssim: 8x8 uniform window, stride 1, C1=(0.01*peak)^2, C2=(0.03*peak)^2, peak=1";

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_dims(b)?;
    // Neumaier-compensated sum
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let v = (x - y) * (x - y);
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok((sum + carry) / a.data().len() as f64)
}

pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean local SSIM, averaged over channels and window positions.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (channels, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let window = || {
                    (y0..y0 + SSIM_WINDOW)
                        .flat_map(move |y| (x0..x0 + SSIM_WINDOW).map(move |x| (y, x)))
                };
                let (mut sa, mut sb) = (0.0, 0.0);
                for (y, x) in window() {
                    sa += a.get(c, y, x);
                    sb += b.get(c, y, x);
                }
                let (mu_a, mu_b) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for (y, x) in window() {
                    let da = a.get(c, y, x) - mu_a;
                    let db = b.get(c, y, x) - mu_b;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean squared difference of two embedding vectors.
pub fn embedding_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            what: "embedding",
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean squared difference between the probe embeddings of `a` and `b`.
///
/// Refuses to run if the probe weights no longer match their frozen hash.
pub fn pmse(a: &ImageGrid, b: &ImageGrid, probe: &Probe) -> Result<f64> {
    a.ensure_same_dims(b)?;
    probe.verify()?;
    embedding_mse(&probe.embed(a)?, &probe.embed(b)?)
}
