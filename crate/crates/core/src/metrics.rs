//! Full-reference quality metrics for fused cubes: PSNR, SSIM, SAM, ERGAS.

use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::kernels::arccos_clamped;
use crate::selfreg::ANGLE_EPS;

/// Reported PSNR when the error vanishes.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// dB, mean over bands.
    pub psnr: f64,
    pub ssim: f64,
    /// Degrees.
    pub sam: f64,
    pub ergas: f64,
    pub per_band_psnr: Vec<f64>,
    pub per_band_ssim: Vec<f64>,
}

impl MetricsReport {
    /// `metric=value` lines with six significant digits.
    pub fn to_kv_text(&self) -> String {
        format!(
            "psnr={}\nssim={}\nsam={}\nergas={}\n",
            sig6(self.psnr),
            sig6(self.ssim),
            sig6(self.sam),
            sig6(self.ergas)
        )
    }
}

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

fn check_pair(op: &'static str, pred: &HyperCube, gt: &HyperCube) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            op,
            format!("prediction {} vs reference {}", pred.shape_string(), gt.shape_string()),
        ));
    }
    if gt.bands() == 0 || gt.pixels() == 0 {
        return Err(Error::InvalidArgument(format!("{op} of an empty cube")));
    }
    Ok(())
}

fn band_mse(pred: &HyperCube, gt: &HyperCube, b: usize) -> f64 {
    let (p, g) = (pred.band(b), gt.band(b));
    p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

pub fn psnr_per_band(pred: &HyperCube, gt: &HyperCube, peak: f64) -> Result<Vec<f64>> {
    check_pair("psnr", pred, gt)?;
    Ok((0..gt.bands())
        .map(|b| {
            let mse = band_mse(pred, gt, b);
            if mse < peak * peak * 1e-10 {
                PSNR_CAP
            } else {
                10.0 * (peak * peak / mse).log10()
            }
        })
        .collect())
}

/// Band-averaged PSNR in dB, each band capped at [`PSNR_CAP`].
pub fn psnr(pred: &HyperCube, gt: &HyperCube, peak: f64) -> Result<f64> {
    let v = psnr_per_band(pred, gt, peak)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| win[t] * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| win[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM of one band pair with dynamic range 1.
pub fn ssim_plane(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mu_x = filter_valid(pred, h, w, &win);
    let mu_y = filter_valid(gt, h, w, &win);
    let xx = filter_valid(&prod(pred, pred), h, w, &win);
    let yy = filter_valid(&prod(gt, gt), h, w, &win);
    let xy = filter_valid(&prod(pred, gt), h, w, &win);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim_per_band(pred: &HyperCube, gt: &HyperCube) -> Result<Vec<f64>> {
    check_pair("ssim", pred, gt)?;
    (0..gt.bands())
        .map(|b| ssim_plane(pred.band(b), gt.band(b), gt.height(), gt.width()))
        .collect()
}

/// Gaussian-window SSIM averaged over windows and bands.
pub fn ssim(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    let v = ssim_per_band(pred, gt)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean spectral angle in degrees.
pub fn sam(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    check_pair("sam", pred, gt)?;
    if gt.bands() < 2 {
        return Err(Error::InvalidArgument("spectral angle needs at least 2 bands".into()));
    }
    let n = gt.pixels();
    let total: f64 = (0..n)
        .map(|p| {
            let (mut dot, mut np, mut ng) = (0.0, 0.0, 0.0);
            for b in 0..gt.bands() {
                let (x, y) = (pred.data()[b * n + p], gt.data()[b * n + p]);
                dot += x * y;
                np += x * x;
                ng += y * y;
            }
            arccos_clamped(dot / (np.sqrt() * ng.sqrt() + ANGLE_EPS))
        })
        .sum();
    Ok((total / n as f64).to_degrees())
}

/// `(100 / s) * sqrt(mean_b(MSE_b / mu_b^2))` with `mu_b` the reference band mean.
pub fn ergas(pred: &HyperCube, gt: &HyperCube, scale: usize) -> Result<f64> {
    check_pair("ergas", pred, gt)?;
    if scale == 0 {
        return Err(Error::InvalidArgument("scale factor must be positive".into()));
    }
    let mut acc = 0.0;
    for b in 0..gt.bands() {
        let band = gt.band(b);
        let mu = band.iter().sum::<f64>() / band.len() as f64;
        if mu == 0.0 {
            return Err(Error::ZeroMeanBand(b));
        }
        acc += band_mse(pred, gt, b) / (mu * mu);
    }
    Ok(100.0 / scale as f64 * (acc / gt.bands() as f64).sqrt())
}

/// All four metrics with a peak of 1.
pub fn evaluate(pred: &HyperCube, gt: &HyperCube, scale: usize) -> Result<MetricsReport> {
    let per_band_psnr = psnr_per_band(pred, gt, 1.0)?;
    let per_band_ssim = ssim_per_band(pred, gt)?;
    Ok(MetricsReport {
        psnr: per_band_psnr.iter().sum::<f64>() / per_band_psnr.len() as f64,
        ssim: per_band_ssim.iter().sum::<f64>() / per_band_ssim.len() as f64,
        sam: sam(pred, gt)?,
        ergas: ergas(pred, gt, scale)?,
        per_band_psnr,
        per_band_ssim,
    })
}
