//! Synthetic scenes: linear mixtures of smooth endmember spectra under smooth
//! abundance maps, observed through a Gaussian PSF and Gaussian-profile SRF.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::init;
use crate::observation::{degrade_spatial, degrade_spectral, gaussian_psf, PsfKernel, ScaleFactor, SrfMatrix};
use crate::selfreg::ObservationModel;

pub const ENDMEMBERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub msi_bands: usize,
    pub scale: usize,
    pub psf_size: usize,
    pub psf_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 16,
            height: 16,
            bands: 6,
            msi_bands: 2,
            scale: 4,
            psf_size: 8,
            psf_sigma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Ground-truth HR-HSI.
    pub x: HyperCube,
    /// LR-HSI.
    pub y: HyperCube,
    /// HR-MSI.
    pub z: HyperCube,
    pub psf: PsfKernel,
    pub srf: SrfMatrix,
    pub scale: ScaleFactor,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn model(&self) -> ObservationModel {
        ObservationModel {
            scale: self.scale.get(),
            psf: self.psf.clone(),
            srf: self.srf.clone(),
        }
    }
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    (-(t - center).powi(2) / (2.0 * width * width)).exp()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    let scale = ScaleFactor::new(spec.scale)?;
    scale.check(spec.width, spec.height)?;
    if spec.msi_bands == 0 || spec.bands <= spec.msi_bands {
        return Err(Error::InvalidArgument(format!(
            "need 0 < msi_bands < bands, got {} and {}",
            spec.msi_bands, spec.bands
        )));
    }
    let mut rng = init::rng(spec.seed);
    let (w, h, c) = (spec.width, spec.height, spec.bands);
    let band_pos = |b: usize| if c > 1 { b as f64 / (c - 1) as f64 } else { 0.5 };

    let spectra: Vec<Vec<f64>> = (0..ENDMEMBERS)
        .map(|_| {
            let peaks: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.1..0.35),
                    )
                })
                .collect();
            let raw: Vec<f64> = (0..c)
                .map(|b| 0.1 + peaks.iter().map(|&(a, m, s)| a * bump(band_pos(b), m, s)).sum::<f64>())
                .collect();
            let max = raw.iter().copied().fold(0.0, f64::max);
            raw.into_iter().map(|v| v / max).collect()
        })
        .collect();

    let side = w.min(h) as f64;
    let abundances: Vec<Vec<f64>> = (0..ENDMEMBERS)
        .map(|_| {
            let blobs: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        rng.random_range(0.15..0.35) * side,
                    )
                })
                .collect();
            (0..h * w)
                .map(|p| {
                    let (r, col) = ((p / w) as f64, (p % w) as f64);
                    0.05 + blobs
                        .iter()
                        .map(|&(cy, cx, s)| (-((r - cy).powi(2) + (col - cx).powi(2)) / (2.0 * s * s)).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();

    // per-pixel sum-to-one keeps every mixture inside [0, 1]
    let x = HyperCube::from_fn(w, h, c, |b, r, col| {
        let p = r * w + col;
        let total: f64 = abundances.iter().map(|a| a[p]).sum();
        (0..ENDMEMBERS).map(|e| abundances[e][p] / total * spectra[e][b]).sum()
    });

    let m = spec.msi_bands;
    let width = 0.6 / m as f64;
    let mut srf_w = Vec::with_capacity(m * c);
    for i in 0..m {
        let center = (i as f64 + 0.5) / m as f64 + rng.random_range(-0.05..0.05);
        let row: Vec<f64> = (0..c).map(|b| bump(band_pos(b), center, width)).collect();
        let total: f64 = row.iter().sum();
        srf_w.extend(row.into_iter().map(|v| v / total));
    }
    let srf = SrfMatrix::new(m, c, srf_w)?;
    let psf = gaussian_psf(spec.psf_size, spec.psf_sigma)?;
    let y = degrade_spatial(&x, &psf, scale)?;
    let z = degrade_spectral(&x, &srf)?;
    Ok(SyntheticScene {
        x,
        y,
        z,
        psf,
        srf,
        scale,
        seed: spec.seed,
    })
}
