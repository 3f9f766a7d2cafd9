//! `model.json`: scale, row-major PSF and row-major SRF as decimals with six
//! significant digits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::selfreg::ObservationModel;

fn round6(x: f64) -> f64 {
    format!("{x:.5e}").parse().expect("formatted float parses")
}

pub fn model_to_json(model: &ObservationModel) -> String {
    let mut m = model.clone();
    m.psf.weights.iter_mut().for_each(|w| *w = round6(*w));
    m.srf.weights.iter_mut().for_each(|w| *w = round6(*w));
    serde_json::to_string_pretty(&m).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<ObservationModel> {
    let m: ObservationModel = serde_json::from_str(text)?;
    if m.psf.weights.len() != m.psf.size * m.psf.size {
        return Err(Error::shape(
            "model.json",
            format!("psf of size {} has {} weights", m.psf.size, m.psf.weights.len()),
        ));
    }
    if m.srf.weights.len() != m.srf.rows * m.srf.cols {
        return Err(Error::shape(
            "model.json",
            format!("{}x{} srf has {} weights", m.srf.rows, m.srf.cols, m.srf.weights.len()),
        ));
    }
    if m.scale == 0 {
        return Err(Error::InvalidArgument("model scale must be positive".into()));
    }
    Ok(m)
}

pub fn write_model(path: impl AsRef<Path>, model: &ObservationModel) -> Result<()> {
    super::write_atomic(path.as_ref(), model_to_json(model).as_bytes())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ObservationModel> {
    model_from_json(&std::fs::read_to_string(path)?)
}
