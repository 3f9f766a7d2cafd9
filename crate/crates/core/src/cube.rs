use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A hyperspectral image: `bands` planes of `height x width` samples, stored
/// band-major (band, then row, then column).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HyperCube {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if width * height * bands != data.len() {
            return Err(Error::shape(
                "hypercube",
                format!(
                    "{width}x{height}x{bands} cube needs {} samples, got {}",
                    width * height * bands,
                    data.len()
                ),
            ));
        }
        Ok(HyperCube {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        Self::filled(width, height, bands, 0.0)
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: f64) -> Self {
        HyperCube {
            width,
            height,
            bands,
            data: vec![value; width * height * bands],
        }
    }

    pub fn from_fn(width: usize, height: usize, bands: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * bands);
        for b in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    data.push(f(b, r, c));
                }
            }
        }
        HyperCube {
            width,
            height,
            bands,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[band * n..(band + 1) * n]
    }

    /// Spectrum of the pixel at flat index `p` (row-major).
    pub fn spectrum(&self, p: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.bands).map(|b| self.data[b * n + p]).collect()
    }

    /// `[1, bands, height, width]` view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.bands, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [b, c, h, w] = t.dims4("hypercube")?;
        if b != 1 {
            return Err(Error::shape("hypercube", format!("batch of {b} images, expected 1")));
        }
        HyperCube::new(w, h, c, t.data().to_vec())
    }

    pub fn same_shape(&self, other: &HyperCube) -> bool {
        (self.width, self.height, self.bands) == (other.width, other.height, other.bands)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.bands)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }
}
