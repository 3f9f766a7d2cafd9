//! Sensor observation model: spatial blur plus decimation (`Y = X B S`) and
//! spectral response (`Z = R X`), both as fixed simulators and as learned
//! networks whose outputs lie on the probability simplex by construction.

use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::{self, SeededRng};
use crate::kernels;
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// Spatial downsampling ratio between the HR and LR grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleFactor(usize);

impl ScaleFactor {
    pub fn new(s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidArgument("scale factor must be positive".into()));
        }
        Ok(ScaleFactor(s))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Checks that an HR extent pair is divisible by the scale.
    pub fn check(self, width: usize, height: usize) -> Result<()> {
        if !width.is_multiple_of(self.0) {
            return Err(Error::NotDivisible {
                axis: "width",
                extent: width,
                scale: self.0,
            });
        }
        if !height.is_multiple_of(self.0) {
            return Err(Error::NotDivisible {
                axis: "height",
                extent: height,
                scale: self.0,
            });
        }
        Ok(())
    }
}

/// A square point spread function shared by all bands, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfKernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl PsfKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || weights.len() != size * size {
            return Err(Error::shape(
                "psf",
                format!("{} weights for a {size}x{size} kernel", weights.len()),
            ));
        }
        Ok(PsfKernel { size, weights })
    }

    /// Unit impulse at the kernel's reference tap `(size - 1) / 2`.
    pub fn delta(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        let c = (size - 1) / 2;
        weights[c * size + c] = 1.0;
        PsfKernel { size, weights }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [k, k2] = t.dims2("psf")?;
        if k != k2 {
            return Err(Error::shape("psf", format!("kernel {:?} is not square", t.shape())));
        }
        PsfKernel::new(k, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.weights.clone()).expect("square kernel")
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0) && (self.sum() - 1.0).abs() <= tol
    }

    /// Weighted mean tap position `(row, col)`.
    pub fn center_of_mass(&self) -> (f64, f64) {
        let total = self.sum();
        let (mut r, mut c) = (0.0, 0.0);
        for (i, w) in self.weights.iter().enumerate() {
            r += w * (i / self.size) as f64;
            c += w * (i % self.size) as f64;
        }
        (r / total, c / total)
    }

    /// Shannon entropy in nats of the normalized weights.
    pub fn entropy(&self) -> f64 {
        let total = self.sum();
        -self
            .weights
            .iter()
            .map(|w| w / total)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Isotropic Gaussian PSF centered at `(size - 1) / 2`, normalized to sum 1.
pub fn gaussian_psf(size: usize, sigma: f64) -> Result<PsfKernel> {
    if size == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian psf needs size >= 1 and sigma > 0, got {size}, {sigma}"
        )));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let mut weights: Vec<f64> = (0..size * size)
        .map(|i| {
            let (di, dj) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    PsfKernel::new(size, weights)
}

/// Spectral response: `rows` MSI bands, each a weighting over `cols` HSI bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrfMatrix {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl SrfMatrix {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::shape(
                "srf",
                format!("{} weights for a {rows}x{cols} matrix", weights.len()),
            ));
        }
        Ok(SrfMatrix { rows, cols, weights })
    }

    pub fn identity(n: usize) -> Self {
        let weights = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        SrfMatrix {
            rows: n,
            cols: n,
            weights,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [r, c] = t.dims2("srf")?;
        SrfMatrix::new(r, c, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.weights.clone()).expect("consistent shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_row_simplex(&self, tol: f64) -> bool {
        (0..self.rows).all(|i| {
            let row = self.row(i);
            row.iter().all(|&w| w >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    /// Mean absolute difference between corresponding entries.
    pub fn mean_abs_error(&self, other: &SrfMatrix) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.weights.len() as f64
    }
}

/// `Y = X B S`: blur every band with `psf` (symmetric boundary extension) and
/// keep the sample at offset `s / 2` of each `s x s` block.
pub fn degrade_spatial(x: &HyperCube, psf: &PsfKernel, s: ScaleFactor) -> Result<HyperCube> {
    s.check(x.width(), x.height())?;
    let out = kernels::blur_decimate(&x.to_tensor(), &psf.to_tensor(), s.get())?;
    HyperCube::from_tensor(&out)
}

/// `Z = R X`: every output spectrum is `R` times the input spectrum.
pub fn degrade_spectral(x: &HyperCube, srf: &SrfMatrix) -> Result<HyperCube> {
    if srf.cols != x.bands() {
        return Err(Error::shape(
            "degrade_spectral",
            format!("response has {} columns for a cube with {} bands", srf.cols, x.bands()),
        ));
    }
    let flat = Tensor::new(vec![x.bands(), x.pixels()], x.data().to_vec())?;
    let out = kernels::matmul(&srf.to_tensor(), &flat)?;
    HyperCube::new(x.width(), x.height(), srf.rows, out.into_data())
}

/// Graph form of [`degrade_spatial`] on a `[1, C, H, W]` node and a `[k, k]` kernel node.
pub fn spatial_node(g: &mut Graph, x: Var, psf: Var, s: ScaleFactor) -> Result<Var> {
    g.blur_decimate(x, psf, s.get())
}

/// Graph form of [`degrade_spectral`] on a `[1, C, H, W]` node and a `[c, C]` node.
pub fn spectral_node(g: &mut Graph, x: Var, srf: Var) -> Result<Var> {
    let [_, bands, h, w] = g.value(x).dims4("degrade_spectral")?;
    let [rows, cols] = g.value(srf).dims2("degrade_spectral")?;
    if cols != bands {
        return Err(Error::shape(
            "degrade_spectral",
            format!("response has {cols} columns for a tensor with {bands} bands"),
        ));
    }
    let flat = g.reshape(x, &[bands, h * w])?;
    let out = g.matmul(srf, flat)?;
    g.reshape(out, &[1, rows, h, w])
}

/// Learned observation networks: a random latent passed through fully
/// connected layers and a softmax, yielding a PSF and a row-stochastic SRF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationNet {
    pub kernel_size: usize,
    pub hsi_bands: usize,
    pub msi_bands: usize,
    /// Number of fully connected layers in each branch.
    pub depth: usize,
    /// Apply the softmax output constraint. Disabled only for the
    /// unconstrained baseline configuration.
    pub softmax: bool,
}

pub const PSF_LATENT: &str = "obs.psf.latent";
pub const SRF_LATENT: &str = "obs.srf.latent";

fn fc_names(branch: &str, layer: usize) -> (String, String) {
    (format!("obs.{branch}.fc{layer}.weight"), format!("obs.{branch}.fc{layer}.bias"))
}

impl ObservationNet {
    /// Latents are standard normal; FC layers use `U(-1/sqrt(n), 1/sqrt(n))`
    /// for weights and biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let kk = self.kernel_size * self.kernel_size;
        store.insert(PSF_LATENT, init::normal(rng, &[1, kk]));
        for layer in 0..self.depth {
            let (w, b) = fc_names("psf", layer);
            let bound = 1.0 / (kk as f64).sqrt();
            store.insert(&w, init::uniform(rng, &[kk, kk], bound));
            store.insert(&b, init::uniform(rng, &[kk], bound));
        }
        let c = self.hsi_bands;
        store.insert(SRF_LATENT, init::normal(rng, &[self.msi_bands, c]));
        for layer in 0..self.depth {
            let (w, b) = fc_names("srf", layer);
            let bound = 1.0 / (c as f64).sqrt();
            store.insert(&w, init::uniform(rng, &[c, c], bound));
            store.insert(&b, init::uniform(rng, &[c], bound));
        }
    }

    fn fc_stack(&self, g: &mut Graph, store: &ParamStore, branch: &str, mut x: Var) -> Result<Var> {
        for layer in 0..self.depth {
            let (w, b) = fc_names(branch, layer);
            let w = store.bind(g, &w)?;
            let b = store.bind(g, &b)?;
            let y = g.matmul(x, w)?;
            x = g.add_bias(y, b)?;
        }
        Ok(x)
    }

    /// The PSF branch: `[k, k]` kernel node.
    pub fn psf_node(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let k = self.kernel_size;
        let latent = store.bind(g, PSF_LATENT)?;
        if g.value(latent).len() != k * k {
            return Err(Error::shape(
                "psf_net",
                format!("latent has {} entries for a {k}x{k} kernel", g.value(latent).len()),
            ));
        }
        let logits = self.fc_stack(g, store, "psf", latent)?;
        let out = if self.softmax { g.softmax(logits)? } else { logits };
        let psf = g.reshape(out, &[k, k])?;
        g.label(psf, "learned psf");
        Ok(psf)
    }

    /// The SRF branch: `[c, C]` node with each row softmax-normalized.
    pub fn srf_node(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let latent = store.bind(g, SRF_LATENT)?;
        let shape = g.value(latent).shape().to_vec();
        if shape != [self.msi_bands, self.hsi_bands] {
            return Err(Error::shape(
                "srf_net",
                format!("latent {shape:?}, expected [{}, {}]", self.msi_bands, self.hsi_bands),
            ));
        }
        let logits = self.fc_stack(g, store, "srf", latent)?;
        let srf = if self.softmax { g.softmax_rows(logits)? } else { logits };
        g.label(srf, "learned srf");
        Ok(srf)
    }

    pub fn psf(&self, store: &ParamStore) -> Result<PsfKernel> {
        let mut g = Graph::new();
        let v = self.psf_node(&mut g, store)?;
        PsfKernel::from_tensor(g.value(v))
    }

    pub fn srf(&self, store: &ParamStore) -> Result<SrfMatrix> {
        let mut g = Graph::new();
        let v = self.srf_node(&mut g, store)?;
        SrfMatrix::from_tensor(g.value(v))
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("obs.")
    }
}
