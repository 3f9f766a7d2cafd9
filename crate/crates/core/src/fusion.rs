//! Per-stage fusion network: upsampled LR residual and HR residual in,
//! HR hyperspectral estimate out, through spectrally normalized resblocks.

use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::graph::{Graph, SigmaGradient, Var};
use crate::init::{self, SeededRng};
use crate::observation::ScaleFactor;
use crate::optim::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralNorm {
    /// Coefficient applied after normalization; below 1 the resblock branch
    /// becomes a contraction.
    pub lambda: f64,
    /// Power iterations per forward pass.
    pub iters: usize,
    pub sigma_gradient: SigmaGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailInit {
    Zero,
    HeUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    /// Parameter-name prefix, e.g. `f1`.
    pub prefix: String,
    pub hsi_bands: usize,
    pub msi_bands: usize,
    pub features: usize,
    pub blocks: usize,
    pub spectral_norm: Option<SpectralNorm>,
}

/// Inputs of one fusion stage.
#[derive(Clone, Debug)]
pub struct StageInput {
    pub lr_residual: HyperCube,
    pub hr_residual: HyperCube,
}

impl StageInput {
    pub fn check(&self, s: ScaleFactor) -> Result<()> {
        let (lr, hr) = (&self.lr_residual, &self.hr_residual);
        if lr.width() * s.get() != hr.width() || lr.height() * s.get() != hr.height() {
            return Err(Error::shape(
                "fusion_forward",
                format!(
                    "LR {} times scale {} does not match HR {}",
                    lr.shape_string(),
                    s.get(),
                    hr.shape_string()
                ),
            ));
        }
        Ok(())
    }
}

impl FusionNet {
    pub fn head_name(&self) -> String {
        format!("{}.head", self.prefix)
    }

    pub fn tail_name(&self) -> String {
        format!("{}.tail", self.prefix)
    }

    pub fn block_names(&self, block: usize) -> (String, String) {
        (
            format!("{}.block{block}.conv1", self.prefix),
            format!("{}.block{block}.conv2", self.prefix),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng, tail: TailInit) {
        let f = self.features;
        let head_in = self.hsi_bands + self.msi_bands;
        store.insert(&self.head_name(), init::he_uniform(rng, &[f, head_in, 3, 3]));
        for b in 0..self.blocks {
            let (c1, c2) = self.block_names(b);
            for name in [c1, c2] {
                store.insert(&name, init::he_uniform(rng, &[f, f, 3, 3]));
                store.set_sn_vector(&name, init::unit_vector(rng, f));
            }
        }
        let tail_shape = [self.hsi_bands, f, 3, 3];
        let tail_w = match tail {
            TailInit::Zero => crate::tensor::Tensor::zeros(&tail_shape),
            TailInit::HeUniform => init::he_uniform(rng, &tail_shape),
        };
        store.insert(&self.tail_name(), tail_w);
    }

    fn block_weight(&self, g: &mut Graph, store: &mut ParamStore, name: &str) -> Result<Var> {
        let w = store.bind(g, name)?;
        match self.spectral_norm {
            None => Ok(w),
            Some(sn) => {
                let u = store
                    .sn_vector_mut(name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no power-iteration state for '{name}'")))?;
                g.spectral_normalize(w, sn.lambda, sn.iters, u, sn.sigma_gradient)
            }
        }
    }

    /// `x + conv2(relu(conv1(x)))` with spectrally normalized kernels.
    pub fn resblock(&self, g: &mut Graph, store: &mut ParamStore, x: Var, block: usize) -> Result<Var> {
        let branch = self.residual_branch(g, store, x, block)?;
        g.add(x, branch)
    }

    /// The residual branch `conv2(relu(conv1(x)))` alone.
    pub fn residual_branch(&self, g: &mut Graph, store: &mut ParamStore, x: Var, block: usize) -> Result<Var> {
        let (n1, n2) = self.block_names(block);
        let w1 = self.block_weight(g, store, &n1)?;
        let w2 = self.block_weight(g, store, &n2)?;
        let h = g.conv2d(x, w1, 1, 1)?;
        let h = g.relu(h);
        g.conv2d(h, w2, 1, 1)
    }

    /// Full stage map on `[1, C, h, w]` and `[1, c, H, W]` nodes.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, lr: Var, hr: Var, s: ScaleFactor) -> Result<Var> {
        let [_, c_lr, h, w] = g.value(lr).dims4("fusion_forward")?;
        let [_, c_hr, hh, ww] = g.value(hr).dims4("fusion_forward")?;
        if c_lr != self.hsi_bands || c_hr != self.msi_bands || h * s.get() != hh || w * s.get() != ww {
            return Err(Error::shape(
                "fusion_forward",
                format!(
                    "inputs {:?} and {:?} do not fit a {}+{} band net at scale {}",
                    g.value(lr).shape(),
                    g.value(hr).shape(),
                    self.hsi_bands,
                    self.msi_bands,
                    s.get()
                ),
            ));
        }
        let up = g.upsample_bilinear(lr, s.get())?;
        let x = g.concat_channels(up, hr)?;
        let head = store.bind(g, &self.head_name())?;
        let mut feat = g.conv2d(x, head, 1, 1)?;
        for b in 0..self.blocks {
            feat = self.resblock(g, store, feat, b)?;
        }
        let tail = store.bind(g, &self.tail_name())?;
        let out = g.conv2d(feat, tail, 1, 1)?;
        g.label(out, &format!("{} output", self.prefix));
        Ok(out)
    }

    /// Evaluates the stage outside of training.
    pub fn fuse(&self, store: &mut ParamStore, input: &StageInput, s: ScaleFactor) -> Result<HyperCube> {
        input.check(s)?;
        let mut g = Graph::new();
        let lr = g.constant(input.lr_residual.to_tensor());
        let hr = g.constant(input.hr_residual.to_tensor());
        let out = self.forward(&mut g, store, lr, hr, s)?;
        HyperCube::from_tensor(g.value(out))
    }

    pub fn numel(&self) -> usize {
        let f = self.features;
        f * (self.hsi_bands + self.msi_bands) * 9 + self.blocks * 2 * f * f * 9 + self.hsi_bands * f * 9
    }
}
