//! Three-stage self-regression: the fusion networks reconstruct the HR-HSI,
//! the observation networks map it back onto both inputs, and the whole
//! system is trained to reproduce the observed pair.

use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::fusion::{FusionNet, SpectralNorm, TailInit};
use crate::graph::{Graph, SigmaGradient, Var};
use crate::init;
use crate::observation::{self, ObservationNet, PsfKernel, ScaleFactor, SrfMatrix};
use crate::optim::{Adam, ParamStore};

/// Guard added to the norm product in the spectral-angle loss.
pub const ANGLE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSchedule {
    /// Fusion and observation parameters share every Adam step.
    #[default]
    Joint,
    /// Even iterations update the fusion networks, odd ones the observation networks.
    Alternating,
}

/// Sample precision of written cubes. Training always runs in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// A complete observation model: blur kernel, spectral response and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub scale: usize,
    pub psf: PsfKernel,
    pub srf: SrfMatrix,
}

/// The training configurations of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No softmax, no spectral normalization, spatial loss only.
    Baseline,
    /// Softmax-constrained observation networks.
    S,
    /// Plus spectral normalization with coefficient below one.
    Sn,
    /// Plus the local-consistency loss.
    Snl,
    /// Plus the spectral-angle loss: the full method.
    Snla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub spectral_norm: bool,
    pub lambda_sn: f64,
    /// Power iterations per training step.
    pub sn_iters: usize,
    pub sigma_gradient: SigmaGradient,
    pub softmax_constraints: bool,
    /// Weight of the spectral-angle loss.
    pub beta: f64,
    /// Weight of the local-consistency loss.
    pub gamma: f64,
    pub lr: f64,
    /// Halve the learning rate every this many iterations.
    pub lr_halve_every: Option<usize>,
    pub iterations: usize,
    /// HR/LR ratio; inferred from the inputs when absent.
    pub scale: Option<usize>,
    pub blocks: usize,
    pub features: usize,
    /// Side of the learned PSF.
    pub kernel_size: usize,
    /// Fully connected layers per observation branch.
    pub obs_depth: usize,
    /// Also apply the spatial loss to the stage-1 and stage-2 reconstructions.
    pub stage_losses: bool,
    pub schedule: UpdateSchedule,
    pub tail_init: TailInit,
    pub seed: u64,
    pub precision: Precision,
    /// Use this model instead of learning one (non-blind fusion).
    pub fixed_observation: Option<ObservationModel>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            spectral_norm: true,
            lambda_sn: 0.6,
            sn_iters: 1,
            sigma_gradient: SigmaGradient::Estimator,
            softmax_constraints: true,
            beta: 0.01,
            gamma: 30.0,
            lr: 2e-4,
            lr_halve_every: None,
            iterations: 1000,
            scale: None,
            blocks: 3,
            features: 64,
            kernel_size: 14,
            obs_depth: 1,
            stage_losses: false,
            schedule: UpdateSchedule::Joint,
            tail_init: TailInit::Zero,
            seed: 0,
            precision: Precision::F64,
            fixed_observation: None,
        }
    }
}

impl FusionConfig {
    /// Small architecture for desk-scale scenes.
    pub fn desk() -> Self {
        FusionConfig {
            blocks: 2,
            features: 16,
            kernel_size: 7,
            ..Self::default()
        }
    }

    /// Switches the loss terms and constraints to one rung of the ablation ladder.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (softmax, sn, lc, angle) = match variant {
            Variant::Baseline => (false, false, false, false),
            Variant::S => (true, false, false, false),
            Variant::Sn => (true, true, false, false),
            Variant::Snl => (true, true, true, false),
            Variant::Snla => (true, true, true, true),
        };
        let defaults = FusionConfig::default();
        self.softmax_constraints = softmax;
        self.spectral_norm = sn;
        self.gamma = if lc { defaults.gamma } else { 0.0 };
        self.beta = if angle { defaults.beta } else { 0.0 };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad(format!("beta and gamma must be non-negative, got {} and {}", self.beta, self.gamma));
        }
        if self.spectral_norm && !(self.lambda_sn > 0.0 && self.lambda_sn <= 1.0) {
            return bad(format!("lambda_sn must lie in (0, 1], got {}", self.lambda_sn));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.features == 0 || self.kernel_size == 0 || self.obs_depth == 0 {
            return bad("features, kernel_size and obs_depth must be positive".into());
        }
        if self.lr_halve_every == Some(0) {
            return bad("lr_halve_every must be positive".into());
        }
        if self.scale == Some(0) {
            return bad("scale must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_halve_every {
            Some(n) => self.lr * 0.5f64.powi((iteration / n as u64) as i32),
            None => self.lr,
        }
    }
}

/// Architecture derived from a config and the input shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub stages: [FusionNet; 3],
    pub observation: ObservationNet,
    pub scale: ScaleFactor,
    pub hr_width: usize,
    pub hr_height: usize,
}

impl Model {
    pub fn hsi_bands(&self) -> usize {
        self.observation.hsi_bands
    }

    pub fn msi_bands(&self) -> usize {
        self.observation.msi_bands
    }

    /// Same networks with power iteration frozen, for evaluation passes.
    pub fn frozen(&self) -> Model {
        let mut m = self.clone();
        for s in &mut m.stages {
            if let Some(sn) = &mut s.spectral_norm {
                sn.iters = 0;
            }
        }
        m
    }

    /// Checks that `(y, z)` are an LR-HSI/HR-MSI pair for this model.
    pub fn check_inputs(&self, y: &HyperCube, z: &HyperCube) -> Result<()> {
        let s = self.scale.get();
        let ok = y.bands() == self.hsi_bands()
            && z.bands() == self.msi_bands()
            && z.width() == self.hr_width
            && z.height() == self.hr_height
            && y.width() * s == z.width()
            && y.height() * s == z.height();
        if !ok {
            return Err(Error::shape(
                "three_stage_forward",
                format!(
                    "LR {} and HR {} do not fit a {}-band/{}-band model at scale {s} on a {}x{} grid",
                    y.shape_string(),
                    z.shape_string(),
                    self.hsi_bands(),
                    self.msi_bands(),
                    self.hr_width,
                    self.hr_height
                ),
            ));
        }
        Ok(())
    }
}

/// Infers the scale factor from an LR/HR pair and checks the optional configured value.
pub fn infer_scale(y: &HyperCube, z: &HyperCube, configured: Option<usize>) -> Result<ScaleFactor> {
    if y.width() == 0 || y.height() == 0 {
        return Err(Error::InvalidArgument("empty LR image".into()));
    }
    let s = z.width() / y.width();
    if s == 0 || y.width() * s != z.width() || y.height() * s != z.height() {
        return Err(Error::shape(
            "scale",
            format!("HR {} is not an integer multiple of LR {}", z.shape_string(), y.shape_string()),
        ));
    }
    if let Some(c) = configured {
        if c != s {
            return Err(Error::shape("scale", format!("configured scale {c} but inputs imply {s}")));
        }
    }
    ScaleFactor::new(s)
}

/// Trainable state: architecture, parameters with optimizer state, and the
/// number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfRegState {
    pub config: FusionConfig,
    pub model: Model,
    pub store: ParamStore,
    pub iteration: u64,
}

/// Intermediate and final products of one three-stage pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub x1: HyperCube,
    pub dx2: HyperCube,
    pub x2: HyperCube,
    pub dx3: HyperCube,
    pub x: HyperCube,
    pub y1: HyperCube,
    pub y2: HyperCube,
    pub y: HyperCube,
    pub z1: HyperCube,
    pub z2: HyperCube,
    pub z: HyperCube,
}

/// Graph handles of a three-stage pass.
#[derive(Clone, Copy, Debug)]
pub struct TraceNodes {
    pub y_obs: Var,
    pub z_obs: Var,
    pub psf: Var,
    pub srf: Var,
    pub x1: Var,
    pub dx2: Var,
    pub x2: Var,
    pub dx3: Var,
    pub x: Var,
    pub y1: Var,
    pub y2: Var,
    pub y: Var,
    pub z1: Var,
    pub z2: Var,
    pub z: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub spa: f64,
    pub spe: f64,
    pub lc: f64,
    pub total: f64,
}

/// Loss nodes of one pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub spa: Var,
    pub spe: Var,
    pub lc: Var,
    pub total: Var,
}

impl LossNodes {
    fn record(&self, g: &Graph, iteration: u64) -> LossRecord {
        LossRecord {
            iteration,
            spa: g.value(self.spa).item(),
            spe: g.value(self.spe).item(),
            lc: g.value(self.lc).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// `mean|Y^ - Y| + mean|Z^ - Z|`.
pub fn loss_spa(g: &mut Graph, y_hat: Var, y: Var, z_hat: Var, z: Var) -> Result<Var> {
    let dy = g.sub(y_hat, y)?;
    let dz = g.sub(z_hat, z)?;
    let ly = g.abs_mean(dy);
    let lz = g.abs_mean(dz);
    g.add(ly, lz)
}

/// Mean spectral angle in radians between the pixels of `y_hat` and `y`.
pub fn loss_spe(g: &mut Graph, y_hat: Var, y: Var) -> Result<Var> {
    let bands = g.value(y).dims4("loss_spe")?[1];
    if bands < 2 {
        return Err(Error::InvalidArgument(format!(
            "spectral angle needs at least 2 bands, got {bands}"
        )));
    }
    let cos = g.channel_cosine(y, y_hat, ANGLE_EPS)?;
    let angle = g.arccos_clamped(cos);
    Ok(g.mean(angle))
}

/// `mean|R Y - Z B S|`: agreement of the two routes from the inputs to the
/// LR-MSI grid under the current observation model.
pub fn loss_lc(g: &mut Graph, y: Var, z: Var, psf: Var, srf: Var, s: ScaleFactor) -> Result<Var> {
    let ry = observation::spectral_node(g, y, srf)?;
    let zbs = observation::spatial_node(g, z, psf, s)?;
    let d = g.sub(ry, zbs)?;
    Ok(g.abs_mean(d))
}

/// `L_spa + beta * L_spe + gamma * L_lc` on the final-stage reconstructions.
pub fn total_loss(g: &mut Graph, t: &TraceNodes, s: ScaleFactor, beta: f64, gamma: f64) -> Result<LossNodes> {
    let spa = loss_spa(g, t.y, t.y_obs, t.z, t.z_obs)?;
    let spe = loss_spe(g, t.y, t.y_obs)?;
    let lc = loss_lc(g, t.y_obs, t.z_obs, t.psf, t.srf, s)?;
    let b = g.scale(spe, beta);
    let c = g.scale(lc, gamma);
    let partial = g.add(spa, b)?;
    let total = g.add(partial, c)?;
    Ok(LossNodes { spa, spe, lc, total })
}

/// Records the three-stage pass on `g`; `frozen` disables power iteration.
pub fn forward_nodes(
    model: &Model,
    config: &FusionConfig,
    store: &mut ParamStore,
    g: &mut Graph,
    y: &HyperCube,
    z: &HyperCube,
    frozen: bool,
) -> Result<TraceNodes> {
    model.check_inputs(y, z)?;
    let model = if frozen { model.frozen() } else { model.clone() };
    let s = model.scale;
    let y_obs = g.constant(y.to_tensor());
    let z_obs = g.constant(z.to_tensor());
    let (psf, srf) = match &config.fixed_observation {
        Some(m) => (g.constant(m.psf.to_tensor()), g.constant(m.srf.to_tensor())),
        None => (
            model.observation.psf_node(g, store)?,
            model.observation.srf_node(g, store)?,
        ),
    };
    let observe = |g: &mut Graph, x: Var| -> Result<(Var, Var)> {
        Ok((
            observation::spatial_node(g, x, psf, s)?,
            observation::spectral_node(g, x, srf)?,
        ))
    };

    let [f1, f2, f3] = &model.stages;
    let x1 = f1.forward(g, store, y_obs, z_obs, s)?;
    let (y1, z1) = observe(g, x1)?;

    let ry = g.sub(y_obs, y1)?;
    let rz = g.sub(z_obs, z1)?;
    let dx2 = f2.forward(g, store, ry, rz, s)?;
    let x2 = g.add(x1, dx2)?;
    let (y2, z2) = observe(g, x2)?;

    let ry = g.sub(y_obs, y2)?;
    let rz = g.sub(z_obs, z2)?;
    let dx3 = f3.forward(g, store, ry, rz, s)?;
    let x = g.add(x2, dx3)?;
    let (yf, zf) = observe(g, x)?;

    Ok(TraceNodes {
        y_obs,
        z_obs,
        psf,
        srf,
        x1,
        dx2,
        x2,
        dx3,
        x,
        y1,
        y2,
        y: yf,
        z1,
        z2,
        z: zf,
    })
}

/// The configured objective: [`total_loss`] plus optional per-stage spatial terms.
pub fn training_loss(model: &Model, config: &FusionConfig, g: &mut Graph, t: &TraceNodes) -> Result<LossNodes> {
    let mut l = total_loss(g, t, model.scale, config.beta, config.gamma)?;
    if config.stage_losses {
        let a = loss_spa(g, t.y1, t.y_obs, t.z1, t.z_obs)?;
        let b = loss_spa(g, t.y2, t.y_obs, t.z2, t.z_obs)?;
        let ab = g.add(a, b)?;
        l.total = g.add(l.total, ab)?;
    }
    Ok(l)
}

impl SelfRegState {
    /// Builds and seeds all networks for inputs shaped like `(y, z)`.
    pub fn new(config: FusionConfig, y: &HyperCube, z: &HyperCube) -> Result<Self> {
        config.validate()?;
        let scale = infer_scale(y, z, config.scale)?;
        let sn = config.spectral_norm.then_some(SpectralNorm {
            lambda: config.lambda_sn,
            iters: config.sn_iters,
            sigma_gradient: config.sigma_gradient,
        });
        let stage = |i: usize| FusionNet {
            prefix: format!("f{i}"),
            hsi_bands: y.bands(),
            msi_bands: z.bands(),
            features: config.features,
            blocks: config.blocks,
            spectral_norm: sn,
        };
        let model = Model {
            stages: [stage(1), stage(2), stage(3)],
            observation: ObservationNet {
                kernel_size: config.kernel_size,
                hsi_bands: y.bands(),
                msi_bands: z.bands(),
                depth: config.obs_depth,
                softmax: config.softmax_constraints,
            },
            scale,
            hr_width: z.width(),
            hr_height: z.height(),
        };
        if let Some(fixed) = &config.fixed_observation {
            if fixed.scale != scale.get() || fixed.srf.rows != z.bands() || fixed.srf.cols != y.bands() {
                return Err(Error::shape(
                    "fixed_observation",
                    format!(
                        "model with scale {} and response {}x{} for inputs {} / {}",
                        fixed.scale,
                        fixed.srf.rows,
                        fixed.srf.cols,
                        y.shape_string(),
                        z.shape_string()
                    ),
                ));
            }
        }
        let mut rng = init::rng(config.seed);
        let mut store = ParamStore::new();
        for s in &model.stages {
            s.init(&mut store, &mut rng, config.tail_init);
        }
        model.observation.init(&mut store, &mut rng);
        Ok(SelfRegState {
            config,
            model,
            store,
            iteration: 0,
        })
    }

    /// Records the three-stage pass on `g`.
    pub fn forward_nodes(&mut self, g: &mut Graph, y: &HyperCube, z: &HyperCube, frozen: bool) -> Result<TraceNodes> {
        forward_nodes(&self.model, &self.config, &mut self.store, g, y, z, frozen)
    }

    fn losses(&self, g: &mut Graph, t: &TraceNodes) -> Result<LossNodes> {
        training_loss(&self.model, &self.config, g, t)
    }

    /// Three-stage pass without touching optimizer or power-iteration state.
    pub fn three_stage_forward(&mut self, y: &HyperCube, z: &HyperCube) -> Result<StageTrace> {
        let mut g = Graph::new();
        let t = self.forward_nodes(&mut g, y, z, true)?;
        let cube = |v: Var| HyperCube::from_tensor(g.value(v));
        Ok(StageTrace {
            x1: cube(t.x1)?,
            dx2: cube(t.dx2)?,
            x2: cube(t.x2)?,
            dx3: cube(t.dx3)?,
            x: cube(t.x)?,
            y1: cube(t.y1)?,
            y2: cube(t.y2)?,
            y: cube(t.y)?,
            z1: cube(t.z1)?,
            z2: cube(t.z2)?,
            z: cube(t.z)?,
        })
    }

    /// Loss terms at the current parameters, without updating anything.
    pub fn evaluate(&mut self, y: &HyperCube, z: &HyperCube) -> Result<LossRecord> {
        let mut g = Graph::new();
        let t = self.forward_nodes(&mut g, y, z, true)?;
        let l = self.losses(&mut g, &t)?;
        Ok(l.record(&g, self.iteration))
    }

    /// Records the pass and its losses; `frozen` disables power iteration.
    pub fn loss_graph(&mut self, y: &HyperCube, z: &HyperCube, frozen: bool) -> Result<(Graph, TraceNodes, LossNodes)> {
        let mut g = Graph::new();
        let t = self.forward_nodes(&mut g, y, z, frozen)?;
        let l = self.losses(&mut g, &t)?;
        Ok((g, t, l))
    }

    /// One optimizer iteration; returns the losses before the update.
    pub fn step(&mut self, y: &HyperCube, z: &HyperCube) -> Result<LossRecord> {
        let (mut g, _, l) = self.loss_graph(y, z, false)?;
        let record = l.record(&g, self.iteration);
        if !record.total.is_finite() {
            let culprit = g.first_non_finite().unwrap_or_else(|| "the loss".into());
            return Err(Error::NonFinite(format!("{culprit} at iteration {}", self.iteration)));
        }
        g.backward(l.total)?;
        self.store.absorb_grads(&g)?;
        let adam = Adam::new(self.config.lr_at(self.iteration));
        match self.config.schedule {
            UpdateSchedule::Joint => self.store.adam_step(&adam, |_| true),
            UpdateSchedule::Alternating => {
                let obs_turn = self.iteration % 2 == 1;
                self.store.adam_step(&adam, |n| ObservationNet::is_param(n) == obs_turn)
            }
        }
        self.iteration += 1;
        Ok(record)
    }

    /// The blur kernel in use: learned, or the fixed one.
    pub fn psf(&self) -> Result<PsfKernel> {
        match &self.config.fixed_observation {
            Some(m) => Ok(m.psf.clone()),
            None => self.model.observation.psf(&self.store),
        }
    }

    pub fn srf(&self) -> Result<SrfMatrix> {
        match &self.config.fixed_observation {
            Some(m) => Ok(m.srf.clone()),
            None => self.model.observation.srf(&self.store),
        }
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        Ok(ObservationModel {
            scale: self.model.scale.get(),
            psf: self.psf()?,
            srf: self.srf()?,
        })
    }

    /// Runs `iterations` steps, calling `observer` after each.
    pub fn fit(
        &mut self,
        y: &HyperCube,
        z: &HyperCube,
        iterations: usize,
        mut observer: impl FnMut(&SelfRegState, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut history = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let r = self.step(y, z)?;
            observer(self, &r)?;
            history.push(r);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: SelfRegState,
    pub xhat: HyperCube,
    pub psf: PsfKernel,
    pub srf: SrfMatrix,
    /// Losses before each update.
    pub history: Vec<LossRecord>,
    /// Losses at the returned parameters.
    pub final_loss: LossRecord,
}

/// Trains from a single LR-HSI/HR-MSI pair for `config.iterations` steps.
pub fn train(y: &HyperCube, z: &HyperCube, config: FusionConfig) -> Result<TrainOutput> {
    train_with(y, z, config, |_, _| Ok(()))
}

pub fn train_with(
    y: &HyperCube,
    z: &HyperCube,
    config: FusionConfig,
    observer: impl FnMut(&SelfRegState, &LossRecord) -> Result<()>,
) -> Result<TrainOutput> {
    let iterations = config.iterations;
    let mut state = SelfRegState::new(config, y, z)?;
    let history = state.fit(y, z, iterations, observer)?;
    let final_loss = state.evaluate(y, z)?;
    let trace = state.three_stage_forward(y, z)?;
    Ok(TrainOutput {
        psf: state.psf()?,
        srf: state.srf()?,
        xhat: trace.x,
        state,
        history,
        final_loss,
    })
}

/// Evaluates [`loss_lc`] on plain cubes.
pub fn local_consistency(y: &HyperCube, z: &HyperCube, psf: &PsfKernel, srf: &SrfMatrix, s: ScaleFactor) -> Result<f64> {
    let mut g = Graph::new();
    let yv = g.constant(y.to_tensor());
    let zv = g.constant(z.to_tensor());
    let p = g.constant(psf.to_tensor());
    let r = g.constant(srf.to_tensor());
    let l = loss_lc(&mut g, yv, zv, p, r, s)?;
    Ok(g.value(l).item())
}

/// Evaluates [`loss_spa`] on plain cubes.
pub fn spatial_loss(y_hat: &HyperCube, y: &HyperCube, z_hat: &HyperCube, z: &HyperCube) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = [y_hat, y, z_hat, z].iter().map(|c| g.constant(c.to_tensor())).collect();
    let l = loss_spa(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    Ok(g.value(l).item())
}

/// Evaluates [`loss_spe`] on plain cubes.
pub fn spectral_loss(y_hat: &HyperCube, y: &HyperCube) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(y_hat.to_tensor());
    let b = g.constant(y.to_tensor());
    let l = loss_spe(&mut g, a, b)?;
    Ok(g.value(l).item())
}
