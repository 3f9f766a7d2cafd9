//! Finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::fusion::TailInit;
use crate::graph::{compensated_sum, Graph, Var};
use crate::io::{generate_scene, SceneSpec};
use crate::optim::ParamStore;
use crate::selfreg::{forward_nodes, training_loss, FusionConfig, SelfRegState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Bound on `|g - g_fd| / max(|g|, |g_fd|, floor)`.
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
        }
    }
}

/// A coordinate outside tolerance. `rel_error_coarse` repeats the comparison
/// at ten times the step, which separates a wrong gradient (both large) from
/// rounding noise in the difference quotient (coarse error small).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub rel_error_coarse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn failures(&self) -> usize {
        self.params.iter().map(|p| p.failures).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0 && self.checked() > 0
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `build` against central
/// differences, for every coordinate of every parameter in `store`.
///
/// `build` must be a pure function of the store's values.
pub fn check_gradients<F>(store: &mut ParamStore, opts: GradcheckOptions, mut build: F) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    let loss_value = g.value(loss).item();
    g.backward(loss)?;
    store.zero_grads();
    store.absorb_grads(&g)?;
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<Evaluation> {
        let mut g = Graph::new();
        let loss = build(store, &mut g)?;
        Ok((g.summands(loss), g.kink_signature()))
    };

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let analytic = store.get(&name)?.grad.clone();
        let mut report = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            failures: 0,
            max_rel_error: 0.0,
            worst_index: None,
            mismatches: Vec::new(),
        };
        for i in 0..analytic.len() {
            let a = analytic.data()[i];
            let Some(fd) = central_difference(store, &name, i, opts.step, &mut eval)? else {
                report.skipped += 1;
                continue;
            };
            let err = relative_error(a, fd, opts.floor);
            report.checked += 1;
            if err > opts.tolerance {
                report.failures += 1;
                let coarse = central_difference(store, &name, i, 10.0 * opts.step, &mut eval)?;
                report.mismatches.push(Mismatch {
                    index: i,
                    analytic: a,
                    numeric: fd,
                    rel_error: err,
                    rel_error_coarse: coarse.map_or(f64::NAN, |c| relative_error(a, c, opts.floor)),
                });
            }
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_index = Some(i);
            }
        }
        params.push(report);
    }
    store.zero_grads();
    Ok(GradcheckReport {
        options: opts,
        loss: loss_value,
        params,
    })
}

type Evaluation = (Vec<f64>, Vec<i8>);

/// Central difference of the loss along one coordinate, or `None` when the two
/// probes fall on different smooth pieces.
fn central_difference(
    store: &mut ParamStore,
    name: &str,
    i: usize,
    step: f64,
    eval: &mut impl FnMut(&ParamStore) -> Result<Evaluation>,
) -> Result<Option<f64>> {
    let orig = store.get(name)?.value.data()[i];
    store.get_mut(name)?.value.data_mut()[i] = orig + step;
    let plus = eval(store);
    store.get_mut(name)?.value.data_mut()[i] = orig - step;
    let minus = eval(store);
    store.get_mut(name)?.value.data_mut()[i] = orig;
    let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);
    if sig_plus != sig_minus {
        return Ok(None);
    }
    if plus.len() != minus.len() {
        return Err(Error::InvalidArgument("loss structure depends on parameter values".into()));
    }
    Ok(Some(compensated_sum(plus.iter().zip(&minus).map(|(p, m)| p - m)) / (2.0 * step)))
}

/// Small scene and configuration used by the built-in check.
pub fn gradcheck_problem(seed: u64) -> Result<(HyperCube, HyperCube, FusionConfig)> {
    let scene = generate_scene(&SceneSpec {
        width: 8,
        height: 8,
        bands: 4,
        msi_bands: 2,
        scale: 2,
        psf_size: 3,
        psf_sigma: 0.8,
        seed,
    })?;
    let config = FusionConfig {
        blocks: 1,
        features: 8,
        kernel_size: 4,
        tail_init: TailInit::HeUniform,
        seed,
        ..FusionConfig::default()
    };
    Ok((scene.y, scene.z, config))
}

/// Full objective gradient check on the three-stage model plus observation
/// networks. Power-iteration vectors are warmed up and then held fixed so the
/// objective is a deterministic function of the parameters.
pub fn gradcheck(seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (y, z, config) = gradcheck_problem(seed)?;
    let mut state = SelfRegState::new(config, &y, &z)?;
    for _ in 0..30 {
        state.loss_graph(&y, &z, false)?;
    }
    let SelfRegState {
        config, model, store, ..
    } = &mut state;
    let frozen = model.frozen();
    check_gradients(store, opts, |store, g| {
        // forward_nodes needs the store mutably only for power iteration,
        // which the frozen model never runs.
        let mut scratch = store.clone();
        let t = forward_nodes(&frozen, config, &mut scratch, g, &y, &z, true)?;
        Ok(training_loss(&frozen, config, g, &t)?.total)
    })
}
