use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use hsfusion::graph::{Graph, Var};
use hsfusion::init::{self, SeededRng};
use hsfusion::io::{generate_scene, SceneSpec, SyntheticScene};
use hsfusion::selfreg::{self, local_consistency, spatial_loss, spectral_loss, training_loss, ANGLE_EPS};
use hsfusion::{
    degrade_spatial, degrade_spectral, gaussian_psf, train, train_with, Error, FusionConfig, HyperCube, ScaleFactor,
    SelfRegState, TailInit,
};
use proptest::prelude::*;

fn cube(rng: &mut SeededRng, w: usize, h: usize, bands: usize) -> HyperCube {
    HyperCube::new(w, h, bands, init::uniform(rng, &[bands * w * h], 1.0).into_data()).unwrap()
}

fn small_scene(seed: u64) -> SyntheticScene {
    generate_scene(&SceneSpec {
        width: 8,
        height: 8,
        bands: 4,
        msi_bands: 2,
        scale: 2,
        psf_size: 3,
        psf_sigma: 0.8,
        seed,
    })
    .unwrap()
}

fn small_config(seed: u64) -> FusionConfig {
    FusionConfig {
        blocks: 1,
        features: 4,
        kernel_size: 3,
        iterations: 5,
        lr: 1e-2,
        seed,
        ..FusionConfig::default()
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn shifted(c: &HyperCube, offset: f64) -> HyperCube {
    HyperCube::new(c.width(), c.height(), c.bands(), c.data().iter().map(|v| v + offset).collect()).unwrap()
}

fn angle_oracle(a: &HyperCube, b: &HyperCube) -> f64 {
    let n = a.pixels();
    let total: f64 = (0..n)
        .map(|p| {
            let (x, y) = (a.spectrum(p), b.spectrum(p));
            let dot: f64 = x.iter().zip(&y).map(|(u, v)| u * v).sum();
            let nx = x.iter().map(|u| u * u).sum::<f64>().sqrt();
            let ny = y.iter().map(|u| u * u).sum::<f64>().sqrt();
            (dot / (nx * ny + ANGLE_EPS)).clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos()
        })
        .sum();
    total / n as f64
}

#[test]
fn spatial_loss_trivial_cases() {
    let mut rng = init::rng(1);
    let y = cube(&mut rng, 3, 3, 4);
    let z = cube(&mut rng, 6, 6, 2);
    assert_eq!(spatial_loss(&y, &y, &z, &z).unwrap(), 0.0);
    let l = spatial_loss(&shifted(&y, 0.1), &y, &z, &z).unwrap();
    assert!((l - 0.1).abs() <= 1e-12);
    assert!(spatial_loss(&y, &z, &z, &z).is_err());
}

#[test]
fn spatial_loss_matches_direct_sum() {
    let mut rng = init::rng(2);
    let (y, yh) = (cube(&mut rng, 5, 4, 3), cube(&mut rng, 5, 4, 3));
    let (z, zh) = (cube(&mut rng, 10, 8, 2), cube(&mut rng, 10, 8, 2));
    let l = spatial_loss(&yh, &y, &zh, &z).unwrap();
    let oracle = mean_abs(yh.data(), y.data()) + mean_abs(zh.data(), z.data());
    assert!((l - oracle).abs() <= 1e-12);
}

#[test]
fn spectral_loss_examples() {
    let y = HyperCube::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
    let orth = HyperCube::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
    assert!((spectral_loss(&orth, &y).unwrap() - FRAC_PI_2).abs() <= 1e-12);

    let diag = HyperCube::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
    assert!((spectral_loss(&y, &diag).unwrap() - FRAC_PI_4).abs() <= 1e-9);

    let mut rng = init::rng(3);
    let pos = HyperCube::new(4, 4, 5, init::uniform(&mut rng, &[80], 1.0).data().iter().map(|v| v.abs() + 0.1).collect())
        .unwrap();
    assert!(spectral_loss(&pos, &pos).unwrap() <= 5e-4);

    let single = HyperCube::new(2, 2, 1, vec![1.0; 4]).unwrap();
    assert!(spectral_loss(&single, &single).is_err());
}

#[test]
fn spectral_loss_matches_pixel_oracle() {
    let mut rng = init::rng(4);
    let (a, b) = (cube(&mut rng, 4, 3, 5), cube(&mut rng, 4, 3, 5));
    let l = spectral_loss(&a, &b).unwrap();
    assert!((l - angle_oracle(&b, &a)).abs() <= 1e-12);
}

#[test]
fn local_consistency_vanishes_at_the_true_model() {
    for seed in 0..5 {
        let scene = small_scene(seed);
        let l = local_consistency(&scene.y, &scene.z, &scene.psf, &scene.srf, scene.scale).unwrap();
        assert!(l <= 1e-10, "seed {seed}: {l}");
    }
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    let l = local_consistency(&scene.y, &scene.z, &scene.psf, &scene.srf, scene.scale).unwrap();
    assert!(l <= 1e-10, "{l}");
}

#[test]
fn local_consistency_is_positive_for_a_wrong_kernel() {
    let scene = small_scene(5);
    let wrong = gaussian_psf(3, 0.3).unwrap();
    let l = local_consistency(&scene.y, &scene.z, &wrong, &scene.srf, scene.scale).unwrap();
    assert!(l > 1e-6, "{l}");
}

#[test]
fn local_consistency_matches_composed_degradations() {
    let mut rng = init::rng(6);
    let y = cube(&mut rng, 4, 4, 5);
    let z = cube(&mut rng, 8, 8, 2);
    let psf = gaussian_psf(5, 1.3).unwrap();
    let s = ScaleFactor::new(2).unwrap();
    let srf = hsfusion::SrfMatrix::new(2, 5, {
        let raw: Vec<f64> = init::uniform(&mut rng, &[10], 1.0).data().iter().map(|v| v.abs() + 0.05).collect();
        let (a, b) = raw.split_at(5);
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        a.iter().map(|v| v / sa).chain(b.iter().map(|v| v / sb)).collect()
    })
    .unwrap();
    let ry = degrade_spectral(&y, &srf).unwrap();
    let zb = degrade_spatial(&z, &psf, s).unwrap();
    let oracle = mean_abs(ry.data(), zb.data());
    let l = local_consistency(&y, &z, &psf, &srf, s).unwrap();
    assert!((l - oracle).abs() <= 1e-10);
}

fn losses_at(state: &mut SelfRegState, scene: &SyntheticScene) -> (f64, f64, f64, f64) {
    let (g, _, l) = state.loss_graph(&scene.y, &scene.z, true).unwrap();
    let v = |x: Var| g.value(x).item();
    (v(l.spa), v(l.spe), v(l.lc), v(l.total))
}

#[test]
fn total_loss_is_the_weighted_composition() {
    let scene = small_scene(7);
    let config = FusionConfig {
        tail_init: TailInit::HeUniform,
        beta: 0.37,
        gamma: 4.5,
        ..small_config(7)
    };
    let mut state = SelfRegState::new(config, &scene.y, &scene.z).unwrap();
    let (spa, spe, lc, total) = losses_at(&mut state, &scene);
    assert!((total - (spa + 0.37 * spe + 4.5 * lc)).abs() <= 1e-12);

    let trace = state.three_stage_forward(&scene.y, &scene.z).unwrap();
    assert!((spa - spatial_loss(&trace.y, &scene.y, &trace.z, &scene.z).unwrap()).abs() <= 1e-12);
    assert!((spe - spectral_loss(&trace.y, &scene.y).unwrap()).abs() <= 1e-12);
    let model = state.observation_model().unwrap();
    let direct = local_consistency(&scene.y, &scene.z, &model.psf, &model.srf, scene.scale).unwrap();
    assert!((lc - direct).abs() <= 1e-12);

    let mut zero = state.clone();
    zero.config.beta = 0.0;
    zero.config.gamma = 0.0;
    let (spa0, _, _, total0) = losses_at(&mut zero, &scene);
    assert_eq!(spa0, total0);
}

#[test]
fn perfect_reconstruction_costs_only_the_angle_floor() {
    let scene = small_scene(8);
    let mut g = Graph::new();
    let y = g.constant(scene.y.to_tensor());
    let z = g.constant(scene.z.to_tensor());
    let psf = g.constant(scene.psf.to_tensor());
    let srf = g.constant(scene.srf.to_tensor());
    let spa = selfreg::loss_spa(&mut g, y, y, z, z).unwrap();
    let spe = selfreg::loss_spe(&mut g, y, y).unwrap();
    let lc = selfreg::loss_lc(&mut g, y, z, psf, srf, scene.scale).unwrap();
    let beta = 0.01;
    let total = g.value(spa).item() + beta * g.value(spe).item() + 30.0 * g.value(lc).item();
    assert!(total <= 5e-4 * beta, "{total}");
}

#[test]
fn zero_later_stages_leave_the_first_estimate() {
    let scene = small_scene(9);
    let mut state = SelfRegState::new(small_config(9), &scene.y, &scene.z).unwrap();
    let head = state.model.stages[0].tail_name();
    let shape = state.store.value(&head).unwrap().shape().to_vec();
    state.store.insert(&head, init::he_uniform(&mut init::rng(1), &shape));
    let t = state.three_stage_forward(&scene.y, &scene.z).unwrap();
    assert_ne!(t.x1, HyperCube::zeros(8, 8, 4));
    assert_eq!(t.x, t.x1);
    assert_eq!((t.x.width(), t.x.height(), t.x.bands()), (8, 8, 4));
    assert_eq!((t.y.width(), t.y.height(), t.y.bands()), (4, 4, 4));
    assert_eq!((t.z.width(), t.z.height(), t.z.bands()), (8, 8, 2));
}

#[test]
fn stage_sums_are_exact() {
    let scene = small_scene(10);
    let config = FusionConfig {
        tail_init: TailInit::HeUniform,
        ..small_config(10)
    };
    let mut state = SelfRegState::new(config, &scene.y, &scene.z).unwrap();
    for _ in 0..3 {
        let t = state.three_stage_forward(&scene.y, &scene.z).unwrap();
        let sum = |a: &HyperCube, b: &HyperCube| -> Vec<f64> { a.data().iter().zip(b.data()).map(|(u, v)| u + v).collect() };
        assert_eq!(t.x2.data(), sum(&t.x1, &t.dx2).as_slice());
        assert_eq!(t.x.data(), sum(&t.x2, &t.dx3).as_slice());
        state.step(&scene.y, &scene.z).unwrap();
    }
}

#[test]
fn zero_iterations_return_the_zero_cube() {
    let scene = small_scene(11);
    let out = train(&scene.y, &scene.z, FusionConfig { iterations: 0, ..small_config(11) }).unwrap();
    assert_eq!(out.xhat, HyperCube::zeros(8, 8, 4));
    assert!(out.history.is_empty());
}

#[test]
fn local_consistency_ignores_fusion_weights() {
    let scene = small_scene(12);
    let mut state = SelfRegState::new(small_config(12), &scene.y, &scene.z).unwrap();
    let (_, _, before, _) = losses_at(&mut state, &scene);
    let names: Vec<String> = state.store.names().filter(|n| n.starts_with('f')).map(String::from).collect();
    let mut rng = init::rng(3);
    for name in names {
        let p = state.store.get_mut(&name).unwrap();
        let noise = init::uniform(&mut rng, p.value.shape(), 0.5);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let (_, _, after, _) = losses_at(&mut state, &scene);
    assert_eq!(before.to_bits(), after.to_bits());
}

#[test]
fn local_consistency_stays_zero_with_the_true_model_frozen() {
    let scene = small_scene(13);
    let config = FusionConfig {
        fixed_observation: Some(scene.model()),
        iterations: 20,
        ..small_config(13)
    };
    let out = train_with(&scene.y, &scene.z, config, |_, r| {
        assert!(r.lc <= 1e-10, "{}", r.lc);
        Ok(())
    })
    .unwrap();
    assert!(out.final_loss.lc <= 1e-10);
    assert_eq!(out.psf, scene.psf);
}

#[test]
fn training_is_deterministic() {
    let scene = small_scene(14);
    let a = train(&scene.y, &scene.z, small_config(14)).unwrap();
    let b = train(&scene.y, &scene.z, small_config(14)).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.xhat, b.xhat);
    assert_eq!(a.history, b.history);
}

#[test]
fn parameter_count_is_constant_during_training() {
    let scene = small_scene(15);
    let mut state = SelfRegState::new(small_config(15), &scene.y, &scene.z).unwrap();
    let before = (state.store.len(), state.store.numel());
    state.fit(&scene.y, &scene.z, 3, |_, _| Ok(())).unwrap();
    assert_eq!((state.store.len(), state.store.numel()), before);
    assert_eq!(state.iteration, 3);
}

#[test]
fn non_finite_inputs_abort_with_a_diagnostic() {
    let scene = small_scene(16);
    let mut y = scene.y.clone();
    y.data_mut()[3] = f64::NAN;
    let err = train(&y, &scene.z, small_config(16)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn inconsistent_shapes_are_rejected() {
    let scene = small_scene(17);
    let z = HyperCube::zeros(7, 8, 2);
    assert!(SelfRegState::new(small_config(17), &scene.y, &z).is_err());
    let config = FusionConfig {
        scale: Some(4),
        ..small_config(17)
    };
    assert!(SelfRegState::new(config, &scene.y, &scene.z).is_err());
    let mut state = SelfRegState::new(small_config(17), &scene.y, &scene.z).unwrap();
    assert!(state.three_stage_forward(&scene.y, &HyperCube::zeros(8, 8, 3)).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let scene = small_scene(18);
    for bad in [
        FusionConfig { beta: -1.0, ..small_config(0) },
        FusionConfig { lambda_sn: 1.5, ..small_config(0) },
        FusionConfig { lr: 0.0, ..small_config(0) },
    ] {
        assert!(SelfRegState::new(bad, &scene.y, &scene.z).is_err());
    }
}

#[test]
fn stage_losses_add_the_earlier_reconstructions() {
    let scene = small_scene(19);
    let config = FusionConfig {
        tail_init: TailInit::HeUniform,
        stage_losses: true,
        ..small_config(19)
    };
    let mut state = SelfRegState::new(config, &scene.y, &scene.z).unwrap();
    let t = state.three_stage_forward(&scene.y, &scene.z).unwrap();
    let extra = spatial_loss(&t.y1, &scene.y, &t.z1, &scene.z).unwrap() + spatial_loss(&t.y2, &scene.y, &t.z2, &scene.z).unwrap();
    let mut g = Graph::new();
    let nodes = state.forward_nodes(&mut g, &scene.y, &scene.z, true).unwrap();
    let plain = selfreg::total_loss(&mut g, &nodes, scene.scale, state.config.beta, state.config.gamma).unwrap();
    let with = training_loss(&state.model, &state.config, &mut g, &nodes).unwrap();
    let diff = g.value(with.total).item() - g.value(plain.total).item();
    assert!((diff - extra).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn learned_model_stays_on_the_simplex(seed in any::<u64>(), steps in 0usize..6, lr in 1e-3f64..0.5) {
        let scene = small_scene(seed % 1000);
        let config = FusionConfig { lr, ..small_config(seed) };
        let mut state = SelfRegState::new(config, &scene.y, &scene.z).unwrap();
        let check = |state: &SelfRegState| -> Result<(), TestCaseError> {
            let psf = state.psf().unwrap();
            prop_assert!((psf.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(psf.weights.iter().all(|&w| w >= 0.0));
            let srf = state.srf().unwrap();
            for i in 0..srf.rows {
                prop_assert!((srf.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(srf.row(i).iter().all(|&w| w >= 0.0));
            }
            Ok(())
        };
        check(&state)?;
        for _ in 0..steps {
            let r = state.step(&scene.y, &scene.z).unwrap();
            prop_assert!(r.total.is_finite() && r.spa.is_finite() && r.spe.is_finite() && r.lc.is_finite());
            check(&state)?;
        }
    }
}
