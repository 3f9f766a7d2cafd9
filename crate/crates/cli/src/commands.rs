use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use hsfusion::io::{self, Dtype, SceneSpec};
use hsfusion::metrics;
use hsfusion::{
    kernels, FusionConfig, GradcheckOptions, HyperCube, LossRecord, Precision, ScaleFactor, SelfRegState, Variant,
};

use crate::config;
use crate::error::{usage, CliError, CliResult};
use crate::{EvalArgs, GradcheckArgs, InspectArgs, SimulateArgs, TrainArgs, UpsampleArgs};

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn file_error(path: &Path, e: hsfusion::Error) -> CliError {
    match e {
        hsfusion::Error::Io(source) => CliError::File {
            path: path.display().to_string(),
            source,
        },
        other => other.into(),
    }
}

fn read_cube(path: &Path) -> CliResult<HyperCube> {
    io::read_cube(path).map_err(|e| file_error(path, e))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::File {
        path: dir.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    io::write_atomic(path, text.as_bytes()).map_err(|e| file_error(path, e))
}

fn parse_dtype(s: Option<&str>) -> CliResult<Dtype> {
    match s.unwrap_or("f64") {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(usage(format!("dtype must be f32 or f64, got '{other}'"))),
    }
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| usage(format!("unknown variant '{s}' (expected baseline, s, sn, snl or snla)")))
}

pub fn simulate(flags: SimulateArgs) -> CliResult<()> {
    let a = config::resolve(&flags, flags.config.as_deref())?;
    let d = SceneSpec::default();
    let spec = SceneSpec {
        width: a.width.unwrap_or(d.width),
        height: a.height.unwrap_or(d.height),
        bands: a.bands.unwrap_or(d.bands),
        msi_bands: a.msi_bands.unwrap_or(d.msi_bands),
        scale: a.scale.unwrap_or(d.scale),
        psf_size: a.psf_size.unwrap_or(d.psf_size),
        psf_sigma: a.psf_sigma.unwrap_or(d.psf_sigma),
        seed: a.seed.unwrap_or(d.seed),
    };
    let dtype = parse_dtype(a.dtype.as_deref())?;
    let out = required(a.out, "out")?;
    let scene = io::generate_scene(&spec)?;
    make_dir(&out)?;
    for (name, cube) in [("X.hcube", &scene.x), ("Y.hcube", &scene.y), ("Z.hcube", &scene.z)] {
        let path = out.join(name);
        io::write_cube(&path, cube, dtype).map_err(|e| file_error(&path, e))?;
    }
    let model_path = out.join("model.json");
    io::write_model(&model_path, &scene.model()).map_err(|e| file_error(&model_path, e))?;
    println!(
        "simulated X {} Y {} Z {} into {}",
        scene.x.shape_string(),
        scene.y.shape_string(),
        scene.z.shape_string(),
        out.display()
    );
    Ok(())
}

/// Preset, then variant, then config-file fields, then explicit flags.
fn training_config(a: &TrainArgs, origin: &str) -> CliResult<FusionConfig> {
    let mut cfg = match a.preset.as_deref().unwrap_or("paper") {
        "paper" => FusionConfig::default(),
        "desk" => FusionConfig::desk(),
        other => return Err(usage(format!("preset must be paper or desk, got '{other}'"))),
    };
    if let Some(v) = &a.variant {
        cfg = cfg.with_variant(parse_variant(v)?);
    }
    cfg = config::patch(&cfg, &a.extra, origin)?;
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    take!(iterations, seed, lr, lambda_sn, beta, gamma, blocks, features, kernel_size);
    cfg.validate()?;
    Ok(cfg)
}

fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iteration,l_spa,l_spe,l_lc,total\n");
    for r in history {
        writeln!(s, "{},{:e},{:e},{:e},{:e}", r.iteration, r.spa, r.spe, r.lc, r.total).expect("string write");
    }
    s
}

pub fn train(flags: TrainArgs) -> CliResult<()> {
    let a = config::resolve(&flags, flags.config.as_deref())?;
    let origin = flags.config.as_ref().map_or_else(|| "<flags>".to_string(), |p| p.display().to_string());
    let cfg = training_config(&a, &origin)?;
    let y_path = required(a.y.clone(), "y")?;
    let z_path = required(a.z.clone(), "z")?;
    let out = required(a.out.clone(), "out")?;
    let y = read_cube(&y_path)?;
    let z = read_cube(&z_path)?;
    let log_every = a.log_every.unwrap_or(100);
    let dtype = match cfg.precision {
        Precision::F32 => Dtype::F32,
        Precision::F64 => Dtype::F64,
    };
    make_dir(&out)?;

    let mut stderr = std::io::stderr().lock();
    let result = hsfusion::train_with(&y, &z, cfg, |_, r| {
        if log_every > 0 && r.iteration % log_every as u64 == 0 {
            // progress output is best effort
            let _ = writeln!(
                stderr,
                "iter {} total {:.6e} spa {:.6e} spe {:.6e} lc {:.6e}",
                r.iteration, r.total, r.spa, r.spe, r.lc
            );
        }
        Ok(())
    })?;

    let xhat_path = out.join("xhat.hcube");
    io::write_cube(&xhat_path, &result.xhat, dtype).map_err(|e| file_error(&xhat_path, e))?;
    let ckpt_path = out.join("checkpoint.bin");
    io::write_checkpoint(&ckpt_path, &result.state).map_err(|e| file_error(&ckpt_path, e))?;
    let model_path = out.join("learned_model.json");
    io::write_model(&model_path, &result.state.observation_model()?).map_err(|e| file_error(&model_path, e))?;
    write_text(&out.join("loss.csv"), &loss_csv(&result.history))?;

    let initial = result.history.first().map_or(result.final_loss.total, |r| r.total);
    println!(
        "iterations={} initial_total={} final_total={} final_spa={} final_lc={}",
        result.state.iteration,
        metrics::sig6(initial),
        metrics::sig6(result.final_loss.total),
        metrics::sig6(result.final_loss.spa),
        metrics::sig6(result.final_loss.lc)
    );
    Ok(())
}

pub fn eval(flags: EvalArgs) -> CliResult<()> {
    let a = config::resolve(&flags, flags.config.as_deref())?;
    let pred_path = required(a.pred, "pred")?;
    let gt_path = required(a.gt, "gt")?;
    let scale = required(a.scale, "scale")?;
    let pred = read_cube(&pred_path)?;
    let gt = read_cube(&gt_path)?;
    let report = metrics::evaluate(&pred, &gt, scale)?;
    if let Some(out) = a.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_text(&out, &json)?;
    }
    print!("{}", report.to_kv_text());
    Ok(())
}

pub fn inspect(flags: InspectArgs) -> CliResult<()> {
    let a = config::resolve(&flags, flags.config.as_deref())?;
    let path = required(a.checkpoint, "checkpoint")?;
    let state = io::read_checkpoint(&path).map_err(|e| file_error(&path, e))?;
    inspect_state(&state)
}

fn inspect_state(state: &SelfRegState) -> CliResult<()> {
    println!("config={}", serde_json::to_string(&state.config).expect("config serializes"));
    println!("iteration={}", state.iteration);
    let m = &state.model;
    println!(
        "model hr={}x{} hsi_bands={} msi_bands={} scale={}",
        m.hr_width,
        m.hr_height,
        m.hsi_bands(),
        m.msi_bands(),
        m.scale.get()
    );
    let count = |prefix: &str| -> usize {
        state
            .store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    };
    for stage in &m.stages {
        println!("params {}={}", stage.prefix, count(&format!("{}.", stage.prefix)));
    }
    println!("params observation={}", count("obs."));
    println!("params total={}", state.store.numel());
    let psf = state.psf()?;
    let (r, c) = psf.center_of_mass();
    println!(
        "psf size={} center_of_mass=({},{}) entropy={} max_weight={}",
        psf.size,
        metrics::sig6(r),
        metrics::sig6(c),
        metrics::sig6(psf.entropy()),
        metrics::sig6(psf.weights.iter().copied().fold(0.0, f64::max))
    );
    let srf = state.srf()?;
    for i in 0..srf.rows {
        let row: Vec<String> = srf.row(i).iter().map(|&w| metrics::sig6(w)).collect();
        println!("srf row{i}=[{}]", row.join(","));
    }
    Ok(())
}

pub fn gradcheck(flags: GradcheckArgs) -> CliResult<()> {
    let a = config::resolve(&flags, flags.config.as_deref())?;
    let d = GradcheckOptions::default();
    let opts = GradcheckOptions {
        step: a.step.unwrap_or(d.step),
        tolerance: a.tolerance.unwrap_or(d.tolerance),
        ..d
    };
    let seed = a.seed.unwrap_or(0);
    let report = hsfusion::gradcheck(seed, opts)?;
    for p in &report.params {
        println!(
            "param {} checked={} skipped={} failures={} max_rel_error={:.3e}",
            p.name, p.checked, p.skipped, p.failures, p.max_rel_error
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    println!(
        "gradcheck seed={seed} checked={} skipped={} failures={} max_rel_error={:.3e} {}",
        report.checked(),
        report.skipped(),
        report.failures(),
        report.max_rel_error(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if !report.passed() {
        return Err(CliError::GradcheckFailed {
            failures: report.failures(),
            checked: report.checked(),
            max_rel_error: report.max_rel_error(),
        });
    }
    Ok(())
}

pub fn upsample(flags: UpsampleArgs) -> CliResult<()> {
    let a = config::resolve(&flags, flags.config.as_deref())?;
    let input: PathBuf = required(a.input, "input")?;
    let scale = ScaleFactor::new(required(a.scale, "scale")?)?;
    let out = required(a.out, "out")?;
    let dtype = parse_dtype(a.dtype.as_deref())?;
    let cube = read_cube(&input)?;
    let up = HyperCube::from_tensor(&kernels::upsample_bilinear(&cube.to_tensor(), scale.get())?)?;
    io::write_cube(&out, &up, dtype).map_err(|e| file_error(&out, e))?;
    println!("upsampled {} to {}", cube.shape_string(), up.shape_string());
    Ok(())
}
