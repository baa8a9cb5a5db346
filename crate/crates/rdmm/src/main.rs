//! Command-line front end: scene generation, registration, evaluation
//! and a finite-difference gradient audit.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or file-format error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use rdmm::dynamics::GeodesicState;
use rdmm::field::GridSpec;
use rdmm::io::{self, FigureKind, RunManifest, TensorData};
use rdmm::optimizer::{self, RegistrationConfig, RegistrationMode, RegistrationResult};
use rdmm::synthdata::{self, GenParams};
use rdmm::{RdmmError, Result};

#[derive(Parser)]
#[command(name = "rdmm", version, about = "Region-regularized diffeomorphic registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic scene pair with labels.
    Gen {
        #[arg(long)]
        seed: u64,
        /// Grid size per axis.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a source image onto a target image.
    Register {
        #[arg(long, value_enum)]
        mode: Option<RegistrationMode>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Fixed pre-weight stack (tensor, kernel axis leading).
        #[arg(long)]
        preweights: Option<PathBuf>,
        /// Foreground mask image; alternative to --preweights.
        #[arg(long)]
        fg_mask: Option<PathBuf>,
        /// Squared pre-weights inside the mask, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        fg_h2: Option<Vec<f64>>,
        /// Squared pre-weights outside the mask, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        bg_h2: Option<Vec<f64>>,
        /// JSON configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Re-run a previous registration from its manifest.
        #[arg(long, conflicts_with_all = ["mode", "source", "target", "preweights", "fg_mask", "fg_h2", "bg_h2", "config"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap and folding metrics for a finished registration.
    Eval {
        /// Output directory of a `register` run.
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        labels_source: PathBuf,
        #[arg(long)]
        labels_target: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    CheckGrad {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
}

fn exit_code(err: &RdmmError) -> i32 {
    match err {
        RdmmError::Usage(_) | RdmmError::InvalidParameter(_) | RdmmError::GridMismatch(_) => 1,
        RdmmError::Io(_) | RdmmError::Format { .. } | RdmmError::Json(_) => 2,
        RdmmError::IntegrationBlowup { .. } | RdmmError::NonFinite(_) | RdmmError::Generation(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.cmd) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { seed, size, out } => cmd_gen(seed, size, &out),
        Cmd::Register {
            mode,
            source,
            target,
            preweights,
            fg_mask,
            fg_h2,
            bg_h2,
            config,
            manifest,
            out,
        } => {
            let spec = if let Some(manifest) = manifest {
                register_spec_from_manifest(&manifest)?
            } else {
                let source = source
                    .ok_or_else(|| RdmmError::Usage("--source is required".into()))?;
                let target = target
                    .ok_or_else(|| RdmmError::Usage("--target is required".into()))?;
                let mut cfg = match config {
                    Some(path) => serde_json::from_slice::<RegistrationConfig>(&fs::read(path)?)?,
                    None => RegistrationConfig::default(),
                };
                if let Some(mode) = mode {
                    cfg.mode = mode;
                }
                RegisterSpec { cfg, source, target, preweights, fg_mask, fg_h2, bg_h2 }
            };
            cmd_register(spec, &out)
        }
        Cmd::Eval { result, labels_source, labels_target } => {
            cmd_eval(&result, &labels_source, &labels_target)
        }
        Cmd::CheckGrad { size, seed, steps } => cmd_check_grad(size, seed, steps),
    }
}

fn labels_tensor(labels: &rdmm::field::ScalarField) -> TensorData {
    TensorData::I32 {
        dims: labels.grid().dims().to_vec(),
        data: labels.values().iter().map(|&v| v.round() as i32).collect(),
    }
}

fn cmd_gen(seed: u64, size: usize, out: &Path) -> Result<()> {
    let grid = GridSpec::new(&[size, size])?;
    let params = GenParams::default();
    let pair = synthdata::generate_pair(seed, &grid, &params)?;
    fs::create_dir_all(out)?;

    io::write_image(&out.join("source.tns"), &pair.source_image)?;
    io::write_image(&out.join("target.tns"), &pair.target_image)?;
    io::render_figure(&pair.source_image, FigureKind::Gray, &out.join("source.pgm"))?;
    io::render_figure(&pair.target_image, FigureKind::Gray, &out.join("target.pgm"))?;
    io::write_tensor(&out.join("source_labels.tns"), &labels_tensor(&pair.source_labels))?;
    io::write_tensor(&out.join("target_labels.tns"), &labels_tensor(&pair.target_labels))?;
    io::write_image(&out.join("fg_mask.tns"), &pair.foreground_mask_source)?;

    let manifest = RunManifest {
        command: "gen".into(),
        seed: Some(seed),
        gen_params: Some(params),
        config: None,
        inputs: Default::default(),
        outputs: vec![
            "source.tns".into(),
            "target.tns".into(),
            "source.pgm".into(),
            "target.pgm".into(),
            "source_labels.tns".into(),
            "target_labels.tns".into(),
            "fg_mask.tns".into(),
        ],
        per_iteration: vec![],
        metrics: None,
        fg_h2: None,
        bg_h2: None,
    };
    io::write_manifest(&out.join("manifest.json"), &manifest)?;
    println!("generated {} shapes -> {}", pair.source_shapes.len(), out.display());
    Ok(())
}

struct RegisterSpec {
    cfg: RegistrationConfig,
    source: PathBuf,
    target: PathBuf,
    preweights: Option<PathBuf>,
    fg_mask: Option<PathBuf>,
    fg_h2: Option<Vec<f64>>,
    bg_h2: Option<Vec<f64>>,
}

fn register_spec_from_manifest(path: &Path) -> Result<RegisterSpec> {
    let m = io::read_manifest(path)?;
    if m.command != "register" {
        return Err(RdmmError::Usage(format!(
            "manifest records a `{}` run, not `register`",
            m.command
        )));
    }
    let cfg = m
        .config
        .ok_or_else(|| RdmmError::Usage("manifest has no registration config".into()))?;
    let input = |key: &str| m.inputs.get(key).cloned();
    let source = input("source")
        .ok_or_else(|| RdmmError::Usage("manifest has no source input".into()))?;
    let target = input("target")
        .ok_or_else(|| RdmmError::Usage("manifest has no target input".into()))?;
    Ok(RegisterSpec {
        cfg,
        source,
        target,
        preweights: input("preweights"),
        fg_mask: input("fg_mask"),
        fg_h2: m.fg_h2,
        bg_h2: m.bg_h2,
    })
}

fn cmd_register(spec: RegisterSpec, out: &Path) -> Result<()> {
    let cfg = &spec.cfg;
    cfg.validate()?;
    let source = io::read_image(&spec.source)?;
    let target = io::read_image(&spec.target)?;

    let fixed_h0 = match cfg.mode {
        RegistrationMode::RdmmFixed => Some(load_fixed_preweights(&spec, cfg)?),
        _ => {
            if spec.preweights.is_some() || spec.fg_mask.is_some() {
                return Err(RdmmError::Usage(
                    "--preweights / --fg-mask only apply to rdmm-fixed mode".into(),
                ));
            }
            None
        }
    };

    let result = optimizer::optimize(&source, &target, cfg, fixed_h0.as_deref(), None)?;
    fs::create_dir_all(out)?;
    write_register_outputs(out, cfg, &result)?;

    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("source".to_string(), spec.source.clone());
    inputs.insert("target".to_string(), spec.target.clone());
    if let Some(p) = &spec.preweights {
        inputs.insert("preweights".to_string(), p.clone());
    }
    if let Some(p) = &spec.fg_mask {
        inputs.insert("fg_mask".to_string(), p.clone());
    }
    let manifest = RunManifest {
        command: "register".into(),
        seed: None,
        gen_params: None,
        config: Some(cfg.clone()),
        inputs,
        outputs: vec![
            "m0.tns".into(),
            "h0.tns".into(),
            "phi_inv.tns".into(),
            "warped.tns".into(),
            "warped.pgm".into(),
            "std_map.pgm".into(),
            "detjac.pgm".into(),
            "metrics.csv".into(),
        ],
        per_iteration: result.per_iteration.clone(),
        metrics: Some(result.metrics.clone()),
        fg_h2: spec.fg_h2.clone(),
        bg_h2: spec.bg_h2.clone(),
    };
    io::write_manifest(&out.join("manifest.json"), &manifest)?;
    println!(
        "final total {:.6e} (sim {:.6e}) after {} iterations -> {}",
        result.breakdown.total,
        result.breakdown.sim,
        result.per_iteration.len(),
        out.display()
    );
    Ok(())
}

fn load_fixed_preweights(
    spec: &RegisterSpec,
    cfg: &RegistrationConfig,
) -> Result<Vec<rdmm::field::ScalarField>> {
    match (&spec.preweights, &spec.fg_mask) {
        (Some(path), None) => io::tensor_to_preweights(&io::read_tensor(path)?),
        (None, Some(mask_path)) => {
            let fg = spec.fg_h2.as_deref().ok_or_else(|| {
                RdmmError::Usage("--fg-mask needs --fg-h2 and --bg-h2".into())
            })?;
            let bg = spec.bg_h2.as_deref().ok_or_else(|| {
                RdmmError::Usage("--fg-mask needs --fg-h2 and --bg-h2".into())
            })?;
            let mask = io::read_image(mask_path)?;
            synthdata::region_preweights(&mask, fg, bg, &cfg.kernel)
        }
        (Some(_), Some(_)) => Err(RdmmError::Usage(
            "--preweights and --fg-mask are mutually exclusive".into(),
        )),
        (None, None) => Err(RdmmError::Usage(
            "rdmm-fixed mode needs --preweights or --fg-mask with --fg-h2/--bg-h2".into(),
        )),
    }
}

fn write_register_outputs(
    out: &Path,
    cfg: &RegistrationConfig,
    result: &RegistrationResult,
) -> Result<()> {
    io::write_tensor(&out.join("m0.tns"), &io::vector_to_tensor(&result.m0))?;
    io::write_tensor(&out.join("h0.tns"), &io::preweights_to_tensor(&result.h0))?;
    io::write_tensor(
        &out.join("phi_inv.tns"),
        &io::vector_to_tensor(result.phi_inv_final.coords()),
    )?;
    io::write_image(&out.join("warped.tns"), &result.warped)?;
    io::render_figure(&result.warped, FigureKind::Gray, &out.join("warped.pgm"))?;

    // regularizer std-map at t = 1: pre-weights advected through the
    // final map, then converted to smoothed weights
    let state = GeodesicState {
        m: result.m0.clone(),
        phi_inv: result.phi_inv_final.clone(),
        h0: Arc::new(result.h0.clone()),
        t: 1.0,
    };
    let stack = rdmm::dynamics::current_weights(&state, &cfg.kernel)?;
    let std_map = rdmm::kernels::local_std_map(&stack.w, &cfg.kernel);
    let sigmas = cfg.kernel.sigmas();
    io::render_figure(
        &std_map,
        FigureKind::StdMap { lo: sigmas[0], hi: *sigmas.last().unwrap() },
        &out.join("std_map.pgm"),
    )?;

    let det = rdmm::field::jacobian_determinant(&result.phi_inv_final);
    io::render_figure(&det, FigureKind::DetJac, &out.join("detjac.pgm"))?;

    io::write_metrics_csv(&out.join("metrics.csv"), &result.per_iteration)?;
    Ok(())
}

fn cmd_eval(result_dir: &Path, labels_source: &Path, labels_target: &Path) -> Result<()> {
    let phi_inv = rdmm::field::TransformMap::from_coords(io::tensor_to_vector(&io::read_tensor(
        &result_dir.join("phi_inv.tns"),
    )?)?);
    let src = io::tensor_to_scalar(&io::read_tensor(labels_source)?)?;
    let tgt = io::tensor_to_scalar(&io::read_tensor(labels_target)?)?;
    let warped = optimizer::warp_labels_nearest(&src, &phi_inv)?;

    let mut labels: Vec<i64> = tgt
        .values()
        .iter()
        .map(|&v| v.round() as i64)
        .filter(|&l| l != 0)
        .collect();
    labels.sort_unstable();
    labels.dedup();

    let mut csv = String::from("metric,label,value\n");
    let mut mean = 0.0;
    for &label in &labels {
        let d = optimizer::dice(&warped, &tgt, label)?;
        mean += d;
        csv.push_str(&format!("dice,{label},{d:.6}\n"));
        println!("dice label {label}: {d:.4}");
    }
    if !labels.is_empty() {
        mean /= labels.len() as f64;
        csv.push_str(&format!("mean_dice,,{mean:.6}\n"));
        println!("mean dice: {mean:.4}");
    }
    let (folds, fold_mass) = optimizer::fold_measure(&phi_inv);
    let interior = optimizer::fold_count_interior(&phi_inv);
    csv.push_str(&format!("fold_count,,{folds}\n"));
    csv.push_str(&format!("fold_count_interior,,{interior}\n"));
    csv.push_str(&format!("fold_mass,,{fold_mass:.6e}\n"));
    println!("folds: {folds} ({interior} interior), mass {fold_mass:.3e}");
    if let Ok(manifest) = io::read_manifest(&result_dir.join("manifest.json")) {
        if let Some(metrics) = manifest.metrics {
            csv.push_str(&format!("energy_drift,,{:.6e}\n", metrics.energy_drift));
            println!("energy drift: {:.3e}", metrics.energy_drift);
        }
    }
    io::atomic_write(&result_dir.join("eval.csv"), csv.as_bytes())?;
    Ok(())
}

fn cmd_check_grad(size: usize, seed: u64, steps: usize) -> Result<()> {
    let report = rdmm::adjoint::check_gradient(size, seed, steps)?;
    let mut worst = 0.0f64;
    for (mode, err) in &report {
        println!("{mode}: max rel error {err:.3e}");
        worst = worst.max(*err);
    }
    println!("max rel error: {worst:.3e}");
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(RdmmError::NonFinite(format!(
            "gradient check failed: max rel error {worst:.3e} >= 1e-4"
        )))
    }
}
