//! `sonoreg`: volumetric ultrasound registration from the command line.
//!
//! Exit codes: 0 success, 2 configuration or I/O problem, 3 pose search
//! failed (target out of view), 4 rigid registration failed, 5 the elastic
//! stage or its solver did not converge.

use clap::{Args, Parser, Subcommand};
use sonoreg_cli::config::{Mode, RunConfig};
use sonoreg_cli::pipeline::{self, run_pipeline};
use sonoreg_cli::vvol;
use sonoreg_core::eval::{read_fiducials_csv, tre};
use sonoreg_core::metrics;
use sonoreg_core::phantom::{corpus, Deformation, PhantomSpec};
use sonoreg_core::pyramid::build_pyramid;
use sonoreg_core::transform::RigidTransform;
use sonoreg_core::{par, Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sonoreg", version, about = "3D ultrasound volume registration")]
struct Cli {
    /// Worker threads for parallel sections (0 = automatic). Results are
    /// identical for any value; only runtime changes.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set rigid_level=1`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for phantom generation.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct PipelineArgs {
    /// Reference (fixed) volume; overrides the config key.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Tracking (moving) volume; overrides the config key.
    #[arg(long)]
    tracking: Option<PathBuf>,
    /// Artifact directory; overrides the config key.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Reference fiducial CSV for the TRE report.
    #[arg(long)]
    fiducials_reference: Option<PathBuf>,
    /// Tracking fiducial CSV for the TRE report.
    #[arg(long)]
    fiducials_tracking: Option<PathBuf>,
    /// Rigid transform JSON seeding the elastic stage.
    #[arg(long)]
    initial_transform: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate phantom volume pairs with known ground truth.
    Phantom(PhantomArgs),
    /// Build a blur-decimate pyramid and write one level as VVOL.
    Pyramid {
        input: PathBuf,
        /// Level to export (0 = full resolution).
        #[arg(long, default_value_t = 2)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pre-decimation Gaussian width in voxels.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Compute a similarity metric between two volumes on the same grid.
    Metric {
        a: PathBuf,
        b: PathBuf,
        /// cc (Pearson correlation), ssd, or dsc (shift correlation).
        #[arg(long, default_value = "cc")]
        metric: String,
        /// Shift-map scale for dsc, mm.
        #[arg(long, default_value_t = 3.0)]
        sigma_mm: f64,
        #[arg(long, default_value_t = 100)]
        min_overlap: usize,
    },
    /// Stage 1 only: systematic pose search over the kinematic model.
    Search(PipelineArgs),
    /// Stages 1 and 2: search, then multi-start rigid refinement.
    Rigid(PipelineArgs),
    /// Stage 3 only: elastic correction from a given rigid transform.
    Elastic(PipelineArgs),
    /// Full pipeline: search, rigid, elastic.
    Register(PipelineArgs),
    /// Target registration error of a transform (plus optional field).
    Eval {
        #[arg(long)]
        fiducials_reference: PathBuf,
        #[arg(long)]
        fiducials_tracking: PathBuf,
        /// Rigid transform JSON; identity when omitted.
        #[arg(long)]
        transform: Option<PathBuf>,
        /// Pipeline output directory holding `reverse_{x,y,z}.vvol`.
        #[arg(long)]
        field_dir: Option<PathBuf>,
    },
    /// Time every pipeline stage on a synthetic pair.
    Bench {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1.5)]
        spacing: f64,
        /// Working directory; a temporary one when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, num_args = 3, default_values_t = [96, 96, 96])]
    dims: Vec<usize>,
    /// Voxel spacing, mm.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    #[arg(long, default_value_t = 4)]
    n_fiducials: usize,
    /// Peak elastic deformation, mm (0 = rigid motion only).
    #[arg(long, default_value_t = 0.0)]
    deform: f64,
    /// Intensity shift-field amplitude, log-compressed units.
    #[arg(long, default_value_t = 0.0)]
    shift_amplitude: f64,
    /// Shift-field cutoff wavelength, mm.
    #[arg(long, default_value_t = 32.0)]
    shift_wavelength: f64,
    #[arg(long, default_value_t = 0.15)]
    speckle_variance: f64,
    /// Tilt limit for the sampled poses, degrees.
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    tilt_limit: f64,
    /// Depth offsets for the sampled poses, mm.
    #[arg(long, num_args = 1.., default_values_t = [-5.0, 0.0, 5.0], allow_negative_numbers = true)]
    depths: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = par::set_threads(cli.threads) {
            eprintln!("sonoreg: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("sonoreg: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::SearchFailed { .. } => 3,
        Error::RegistrationFailed { .. } | Error::OptimizerAbort { .. } => 4,
        Error::SolverStalled { .. } => 5,
        _ => 2,
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a, cli.seed),
        Cmd::Pyramid {
            input,
            level,
            out,
            sigma,
        } => cmd_pyramid(input, *level, out, *sigma),
        Cmd::Metric {
            a,
            b,
            metric,
            sigma_mm,
            min_overlap,
        } => cmd_metric(a, b, metric, *sigma_mm, *min_overlap),
        Cmd::Search(a) => cmd_pipeline(cli, a, Mode::Kinematic),
        Cmd::Rigid(a) => cmd_pipeline(cli, a, Mode::Rigid),
        Cmd::Elastic(a) => cmd_pipeline(cli, a, Mode::Elastic),
        Cmd::Register(a) => cmd_pipeline(cli, a, Mode::Full),
        Cmd::Eval {
            fiducials_reference,
            fiducials_tracking,
            transform,
            field_dir,
        } => cmd_eval(fiducials_reference, fiducials_tracking, transform, field_dir),
        Cmd::Bench { dim, spacing, out } => cmd_bench(*dim, *spacing, out),
    }
}

fn load_config(cli: &Cli, args: &PipelineArgs, mode: Mode) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(p) = &args.reference {
        cfg.reference = Some(p.clone());
    }
    if let Some(p) = &args.tracking {
        cfg.tracking = Some(p.clone());
    }
    if let Some(p) = &args.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(p) = &args.fiducials_reference {
        cfg.fiducials_reference = Some(p.clone());
    }
    if let Some(p) = &args.fiducials_tracking {
        cfg.fiducials_tracking = Some(p.clone());
    }
    if let Some(p) = &args.initial_transform {
        cfg.initial_transform = Some(p.clone());
    }
    cfg.mode = mode;
    Ok(cfg)
}

fn cmd_pipeline(cli: &Cli, args: &PipelineArgs, mode: Mode) -> Result<u8> {
    let cfg = load_config(cli, args, mode)?;
    let report = run_pipeline(&cfg)?;
    println!("report: {}", cfg.output_dir.join("report.json").display());
    if let Some(e) = &report.elastic {
        if !e.converged {
            eprintln!("sonoreg: elastic stage did not converge within its budget");
            return Ok(5);
        }
    }
    Ok(0)
}

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> Result<u8> {
    std::fs::create_dir_all(&a.out)?;
    let mut spec = PhantomSpec::standard([a.dims[0], a.dims[1], a.dims[2]], a.spacing);
    spec.n_fiducials = a.n_fiducials;
    spec.speckle_variance = a.speckle_variance;
    spec.shift_amplitude = a.shift_amplitude;
    spec.shift_wavelength_mm = a.shift_wavelength;
    if a.deform > 0.0 {
        spec.deformation = Deformation::Elastic {
            rigid: RigidTransform::identity(),
            amplitude_mm: a.deform,
        };
    }
    let mut model = RunConfig::default().model();
    model.ellipsoid = spec.gland;
    model.tilt_limit = a.tilt_limit.to_radians();
    model.depth_offsets = a.depths.clone();

    let pairs = corpus(&spec, &model, a.n, seed)?;
    for (i, p) in pairs.iter().enumerate() {
        vvol::write_vvol(&a.out.join(format!("ref_{i:03}.vvol")), &p.reference)?;
        vvol::write_vvol(&a.out.join(format!("trk_{i:03}.vvol")), &p.tracking)?;
        sonoreg_core::eval::write_fiducials_csv(
            &a.out.join(format!("fids_ref_{i:03}.csv")),
            &p.truth.fiducials_reference,
        )?;
        sonoreg_core::eval::write_fiducials_csv(
            &a.out.join(format!("fids_trk_{i:03}.csv")),
            &p.truth.fiducials_tracking,
        )?;
        write_json(
            &a.out.join(format!("truth_{i:03}.json")),
            &serde_json::json!({ "pose": p.pose, "truth": p.truth }),
        )?;
        if let Some(d) = &p.truth.deformation {
            pipeline::write_field_vvol(&a.out, &format!("gt_deform_{i:03}"), d)?;
        }
    }
    println!("wrote {} pair(s) to {}", pairs.len(), a.out.display());
    Ok(0)
}

fn cmd_pyramid(input: &Path, level: usize, out: &Path, sigma: f64) -> Result<u8> {
    let vol = vvol::read_vvol(input)?;
    let pyr = build_pyramid(&vol, level + 1, sigma)?;
    vvol::write_vvol(out, &pyr.levels[level])?;
    println!("wrote level {level} to {}", out.display());
    Ok(0)
}

fn cmd_metric(a: &Path, b: &Path, metric: &str, sigma_mm: f64, min_overlap: usize) -> Result<u8> {
    let va = vvol::read_vvol(a)?;
    let vb = vvol::read_vvol(b)?;
    let sample = match metric {
        "cc" => metrics::pearson_cc(&va, &vb, min_overlap)?,
        "ssd" => metrics::ssd(&va, &vb, min_overlap)?,
        "dsc" => metrics::shift_correlation(&va, &vb, sigma_mm, min_overlap)?,
        other => {
            return Err(Error::Config(format!(
                "metric must be cc, ssd, or dsc, got {other:?}"
            )))
        }
    };
    println!(
        "{}",
        serde_json::json!({ "metric": metric, "value": sample.value, "n_overlap": sample.overlap })
    );
    Ok(0)
}

fn cmd_eval(
    ref_csv: &Path,
    trk_csv: &Path,
    transform: &Option<PathBuf>,
    field_dir: &Option<PathBuf>,
) -> Result<u8> {
    let ref_fids = read_fiducials_csv(ref_csv)?;
    let trk_fids = read_fiducials_csv(trk_csv)?;
    let t = match transform {
        Some(p) => pipeline::read_transform_json(p)?,
        None => RigidTransform::identity(),
    };
    let field = match field_dir {
        Some(dir) => Some(pipeline::read_field_vvol(dir, "reverse")?),
        None => None,
    };
    let stats = tre(&ref_fids, &trk_fids, |q| {
        let y = t.apply(q);
        match &field {
            Some(f) => {
                let v = f.sample_clamped(y);
                [y[0] + v[0], y[1] + v[1], y[2] + v[2]]
            }
            None => y,
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&stats).unwrap());
    Ok(0)
}

fn cmd_bench(dim: usize, spacing: f64, out: &Option<PathBuf>) -> Result<u8> {
    let tmp;
    let dir = match out {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            p.clone()
        }
        None => {
            tmp = std::env::temp_dir().join(format!("sonoreg-bench-{}", std::process::id()));
            std::fs::create_dir_all(&tmp)?;
            tmp
        }
    };
    let mut spec = PhantomSpec::standard([dim, dim, dim], spacing);
    spec.n_fiducials = 3;
    let mut model = RunConfig::default().model();
    model.ellipsoid = spec.gland;
    model.tilt_limit = 10f64.to_radians();
    model.depth_offsets = vec![-5.0, 0.0, 5.0];
    let pair = corpus(&spec, &model, 1, 99)?.remove(0);
    vvol::write_vvol(&dir.join("ref.vvol"), &pair.reference)?;
    vvol::write_vvol(&dir.join("trk.vvol"), &pair.tracking)?;

    let mut cfg = RunConfig::default();
    cfg.mode = Mode::Full;
    cfg.reference = Some(dir.join("ref.vvol"));
    cfg.tracking = Some(dir.join("trk.vvol"));
    cfg.output_dir = dir.join("out");
    cfg.pyramid_levels = 4;
    cfg.rigid_level = 2;
    cfg.elastic_levels = vec![2, 1];
    let report = run_pipeline(&cfg)?;
    let total: f64 = report.timings.iter().map(|t| t.seconds).sum();
    let stages: Vec<_> = report
        .timings
        .iter()
        .map(|t| serde_json::json!({ "stage": t.stage, "seconds": t.seconds }))
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(
            &serde_json::json!({ "dim": dim, "stages": stages, "total_seconds": total })
        )
        .unwrap()
    );
    Ok(0)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        msg: format!("serialization: {e}"),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}
