use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use svflow::analysis::{self, fmt_real, CaseMetrics, MetricsReport};
use svflow::grid::{self, resample_field, resample_volume, FieldKind};
use svflow::insilico::{self, BsplineDeformationSpec, Dataset};
use svflow::io;
use svflow::nets::Model;
use svflow::train::{self, ExperimentConfig};
use svflow::{Error, GridGeometry, ScalarVolume};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "svflow", version, about = "Diffeomorphic registration with stationary velocity fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of deformed volumes with known deformations.
    GenInsilico(GenArgs),
    /// Train one model, an ablation over several, or the lambda sweep.
    Train(TrainArgs),
    /// Register a moving volume to a fixed one with a trained checkpoint.
    Register(RegisterArgs),
    /// Compute metrics of a deformation field.
    Evaluate(EvaluateArgs),
    /// Summarise a dataset's deformations or a single field.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Base volume (SVOL or NIfTI); a procedural phantom when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, value_parser = triple::<usize>, default_value = "32,32,32")]
    size: [usize; 3],
    #[arg(long, value_parser = triple::<usize>, default_value = "3,3,3")]
    grid: [usize; 3],
    #[arg(long, default_value_t = 5)]
    order: usize,
    /// Displacement scale in voxels; calibrated to the grid when omitted.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = triple::<f64>, default_value = "0.8,0.1,0.1")]
    split: [f64; 3],
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset, e.g. svf_bchd, svf_sum, flowunet-pre, unet.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated presets; trains each and writes ablation.csv.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Repeat the ablation for lambda in {0.1, 0.01, 0.001}.
    #[arg(long, requires = "models")]
    lambda_sweep: bool,
    /// Extra configuration as key=value; overrides the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Output prefix; writes <prefix>_warped.svol, <prefix>_flow.svol and,
    /// for velocity models, <prefix>_svf.svol.
    #[arg(long)]
    out: PathBuf,
    /// Resample inputs to a grid the model accepts instead of failing.
    #[arg(long)]
    resample: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    gt_flow: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    fixed: Option<PathBuf>,
    #[arg(long, requires = "fixed")]
    moving: Option<PathBuf>,
    #[arg(long, default_value = "case")]
    id: String,
    /// CSV destination; stdout only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset directory written by gen-insilico.
    #[arg(long, conflicts_with = "flow", required_unless_present = "flow")]
    data: Option<PathBuf>,
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Writes the Jacobian determinant map of --flow as SVOL.
    #[arg(long, requires = "flow")]
    jacobian_out: Option<PathBuf>,
    /// Writes the folding mask (1 where det J <= 0) of --flow as SVOL.
    #[arg(long, requires = "flow")]
    folding_out: Option<PathBuf>,
}

fn triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got '{s}'"));
    }
    let v: Vec<T> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|_| format!("cannot parse '{p}'")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three values".to_string())
}

/// Exit codes: 1 usage, 2 data, 3 numerical.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) | Error::UndefinedCorrelation | Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn provenance(seed: u64, config: &str) -> String {
    let hash = hex::encode(Sha256::digest(config.as_bytes()));
    format!("svflow {VERSION} seed={seed} config_sha256={}", &hash[..16])
}

fn write_text(path: &Path, text: &str) -> svflow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_insilico(a: GenArgs) -> svflow::Result<()> {
    let target = GridGeometry::with_dims(a.size)?;
    let base = match &a.base {
        Some(p) => {
            let v = io::read_scalar(p)?;
            if v.geometry().dims() == a.size {
                v
            } else {
                resample_volume(&v, rescaled(v.geometry(), a.size)?)
            }
        }
        None => insilico::phantom(target, a.seed),
    };
    let mut spec = BsplineDeformationSpec::default_for(base.geometry());
    spec.control_grid = a.grid;
    spec.order = a.order;
    spec.seed = a.seed;
    if let Some(s) = a.scale {
        spec.scale = s;
    }
    let config = format!(
        "base={} size={:?} grid={:?} order={} scale={} count={} split={:?}",
        a.base.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "phantom".into()),
        a.size,
        spec.control_grid,
        spec.order,
        spec.scale,
        a.count,
        a.split
    );
    let prov = provenance(a.seed, &config);
    let entries = insilico::generate_dataset(&base, &spec, a.count, a.split, &a.out, &prov)?;
    io::write_scalar(a.out.join("base.svol"), &base)?;
    let rejected: usize = entries.iter().map(|e| e.rejections).sum();
    println!("# {prov}");
    println!("samples={} rejected_draws={rejected} scale={}", entries.len(), fmt_real(spec.scale));
    Ok(())
}

fn experiment_config(a: &TrainArgs) -> svflow::Result<ExperimentConfig> {
    let mut text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    if let Some(m) = &a.model {
        text.push_str(&format!("\nmodel={m}\n"));
    }
    for s in &a.sets {
        if !s.contains('=') {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{s}'")));
        }
        text.push('\n');
        text.push_str(s);
    }
    ExperimentConfig::parse(&text)
}

fn run_train(a: TrainArgs) -> svflow::Result<()> {
    let cfg = experiment_config(&a)?;
    let data = Dataset::open(&a.data)?;
    let mut canonical = cfg.to_text();
    if !a.models.is_empty() {
        canonical.push_str(&format!("models={}\nlambda_sweep={}\n", a.models.join(","), a.lambda_sweep));
    }
    let prov = provenance(cfg.train.seed, &canonical);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out.join("config.txt"), &format!("# {prov}\n{canonical}"))?;
    if a.models.is_empty() {
        let outcome = train::train(&cfg.net, &data, &cfg.train, Some(&a.out), &prov)?;
        let last = outcome.log.last().expect("at least one epoch");
        println!("# {prov}");
        println!(
            "model={} epochs={} best_epoch={} final_lr={:e} best_val={}",
            cfg.net.name(),
            outcome.log.len(),
            outcome.best_epoch,
            last.lr,
            fmt_real(outcome.log[outcome.best_epoch].val_loss)
        );
        return Ok(());
    }
    let rows = if a.lambda_sweep {
        train::lambda_sweep(&data, &cfg.train, &cfg.net, &a.models, Some(&a.out), &prov)?
    } else {
        train::ablation(&data, &cfg.train, &cfg.net, &a.models, Some(&a.out), &prov)?
            .into_iter()
            .map(|r| r.row)
            .collect()
    };
    let csv = train::ablation_csv(&prov, &rows);
    write_text(&a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// `geometry` with new dims covering the same physical extent.
fn rescaled(geometry: &GridGeometry, dims: [usize; 3]) -> svflow::Result<GridGeometry> {
    let (d, s) = (geometry.dims(), geometry.spacing());
    GridGeometry::new(dims, std::array::from_fn(|a| s[a] * d[a] as f64 / dims[a] as f64))
}

fn register(a: RegisterArgs) -> svflow::Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let fixed = io::read_scalar(&a.fixed)?;
    let mut moving = io::read_scalar(&a.moving)?;
    let geometry = *fixed.geometry();
    if moving.geometry() != fixed.geometry() {
        if !a.resample {
            return Err(Error::GeometryMismatch { left: geometry.dims(), right: moving.geometry().dims() });
        }
        moving = resample_volume(&moving, geometry);
    }
    let reg = match model.config.check_input(&geometry) {
        Ok(()) => model.register(&fixed, &moving)?,
        Err(e) if !a.resample => return Err(e),
        Err(_) => {
            let m = 1usize << (model.config.levels - 1);
            let dims = geometry.dims().map(|n| n.div_ceil(m).max(3) * m);
            let work = rescaled(&geometry, dims)?;
            let r = model.register(&resample_volume(&fixed, work), &resample_volume(&moving, work))?;
            svflow::nets::Registration {
                phi: resample_field(&r.phi, geometry),
                svf: r.svf.map(|v| resample_field(&v, geometry)),
            }
        }
    };
    let warped = grid::warp(&moving, &reg.phi)?;
    let eps_img = analysis::ncc(&warped, &fixed)?;
    let (_, eps_reg) = analysis::folding_count(&reg.phi)?;
    let prefix = a.out.display().to_string();
    let prov = provenance(0, &format!("checkpoint={} {}", a.checkpoint.display(), model.config.name()));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    io::write_scalar(format!("{prefix}_warped.svol"), &warped)?;
    io::write_field(format!("{prefix}_flow.svol"), &reg.phi)?;
    if let Some(v) = &reg.svf {
        io::write_field(format!("{prefix}_svf.svol"), v)?;
    }
    write_text(
        Path::new(&format!("{prefix}_provenance.txt")),
        &format!("# {prov}\nmoving={}\nfixed={}\neps_reg={eps_reg}\neps_img={}\n", a.moving.display(), a.fixed.display(), fmt_real(eps_img)),
    )?;
    println!("eps_reg={eps_reg} eps_img={}", fmt_real(eps_img));
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> svflow::Result<()> {
    let phi = io::read_field(&a.flow)?.with_kind(FieldKind::Displacement);
    let gt = a.gt_flow.as_ref().map(io::read_field).transpose()?;
    let images: Option<(ScalarVolume, ScalarVolume)> = match (&a.fixed, &a.moving) {
        (Some(f), Some(m)) => Some((io::read_scalar(f)?, io::read_scalar(m)?)),
        _ => None,
    };
    let row = CaseMetrics::evaluate(&a.id, &phi, gt.as_ref(), images.as_ref().map(|(f, m)| (f, m)))?;
    let inputs = format!(
        "flow={} gt_flow={:?} fixed={:?} moving={:?}",
        a.flow.display(),
        a.gt_flow,
        a.fixed,
        a.moving
    );
    let csv = MetricsReport { rows: vec![row] }.to_csv(&provenance(0, &inputs));
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> svflow::Result<()> {
    if let Some(dir) = &a.data {
        let data = Dataset::open(dir)?;
        let mut phis = Vec::new();
        let mut folded = 0;
        for id in data.entries().iter().map(|e| e.id.clone()).collect::<Vec<_>>() {
            let s = data.load(&id)?;
            let phi = s.phi_hat.ok_or_else(|| Error::InvalidArgument(format!("sample '{id}' has no deformation")))?;
            folded += usize::from(analysis::folding_count(&phi)?.1 > 0);
            phis.push(phi);
        }
        let st = analysis::displacement_stats(&phis)?;
        let rejected: usize = data.entries().iter().map(|e| e.rejections).sum();
        println!("# {}", provenance(0, &format!("data={}", dir.display())));
        println!("samples={} folded={folded} rejected_draws={rejected}", phis.len());
        println!(
            "mean_jac median={} mean={} sd={}",
            fmt_real(st.mean_jacobian.median),
            fmt_real(st.mean_jacobian.mean),
            fmt_real(st.mean_jacobian.sd)
        );
        println!(
            "mean_disp_mm median={} mean={} sd={}",
            fmt_real(st.mean_displacement_mm.median),
            fmt_real(st.mean_displacement_mm.mean),
            fmt_real(st.mean_displacement_mm.sd)
        );
        return Ok(());
    }
    let path = a.flow.as_ref().expect("clap enforces --data or --flow");
    let phi = io::read_field(path)?.with_kind(FieldKind::Displacement);
    let det = analysis::jacobian_determinant(&phi)?;
    let (map, eps_reg) = analysis::folding_count(&phi)?;
    let min = det.data().iter().cloned().fold(f64::INFINITY, f64::min);
    println!("# {}", provenance(0, &format!("flow={}", path.display())));
    println!(
        "eps_reg={eps_reg} mean_jac={} min_jac={} mean_disp_mm={}",
        fmt_real(analysis::mean_jacobian(&phi)?),
        fmt_real(min),
        fmt_real(analysis::mean_displacement_mm(&phi))
    );
    if let Some(p) = &a.jacobian_out {
        io::write_scalar(p, &det)?;
    }
    if let Some(p) = &a.folding_out {
        io::write_scalar(p, &map.to_volume())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenInsilico(a) => gen_insilico(a),
        Command::Train(a) => run_train(a),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
