//! `nirom`: command-line driver.
//!
//! Every failure is reported on stderr as `nirom: [stage] message` with a
//! non-zero exit status.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use nirom_core::autoencoder::{self, AeSpec, AeTrainConfig};
use nirom_core::dmd;
use nirom_core::metrics;
use nirom_core::neuralnet::write_history_csv;
use nirom_core::node::{self, NodeArch, NodeModel, NodeTrainConfig};
use nirom_core::ode::SolverSpec;
use nirom_core::pipeline::{self, ArchSpec, PipelineConfig, PipelineError, Stage, StageContext, Window};
use nirom_core::pod::{self, LatentTrajectory, Truncation};
use nirom_core::rbf::{self, Kernel, RbfConfig};
use nirom_core::snapstore::{self, Direction, Granularity, SnapshotSet};
use nirom_core::synthgen::{self, GeneratorSpec};

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Parser)]
#[command(name = "nirom", version, about = "Non-intrusive reduced-order modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic snapshot set from a generator spec.
    Gen {
        /// Generator spec: a JSON file or an inline JSON object.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a POD basis and the projected latent trajectory.
    Pod(PodArgs),
    /// Train an autoencoder on one field (or the whole set).
    AeTrain(AeTrainArgs),
    /// Train a neural ODE on a latent trajectory.
    NodeTrain {
        #[arg(long)]
        latent: PathBuf,
        /// JSON with `arch`, `train` and optionally `solver` and `seed`.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the RBF increment model to a latent trajectory.
    RbfFit {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
        kernel: KernelArg,
        #[arg(long = "shape-c", default_value_t = rbf::DEFAULT_SHAPE)]
        shape_c: f64,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit rank-r exact DMD.
    DmdFit {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to full rank.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Eigen-spectrum CSV (defaults to `<out>.spectrum.csv`).
        #[arg(long)]
        spectrum: Option<PathBuf>,
    },
    /// Propagate a trained latent model over a time window.
    Predict(PredictArgs),
    /// Score a prediction against the truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pipeline config end to end.
    Run { config: PathBuf },
    /// Run several configs on the same data and merge their error series.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PodArgs {
    #[arg(long)]
    input: PathBuf,
    /// Basis output; with --per-field one file per field `<stem>.<field>.nsnp`.
    #[arg(long)]
    out: PathBuf,
    /// Discarded energy fraction.
    #[arg(long, conflicts_with = "modes")]
    tau: Option<f64>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    per_field: bool,
    #[arg(long)]
    center: bool,
    /// Where to write the projected latent trajectory.
    #[arg(long)]
    latent_out: Option<PathBuf>,
}

#[derive(Args)]
struct AeTrainArgs {
    #[arg(long)]
    input: PathBuf,
    /// AeSpec JSON (file or inline); `input` may be omitted.
    #[arg(long)]
    spec: String,
    /// AeTrainConfig JSON (file or inline).
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on this field only.
    #[arg(long)]
    field: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem: writes `<out>.enc`, `<out>.dec`, `<out>.history.csv`,
    /// `<out>.scaling.json` and `<out>.latent.nsnp`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Gaussian,
    Multiquadric,
    InverseMultiquadric,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Node,
    Rbf,
    Dmd,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_enum)]
    kind: ModelKind,
    #[arg(long)]
    model: PathBuf,
    /// Latent trajectory holding the initial state at `--start`.
    #[arg(long)]
    latent: PathBuf,
    #[arg(long)]
    start: f64,
    #[arg(long)]
    end: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
    /// POD basis to lift the prediction to the full space.
    #[arg(long)]
    basis: Option<PathBuf>,
}

fn read_json_arg(arg: &str, stage: Stage) -> Result<Value> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_owned()
    } else {
        fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}")).stage(stage)?
    };
    serde_json::from_str(&text).stage(stage)
}

fn parse<T: serde::de::DeserializeOwned>(v: Value, stage: Stage) -> Result<T> {
    serde_json::from_value(v).stage(stage)
}

fn load_set(path: &Path, stage: Stage) -> Result<SnapshotSet<f64>> {
    snapstore::load(path).map_err(|e| format!("{}: {e}", path.display())).stage(stage)
}

fn load_latent(path: &Path, stage: Stage) -> Result<LatentTrajectory<f64>> {
    let set = load_set(path, stage)?;
    let (z, times, _, _) = set.into_parts();
    LatentTrajectory::new(z, times).stage(stage)
}

fn save_latent(latent: &LatentTrajectory<f64>, path: &Path, stage: Stage) -> Result<()> {
    let set = latent.to_snapshot_set().stage(stage)?;
    snapstore::save_with_manifest(&set, path, Some("latent"), Value::Null).stage(Stage::Output)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen(spec: &str, out: &Path) -> Result<()> {
    let spec: GeneratorSpec = parse(read_json_arg(spec, Stage::Config)?, Stage::Config)?;
    let (set, truth) = synthgen::generate::<f64>(&spec).stage(Stage::Data)?;
    let extra = json!({"generator": spec});
    snapstore::save_with_manifest(&set, out, Some("snapshots"), extra).stage(Stage::Output)?;
    let text = serde_json::to_string_pretty(&truth).stage(Stage::Output)?;
    fs::write(with_suffix(out, ".truth.json"), text).stage(Stage::Output)?;
    println!("wrote {} ({} × {})", out.display(), set.n_rows(), set.n_cols());
    Ok(())
}

fn pod_cmd(a: &PodArgs) -> Result<()> {
    let truncation = match (a.tau, a.modes) {
        (Some(tau), None) => Truncation::Energy { tau },
        (None, Some(modes)) => Truncation::Fixed { modes },
        _ => return Err(PipelineError { stage: Stage::Config, message: "pass exactly one of --tau or --modes".into() }),
    };
    let set = load_set(&a.input, Stage::Data)?;
    let latent = if a.per_field {
        let fb = pod::compute_field_bases(&set, truncation, a.center).stage(Stage::Reduce)?;
        for (b, seg) in fb.bases.iter().zip(set.fields()) {
            let p = with_suffix(&a.out.with_extension(""), &format!(".{}.nsnp", seg.name));
            pod::save_basis(b, &p).stage(Stage::Output)?;
            println!("{}: {} modes -> {}", seg.name, b.modes(), p.display());
        }
        pod::project_fields(&fb, &set).stage(Stage::Reduce)?
    } else {
        let b = pod::compute_basis(&set, truncation, a.center).stage(Stage::Reduce)?;
        pod::save_basis(&b, &a.out).stage(Stage::Output)?;
        println!("{} modes, captured energy {:.6}", b.modes(), b.captured_energy());
        pod::project(&b, &set).stage(Stage::Reduce)?
    };
    if let Some(p) = &a.latent_out {
        save_latent(&latent, p, Stage::Reduce)?;
    }
    Ok(())
}

fn ae_train(a: &AeTrainArgs) -> Result<()> {
    let mut set = load_set(&a.input, Stage::Data)?;
    if let Some(name) = &a.field {
        let seg = set
            .field(name)
            .cloned()
            .ok_or_else(|| format!("no field {name:?}"))
            .stage(Stage::Data)?;
        set = set.field_set(&seg).stage(Stage::Data)?;
    }
    let mut spec_json = read_json_arg(&a.spec, Stage::Config)?;
    if let Value::Object(m) = &mut spec_json {
        m.entry("input").or_insert(json!(set.n_rows()));
    }
    let spec: AeSpec = parse(spec_json, Stage::Config)?;
    let mut cfg: AeTrainConfig = match &a.train {
        Some(t) => parse(read_json_arg(t, Stage::Config)?, Stage::Config)?,
        None => AeTrainConfig::new(a.epochs.unwrap_or(1000)),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let scaled = match spec.scaling_interval() {
        Some(target) => {
            let p = snapstore::fit_scaling(&set, target, Granularity::PerField);
            let text = serde_json::to_string_pretty(&p).stage(Stage::Output)?;
            fs::write(with_suffix(&a.out, ".scaling.json"), text).stage(Stage::Output)?;
            snapstore::apply_scaling(&set, &p, Direction::Forward).stage(Stage::Scaling)?
        }
        None => set,
    };
    let mut model = autoencoder::build::<f64>(spec, a.seed).stage(Stage::Reduce)?;
    model.train(scaled.data(), &cfg).stage(Stage::Reduce)?;
    autoencoder::save_ae(&model, &a.out).stage(Stage::Output)?;
    write_history_csv(&model.history, &with_suffix(&a.out, ".history.csv")).stage(Stage::Output)?;
    let latent = model.encode(scaled.data(), scaled.times()).stage(Stage::Reduce)?;
    save_latent(&latent, &with_suffix(&a.out, ".latent.nsnp"), Stage::Reduce)?;
    println!("final reconstruction mse {:.6e}", model.final_loss.unwrap_or(f64::NAN));
    Ok(())
}

fn node_train(latent: &Path, config: &str, out: &Path) -> Result<()> {
    let cfg = read_json_arg(config, Stage::Config)?;
    let arch: NodeArch = parse::<ArchSpec>(cfg.get("arch").cloned().unwrap_or(json!("node5")), Stage::Config)?
        .resolve()
        .stage(Stage::Config)?;
    let train: NodeTrainConfig = parse(
        cfg.get("train").cloned().ok_or("missing \"train\"").stage(Stage::Config)?,
        Stage::Config,
    )?;
    let solver: SolverSpec = match cfg.get("solver") {
        Some(s) => parse(s.clone(), Stage::Config)?,
        None => SolverSpec::Rk4 { h: None },
    };
    let seed = cfg.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let data = load_latent(latent, Stage::Data)?;
    let mut model = NodeModel::<f64>::new(arch, data.dim(), solver, seed).stage(Stage::Config)?;
    let history = node::train_node(&mut model, &data, &train).stage(Stage::Propagate)?;
    node::save_node(&model, out).stage(Stage::Output)?;
    write_history_csv(&history, &with_suffix(out, ".history.csv")).stage(Stage::Output)?;
    if let (Some(a), Some(b)) = (history.first(), history.last()) {
        println!("loss {:.6e} -> {:.6e} over {} epochs", a.loss, b.loss, history.len());
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let window = Window::new(a.start, a.end, a.dt);
    window.validate().stage(Stage::Config)?;
    let times = window.times();
    let latent = load_latent(&a.latent, Stage::Data)?;
    let k0 = latent
        .times
        .iter()
        .position(|&t| (t - a.start).abs() <= 1e-9 * a.dt.max(a.start.abs() * 1e-3))
        .ok_or_else(|| format!("latent trajectory has no state at t = {}", a.start))
        .stage(Stage::Data)?;
    let z0 = latent.z.col(k0).to_vec();
    let pred = match a.kind {
        ModelKind::Node => {
            let model = node::load_node::<f64>(&a.model).stage(Stage::Data)?;
            model.predict(&z0, &times).stage(Stage::Propagate)?
        }
        ModelKind::Rbf => {
            let model = rbf::load_rbf::<f64>(&a.model).stage(Stage::Data)?;
            let s = (model.dt / a.dt).round();
            if s < 1.0 || (s * a.dt - model.dt).abs() > 1e-9 * model.dt {
                return Err(PipelineError {
                    stage: Stage::Config,
                    message: format!("--dt must divide the training step {}", model.dt),
                });
            }
            let s = s as usize;
            let p = model.predict(&z0, a.start, (times.len() - 1).div_ceil(s), s).stage(Stage::Propagate)?;
            LatentTrajectory::new(p.z.columns_range(0, times.len()), times.clone()).stage(Stage::Propagate)?
        }
        ModelKind::Dmd => {
            let model = dmd::load_dmd::<f64>(&a.model).stage(Stage::Data)?;
            let z = model.predict(&times).stage(Stage::Propagate)?;
            LatentTrajectory::new(z, times.clone()).stage(Stage::Propagate)?
        }
    };
    match &a.basis {
        Some(b) => {
            let basis = pod::load_basis::<f64>(b).stage(Stage::Data)?;
            let full = pod::reconstruct(&basis, &pred).stage(Stage::Reconstruct)?;
            snapstore::save_with_manifest(&full, &a.out, Some("prediction"), Value::Null).stage(Stage::Output)?;
        }
        None => save_latent(&pred, &a.out, Stage::Propagate)?,
    }
    println!("wrote {} ({} times)", a.out.display(), times.len());
    Ok(())
}

fn eval(truth: &Path, pred: &Path, out: &Path) -> Result<()> {
    let t = load_set(truth, Stage::Data)?;
    let p = load_set(pred, Stage::Data)?;
    let e = metrics::spatial_rmse(&t, &p).stage(Stage::Score)?;
    e.write_csv(out).stage(Stage::Output)?;
    let agg = e.aggregate();
    let n = agg.rmse.len() as f64;
    println!(
        "mean rmse {:.6e}, max rmse {:.6e}, mean rel err {:.6e}",
        agg.rmse.iter().sum::<f64>() / n,
        agg.rmse.iter().copied().fold(0.0, f64::max),
        agg.rel_err.iter().sum::<f64>() / n
    );
    Ok(())
}

fn print_summary(r: &pipeline::RunReport) {
    let s = &r.summary;
    print!("{}: latent {} ({:?})", r.output_dir.display(), s.reducer.latent_dim, s.reducer.latent_dims);
    if let Some(e) = &s.errors {
        print!(", mean rmse {:.4e}, final rel err {:.4e}", e.mean_rmse, e.final_rel_err);
    }
    println!(", {} extrapolated times", s.extrapolation.count);
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => gen(&spec, &out),
        Command::Pod(a) => pod_cmd(&a),
        Command::AeTrain(a) => ae_train(&a),
        Command::NodeTrain { latent, config, out } => node_train(&latent, &config, &out),
        Command::RbfFit {
            latent,
            kernel,
            shape_c,
            lambda,
            out,
        } => {
            let kernel = match kernel {
                KernelArg::Gaussian => Kernel::Gaussian,
                KernelArg::Multiquadric => Kernel::Multiquadric,
                KernelArg::InverseMultiquadric => Kernel::InverseMultiquadric,
            };
            let data = load_latent(&latent, Stage::Data)?;
            let cfg = RbfConfig {
                kernel,
                shape: shape_c,
                lambda,
            };
            let model = rbf::fit(&data, &cfg).stage(Stage::Propagate)?;
            rbf::save_rbf(&model, &out).stage(Stage::Output)?;
            println!("fitted {} centers, lambda {:e}", model.centers.ncols(), model.lambda);
            Ok(())
        }
        Command::DmdFit {
            input,
            rank,
            out,
            spectrum,
        } => {
            let set = load_set(&input, Stage::Data)?;
            let r = rank.unwrap_or(set.n_rows().min(set.n_cols().saturating_sub(1)));
            let model = dmd::fit(set.data(), set.times(), r).stage(Stage::Propagate)?;
            dmd::save_dmd(&model, &out).stage(Stage::Output)?;
            let sp = spectrum.unwrap_or_else(|| with_suffix(&out, ".spectrum.csv"));
            model.write_spectrum_csv(&sp).stage(Stage::Output)?;
            println!("rank {r}, spectrum -> {}", sp.display());
            Ok(())
        }
        Command::Predict(a) => predict(&a),
        Command::Eval { truth, pred, out } => eval(&truth, &pred, &out),
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let report = pipeline::run(&cfg)?;
            print_summary(&report);
            Ok(())
        }
        Command::Compare { configs, out } => {
            let cfgs = configs
                .iter()
                .map(PipelineConfig::load)
                .collect::<Result<Vec<_>>>()?;
            fs::create_dir_all(&out).stage(Stage::Output)?;
            let cmp = pipeline::compare(&cfgs, &out, pipeline::thread_cap())?;
            for r in &cmp.reports {
                print_summary(r);
            }
            println!("merged errors -> {}", out.join("comparison.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nirom: {e}");
            ExitCode::FAILURE
        }
    }
}
