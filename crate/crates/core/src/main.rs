use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use pie_h2::h2_synth::{
    estimator_program, gramian_program, h2_bound_gramian, h2_bound_schur, norm_report, schur_program, synthesis_report,
    synthesize_estimator, verify_norm_certificate, verify_synthesis, H2Error, H2Options, NormCertificate,
    SynthesisResult,
};
use pie_h2::pi_op::Rl2Function;
use pie_h2::pie_model::{initial_condition, preset, InitialCondition, ObserverGain, PieSystem, Signal, PRESET_NAMES};
use pie_h2::sdp::{ClarabelBackend, SdpBackend, SolveStatus};
use pie_h2::spectral_sim::{self, SimError, Trajectory};

const STATIONS: [f64; 3] = [0.25, 0.5, 1.0];

#[derive(Parser, Debug)]
#[command(name = "pie-h2", version, about = "H2 norm bounds and optimal estimators for PIE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bound the H2 norm of a system.
    Norm(Options),
    /// Synthesize an H2-optimal observer gain.
    Synth(Options),
    /// Simulate a plant, or a plant with observer when `--gain` is given.
    Sim(Options),
    /// Synthesis, verification and simulation end-to-end.
    Demo(Options),
}

#[derive(Args, Debug, Default)]
struct Options {
    /// TOML file with any of the options below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of ode-test, ode-estimator, reaction-diffusion, beam.
    #[arg(long, conflicts_with = "system")]
    preset: Option<String>,
    /// PIE system in JSON.
    #[arg(long)]
    system: Option<PathBuf>,
    #[arg(long)]
    degree: Option<u32>,
    #[arg(long)]
    max_degree: Option<u32>,
    #[arg(long)]
    eps: Option<f64>,
    /// Solver feasibility tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long, value_enum)]
    method: Option<NormMethod>,
    /// Chebyshev basis order of the simulation.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    tfinal: Option<f64>,
    /// Disturbance: zero or sin100.
    #[arg(long)]
    signal: Option<String>,
    /// Named initial condition.
    #[arg(long)]
    ic: Option<String>,
    /// Observer gain in JSON (sim only).
    #[arg(long)]
    gain: Option<PathBuf>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the SDP of the first attempted degree in SDPA sparse format.
    #[arg(long)]
    export_sdpa: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Backend {
    Clarabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum NormMethod {
    Schur,
    Gramian,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    preset: Option<String>,
    system: Option<PathBuf>,
    degree: Option<u32>,
    max_degree: Option<u32>,
    eps: Option<f64>,
    tol: Option<f64>,
    backend: Option<Backend>,
    method: Option<NormMethod>,
    order: Option<usize>,
    dt: Option<f64>,
    tfinal: Option<f64>,
    signal: Option<String>,
    ic: Option<String>,
    gain: Option<PathBuf>,
    probes: Option<usize>,
    out: Option<PathBuf>,
    export_sdpa: Option<PathBuf>,
}

enum Source {
    Preset(String),
    File(PathBuf),
}

struct RunConfig {
    source: Source,
    system: PieSystem,
    h2: H2Options,
    tol: f64,
    backend: Backend,
    method: NormMethod,
    order: usize,
    dt: f64,
    t_final: f64,
    signal: Signal,
    ic: InitialCondition,
    gain: Option<PathBuf>,
    probes: usize,
    out: PathBuf,
    export_sdpa: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(PathBuf, std::io::Error),
    Infeasible(String),
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Infeasible(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(..) => 4,
            CliError::Config(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

impl From<H2Error> for CliError {
    fn from(e: H2Error) -> Self {
        match e {
            H2Error::Infeasible { .. } | H2Error::Solver(SolveStatus::Infeasible) => {
                CliError::Infeasible(e.to_string())
            }
            H2Error::Invalid(m) => CliError::Config(m),
            e => CliError::Solver(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io { path, source } => CliError::Io(path, source),
            SimError::Invalid(m) => CliError::Config(m),
            e => CliError::Solver(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn positive<T: PartialOrd + Default + fmt::Display>(name: &str, v: T) -> Result<T> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn resolve(opts: Options) -> Result<RunConfig> {
    let file: FileConfig = match &opts.config {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => FileConfig::default(),
    };
    let (preset_name, system_path) = match (opts.preset, opts.system) {
        (None, None) => (file.preset, file.system),
        flags => flags,
    };
    let (source, system, defaults) = match (preset_name, system_path) {
        (Some(_), Some(_)) => return Err(CliError::Config("give either a preset or a system file".into())),
        (Some(name), None) => {
            let p = preset(&name).ok_or_else(|| {
                CliError::Config(format!("unknown preset {name:?}; expected one of {}", PRESET_NAMES.join(", ")))
            })?;
            let system = p.system.clone();
            (Source::Preset(name), system, Some(p))
        }
        (None, Some(path)) => {
            let system = PieSystem::from_json(&read(&path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (Source::File(path), system, None)
        }
        (None, None) => return Err(CliError::Config("no system given (use --preset or --system)".into())),
    };
    let mut h2 = H2Options::default();
    h2.degree = opts.degree.or(file.degree).unwrap_or(h2.degree);
    h2.max_degree = opts.max_degree.or(file.max_degree).unwrap_or(h2.max_degree.max(h2.degree));
    h2.eps = positive("eps", opts.eps.or(file.eps).unwrap_or(h2.eps))?;
    let signal = match opts.signal.or(file.signal) {
        Some(name) => Signal::by_name(&name).ok_or_else(|| CliError::Config(format!("unknown signal {name:?}")))?,
        None => defaults.as_ref().map_or(Signal::Zero, |p| p.signal),
    };
    let ic = match opts.ic.or(file.ic) {
        Some(name) => named_ic(&source, &system, &name)?,
        None => match &defaults {
            Some(p) => p.initial.clone(),
            None => Rl2Function::zero(system.state_dims(), system.domain()),
        },
    };
    Ok(RunConfig {
        h2,
        tol: positive("tol", opts.tol.or(file.tol).unwrap_or(ClarabelBackend::default().tol))?,
        backend: opts.backend.or(file.backend).unwrap_or(Backend::Clarabel),
        method: opts.method.or(file.method).unwrap_or(NormMethod::Schur),
        order: positive("order", opts.order.or(file.order).unwrap_or(spectral_sim::DEFAULT_ORDER))?,
        dt: positive("dt", opts.dt.or(file.dt).unwrap_or(defaults.as_ref().map_or(0.01, |p| p.dt)))?,
        t_final: positive(
            "tfinal",
            opts.tfinal.or(file.tfinal).unwrap_or(defaults.as_ref().map_or(1.0, |p| p.t_final)),
        )?,
        signal,
        ic,
        gain: opts.gain.or(file.gain),
        probes: positive("probes", opts.probes.or(file.probes).unwrap_or(100))?,
        out: opts.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        export_sdpa: opts.export_sdpa.or(file.export_sdpa),
        source,
        system,
    })
}

fn named_ic(source: &Source, system: &PieSystem, name: &str) -> Result<InitialCondition> {
    let found = match source {
        Source::Preset(p) => initial_condition(p, name),
        Source::File(_) => {
            PRESET_NAMES.iter().filter_map(|p| initial_condition(p, name)).find(|ic| ic.dims() == system.state_dims())
        }
    };
    found.ok_or_else(|| CliError::Config(format!("no initial condition {name:?} for this system")))
}

impl RunConfig {
    fn backend(&self) -> Box<dyn SdpBackend> {
        match self.backend {
            Backend::Clarabel => Box::new(ClarabelBackend { tol: self.tol, ..Default::default() }),
        }
    }

    fn label(&self) -> String {
        match &self.source {
            Source::Preset(p) => p.clone(),
            Source::File(path) => path.display().to_string(),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Io(self.out.clone(), e))?;
        Ok(&self.out)
    }
}

fn export_sdpa(cfg: &RunConfig, synth: bool) -> Result<()> {
    let Some(path) = &cfg.export_sdpa else { return Ok(()) };
    let sys = &cfg.system;
    let built = match (synth, cfg.method) {
        (true, _) => estimator_program(sys, &cfg.h2, cfg.h2.degree),
        (false, NormMethod::Schur) => schur_program(sys, &cfg.h2, cfg.h2.degree),
        (false, NormMethod::Gramian) => gramian_program(sys, &cfg.h2, cfg.h2.degree),
    }?;
    write(path, &built.compile().to_sdpa())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_norm(cfg: &RunConfig) -> Result<NormCertificate> {
    export_sdpa(cfg, false)?;
    let backend = cfg.backend();
    let cert = match cfg.method {
        NormMethod::Schur => h2_bound_schur(&cfg.system, &cfg.h2, backend.as_ref()),
        NormMethod::Gramian => h2_bound_gramian(&cfg.system, &cfg.h2, backend.as_ref()),
    }?;
    let check = verify_norm_certificate(&cfg.system, &cert, cfg.probes)?;
    let out = cfg.out_dir()?;
    let report = norm_report(&cert, Some(&check));
    write(&out.join("norm_report.txt"), &report)?;
    write(&out.join("P.json"), &cert.p.to_json())?;
    let summary = json!({
        "system": cfg.label(),
        "method": cert.method,
        "gamma": cert.gamma,
        "W": rows(&cert.w),
        "eps": cert.eps,
        "degree": cert.degree,
        "status": cert.status,
        "tolerance": cert.tolerance,
        "verification": check,
    });
    write(&out.join("certificate.json"), &pretty(&summary))?;
    println!("gamma = {:.6}", cert.gamma);
    if !check.passed() {
        log::warn!("re-verification failed:\n{report}");
    }
    Ok(cert)
}

fn cmd_synth(cfg: &RunConfig) -> Result<SynthesisResult> {
    export_sdpa(cfg, true)?;
    let backend = cfg.backend();
    let res = synthesize_estimator(&cfg.system, &cfg.h2, backend.as_ref())?;
    let check = verify_synthesis(&cfg.system, &res, cfg.probes)?;
    let out = cfg.out_dir()?;
    let report = synthesis_report(&res, Some(&check));
    write(&out.join("synthesis_report.txt"), &report)?;
    write(&out.join("gain.json"), &res.gain.to_json())?;
    write(&out.join("P.json"), &res.p.to_json())?;
    write(&out.join("Z.json"), &res.z.to_json())?;
    let summary = json!({
        "system": cfg.label(),
        "gamma": res.gamma,
        "W": rows(&res.w),
        "eps": res.eps,
        "degree": res.degree,
        "status": res.status,
        "tolerance": res.tolerance,
        "inversion_degree": res.inversion_degree,
        "inversion_residual": res.inversion_residual,
        "gain_residual": res.gain_residual,
        "residual_ok": res.residual_ok,
        "verification": check,
    });
    write(&out.join("synthesis.json"), &pretty(&summary))?;
    println!("gamma = {:.6}", res.gamma);
    if !check.passed() {
        log::warn!("re-verification failed:\n{report}");
    }
    Ok(res)
}

fn emit(cfg: &RunConfig, traj: &Trajectory, stem: &str) -> Result<()> {
    let out = cfg.out_dir()?;
    spectral_sim::emit_csv(traj, &out.join(format!("{stem}.csv")), &STATIONS, 0)?;
    for p in spectral_sim::emit_plots(traj, &out.join(stem), &STATIONS, 0)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn observer_run(cfg: &RunConfig, gain: &ObserverGain) -> Result<Trajectory> {
    let traj =
        spectral_sim::simulate_observer(&cfg.system, gain, &cfg.signal, &cfg.ic, cfg.order, cfg.dt, cfg.t_final)?;
    emit(cfg, &traj, "observer")?;
    if let Some(obs) = &traj.observer {
        let last = obs.e_z.last().map_or(0.0, |e| e.amax());
        let peak = obs.e_z.iter().map(|e| e.amax()).fold(0.0, f64::max);
        println!("|e_z| at t = {}: {last:.3e} (peak {peak:.3e})", cfg.t_final);
    }
    Ok(traj)
}

fn plant_run(cfg: &RunConfig) -> Result<Trajectory> {
    let proj = spectral_sim::project(&cfg.system, cfg.order);
    let traj = spectral_sim::simulate(&proj, &cfg.signal, &cfg.ic, cfg.dt, cfg.t_final)?;
    emit(cfg, &traj, "plant")?;
    if let (Some(first), Some(last)) = (traj.field_norm.first(), traj.field_norm.last()) {
        println!("|T x| at t = 0: {first:.3e}, at t = {}: {last:.3e}", cfg.t_final);
    }
    Ok(traj)
}

fn cmd_sim(cfg: &RunConfig) -> Result<()> {
    match &cfg.gain {
        Some(path) => {
            let gain = ObserverGain::from_json(&read(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            observer_run(cfg, &gain)?;
        }
        None => {
            plant_run(cfg)?;
        }
    }
    Ok(())
}

fn cmd_demo(cfg: &RunConfig) -> Result<()> {
    let res = cmd_synth(cfg)?;
    plant_run(cfg)?;
    observer_run(cfg, &res.gain)?;
    Ok(())
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Norm(o) => cmd_norm(&resolve(o)?).map(drop),
        Command::Synth(o) => cmd_synth(&resolve(o)?).map(drop),
        Command::Sim(o) => cmd_sim(&resolve(o)?),
        Command::Demo(o) => cmd_demo(&resolve(o)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(5);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
