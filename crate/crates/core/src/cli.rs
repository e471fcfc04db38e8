//! Command-line entry points. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::attack::{pgd_attack, PgdSettings};
use crate::bounds::{interval_propagate, PerturbationRegion};
use crate::conic_solver::SolverSettings;
use crate::error::{CertError, Result};
use crate::harness::{certify_dataset, read_dataset, write_report, CertifyOptions, Example, Method};
use crate::network::ReluNetwork;
use crate::sdp_relax::{moment_index_map, SdpOptions};
use crate::theory::gap_experiment;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "certikit", version, about = "Certify ReLU classifiers against l-infinity perturbations")]
pub struct Cli {
    /// Worker threads for independent (point, class) jobs.
    #[arg(long, global = true, env = "CERTIKIT_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify every point of a dataset and write a JSON-lines report.
    Certify(CertifyArgs),
    /// Run PGD on every point and write closest-incorrect margins as CSV.
    Attack(AttackArgs),
    /// Compare LP and SDP values on random sign networks and write a CSV table.
    GapBench(GapBenchArgs),
    /// Print the architecture and relaxation sizes of a network.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Sdp,
    Lp,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sdp => Method::Sdp,
            MethodArg::Lp => Method::Lp,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-6)]
    pub abs_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub polish_steps: usize,
}

impl SolverArgs {
    fn settings(&self) -> Result<SolverSettings> {
        let s = SolverSettings {
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
            rho: self.rho,
            polish_steps: self.polish_steps,
            ..SolverSettings::default()
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PgdArgs {
    #[arg(long, default_value_t = 0.1)]
    pub pgd_step: f64,
    #[arg(long, default_value_t = 40)]
    pub pgd_iters: usize,
    #[arg(long, default_value_t = 5)]
    pub pgd_restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PgdArgs {
    fn settings(&self) -> Result<PgdSettings> {
        let s = PgdSettings {
            step: self.pgd_step,
            iterations: self.pgd_iters,
            restarts: self.pgd_restarts,
            seed: self.seed,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Sdp)]
    pub method: MethodArg,
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep interval rows on the input layer only (SDP).
    #[arg(long)]
    pub no_intermediate_quad: bool,
    /// Drop interval rows on the last hidden layer (SDP).
    #[arg(long)]
    pub no_last_layer_quad: bool,
    /// Skip the companion PGD margin.
    #[arg(long)]
    pub no_pgd: bool,
    /// Write 0 for every timing field so reports are byte-reproducible.
    #[arg(long)]
    pub no_timings: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub pgd: PgdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the adversarial inputs (id, then features) to this CSV.
    #[arg(long)]
    pub dump_adv: Option<PathBuf>,
    #[command(flatten)]
    pub pgd: PgdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GapBenchArgs {
    /// Comma-separated sizes `m = d`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub net: PathBuf,
    /// With `--eps`, also count interval-unstable units per point.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub eps: Option<f64>,
}

pub fn exit_code(err: &CertError) -> i32 {
    match err {
        CertError::Budget { .. } => EXIT_BUDGET,
        CertError::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CertError::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CertError::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Certify(a) => cmd_certify(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::GapBench(a) => cmd_gapbench(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CertError::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_inputs(net: &Path, data: &Path, eps: f64) -> Result<(ReluNetwork, Vec<Example>)> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(CertError::Config(format!("--eps must be finite and nonnegative, got {eps}")));
    }
    let net = ReluNetwork::from_json(&read_file(net)?)?;
    let data = read_dataset(read_file(data)?.as_bytes())?;
    Ok((net, data))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CertError::Config(format!("cannot write {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn cmd_certify(a: &CertifyArgs) -> Result<()> {
    let method = Method::from(a.method);
    if method == Method::Lp && (a.no_intermediate_quad || a.no_last_layer_quad) {
        return Err(CertError::Config("quadratic-row ablations apply to --method sdp only".into()));
    }
    let solver = a.solver.settings()?;
    let pgd = if a.no_pgd { None } else { Some(a.pgd.settings()?) };
    let (net, data) = load_inputs(&a.net, &a.data, a.eps)?;
    let opts = CertifyOptions {
        method,
        sdp: SdpOptions {
            include_intermediate_quadratic: !a.no_intermediate_quad,
            include_last_layer_quadratic: !a.no_last_layer_quad,
            solver,
        },
        pgd,
    };
    let (verdicts, summary) = certify_dataset(&net, &data, a.eps, &opts);
    let mut out = output(a.out.as_deref())?;
    write_report(&mut out, &verdicts, &summary, !a.no_timings)?;
    out.flush()?;
    Ok(())
}

pub fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let settings = a.pgd.settings()?;
    let (net, data) = load_inputs(&a.net, &a.data, a.eps)?;
    let results = data
        .par_iter()
        .map(|e| {
            let region = PerturbationRegion::new(e.x.clone(), a.eps)?;
            pgd_attack(&net, &region, e.label, &settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let csv_err = |e: csv::Error| CertError::Io(io::Error::other(e));
    let mut writer = csv::Writer::from_writer(output(a.out.as_deref())?);
    writer.write_record(["id", "margin", "success"]).map_err(csv_err)?;
    for (id, r) in results.iter().enumerate() {
        writer.serialize((id, r.closest_margin, u8::from(r.success))).map_err(csv_err)?;
    }
    writer.flush()?;
    if let Some(path) = &a.dump_adv {
        let mut dump = csv::WriterBuilder::new().has_headers(false).from_writer(output(Some(path))?);
        for (id, r) in results.iter().enumerate() {
            let mut row = vec![id.to_string()];
            row.extend(r.x_adv.iter().map(|v| v.to_string()));
            dump.write_record(&row).map_err(csv_err)?;
        }
        dump.flush()?;
    }
    Ok(())
}

pub fn cmd_gapbench(a: &GapBenchArgs) -> Result<()> {
    let solver = a.solver.settings()?;
    let table = gap_experiment(&a.sizes, a.trials, a.seed, &solver)?;
    let mut out = output(a.out.as_deref())?;
    table.write_csv(&mut out)?;
    out.flush()?;
    let bad = table.violations(1e-6, 1e-5);
    if !bad.is_empty() {
        return Err(CertError::Numerical(format!(
            "{} row(s) break the LP/SDP bound invariants (first: m={}, trial={})",
            bad.len(),
            bad[0].m,
            bad[0].trial
        )));
    }
    eprintln!("gamma_hat = {}", table.gamma_hat());
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let net = ReluNetwork::from_json(&read_file(&a.net)?)?;
    let moment_dim = moment_index_map(&net).ok().map(|m| m.n);
    let mut report = json!({
        "input_dim": net.input_dim(),
        "hidden_widths": net.layers.iter().map(|l| l.rows).collect::<Vec<_>>(),
        "classes": net.num_classes(),
        "hidden_units": net.hidden_units(),
        "moment_dim": moment_dim,
    });
    match (&a.data, a.eps) {
        (Some(data), Some(eps)) => {
            if !(eps >= 0.0) {
                return Err(CertError::Config(format!("--eps must be nonnegative, got {eps}")));
            }
            let data = read_dataset(read_file(data)?.as_bytes())?;
            let unstable = data
                .iter()
                .map(|e| Ok(interval_propagate(&net, &PerturbationRegion::new(e.x.clone(), eps)?)?.unstable_units()))
                .collect::<Result<Vec<_>>>()?;
            report["unstable_units"] = json!(unstable);
        }
        (None, None) => {}
        _ => return Err(CertError::Config("--data and --eps must be given together".into())),
    }
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &report).map_err(|e| CertError::Io(e.into()))?;
    writeln!(out)?;
    Ok(())
}
