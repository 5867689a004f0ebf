//! `ewa`: lasso, exponentially weighted aggregates, compatibility factors,
//! trace regression and replicated experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Errors are written to stderr as one JSON object.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use ewa_core::compatibility::{kappa_vector, KappaMode, DEFAULT_BUDGET};
use ewa_core::error::ErrorKind;
use ewa_core::experiment::{fit_vector_ewa, run_experiment, ExperimentSpec, ORTHONORMAL_TOL};
use ewa_core::io::{load_design_csv, load_problem, DataSource};
use ewa_core::lasso::{fit_lasso, kkt_violation, lasso_sure};
use ewa_core::orthonormal::{
    ewa_closed_form, h_curve, linspace, orthonormality_defect, ShrinkageInputs, H_CURVE_POINTS,
};
use ewa_core::quadrature::{oracle_integrals, QuadratureGrid};
use ewa_core::sampler::{
    check_variance_bound, ewa_sure, h_by_definition, h_general_with_se, sample_posterior, summarize, SamplerConfig,
    SamplerProfile,
};
use ewa_core::trace::{
    check_matrix_concentration, check_matrix_variance_bound, fit_nnp_ls, load_trace_problem, matrix_ewa, matrix_h,
    matrix_sampler_config, sample_matrix_posterior, TraceProblem,
};
use ewa_core::{Error, RegressionProblem, Tuning};

#[derive(Debug, Parser)]
#[command(
    name = "ewa",
    version,
    about = "Exponentially weighted aggregation with Laplace and nuclear-norm priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (a directory for `experiment`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; each subcommand has its own default.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Do not echo summaries to stdout when writing to --out.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lasso by coordinate descent, with duality gap and SURE.
    FitLasso {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iter: usize,
    },
    /// Closed-form EWA for a design with X^T X / n = I.
    EwaClosed {
        #[command(flatten)]
        data: DataArgs,
    },
    /// EWA by Langevin sampling.
    EwaSample {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Also write the draws (one row each) to this CSV file.
        #[arg(long)]
        draws: Option<PathBuf>,
    },
    /// EWA by direct numerical integration (p <= 3).
    EwaQuadrature {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Stein unbiased risk estimates of the EWA and of the lasso.
    Sure {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Curves z -> h(lambda_bar, z) of the orthonormal peakedness term.
    HCurve {
        /// One or more values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        lambda_bar: Vec<f64>,
        /// Grid points on [0, 2 lambda_bar].
        #[arg(long, default_value_t = H_CURVE_POINTS)]
        points: usize,
    },
    /// Compatibility factor kappa_{J,c} of a design.
    Kappa {
        /// JSON problem document (only the design is used).
        #[arg(long, conflicts_with = "design")]
        data: Option<PathBuf>,
        /// Row-major design CSV.
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        header: bool,
        /// 0-based indices of J, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        set: Vec<usize>,
        #[arg(long, default_value_t = 3.0)]
        c: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
        /// Random directions in estimate mode.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Nuclear-norm penalised least squares for trace regression.
    FitNnp {
        /// JSON trace document {shape, tensor, response, sigma, lambda, tau}.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iter: usize,
    },
    /// Matrix EWA by Langevin sampling.
    EwaMatrix {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Replicated study described by a JSON spec; writes report.csv and summary.json.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Exact,
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfileArg {
    Default,
    Accurate,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// JSON problem document {design, response, sigma, lambda, tau}.
    #[arg(long, conflicts_with_all = ["design", "response"])]
    data: Option<PathBuf>,
    /// Row-major design CSV.
    #[arg(long, requires = "response")]
    design: Option<PathBuf>,
    /// Response CSV, one value per line.
    #[arg(long, requires = "design")]
    response: Option<PathBuf>,
    /// The CSV files start with a header line.
    #[arg(long)]
    header: bool,
    /// Noise level (overrides the document).
    #[arg(long)]
    sigma: Option<f64>,
    /// Penalty level (overrides the document).
    #[arg(long)]
    lambda: Option<f64>,
    /// Temperature (overrides the document).
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    #[arg(long, value_enum, default_value_t = ProfileArg::Default)]
    profile: ProfileArg,
    /// Retained draws.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thinning: Option<usize>,
    /// Langevin step size.
    #[arg(long)]
    step: Option<f64>,
    /// Moreau envelope parameter.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    chains: Option<usize>,
}

impl SamplerArgs {
    fn profile(&self) -> SamplerProfile {
        match self.profile {
            ProfileArg::Default => SamplerProfile::Default,
            ProfileArg::Accurate => SamplerProfile::Accurate,
        }
    }

    fn apply(&self, mut c: SamplerConfig) -> SamplerConfig {
        c.n_samples = self.samples.unwrap_or(c.n_samples);
        c.burn_in = self.burn_in.unwrap_or(c.burn_in);
        c.thinning = self.thinning.unwrap_or(c.thinning);
        c.step_size = self.step.unwrap_or(c.step_size);
        c.moreau_gamma = self.gamma.unwrap_or(c.moreau_gamma);
        c.chains = self.chains.unwrap_or(c.chains);
        c
    }
}

/// A failure with its exit-code class.
#[derive(Debug)]
struct Failure {
    kind: ErrorKind,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: ErrorKind::Usage,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        kind: ErrorKind::Data,
        message: message.into(),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail(&usage(e.to_string().trim_end()));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let code = exit_code(f.kind);
    let body = json!({ "error": kind_name(f.kind), "message": f.message, "exit_code": code });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::FitLasso { data, tol, max_iter } => fit_lasso_cmd(cli, data, *tol, *max_iter),
        Command::EwaClosed { data } => ewa_closed_cmd(cli, data),
        Command::EwaSample { data, sampler, draws } => ewa_sample_cmd(cli, data, sampler, draws.as_deref()),
        Command::EwaQuadrature { data } => ewa_quadrature_cmd(cli, data),
        Command::Sure { data, sampler } => sure_cmd(cli, data, sampler),
        Command::HCurve { lambda_bar, points } => h_curve_cmd(cli, lambda_bar, *points),
        Command::Kappa {
            data,
            design,
            header,
            set,
            c,
            mode,
            budget,
        } => kappa_cmd(
            cli,
            data.as_deref(),
            design.as_deref(),
            *header,
            set,
            *c,
            *mode,
            *budget,
        ),
        Command::FitNnp { data, tol, max_iter } => fit_nnp_cmd(cli, data, *tol, *max_iter),
        Command::EwaMatrix { data, sampler } => ewa_matrix_cmd(cli, data, sampler),
        Command::Experiment { spec } => experiment_cmd(cli, spec),
    }
}

// ------------------------------------------------------------------ output

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!(m
        .row_iter()
        .map(|r| r.iter().copied().collect::<Vec<f64>>())
        .collect::<Vec<_>>())
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| r.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| data_error(format!("cannot write {}: {e}", path.display())))
}

/// Writes the chosen representation to --out or stdout.
fn emit(cli: &Cli, default: Format, json_value: Value, csv: impl FnOnce() -> String) -> Result<(), Failure> {
    let text = match cli.format.unwrap_or(default) {
        Format::Json => serde_json::to_string_pretty(&json_value).expect("plain data serialises") + "\n",
        Format::Csv => csv(),
    };
    match &cli.out {
        Some(path) => {
            write_file(path, &text)?;
            if !cli.quiet {
                println!("{}", json!({ "written": path.display().to_string() }));
            }
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| data_error(format!("cannot write to stdout: {e}")))?;
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- input

fn load(data: &DataArgs) -> Result<RegressionProblem, Failure> {
    let override_tuning = |t: Tuning| {
        Tuning::new(
            data.sigma.unwrap_or(t.sigma),
            data.lambda.unwrap_or(t.lambda),
            data.tau.unwrap_or(t.tau),
        )
    };
    match (&data.data, &data.design, &data.response) {
        (Some(path), _, _) => {
            let pb = load_problem(&DataSource::Json(path.clone()))?;
            let tuning = override_tuning(pb.tuning())?;
            Ok(pb.with_tuning(tuning)?)
        }
        (None, Some(design), Some(response)) => {
            let (Some(lambda), Some(tau)) = (data.lambda, data.tau) else {
                return Err(usage("CSV input needs --lambda and --tau"));
            };
            let tuning = Tuning::new(data.sigma.unwrap_or(1.0), lambda, tau)?;
            Ok(load_problem(&DataSource::CsvPair {
                design: design.clone(),
                response: response.clone(),
                header: data.header,
                tuning,
            })?)
        }
        _ => Err(usage("give --data <json> or --design <csv> --response <csv>")),
    }
}

fn sampler_config(pb: &RegressionProblem, args: &SamplerArgs, seed: u64) -> SamplerConfig {
    args.apply(SamplerConfig::for_problem(pb, args.profile(), seed))
}

// --------------------------------------------------------------- commands

fn fit_lasso_cmd(cli: &Cli, data: &DataArgs, tol: f64, max_iter: usize) -> Result<(), Failure> {
    let pb = load(data)?;
    let fit = fit_lasso(&pb, tol, max_iter)?;
    let value = json!({
        "coefficients": vec_json(&fit.coefficients),
        "active_set": fit.active_set,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "duality_gap": fit.duality_gap,
        "kkt_violation": kkt_violation(&pb, &fit.coefficients),
        "sure": lasso_sure(&pb, &fit)?,
    });
    emit(cli, Format::Json, value, || {
        let mut s = String::from("index,coefficient\n");
        for (j, v) in fit.coefficients.iter().enumerate() {
            s += &format!("{j},{}\n", num(*v));
        }
        s
    })
}

fn coefficient_csv(mean: &DVector<f64>, second: &DVector<f64>, label: &str) -> String {
    let mut s = format!("index,mean,{label}\n");
    for j in 0..mean.len() {
        s += &format!("{j},{},{}\n", num(mean[j]), num(second[j]));
    }
    s
}

fn ewa_closed_cmd(cli: &Cli, data: &DataArgs) -> Result<(), Failure> {
    let pb = load(data)?;
    let defect = orthonormality_defect(&pb);
    if defect > ORTHONORMAL_TOL {
        return Err(data_error(format!(
            "design is not orthonormal: max |X^T X / n - I| = {defect:e}; use ewa-sample or ewa-quadrature"
        )));
    }
    let est = ewa_closed_form(&ShrinkageInputs::from_problem(&pb)?);
    let var = est.covariance.diagonal();
    let value = json!({
        "mean": vec_json(&est.mean),
        "variance": vec_json(&var),
        "h": est.h_value,
        "p_tau": pb.p() as f64 * pb.tau(),
        "sure": ewa_sure(&pb, &est)?,
    });
    emit(cli, Format::Json, value, || {
        coefficient_csv(&est.mean, &var, "variance")
    })
}

fn ewa_sample_cmd(cli: &Cli, data: &DataArgs, args: &SamplerArgs, draws: Option<&Path>) -> Result<(), Failure> {
    let pb = load(data)?;
    let config = sampler_config(&pb, args, cli.seed);
    let samples = sample_posterior(&pb, &config)?;
    let est = summarize(&pb, &samples)?;
    let ls = ewa_core::linalg::least_squares_pinv(pb.design(), pb.response());
    let (h, h_se) = h_general_with_se(&pb, &samples, &est, &ls)?;
    if let Some(path) = draws {
        let rows: Vec<Vec<f64>> = samples.draws.iter().map(|d| d.iter().copied().collect()).collect();
        ewa_core::io::write_csv(path, None, &rows)?;
    }
    // the identity uses the pseudoinverse; the definition does not, so they
    // can differ for rank-deficient designs
    let (h_def, h_def_se) = h_by_definition(&pb, &samples, &est)?;
    let value = json!({
        "mean": vec_json(&est.mean),
        "cov_diag": vec_json(&est.covariance.diagonal()),
        "h": h,
        "sure": ewa_sure(&pb, &est)?,
        "diagnostics": {
            "config": config,
            "mc_std_error": vec_json(&est.mc_std_error),
            "h_se": h_se,
            "h_by_definition": h_def,
            "h_by_definition_se": h_def_se,
            "h_discrepancy": h - h_def,
            "acceptance_rate": samples.acceptance_rate,
            "chain_lengths": samples.chain_lengths,
            "variance_bound": check_variance_bound(&pb, &samples)?,
        },
    });
    emit(cli, Format::Json, value, || {
        coefficient_csv(&est.mean, &est.mc_std_error, "mc_std_error")
    })
}

fn ewa_quadrature_cmd(cli: &Cli, data: &DataArgs) -> Result<(), Failure> {
    let pb = load(data)?;
    let res = oracle_integrals(&pb, &QuadratureGrid::auto(&pb)?)?;
    let est = &res.estimate;
    let var = est.covariance.diagonal();
    let value = json!({
        "mean": vec_json(&est.mean),
        "covariance": matrix_json(&est.covariance),
        "h": est.h_value,
        "log_normaliser": res.log_normaliser,
        "prediction_variance": res.prediction_variance,
        "p_tau": pb.p() as f64 * pb.tau(),
        "intervals": res.intervals,
    });
    emit(cli, Format::Json, value, || {
        coefficient_csv(&est.mean, &var, "variance")
    })
}

fn sure_cmd(cli: &Cli, data: &DataArgs, args: &SamplerArgs) -> Result<(), Failure> {
    let pb = load(data)?;
    let settings = ewa_core::experiment::SamplerSettings {
        profile: args.profile(),
        n_samples: args.samples,
        burn_in: args.burn_in,
        thinning: args.thinning,
        chains: args.chains,
    };
    let fit = fit_vector_ewa(&pb, &settings, cli.seed)?;
    let lasso = fit_lasso(&pb, 1e-13, 200_000)?;
    let route = if fit.samples.is_some() {
        "sampler"
    } else {
        "closed-form"
    };
    let (ewa, las) = (ewa_sure(&pb, &fit.estimate)?, lasso_sure(&pb, &lasso)?);
    let value = json!({ "ewa_sure": ewa, "lasso_sure": las, "ewa_route": route });
    emit(cli, Format::Json, value, || {
        format!("estimator,sure\newa,{}\nlasso,{}\n", num(ewa), num(las))
    })
}

fn h_curve_cmd(cli: &Cli, lambda_bars: &[f64], points: usize) -> Result<(), Failure> {
    if points < 2 {
        return Err(usage("--points must be >= 2"));
    }
    let mut csv = String::from("lambda_bar,z,h\n");
    let mut summary = Vec::new();
    for &lb in lambda_bars {
        let grid = linspace(0.0, 2.0 * lb, points);
        let h = h_curve(lb, &grid)?;
        let (k, max) = h.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        summary.push(json!({ "lambda_bar": lb, "max_h": max, "argmax_z": grid[k] }));
        for (z, v) in grid.iter().zip(&h) {
            csv += &format!("{},{},{}\n", num(lb), num(*z), num(*v));
        }
    }
    emit(cli, Format::Csv, json!({ "curves": summary }), || csv)
}

#[allow(clippy::too_many_arguments)]
fn kappa_cmd(
    cli: &Cli,
    data: Option<&Path>,
    design: Option<&Path>,
    header: bool,
    set: &[usize],
    c: f64,
    mode: ModeArg,
    budget: usize,
) -> Result<(), Failure> {
    let x = match (data, design) {
        (Some(path), _) => load_problem(&DataSource::Json(path.to_path_buf()))?.design().clone(),
        (None, Some(path)) => load_design_csv(path, header)?,
        _ => return Err(usage("give --data <json> or --design <csv>")),
    };
    let mode = match mode {
        ModeArg::Exact => KappaMode::Exact,
        ModeArg::Estimate => KappaMode::Estimate,
    };
    if mode == KappaMode::Estimate && budget == 0 {
        return Err(usage("--budget must be >= 1"));
    }
    let res = kappa_vector(&x, set, c, mode, cli.seed)?;
    let value = json!({
        "value": res.value,
        "mode": res.mode,
        "attained": res.attained,
        "witness": vec_json(&res.witness),
        "set": set,
        "c": c,
    });
    emit(cli, Format::Json, value, || {
        let mut s = String::from("index,witness\n");
        for (j, v) in res.witness.iter().enumerate() {
            s += &format!("{j},{}\n", num(*v));
        }
        s
    })
}

fn load_trace(path: &Path) -> Result<TraceProblem, Failure> {
    Ok(load_trace_problem(path)?)
}

fn fit_nnp_cmd(cli: &Cli, data: &Path, tol: f64, max_iter: usize) -> Result<(), Failure> {
    let pb = load_trace(data)?;
    let fit = fit_nnp_ls(&pb, tol, max_iter)?;
    let m = &fit.estimate.matrix;
    let value = json!({
        "matrix": matrix_json(m),
        "rank": ewa_core::linalg::numerical_rank(m),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "objective": fit.objective.last(),
    });
    emit(cli, Format::Json, value, || matrix_csv(m))
}

fn ewa_matrix_cmd(cli: &Cli, data: &Path, args: &SamplerArgs) -> Result<(), Failure> {
    let pb = load_trace(data)?;
    let config = args.apply(matrix_sampler_config(&pb, args.profile(), cli.seed));
    let samples = sample_matrix_posterior(&pb, &config)?;
    let est = matrix_ewa(&pb, &samples)?;
    let (h, h_se) = matrix_h(&pb, &samples)?;
    let (m1, m2) = pb.shape();
    let t = ((m1 * m2) as f64).sqrt();
    let value = json!({
        "config": config,
        "matrix": matrix_json(&est.matrix),
        "h": h,
        "h_se": h_se,
        "m1_m2_tau": (m1 * m2) as f64 * pb.tau(),
        "variance_bound": check_matrix_variance_bound(&pb, &samples)?,
        "concentration": check_matrix_concentration(&pb, &samples, t)?,
    });
    emit(cli, Format::Json, value, || matrix_csv(&est.matrix))
}

fn experiment_cmd(cli: &Cli, spec_path: &Path) -> Result<(), Failure> {
    let Some(dir) = &cli.out else {
        return Err(usage("experiment needs --out <directory>"));
    };
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| data_error(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: ExperimentSpec =
        serde_json::from_str(&text).map_err(|e| data_error(format!("cannot parse {}: {e}", spec_path.display())))?;
    let outcome = run_experiment(&spec)?;
    outcome.write(dir, &spec)?;
    if !cli.quiet {
        let reports: Vec<Value> = outcome
            .reports
            .iter()
            .map(|r| json!({ "name": r.name, "passed": r.passed, "asserted": ewa_core::experiment::is_asserted(r) }))
            .collect();
        let summary = json!({
            "spec_hash": spec.hash(),
            "all_asserted_passed": outcome.all_asserted_passed(),
            "reports": reports,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("plain data serialises")
        );
    }
    Ok(())
}
