use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use soc_core::bench::{run_sweep, BenchConfig, SweepAxis, SweepSpec};
use soc_core::ecm::{simulate, CellState, DEFAULT_OCV_SPACING};
use soc_core::filters::{estimator_run, EstimatorConfig, EstimatorKind, FilterState, DEFAULT_WINDOW};
use soc_core::fitting::{build_ocv_table, fit_passive_components, LmOptions, OcvSweep, PassiveComponents};
use soc_core::io::{self, RunManifest};
use soc_core::{EcmParams, Error, Result};

/// Battery state-of-charge toolkit: cell simulation, model fitting, SoC
/// estimation and Monte Carlo benchmarking.
#[derive(Debug, Parser)]
#[command(name = "soc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the cell model over a current profile.
    Simulate {
        /// Parameter document (TOML).
        #[arg(long)]
        params: PathBuf,
        /// Profile CSV with columns t,i; other columns are ignored.
        #[arg(long)]
        profile: PathBuf,
        /// Trajectory CSV t,i,v,z,v_r1,v_r2.
        #[arg(long)]
        out: PathBuf,
        /// Initial SoC; the RC branches start relaxed.
        #[arg(long, default_value_t = 0.9)]
        soc0: f64,
    },
    /// Build an OCV table from low-current charge and discharge sweeps.
    FitOcv {
        /// Charge sweep CSV t,i,v.
        #[arg(long)]
        charge: PathBuf,
        /// Discharge sweep CSV t,i,v.
        #[arg(long)]
        discharge: PathBuf,
        /// SoC spacing of the table nodes.
        #[arg(long, default_value_t = DEFAULT_OCV_SPACING)]
        spacing: f64,
        /// Document supplying the passive components to keep; the reference
        /// cell's values are used when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Output parameter document. Its capacity is the charge moved by
        /// the sweeps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the passive components to a measured profile.
    FitParams {
        /// Document with the OCV table and capacity; its passive components
        /// are the initial guess.
        #[arg(long)]
        params: PathBuf,
        /// Profile CSV t,i,v that starts at rest.
        #[arg(long)]
        profile: PathBuf,
        /// Output parameter document with the fitted components.
        #[arg(long)]
        out: PathBuf,
        /// Fit report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate SoC over a measured profile.
    Estimate {
        #[arg(long)]
        params: PathBuf,
        /// Profile CSV t,i[,v]; a `z` column is copied out as z_true.
        #[arg(long)]
        profile: PathBuf,
        /// cc, ekf, aekf-mle or aekf-cm.
        #[arg(long, default_value = "aekf-mle")]
        kind: EstimatorKind,
        /// Sliding-window length for the adaptive filters.
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Initial SoC estimate; inverted from the first voltage sample when
        /// omitted.
        #[arg(long)]
        soc0: Option<f64>,
        /// Estimate CSV t,z_est[,z_true].
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo sweep of all four estimators along one axis.
    Benchmark {
        /// window, noise (log10 factor on both noise variances) or
        /// param-error (percent on every passive component).
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        #[command(flatten)]
        run: BenchArgs,
    },
    /// Monte Carlo sweep over the window length.
    SweepWindow {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512,1024")]
        values: Vec<f64>,
        #[command(flatten)]
        run: BenchArgs,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Master seed.
    #[arg(long, default_value_t = BenchConfig::default().master_seed)]
    seed: u64,
    /// Drive-cycle length in seconds.
    #[arg(long, default_value_t = BenchConfig::default().duration)]
    duration: f64,
    /// True cell parameters; the reference cell when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Tidy CSV axis_value,estimator,mae_mean,ci_lo,ci_hi.
    #[arg(long)]
    out: PathBuf,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn finish(manifest: &RunManifest, out: &Path, contents: &str) -> Result<()> {
    io::write_file(out, contents)?;
    manifest.write(&manifest_path(out))
}

fn simulate_cmd(params_path: &Path, profile_path: &Path, out: &Path, soc0: f64) -> Result<()> {
    let params = io::read_params(params_path)?;
    let profile = io::read_profile(profile_path)?.profile;
    let trajectory = simulate(&params, CellState::at_rest(soc0), &profile)?;
    let mut manifest = RunManifest::new(
        "simulate",
        json!({"params": path_str(params_path), "profile": path_str(profile_path), "out": path_str(out), "soc0": soc0}),
        None,
    );
    manifest.add_input(params_path)?;
    manifest.add_input(profile_path)?;
    finish(&manifest, out, &io::format_trajectory(&profile, &trajectory)?)
}

fn fit_ocv_cmd(charge: &Path, discharge: &Path, spacing: f64, base: Option<&Path>, out: &Path) -> Result<()> {
    let charge_profile = io::read_profile(charge)?.profile;
    let discharge_profile = io::read_profile(discharge)?.profile;
    let (sweep, q_max) = OcvSweep::from_profiles(&charge_profile, &discharge_profile)?;
    let ocv = build_ocv_table(&sweep, spacing)?;
    let base_params = match base {
        Some(p) => io::read_params(p)?,
        None => EcmParams::reference_cell(),
    };
    let params = EcmParams {
        ocv,
        q_max,
        ..base_params
    };
    params.validate()?;
    let mut manifest = RunManifest::new(
        "fit-ocv",
        json!({
            "charge": path_str(charge),
            "discharge": path_str(discharge),
            "spacing": spacing,
            "base": base.map(path_str),
            "out": path_str(out),
        }),
        None,
    );
    manifest.add_input(charge)?;
    manifest.add_input(discharge)?;
    if let Some(b) = base {
        manifest.add_input(b)?;
    }
    finish(&manifest, out, &io::format_params(&params))
}

fn fit_params_cmd(params_path: &Path, profile_path: &Path, out: &Path, report_path: Option<&Path>) -> Result<()> {
    let params = io::read_params(params_path)?;
    let profile = io::read_profile(profile_path)?.profile;
    let opts = LmOptions::default();
    let report = fit_passive_components(&profile, &params.ocv, params.q_max, PassiveComponents::of(&params), &opts)?;
    let fitted = report.params.into_params(params.ocv.clone(), params.q_max);
    let mut manifest = RunManifest::new(
        "fit-params",
        json!({
            "params": path_str(params_path),
            "profile": path_str(profile_path),
            "out": path_str(out),
            "report": report_path.map(path_str),
            "lm": serde_json::to_value(&opts).expect("options serialise"),
        }),
        None,
    );
    manifest.add_input(params_path)?;
    manifest.add_input(profile_path)?;
    if let Some(r) = report_path {
        let mut text = serde_json::to_string_pretty(&report).expect("report serialises");
        text.push('\n');
        io::write_file(r, &text)?;
    }
    finish(&manifest, out, &io::format_params(&fitted))
}

fn estimate_cmd(
    params_path: &Path,
    profile_path: &Path,
    kind: EstimatorKind,
    window: usize,
    soc0: Option<f64>,
    out: &Path,
) -> Result<()> {
    let params = io::read_params(params_path)?;
    let file = io::read_profile(profile_path)?;
    let z0 = match (soc0, file.profile.voltage()) {
        (Some(z), _) => z,
        (None, Some(v)) => params.ocv.soc_from_ocv(v[0]),
        (None, None) => return Err(Error::Config("--soc0 is required when the profile has no voltage column".into())),
    };
    let config = EstimatorConfig::with_window(window);
    let estimate = estimator_run(kind, &params, &file.profile, &FilterState::with_defaults(z0), &config)?;
    let mut manifest = RunManifest::new(
        "estimate",
        json!({
            "params": path_str(params_path),
            "profile": path_str(profile_path),
            "kind": kind.name(),
            "window": window,
            "soc0": z0,
            "out": path_str(out),
            "estimator": serde_json::to_value(&config).expect("config serialises"),
        }),
        None,
    );
    manifest.add_input(params_path)?;
    manifest.add_input(profile_path)?;
    let text = io::format_estimate(file.profile.timestamps(), &estimate, file.soc.as_deref())?;
    finish(&manifest, out, &text)
}

fn bench_cmd(name: &str, axis: SweepAxis, values: Vec<f64>, args: &BenchArgs) -> Result<()> {
    let mut config = BenchConfig {
        master_seed: args.seed,
        duration: args.duration,
        ..BenchConfig::default()
    };
    if let Some(p) = &args.params {
        config.params_true = io::read_params(p)?;
    }
    let spec = SweepSpec::new(axis, values, args.trials);
    let result = run_sweep(&spec, &config)?;
    let mut manifest = RunManifest::new(
        name,
        json!({
            "spec": serde_json::to_value(&spec).expect("spec serialises"),
            "bench": serde_json::to_value(&config).expect("config serialises"),
            "params": args.params.as_deref().map(path_str),
            "out": path_str(&args.out),
        }),
        Some(args.seed),
    );
    if let Some(p) = &args.params {
        manifest.add_input(p)?;
    }
    finish(&manifest, &args.out, &io::format_bench(&result)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            params,
            profile,
            out,
            soc0,
        } => simulate_cmd(&params, &profile, &out, soc0),
        Command::FitOcv {
            charge,
            discharge,
            spacing,
            base,
            out,
        } => fit_ocv_cmd(&charge, &discharge, spacing, base.as_deref(), &out),
        Command::FitParams {
            params,
            profile,
            out,
            report,
        } => fit_params_cmd(&params, &profile, &out, report.as_deref()),
        Command::Estimate {
            params,
            profile,
            kind,
            window,
            soc0,
            out,
        } => estimate_cmd(&params, &profile, kind, window, soc0, &out),
        Command::Benchmark { axis, values, run } => bench_cmd("benchmark", axis, values, &run),
        Command::SweepWindow { values, run } => bench_cmd("sweep-window", SweepAxis::WindowSize, values, &run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
