//! Command-line front end: loads model configs, runs the simulation
//! pipelines, and writes CSV/JSON artifacts with a reproducibility
//! manifest next to every output.
//!
//! Exit codes: 0 success, 1 check-assertion failure, 2 configuration
//! error, 3 integration failure.

use std::fmt::Write as _;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fastslow::analysis::{self, Criterion, Pipeline};
use fastslow::integrator::Trajectory;
use fastslow::model::{parse_model, ModelSpec};
use fastslow::systems::{
    check_resonance, default_resonance_tol, from_action_angle, full_energy, full_state_from_row,
    map_full_to_action_angle, reconstruct_trajectory, run_full, run_homogenized, run_second,
    to_action_angle, TransformedState,
};
use fastslow::thermo::{
    leading_records, observables_eps, second_records, verify_constraint, ThermoRecord,
};
use fastslow::Error;

#[derive(Parser)]
#[command(name = "fastslow", version, about = "Fast–slow Hamiltonian simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one pipeline and write the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Sweep the scale separation parameter and fit error slopes.
    Sweep(SweepArgs),
    /// Search for the maximal step size meeting an accuracy criterion.
    Stepsize(StepsizeArgs),
    /// Compare step counts and wall times of the pipelines.
    Bench(BenchArgs),
    /// Compute thermodynamic observables along a trajectory.
    Thermo(ThermoArgs),
    /// Run the invariant suite against a model.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Full,
    Homog,
    Second,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchPipelineArg {
    Full,
    Slow,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Leading,
    Second,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model config path, or `builtin:test` / `builtin:const`.
    #[arg(long)]
    model: String,
    #[arg(long, value_enum)]
    pipeline: PipelineArg,
    /// Scale separation parameter (required for `full` and `second`).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    dt: f64,
    #[arg(long = "T")]
    t_end: f64,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: String,
    /// Comma-separated scale separation values, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long = "T", default_value_t = 1.0)]
    t_end: f64,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct StepsizeArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    eps: f64,
    #[arg(long, value_enum)]
    pipeline: SearchPipelineArg,
    #[arg(long, value_enum)]
    criterion: CriterionArg,
    #[arg(long = "T", default_value_t = 1.0)]
    t_end: f64,
    /// Error threshold as a multiple of the plateau error.
    #[arg(long, default_value_t = 1.5)]
    threshold: f64,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    eps: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    t_end: f64,
    #[arg(long)]
    dt_full: f64,
    #[arg(long)]
    dt_slow: f64,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct ThermoArgs {
    #[arg(long)]
    model: String,
    #[arg(long, value_enum)]
    pipeline: PipelineArg,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    dt: f64,
    #[arg(long = "T")]
    t_end: f64,
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: String,
    #[arg(long = "T", default_value_t = 1.0)]
    t_end: f64,
}

/// Reproducibility sidecar written next to every output file.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    model: String,
    eps: Vec<f64>,
    dt: Vec<f64>,
    t_end: f64,
    determinism: &'static str,
    outputs: Vec<String>,
    version: &'static str,
}

const DETERMINISM_NOTE: &str =
    "seed-free: all computations are deterministic; identical flags give byte-identical outputs";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    ExitCode::from(code)
}

/// Configuration problems exit 2, runtime/integration problems exit 3.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::MalformedExpression(_)
        | Error::DimensionMismatch(_)
        | Error::NonPositiveFrequencyAtStart { .. } => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Stepsize(a) => cmd_stepsize(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Thermo(a) => cmd_thermo(a),
        Cmd::Check(a) => cmd_check(a),
    }
}

fn load_model(spec: &str) -> Result<ModelSpec, Error> {
    match spec {
        "builtin:test" => Ok(ModelSpec::builtin_test()),
        "builtin:const" => Ok(ModelSpec::builtin_const()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::MalformedExpression(format!("cannot read model config {path}: {e}"))
            })?;
            parse_model(&text)
        }
    }
}

fn io_err(op: &str, e: std::io::Error) -> Error {
    Error::DomainError(format!("{op}: {e}"))
}

/// Adjusts the step to divide the horizon: `n = ceil(T/dt)`, `dt = T/n`.
fn adjusted_steps(t_end: f64, dt: f64) -> Result<(usize, f64), Error> {
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::MalformedExpression(format!(
            "dt and T must be positive (got dt={dt}, T={t_end})"
        )));
    }
    let n = (t_end / dt).ceil() as usize;
    Ok((n, t_end / n as f64))
}

fn require_eps(eps: Option<f64>) -> Result<f64, Error> {
    let eps = eps.ok_or_else(|| {
        Error::MalformedExpression("--eps is required for this pipeline".into())
    })?;
    if !(eps > 0.0) {
        return Err(Error::MalformedExpression(format!(
            "--eps must be positive (got {eps})"
        )));
    }
    Ok(eps)
}

/// Formats a float with full round-trip precision (17 significant digits).
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &str, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| io_err(&format!("writing {path}"), e))
}

fn write_manifest(
    out: &str,
    model: &str,
    eps: &[f64],
    dt: &[f64],
    t_end: f64,
    outputs: &[String],
) -> Result<(), Error> {
    let manifest = RunManifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        model: model.to_string(),
        eps: eps.to_vec(),
        dt: dt.to_vec(),
        t_end,
        determinism: DETERMINISM_NOTE,
        outputs: outputs.to_vec(),
        version: env!("CARGO_PKG_VERSION"),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::DomainError(format!("serializing manifest: {e}")))?;
    write_file(&format!("{out}.manifest.json"), &json)
}

fn write_json<T: Serialize>(out: &str, value: &T) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::DomainError(format!("serializing report: {e}")))?;
    write_file(out, &json)
}

/// Writes named columns of a trajectory as CSV, one source column index
/// per output column.
fn trajectory_csv(traj: &Trajectory, header: &[String], cols: &[usize]) -> String {
    let mut csv = String::from("t");
    for h in header {
        csv.push(',');
        csv.push_str(h);
    }
    csv.push('\n');
    for i in 0..traj.len() {
        csv.push_str(&fmt17(traj.times[i]));
        let row = traj.row(i);
        for &c in cols {
            csv.push(',');
            csv.push_str(&fmt17(row[c]));
        }
        csv.push('\n');
    }
    csv
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8, Error> {
    let model = load_model(&a.model)?;
    let (n, r) = (model.n, model.r);
    let (_steps, dt) = adjusted_steps(a.t_end, a.dt)?;
    let tol = default_resonance_tol(&model);

    let csv = match a.pipeline {
        PipelineArg::Full => {
            let eps = require_eps(a.eps)?;
            if dt > eps {
                eprintln!("warning: step likely under-resolves fast phase (dt > eps)");
            }
            let traj = run_full(&model, eps, a.t_end, dt, 1)?;
            // Stored as [y, z, ydot, zdot]; emitted as t, y, p, z, zdot.
            let mut header = Vec::new();
            let mut cols = Vec::new();
            for j in 0..n {
                header.push(format!("y{}", j + 1));
                cols.push(j);
            }
            for j in 0..n {
                header.push(format!("p{}", j + 1));
                cols.push(n + r + j);
            }
            for l in 0..r {
                header.push(format!("z{}", l + 1));
                cols.push(n + l);
            }
            for l in 0..r {
                header.push(format!("zdot{}", l + 1));
                cols.push(2 * n + r + l);
            }
            trajectory_csv(&traj, &header, &cols)
        }
        PipelineArg::Homog => {
            let traj = run_homogenized(&model, a.t_end, dt, 1)?;
            // Stored as [y, phi, p]; emitted as t, y, p, phi0.
            let mut header = Vec::new();
            let mut cols = Vec::new();
            for j in 0..n {
                header.push(format!("y{}", j + 1));
                cols.push(j);
            }
            for j in 0..n {
                header.push(format!("p{}", j + 1));
                cols.push(n + r + j);
            }
            for l in 0..r {
                header.push(format!("phi0{}", l + 1));
                cols.push(n + l);
            }
            trajectory_csv(&traj, &header, &cols)
        }
        PipelineArg::Second => {
            let eps = require_eps(a.eps)?;
            let run = run_second(&model, a.t_end, dt, 1, tol)?;
            let recon = reconstruct_trajectory(&model, &run, eps, tol)?;
            // Stored as [y0, phi0, ybar2, phibar2, p0, pbar2].
            let mut header = Vec::new();
            let mut cols = Vec::new();
            for j in 0..n {
                header.push(format!("y{}", j + 1));
                cols.push(j);
            }
            for j in 0..n {
                header.push(format!("p{}", j + 1));
                cols.push(2 * n + 2 * r + j);
            }
            for l in 0..r {
                header.push(format!("phi0{}", l + 1));
                cols.push(n + l);
            }
            for j in 0..n {
                header.push(format!("ybar2{}", j + 1));
                cols.push(n + r + j);
            }
            for j in 0..n {
                header.push(format!("pbar2{}", j + 1));
                cols.push(3 * n + 2 * r + j);
            }
            for l in 0..r {
                header.push(format!("phibar2{}", l + 1));
                cols.push(2 * n + r + l);
            }
            let mut csv = trajectory_csv(&run.traj, &header, &cols);
            // Splice in the reconstructed slow positions.
            let mut lines: Vec<String> = csv.lines().map(String::from).collect();
            for j in 0..n {
                let _ = write!(lines[0], ",y_recon{}", j + 1);
            }
            for i in 0..recon.len() {
                for v in recon.row(i) {
                    let _ = write!(lines[i + 1], ",{}", fmt17(*v));
                }
            }
            csv = lines.join("\n");
            csv.push('\n');
            csv
        }
    };
    write_file(&a.out, &csv)?;
    let eps_list: Vec<f64> = a.eps.into_iter().collect();
    write_manifest(&a.out, &a.model, &eps_list, &[dt], a.t_end, &[a.out.clone()])?;
    Ok(0)
}

fn cmd_sweep(a: SweepArgs) -> Result<u8, Error> {
    let model = load_model(&a.model)?;
    let report = analysis::eps_sweep(&model, &a.eps, a.t_end)?;
    write_json(&a.out, &report)?;
    let dts: Vec<f64> = report
        .points
        .iter()
        .flat_map(|p| [p.dt_full, p.dt_slow])
        .collect();
    write_manifest(&a.out, &a.model, &a.eps, &dts, a.t_end, &[a.out.clone()])?;
    Ok(0)
}

fn cmd_stepsize(a: StepsizeArgs) -> Result<u8, Error> {
    let model = load_model(&a.model)?;
    let pipeline = match a.pipeline {
        SearchPipelineArg::Full => Pipeline::Full,
        SearchPipelineArg::Slow => Pipeline::Slow,
    };
    let criterion = match a.criterion {
        CriterionArg::Leading => Criterion::Leading,
        CriterionArg::Second => Criterion::Second,
    };
    let report =
        analysis::stepsize_search(&model, a.eps, pipeline, criterion, a.t_end, a.threshold)?;
    write_json(&a.out, &report)?;
    write_manifest(
        &a.out,
        &a.model,
        &[a.eps],
        &report.dts,
        a.t_end,
        &[a.out.clone()],
    )?;
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> Result<u8, Error> {
    let model = load_model(&a.model)?;
    let report = analysis::bench(&model, a.eps, a.t_end, a.dt_full, a.dt_slow)?;
    write_json(&a.out, &report)?;
    write_manifest(
        &a.out,
        &a.model,
        &[a.eps],
        &[report.dt_full, report.dt_slow],
        a.t_end,
        &[a.out.clone()],
    )?;
    Ok(0)
}

fn thermo_csv(records: &[ThermoRecord], n: usize) -> String {
    let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
    let mut csv = String::from("t,e_perp,e_par,t_eps,s_eps,gamma_eps");
    for j in 0..n {
        let _ = write!(csv, ",f{}", j + 1);
    }
    csv.push_str(",e0_perp,t0,s0");
    for j in 0..n {
        let _ = write!(csv, ",f0_{}", j + 1);
    }
    csv.push_str(",ebar2_perp,ebar2_par,sbar2\n");
    for rec in records {
        let _ = write!(
            csv,
            "{},{},{},{},{},{}",
            fmt17(rec.t),
            opt(rec.e_perp),
            opt(rec.e_par),
            opt(rec.t_eps),
            opt(rec.s_eps),
            opt(rec.gamma_eps)
        );
        for j in 0..n {
            let _ = write!(csv, ",{}", opt(rec.f_eps.as_ref().map(|f| f[j])));
        }
        let _ = write!(csv, ",{},{},{}", opt(rec.e0_perp), opt(rec.t0), opt(rec.s0));
        for j in 0..n {
            let _ = write!(csv, ",{}", opt(rec.f0.as_ref().map(|f| f[j])));
        }
        let _ = writeln!(
            csv,
            ",{},{},{}",
            opt(rec.ebar2_perp),
            opt(rec.ebar2_par),
            opt(rec.sbar2)
        );
    }
    csv
}

fn cmd_thermo(a: ThermoArgs) -> Result<u8, Error> {
    let model = load_model(&a.model)?;
    let (_steps, dt) = adjusted_steps(a.t_end, a.dt)?;
    let tol = default_resonance_tol(&model);
    let records = match a.pipeline {
        PipelineArg::Full => {
            let eps = require_eps(a.eps)?;
            if dt > eps {
                eprintln!("warning: step likely under-resolves fast phase (dt > eps)");
            }
            let traj = run_full(&model, eps, a.t_end, dt, 1)?;
            let aa = map_full_to_action_angle(&model, &traj, eps)?;
            let (n, r) = (model.n, model.r);
            let mut records = Vec::with_capacity(aa.len());
            for i in 0..aa.len() {
                let row = aa.row(i);
                let state = TransformedState {
                    phi: row[0..r].to_vec(),
                    y: row[r..r + n].to_vec(),
                    theta: row[r + n..r + n + r].to_vec(),
                    p: row[r + n + r..].to_vec(),
                };
                records.push(observables_eps(&model, aa.times[i], &state, eps)?);
            }
            records
        }
        PipelineArg::Homog => {
            let traj = run_homogenized(&model, a.t_end, dt, 1)?;
            leading_records(&model, &traj)?
        }
        PipelineArg::Second => {
            let run = run_second(&model, a.t_end, dt, 1, tol)?;
            second_records(&model, &run.traj, &run.init.c_theta)?
        }
    };
    write_file(&a.out, &thermo_csv(&records, model.n))?;
    let eps_list: Vec<f64> = a.eps.into_iter().collect();
    write_manifest(&a.out, &a.model, &eps_list, &[dt], a.t_end, &[a.out.clone()])?;
    Ok(0)
}

fn cmd_check(a: CheckArgs) -> Result<u8, Error> {
    let model = load_model(&a.model)?;
    let tol = default_resonance_tol(&model);
    let mut failures: Vec<String> = Vec::new();
    let report = |name: &str, ok: bool, detail: String| {
        if ok {
            println!("ok   {name}: {detail}");
        } else {
            println!("FAIL {name}: {detail}");
        }
        ok
    };

    // Resonance scan along the homogenized trajectory.
    let homog = run_homogenized(&model, a.t_end, 1e-3, 10)?;
    let ys: Vec<Vec<f64>> = (0..homog.len())
        .map(|i| homog.row(i)[0..model.n].to_vec())
        .collect();
    for order in [2usize, 3] {
        let res = check_resonance(&model, &homog.times, &ys, order, tol)?;
        if !report(
            &format!("resonance-order-{order}"),
            res.pass,
            format!("min gap {:.3e} at t={:.3}", res.min_gap, res.t_min),
        ) {
            failures.push(format!("resonance-order-{order}"));
        }
    }

    // Coordinate transform round trip along a short stiff run.
    let eps = 0.125;
    let full = run_full(&model, eps, a.t_end.min(0.25), 1e-4, 100)?;
    let mut max_rt: f64 = 0.0;
    for i in 1..full.len() {
        let st = full_state_from_row(&model, full.row(i));
        let aa = to_action_angle(&model, &st, eps)?;
        let back = from_action_angle(&model, &aa, eps)?;
        for (u, v) in st
            .y
            .iter()
            .chain(&st.ydot)
            .chain(&st.z)
            .chain(&st.zdot)
            .zip(back.y.iter().chain(&back.ydot).chain(&back.z).chain(&back.zdot))
        {
            max_rt = max_rt.max((u - v).abs());
        }
    }
    if !report(
        "transform-round-trip",
        max_rt <= 1e-10,
        format!("max error {max_rt:.3e}"),
    ) {
        failures.push("transform-round-trip".into());
    }

    // Energy conservation of the stiff integration: the drift of a
    // symplectic scheme stays bounded (at the (dt*omega/eps)^2 oscillation
    // level) and shrinks ~4x when the step halves.
    let drift_at = |dt: f64, stride: usize| -> Result<f64, Error> {
        let traj = run_full(&model, eps, a.t_end.min(0.25), dt, stride)?;
        let e0 = full_energy(&model, &full_state_from_row(&model, traj.row(0)), eps)?;
        let mut max_drift: f64 = 0.0;
        for i in 0..traj.len() {
            let e = full_energy(&model, &full_state_from_row(&model, traj.row(i)), eps)?;
            max_drift = max_drift.max(((e - e0) / e0).abs());
        }
        Ok(max_drift)
    };
    let d1 = drift_at(1e-4, 100)?;
    let d2 = drift_at(5e-5, 200)?;
    if !report(
        "energy-conservation",
        d1 <= 1e-5 && d1 / d2 >= 3.5,
        format!("max relative drift {d1:.3e}, halving ratio {:.2}", d1 / d2),
    ) {
        failures.push("energy-conservation".into());
    }

    // Second-order thermodynamic constraint.
    let run = run_second(&model, a.t_end, 1e-3, 10, tol)?;
    let records = second_records(&model, &run.traj, &run.init.c_theta)?;
    let constraint = verify_constraint(&records, 1e-6);
    if !report(
        "second-order-energy-constraint",
        constraint.pass,
        format!(
            "max |sum| {:.3e} at t={:.3}",
            constraint.max_abs_ebar2, constraint.t_max
        ),
    ) {
        failures.push("second-order-energy-constraint".into());
    }

    if failures.is_empty() {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("failed invariants: {}", failures.join(", "));
        Ok(1)
    }
}
