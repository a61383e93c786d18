//! `homog`: cell problems, limit model, simulations and verification reports
//! from a TOML run configuration.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use homog_core::config::RunConfig;
use homog_core::effective_model::{build_model, EffectiveModel};
use homog_core::eps_sim::{exit_side_probability, simulate_eps, ExitOptions, Recording};
use homog_core::export::{model_json, provenance, write_json, EstimateRecord};
use homog_core::limit_sim::{martingale_residual, simulate_limit};
use homog_core::rng::derive_seed;
use homog_core::strip_measure::{cell_masses, write_cell_masses_csv};
use homog_core::torus_cell::{solve_cell, CellSolution};
use homog_core::verify::{default_test_function, full_pipeline, Check, ComparisonReport, NegativeControl};

#[derive(Parser, Debug)]
#[command(
    name = "homog",
    version,
    about = "Homogenization of periodic diffusions across a flat interface"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `simulation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the simulations; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration, defaults included, and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the cell problems of both tails.
    Cell,
    /// Assemble the limit model.
    Model,
    /// Simulate the rescaled or the limit process.
    Simulate {
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Run every statistical check and write the report.
    Verify {
        /// Perturb the simulated limit model; the report must then fail.
        #[arg(long, value_enum)]
        negative_control: Option<Control>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Eps,
    Limit,
}

impl Which {
    fn as_str(self) -> &'static str {
        match self {
            Which::Eps => "eps",
            Which::Limit => "limit",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Control {
    #[value(name = "alpha2x")]
    Alpha2x,
    #[value(name = "swap-p")]
    SwapP,
}

impl From<Control> for NegativeControl {
    fn from(c: Control) -> Self {
        match c {
            Control::Alpha2x => NegativeControl::Alpha2x,
            Control::SwapP => NegativeControl::SwapP,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required");
    };
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.simulation.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output.clone_from(out);
    }
    Ok(config.resolved()?)
}

/// Output directory of one command and the files written to it.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    /// Writes the effective configuration and `manifest_<command>.json`,
    /// which ties every file of the command to the config hash.
    fn finish(mut self, config: &RunConfig, hash: &str, command: &str) -> Result<()> {
        fs::write(self.dir.join("config.toml"), config.to_toml()?)?;
        self.files.push("config.toml".into());
        let manifest = json!({
            "provenance": provenance(hash, config.simulation.seed, command),
            "files": self.files,
        });
        let name = format!("manifest_{}.json", command.replace(' ', "_"));
        write_json(BufWriter::new(File::create(self.dir.join(name))?), &manifest)?;
        Ok(())
    }
}

fn write_cell_csv(out: &mut Outputs, name: &str, cell: &CellSolution) -> Result<()> {
    let lat = &cell.density.lattice;
    let d = lat.dimension();
    let mut w = csv::Writer::from_writer(out.create(name)?);
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.push("mu".into());
    header.extend((1..=d).map(|k| format!("g{k}")));
    w.write_record(&header)?;
    let mut x = vec![0.0; d];
    for node in 0..lat.len() {
        lat.position(node, &mut x);
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(cell.density.values[node].to_string());
        row.extend(cell.corrector.values.iter().map(|g| g[node].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_cell(config: &RunConfig, hash: &str) -> Result<()> {
    let field = config.field.build()?;
    let grid = config.grid()?;
    let plus = solve_cell(field.plus(), &grid).context("plus tail")?;
    let minus = solve_cell(field.minus(), &grid).context("minus tail")?;
    let mut out = Outputs::new(&config.output);
    write_cell_csv(&mut out, "cells_plus.csv", &plus)?;
    write_cell_csv(&mut out, "cells_minus.csv", &minus)?;
    let summary = json!({
        "D_plus": plus.tensor,
        "D_minus": minus.tensor,
        "density_residual": [plus.density.residual, minus.density.residual],
        "corrector_residual": [plus.corrector.residual, minus.corrector.residual],
        "centering": [plus.centering, minus.centering],
        "provenance": provenance(hash, config.simulation.seed, "cell"),
    });
    write_json(out.create("cell_summary.json")?, &summary)?;
    println!("D+ = {:?}", plus.tensor.0);
    println!("D- = {:?}", minus.tensor.0);
    out.finish(config, hash, "cell")
}

fn model_for(config: &RunConfig) -> Result<(homog_core::field::InterfaceDrift, homog_core::effective_model::ModelRun)> {
    let field = config.field.build()?;
    let run = build_model(&field, &config.grid()?, config.blend)?;
    config.solver.check(&run)?;
    Ok((field, run))
}

fn print_model(m: &EffectiveModel) {
    println!("q = ({}, {})", m.q_plus, m.q_minus);
    println!("p = ({}, {})", m.p_plus, m.p_minus);
    println!("alpha = {:?}", m.alpha);
    println!("K = {:?}", m.k);
}

fn cmd_model(config: &RunConfig, hash: &str) -> Result<()> {
    let (_, run) = model_for(config)?;
    let mut out = Outputs::new(&config.output);
    let prov = provenance(hash, config.simulation.seed, "model");
    write_json(out.create("model.json")?, &model_json(&run.model, prov))?;
    write_cell_masses_csv(&cell_masses(&run.strip), out.create("cells_masses.csv")?)?;
    print_model(&run.model);
    out.finish(config, hash, "model")
}

fn record(name: &str, estimate: homog_core::stats::Estimate, seed: u64, params: &[(&str, f64)]) -> EstimateRecord {
    EstimateRecord {
        name: name.to_string(),
        estimate,
        seed,
        params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

fn stride(steps_hint: f64, records: usize) -> Recording {
    Recording::Stride(((steps_hint / records.max(1) as f64).ceil() as usize).max(1))
}

fn cmd_simulate(config: &RunConfig, hash: &str, which: Which) -> Result<()> {
    let (field, run) = model_for(config)?;
    let model = &run.model;
    let sim = &config.simulation;
    let x0 = sim.start(field.dimension())?;
    let mut out = Outputs::new(&config.output);
    let command = format!("simulate {}", which.as_str());
    let mut records = Vec::new();
    let mut report = ComparisonReport::new(field.name());
    match which {
        Which::Eps => {
            let min_d11 = model.d_plus.get(0, 0).min(model.d_minus.get(0, 0));
            for &eps in &sim.eps {
                let seed = derive_seed(sim.seed, &format!("simulate/eps={eps}"));
                let dt = homog_core::eps_sim::step_size(eps, sim.dt)?;
                let rec = stride(sim.t_final / dt, sim.path_records);
                let ens = simulate_eps(&field, eps, &x0, sim.t_final, sim.dt, sim.paths, seed, rec)?;
                ens.write_csv(out.create(&format!("paths_eps_{eps}.csv"))?, 1)?;
                let seed = derive_seed(sim.seed, &format!("simulate/exit/eps={eps}"));
                let opts = ExitOptions {
                    dt: sim.dt,
                    horizon: homog_core::eps_sim::exit_horizon(sim.exit_delta, min_d11),
                };
                let est = exit_side_probability(&field, eps, &x0, sim.exit_delta, sim.exit_paths, seed, opts)?;
                println!(
                    "eps {eps}: P(exit +) = {:.4} ± {:.4} (p+ = {:.4})",
                    est.plus.value, est.plus.se, model.p_plus
                );
                records.push(record(
                    "exit_side_plus",
                    est.plus,
                    seed,
                    &[("eps", eps), ("delta", sim.exit_delta)],
                ));
            }
        }
        Which::Limit => {
            let limit = sim.limit;
            let seed = derive_seed(sim.seed, "simulate/limit");
            let rec = stride(sim.t_final / limit.dt, sim.path_records);
            let ens = simulate_limit(model, &x0, sim.t_final, limit.dt, sim.paths, seed, limit.backend, rec)?;
            ens.write_csv(out.create("paths_limit.csv")?, 1)?;
            let f = default_test_function(model);
            let mseed = derive_seed(sim.seed, "simulate/martingale");
            let fine = Recording::Stride(((sim.record_dt / limit.dt).round() as usize).max(1));
            let mens = simulate_limit(
                model,
                &x0,
                sim.t_final,
                limit.dt,
                sim.martingale_paths,
                mseed,
                limit.backend,
                fine,
            )?;
            let est = martingale_residual(&mens, model, &f, sim.martingale_lambda)?;
            println!("martingale residual = {:.4} ± {:.4}", est.value, est.se);
            records.push(record(
                "martingale_residual",
                est,
                mseed,
                &[("lambda", sim.martingale_lambda)],
            ));
            if let Some(checks) = covariance_checks(model, &ens, sim.t_final, seed) {
                report.extend(checks);
            }
        }
    }
    let estimates = json!({
        "provenance": provenance(hash, sim.seed, &command),
        "estimates": records,
    });
    write_json(out.create(&format!("estimates_{}.json", which.as_str()))?, &estimates)?;
    if !report.checks.is_empty() {
        report.config_hash = Some(hash.to_string());
        report.write_checks_csv(out.create(&format!("checks_{}.csv", which.as_str()))?)?;
        for c in &report.checks {
            println!(
                "{} {}: {:.4} vs {:.4}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.estimated,
                c.predicted
            );
        }
    }
    out.finish(config, hash, &command)
}

/// When `D⁺ = D⁻` and `K = 0` the limit is Brownian motion with covariance
/// `D`, so the covariance of `X̄(T) - x0` must be `T D` within 3 SE.
fn covariance_checks(
    model: &EffectiveModel,
    ens: &homog_core::limit_sim::LimitEnsemble,
    t: f64,
    seed: u64,
) -> Option<Vec<Check>> {
    let d = model.dimension();
    let same = (0..d).all(|i| (0..d).all(|j| (model.d_plus.get(i, j) - model.d_minus.get(i, j)).abs() < 1e-8));
    if !same || model.k.iter().any(|k| k.abs() > 1e-8) {
        return None;
    }
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let x0 = ens.state(0, 0)[k];
            ens.final_component(k).iter().map(|v| v - x0).collect()
        })
        .collect();
    let n = cols[0].len() as f64;
    let mut out = Vec::new();
    for i in 0..d {
        for j in i..d {
            // mean-zero increments: E[XᵢXⱼ] = T Dᵢⱼ
            let prod: Vec<f64> = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).collect();
            let e = homog_core::stats::Estimate::from_samples(&prod, "sample covariance");
            let predicted = t * model.d_plus.get(i, j);
            let c = Check::within(
                format!("limit_covariance[{}{}]", i + 1, j + 1),
                predicted,
                e.value,
                e.se,
                3.0,
            )
            .param("t", t)
            .param("n", n)
            .seed(seed);
            out.push(c);
        }
    }
    Some(out)
}

fn cmd_verify(config: &RunConfig, hash: &str, control: Option<Control>) -> Result<bool> {
    let field = config.field.build()?;
    let grid = config.grid()?;
    let out = full_pipeline(&field, &grid, config.blend, &config.simulation, control.map(Into::into))?;
    config.solver.check(&out.run)?;
    let mut report = out.report;
    report.config_hash = Some(hash.to_string());
    let mut files = Outputs::new(&config.output);
    let prov = provenance(hash, config.simulation.seed, "verify");
    write_json(files.create("model.json")?, &model_json(&out.run.model, prov))?;
    report.write_json(files.create("report.json")?)?;
    report.write_checks_csv(files.create("checks.csv")?)?;
    for c in &report.checks {
        println!(
            "{} {}: estimated {:.5} predicted {:.5} (se {:.5})",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.estimated,
            c.predicted,
            c.se
        );
    }
    println!("verdict: {}", if report.verdict { "pass" } else { "FAIL" });
    files.finish(config, hash, "verify")?;
    Ok(report.verdict)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .context("cannot configure worker threads")?;
    }
    let config = load_config(&cli)?;
    if cli.dump_config {
        print!("{}", config.to_toml()?);
        return Ok(true);
    }
    let Some(command) = cli.command else {
        bail!("no command given (expected cell, model, simulate or verify)");
    };
    fs::create_dir_all(&config.output).with_context(|| format!("cannot create {}", config.output.display()))?;
    let hash = config.hash()?;
    match command {
        Command::Cell => cmd_cell(&config, &hash).map(|_| true),
        Command::Model => cmd_model(&config, &hash).map(|_| true),
        Command::Simulate { which } => cmd_simulate(&config, &hash, which).map(|_| true),
        Command::Verify { negative_control } => cmd_verify(&config, &hash, negative_control),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
