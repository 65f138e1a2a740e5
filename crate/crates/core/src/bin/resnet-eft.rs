use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use resnet_eft::config::ExperimentConfig;
use resnet_eft::criteria::{self, Outcome, Status};
use resnet_eft::diagnostics::{self, ensemble_summary, theory, theory_series, SweepSpec};
use resnet_eft::ensemble::run_ensemble;
use resnet_eft::flow::Mode;
use resnet_eft::io::{load_ensemble, RunDir};
use resnet_eft::reproduce::{self, Figure, FigureData, Scale};
use resnet_eft::Error;

#[derive(Parser)]
#[command(name = "resnet-eft", version, about = "Finite-width ResNet ensembles and kernel flows")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ensemble and write checkpoint estimates.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the K0, V4 and K1 flows.
    Flow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<FlowMode>,
    },
    /// Compare a simulated run with the flows and summarize the criteria.
    Diagnose {
        /// Run directory written by `simulate`.
        run: PathBuf,
        /// Run directory written by `flow`; its flow settings replace the
        /// simulation's.
        flow: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 4 if any evaluated criterion fails.
        #[arg(long)]
        strict: bool,
    },
    /// Run every point of the config's `[sweep]` section.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the data of a standard figure or table.
    Reproduce {
        /// fig1, fig2, fig3, fig4 or table2.
        figure: String,
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Base experiment replacing the built-in baseline.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowMode {
    Ladder,
    Rk4,
}

enum Failure {
    Lib(Error),
    Acceptance(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Acceptance(n)) => {
            eprintln!("{n} criteria failed");
            ExitCode::from(4)
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.ensemble.master_seed = s;
    }
    Ok(cfg)
}

fn out_dir(out: &Option<PathBuf>, cfg: &ExperimentConfig, sub: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| cfg.io.out_dir.join(sub))
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Simulate { config, out } => {
            let cfg = load(config, cli.seed)?;
            simulate(&cfg, &out_dir(out, &cfg, "simulate"))
        }
        Command::Flow { config, out, mode } => {
            let mut cfg = load(config, cli.seed)?;
            if let Some(m) = mode {
                cfg.flow.mode = match m {
                    FlowMode::Ladder => Mode::Ladder,
                    FlowMode::Rk4 => Mode::Continuous,
                };
                cfg.validate()?;
            }
            flow(&cfg, &out_dir(out, &cfg, "flow"))
        }
        Command::Diagnose { run, flow, out, strict } => diagnose(run, flow.as_deref(), out.as_deref(), *strict),
        Command::Sweep { config, out } => {
            let cfg = load(config, cli.seed)?;
            sweep(&cfg, &out_dir(out, &cfg, "sweep"))
        }
        Command::Reproduce {
            figure,
            scale,
            config,
            out,
        } => {
            let fig: Figure = figure.parse()?;
            let scale: Scale = scale.parse()?;
            let mut configs = match config {
                Some(path) => reproduce::configs_from(fig, &load(path, cli.seed)?)?,
                None => reproduce::configs(fig, scale)?,
            };
            if let Some(s) = cli.seed {
                for (_, c) in &mut configs {
                    c.ensemble.master_seed = s;
                }
            }
            let dir = out
                .clone()
                .unwrap_or_else(|| configs[0].1.io.out_dir.join(fig.id()));
            reproduce_figure(fig, scale, &configs, &dir)
        }
    }
}

fn simulate(cfg: &ExperimentConfig, dir: &Path) -> CmdResult {
    let ens = run_ensemble(&cfg.network()?, &cfg.run_options()?)?;
    let mut run = RunDir::create(dir, "simulate", cfg)?;
    let summary = ensemble_summary(&ens, &cfg.diagnostics.kernel_components, &cfg.diagnostics.pair_components)?;
    run.write_reports("estimates.csv", &[summary])?;
    run.write_ensemble(&ens)?;
    let path = run.finish()?;
    println!("{}", path.display());
    Ok(())
}

fn flow(cfg: &ExperimentConfig, dir: &Path) -> CmdResult {
    let th = theory(cfg)?;
    let mut run = RunDir::create(dir, "flow", cfg)?;
    run.write_reports("theory.csv", &[theory_series(cfg, &th)?])?;
    let path = run.finish()?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct CheckStatus {
    check: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

#[derive(Serialize)]
struct Summary {
    checks: Vec<CheckStatus>,
    criteria: Vec<Outcome>,
}

fn diagnose(run_dir: &Path, flow_dir: Option<&Path>, out: Option<&Path>, strict: bool) -> CmdResult {
    let (manifest, ens) = load_ensemble(run_dir)?;
    let mut cfg = manifest.config;
    if let Some(f) = flow_dir {
        let flow_cfg = resnet_eft::io::Manifest::read(f)?.config;
        if flow_cfg.network != cfg.network {
            return Err(Error::Config(format!("{}: flow run describes a different network", f.display())).into());
        }
        cfg.flow = flow_cfg.flow;
    }
    let th = theory(&cfg)?;
    let results = diagnostics::diagnose(&cfg, &ens, &th);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("diagnose"));
    let mut run = RunDir::create(&dir, "diagnose", &cfg)?;
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for (check, r) in &results {
        let (status, detail) = match r {
            Ok(rep) => {
                reports.push(rep.clone());
                ("ok", None)
            }
            Err(Error::Unavailable(..)) => ("unavailable", r.as_ref().err().map(|e| e.to_string())),
            Err(e) if e.exit_code() == 2 => ("not_applicable", Some(e.to_string())),
            Err(e) => return Err(Error::Data(format!("{} check: {e}", check.name())).into()),
        };
        checks.push(CheckStatus {
            check: check.name(),
            status,
            detail,
        });
    }
    run.write_reports("residuals.csv", &reports)?;
    if let Some(sigma) = reports.iter().find(|r| r.name == "sigma_sources") {
        run.write_csv("table2.csv", &reproduce::table2_rows(sigma, cfg.network.eps))?;
    }
    let outcomes = criteria::evaluate(&cfg, &ens, &th, &results);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    run.write_json(
        "summary.json",
        &Summary {
            checks,
            criteria: outcomes,
        },
    )?;
    run.manifest_mut().members = Some(ens.member_range());
    run.finish()?;
    if strict && failed > 0 {
        return Err(Failure::Acceptance(failed));
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    value: f64,
    t: f64,
    ell: usize,
    component: String,
    estimate: f64,
    std_error: Option<f64>,
    estimator: &'a str,
}

#[derive(Serialize)]
struct SweepPointSummary {
    value: f64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<diagnostics::PointSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepSummary {
    axis: String,
    points: Vec<SweepPointSummary>,
    fitted: Option<diagnostics::PowerLaw>,
}

fn sweep(cfg: &ExperimentConfig, dir: &Path) -> CmdResult {
    let spec = SweepSpec::from_config(cfg)?;
    let result = diagnostics::run_sweep(&spec);
    let mut run = RunDir::create(dir, "sweep", cfg)?;
    let rows: Vec<SweepRow> = result
        .rows()
        .into_iter()
        .map(|(value, _, r)| SweepRow {
            value,
            t: r.t,
            ell: r.layer,
            component: r.component.to_string(),
            estimate: r.estimate,
            std_error: r.std_error(),
            estimator: &r.estimator,
        })
        .collect();
    run.write_csv("sweep.csv", &rows)?;
    let points = result
        .points
        .iter()
        .map(|p| match &p.outcome {
            Ok((_, s)) => SweepPointSummary {
                value: p.value,
                status: "ok",
                summary: Some(s.clone()),
                error: None,
            },
            Err(e) => {
                eprintln!("sweep point {} = {}: {e}", spec.axis, p.value);
                SweepPointSummary {
                    value: p.value,
                    status: "failed",
                    summary: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    run.write_json(
        "sweep_summary.json",
        &SweepSummary {
            axis: spec.axis.to_string(),
            points,
            fitted: result.fitted_exponent(),
        },
    )?;
    let path = run.finish()?;
    println!("{}", path.display());
    Ok(())
}

fn reproduce_figure(fig: Figure, scale: Scale, configs: &[(String, ExperimentConfig)], dir: &Path) -> CmdResult {
    let mut run = RunDir::create(dir, &format!("reproduce {fig}"), &configs[0].1)?;
    for (label, c) in configs {
        run.write_text(&format!("{fig}_{label}.toml"), &c.to_toml())?;
    }
    if scale == Scale::Paper {
        eprintln!("warning: {}", reproduce::PAPER_SCALE_WARNING);
        run.write_text("WARNING.txt", &format!("{}\n", reproduce::PAPER_SCALE_WARNING))?;
        run.finish()?;
        return Ok(());
    }
    let name = format!("{fig}.csv");
    match reproduce::reproduce(fig, configs)? {
        FigureData::Series(rows) => run.write_csv(&name, &rows)?,
        FigureData::Table(rows) => run.write_csv(&name, &rows)?,
    }
    let path = run.finish()?;
    println!("{}", path.display());
    Ok(())
}
