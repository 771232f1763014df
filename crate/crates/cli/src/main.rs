use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use uavloc::geo::UrbanMap;
use uavloc::harness::{
    emit_results, replay, run_algorithm1, run_batch, run_trial_detailed, write_labels,
    write_params, BatchReport, Estimate, Estimator, EstimatorMode, PlannerMode, Scenario,
};
use uavloc::radio::MeasurementSet;
use uavloc::slam::write_trace;

#[derive(Parser)]
#[command(
    name = "uavloc",
    version,
    about = "UAV-aided user localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; built-in defaults when omitted.
    #[arg(short, long)]
    scenario: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        match &self.scenario {
            Some(p) => {
                Scenario::load(p).with_context(|| format!("loading scenario {}", p.display()))
            }
            None => Ok(Scenario::default()),
        }
    }
}

#[derive(Args)]
struct SeedArgs {
    /// Explicit seeds, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "trials")]
    seeds: Option<Vec<u64>>,
    /// Use seeds 1..=N.
    #[arg(short = 'n', long)]
    trials: Option<u64>,
}

impl SeedArgs {
    fn resolve(&self, sc: &Scenario) -> Vec<u64> {
        match (&self.seeds, self.trials) {
            (Some(s), _) => s.clone(),
            (None, Some(n)) => (1..=n).collect(),
            (None, None) => sc.seeds.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// One trial with every artifact: map, measurements, truth, estimate, trace, mission record.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short, long, default_value = "out/run")]
        out: PathBuf,
    },
    /// Many trials; writes per-trial results, the error CDF and a replayable summary.
    Batch {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(short, long, default_value = "out/batch")]
        out: PathBuf,
    },
    /// Compare planners and estimators on the same seeds.
    Bench {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(short, long, default_value = "out/bench")]
        out: PathBuf,
    },
    /// Re-run a batch from its summary.toml and check the result is byte-identical.
    Replay {
        summary: PathBuf,
        #[arg(short, long, default_value = "out/replay")]
        out: PathBuf,
    },
    /// Estimate from a measurement directory written by `run`.
    Estimate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Directory holding odometry.csv and links.csv.
        measurements: PathBuf,
        /// Map TOML (BS sites are taken from it).
        #[arg(long)]
        map: PathBuf,
        #[arg(short, long, default_value = "out/estimate")]
        out: PathBuf,
    },
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_estimate(dir: &Path, ms: &MeasurementSet, est: &Estimate) -> Result<()> {
    write_params(dir.join("params.toml"), &est.params)?;
    write_labels(dir.join("labels.csv"), ms, &est.labels)?;
    let mut trace = String::from("iteration,objective\n");
    for (i, v) in est.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{},{v}\n", i + 1));
    }
    write(&dir.join("trace.csv"), trace)?;
    write_trace(dir.join("solver_trace.csv"), &est.solver_trace)?;
    let mut pos = String::from("kind,index,x,y\n");
    for (k, u) in est.state.users.iter().enumerate() {
        pos.push_str(&format!("user,{k},{},{}\n", u.x, u.y));
    }
    for (n, x) in est.state.uav.iter().enumerate() {
        pos.push_str(&format!("uav,{n},{},{}\n", x.x, x.y));
    }
    write(&dir.join("estimate.csv"), pos)
}

fn run(sc: &Scenario, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let t = run_trial_detailed(sc, seed)?;
    t.map.save(out.join("map.toml"))?;
    t.measurements.save_dir(out.join("measurements"))?;
    let mut truth = String::from("kind,index,x,y,z\n");
    for (k, u) in t.users.iter().enumerate() {
        truth.push_str(&format!("user,{k},{},{},0\n", u.x, u.y));
    }
    for (n, x) in t.trajectory.iter().enumerate() {
        truth.push_str(&format!("uav,{n},{},{},{}\n", x.x, x.y, x.z));
    }
    write(&out.join("measurements").join("positions_truth.csv"), truth)?;
    write_estimate(out, &t.measurements, &t.estimate)?;
    if let Some(rec) = &t.record {
        write(&out.join("mission.json"), rec.to_json())?;
    }
    write(&out.join("scenario.toml"), sc.to_toml_string())?;
    let r = &t.result;
    println!(
        "seed {seed}: mean user error {:.2} m, uav rmse {}, classification error {:.3}, {} outer iterations",
        r.mean_user_error(),
        r.uav_rmse.map_or("-".into(), |v| format!("{v:.2} m")),
        r.classification_error,
        r.outer_iterations
    );
    for w in &t.estimate.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

fn report_line(label: &str, r: &BatchReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.2}"));
    format!(
        "{label:<24} trials {:>3}  failed {:>2}  user rmse {:>7}  median {:>7}  uav rmse {:>6}  class err {}",
        r.trials.len(),
        r.failures.len(),
        f(r.user_rmse()),
        f(r.median_user_error()),
        f(r.uav_rmse()),
        r.mean_classification_error().map_or("-".into(), |v| format!("{v:.3}")),
    )
}

fn batch(sc: &Scenario, seeds: &[u64], out: &Path) -> Result<BatchReport> {
    let start = Instant::now();
    let report = run_batch(sc, seeds);
    emit_results(&report, out)?;
    info!("{} trials in {:.1?}", seeds.len(), start.elapsed());
    for f in &report.failures {
        log::error!("seed {}: {}", f.seed, f.error);
    }
    Ok(report)
}

fn bench(sc: &Scenario, seeds: &[u64], out: &Path) -> Result<()> {
    let variants = [
        ("optimized", PlannerMode::Optimized, EstimatorMode::Full),
        (
            "random-rectangle",
            PlannerMode::RandomRectangle,
            EstimatorMode::Full,
        ),
        (
            "optimized-rss-only",
            PlannerMode::Optimized,
            EstimatorMode::RssOnly,
        ),
        (
            "static-bs-only",
            PlannerMode::StaticBsOnly,
            EstimatorMode::Full,
        ),
    ];
    for (name, planner, estimator) in variants {
        let mut v = sc.clone();
        v.name = format!("{}-{name}", sc.name);
        v.planner = planner;
        v.estimator = estimator;
        let r = batch(&v, seeds, &out.join(name))?;
        println!("{}", report_line(name, &r));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
        } => run(&scenario.load()?, seed, &out),
        Command::Batch {
            scenario,
            seeds,
            out,
        } => {
            let sc = scenario.load()?;
            let r = batch(&sc, &seeds.resolve(&sc), &out)?;
            println!("{}", report_line(&sc.name, &r));
            if r.trials.is_empty() {
                bail!("every trial failed");
            }
            Ok(())
        }
        Command::Bench {
            scenario,
            seeds,
            out,
        } => {
            let sc = scenario.load()?;
            bench(&sc, &seeds.resolve(&sc), &out)
        }
        Command::Replay { summary, out } => {
            let (r, identical) = replay(&summary, &out)?;
            println!("{}", report_line(&r.scenario.name, &r));
            if !identical {
                bail!("replayed summary differs from {}", summary.display());
            }
            println!("summary is byte-identical");
            Ok(())
        }
        Command::Estimate {
            scenario,
            measurements,
            map,
            out,
        } => {
            let sc = scenario.load()?;
            let map = UrbanMap::load(&map)?;
            let ms = MeasurementSet::load_dir(&measurements)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let est = run_algorithm1(&ms, &map, &Estimator::from_scenario(&sc))?;
            write_estimate(&out, &ms, &est)?;
            println!(
                "{} outer iterations, converged {}, final objective {}",
                est.outer_iterations,
                est.converged,
                est.objective_trace.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
    }
}
