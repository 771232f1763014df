use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::UrbanMap;
use crate::radio::{collect_mission, ChannelParams, MeasurementSet};
use crate::{Error, Point2, Point3, Result};

use super::estimator::{run_algorithm1, Estimate, Estimator};
use super::mission::{rectangle_trajectory, run_mission_online, MissionRecord, MissionSetup};
use super::scenario::{PlannerMode, Scenario};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// Horizontal error of each user's final estimate, meters.
    pub user_errors: Vec<f64>,
    /// None when no UAV flew.
    pub uav_rmse: Option<f64>,
    pub classification_error: f64,
    pub params: ChannelParams,
    pub outer_iterations: usize,
    pub converged: bool,
    pub warnings: usize,
    /// Wall-clock time; kept out of every result file.
    #[serde(skip)]
    pub runtime: Duration,
}

impl PartialEq for TrialResult {
    /// Ignores the runtime.
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.user_errors == other.user_errors
            && self.uav_rmse == other.uav_rmse
            && self.classification_error == other.classification_error
            && self.params == other.params
            && self.outer_iterations == other.outer_iterations
            && self.converged == other.converged
            && self.warnings == other.warnings
    }
}

impl TrialResult {
    pub fn mean_user_error(&self) -> f64 {
        self.user_errors.iter().sum::<f64>() / self.user_errors.len() as f64
    }
}

/// A trial with everything needed to inspect or export it.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub result: TrialResult,
    pub map: UrbanMap,
    pub users: Vec<Point2>,
    pub trajectory: Vec<Point3>,
    pub measurements: MeasurementSet,
    pub estimate: Estimate,
    /// Present for online missions.
    pub record: Option<MissionRecord>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn run_trial_detailed(sc: &Scenario, seed: u64) -> Result<TrialOutcome> {
    sc.validate()?;
    let started = Instant::now();
    let map = sc.build_map(seed)?;
    let users = sc.place_users(&map, &mut stream(seed, 1))?;
    let mut rng = stream(seed, 2);
    let estimator = Estimator::from_scenario(sc);
    let m = sc.mission;
    let (trajectory, measurements, estimate, record) = match sc.planner {
        PlannerMode::Optimized => {
            let out = run_mission_online(&map, &users, &MissionSetup::from_scenario(sc), &mut rng)?;
            (
                out.trajectory,
                out.measurements,
                out.estimate,
                Some(out.record),
            )
        }
        PlannerMode::RandomRectangle => {
            let traj = rectangle_trajectory(&sc.area().center(), m.budget, m.epochs, m.altitude);
            let ms = collect_mission(
                &map,
                &sc.channel.params(),
                &sc.odometry.noise(),
                &traj,
                &users,
                &mut rng,
            )?;
            let est = run_algorithm1(&ms, &map, &estimator)?;
            (traj, ms, est, None)
        }
        PlannerMode::StaticBsOnly => {
            let mut ms = MeasurementSet::new(users.len(), map.bs_sites.len());
            ms.collect_bs_ue(&map, &sc.channel.params(), &users, &mut rng)?;
            let est = run_algorithm1(&ms, &map, &estimator)?;
            (Vec::new(), ms, est, None)
        }
    };
    let user_errors = estimate
        .state
        .users
        .iter()
        .zip(&users)
        .map(|(a, b)| (a - b).norm())
        .collect();
    let uav_rmse = (!trajectory.is_empty()).then(|| {
        let sq: f64 = estimate
            .state
            .uav
            .iter()
            .zip(&trajectory)
            .map(|(a, b)| (a - b.xy()).norm_squared())
            .sum();
        (sq / trajectory.len() as f64).sqrt()
    });
    let wrong = measurements
        .true_labels()
        .zip(&estimate.labels.labels)
        .filter(|(t, l)| t != *l)
        .count();
    let n_links = measurements.n_links().max(1);
    let result = TrialResult {
        seed,
        user_errors,
        uav_rmse,
        classification_error: wrong as f64 / n_links as f64,
        params: estimate.params,
        outer_iterations: estimate.outer_iterations,
        converged: estimate.converged,
        warnings: estimate.warnings.len(),
        runtime: started.elapsed(),
    };
    Ok(TrialOutcome {
        result,
        map,
        users,
        trajectory,
        measurements,
        estimate,
        record,
    })
}

/// Generate a world from `seed`, run the scenario's pipeline and score it.
pub fn run_trial(sc: &Scenario, seed: u64) -> Result<TrialResult> {
    run_trial_detailed(sc, seed).map(|t| t.result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchReport {
    pub scenario: Scenario,
    /// In seed-list order.
    pub trials: Vec<TrialResult>,
    pub failures: Vec<Failure>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_trials: usize,
    pub n_failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_user_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_user_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uav_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_classification_error: Option<f64>,
}

/// What `summary.toml` holds: aggregates plus the exact configuration and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub results: Aggregates,
    #[serde(default)]
    pub failures: Vec<Failure>,
    pub scenario: Scenario,
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

impl BatchReport {
    /// Per-user errors of all trials, ascending.
    pub fn pooled_errors(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self
            .trials
            .iter()
            .flat_map(|t| t.user_errors.iter().copied())
            .collect();
        e.sort_by(f64::total_cmp);
        e
    }

    pub fn user_rmse(&self) -> Option<f64> {
        let e = self.pooled_errors();
        (!e.is_empty()).then(|| (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt())
    }

    pub fn mean_user_error(&self) -> Option<f64> {
        let e = self.pooled_errors();
        (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
    }

    pub fn median_user_error(&self) -> Option<f64> {
        median(&self.pooled_errors())
    }

    pub fn uav_rmse(&self) -> Option<f64> {
        let v: Vec<f64> = self.trials.iter().filter_map(|t| t.uav_rmse).collect();
        (!v.is_empty()).then(|| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
    }

    pub fn mean_classification_error(&self) -> Option<f64> {
        let n = self.trials.len();
        (n > 0).then(|| {
            self.trials
                .iter()
                .map(|t| t.classification_error)
                .sum::<f64>()
                / n as f64
        })
    }

    /// `(error, cumulative fraction)` of the pooled per-user errors.
    pub fn cdf(&self) -> Vec<(f64, f64)> {
        let e = self.pooled_errors();
        let n = e.len() as f64;
        e.iter()
            .enumerate()
            .map(|(i, x)| (*x, (i + 1) as f64 / n))
            .collect()
    }

    pub fn aggregates(&self) -> Aggregates {
        Aggregates {
            n_trials: self.trials.len(),
            n_failed: self.failures.len(),
            user_rmse: self.user_rmse(),
            mean_user_error: self.mean_user_error(),
            median_user_error: self.median_user_error(),
            uav_rmse: self.uav_rmse(),
            mean_classification_error: self.mean_classification_error(),
        }
    }

    pub fn summary(&self) -> Summary {
        Summary {
            results: self.aggregates(),
            failures: self.failures.clone(),
            scenario: self.scenario.clone(),
        }
    }

    /// Total wall-clock time spent in trials.
    pub fn runtime(&self) -> Duration {
        self.trials.iter().map(|t| t.runtime).sum()
    }
}

/// Run one trial per seed; failed trials are recorded, not fatal.
pub fn run_batch(sc: &Scenario, seeds: &[u64]) -> BatchReport {
    let run = |seed: &u64| (*seed, run_trial(sc, *seed));
    #[cfg(feature = "parallel")]
    let outcomes: Vec<(u64, Result<TrialResult>)> = {
        use rayon::prelude::*;
        seeds.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<(u64, Result<TrialResult>)> = seeds.iter().map(run).collect();

    let mut scenario = sc.clone();
    scenario.seeds = seeds.to_vec();
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok(t) => trials.push(t),
            Err(e) => failures.push(Failure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    BatchReport {
        scenario,
        trials,
        failures,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(header).map_err(|e| Error::parse(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `trials.csv`, `user_errors.csv`, `cdf.csv` and `summary.toml` into `dir`.
pub fn emit_results(report: &BatchReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(
        &dir.join("trials.csv"),
        &[
            "seed",
            "mean_user_error",
            "uav_rmse",
            "classification_error",
            "outer_iterations",
            "converged",
            "warnings",
            "alpha_los",
            "beta_los",
            "sigma_los",
            "sigma_tau_los",
            "alpha_nlos",
            "beta_nlos",
            "sigma_nlos",
            "mu_tau_nlos",
            "sigma_tau_nlos",
            "pi_los",
        ],
        report.trials.iter().map(|t| {
            let p = &t.params;
            vec![
                t.seed.to_string(),
                t.mean_user_error().to_string(),
                opt(t.uav_rmse),
                t.classification_error.to_string(),
                t.outer_iterations.to_string(),
                u8::from(t.converged).to_string(),
                t.warnings.to_string(),
                p.los.alpha.to_string(),
                p.los.beta.to_string(),
                p.los.sigma.to_string(),
                p.los.sigma_tau.to_string(),
                p.nlos.alpha.to_string(),
                p.nlos.beta.to_string(),
                p.nlos.sigma.to_string(),
                p.nlos.mu_tau.to_string(),
                p.nlos.sigma_tau.to_string(),
                p.pi_los.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join("user_errors.csv"),
        &["seed", "user", "error"],
        report.trials.iter().flat_map(|t| {
            t.user_errors
                .iter()
                .enumerate()
                .map(|(k, e)| vec![t.seed.to_string(), k.to_string(), e.to_string()])
        }),
    )?;
    write_rows(
        &dir.join("cdf.csv"),
        &["error", "fraction"],
        report
            .cdf()
            .into_iter()
            .map(|(e, f)| vec![e.to_string(), f.to_string()]),
    )?;
    let path = dir.join("summary.toml");
    let text = toml::to_string(&report.summary()).map_err(|e| Error::parse(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Re-run the batch echoed in a `summary.toml` into `out_dir`. Returns the
/// new report and whether the new summary is byte-identical to the old one.
pub fn replay(
    summary_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<(BatchReport, bool)> {
    let path = summary_path.as_ref();
    let old = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&old);
    let summary: Summary = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let sc = summary.scenario;
    sc.validate()?;
    let report = run_batch(&sc, &sc.seeds);
    emit_results(&report, &out_dir)?;
    let new_path = out_dir.as_ref().join("summary.toml");
    let new = std::fs::read(&new_path).map_err(|e| Error::io(&new_path, e))?;
    Ok((report, new == old))
}
