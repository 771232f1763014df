use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::{los_probability, LosPredictorParams, UrbanMap};
use crate::planner::{fim_from_history, greedy_step, PlannerConfig};
use crate::radio::{ChannelParams, MeasurementSet, OdometryNoise};
use crate::{Point2, Point3, Result};

use super::estimator::{Estimate, Estimator, PassOptions};
use super::scenario::{EstimatorMode, MissionConfig, Scenario};

/// Everything an online mission needs besides the world and the RNG.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MissionSetup {
    pub channel: ChannelParams,
    pub noise: OdometryNoise,
    pub predictor: LosPredictorParams,
    pub planner: PlannerConfig,
    pub mission: MissionConfig,
    pub estimator: Estimator,
}

impl MissionSetup {
    pub fn from_scenario(sc: &Scenario) -> Self {
        let m = sc.mission;
        MissionSetup {
            channel: sc.channel.params(),
            noise: sc.odometry.noise(),
            predictor: sc.predictor,
            planner: PlannerConfig {
                d_max: m.d_max(),
                n_total: m.epochs,
                x_start: m.start_point(),
                x_end: m.end_point(),
                neighbor_step: m.neighbor_step.unwrap_or(m.d_max()),
                prior_fim_eps: m.prior_fim_eps,
                bounds: Some(sc.area()),
            },
            mission: m,
            estimator: Estimator::from_scenario(sc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub uav_true: [f64; 3],
    /// Latest estimate of the current UAV position.
    pub uav_estimate: [f64; 2],
    pub users_estimate: Vec<[f64; 2]>,
    /// trace of the inverse FIM used to plan the next step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crb_trace: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub link: String,
    pub omega: f64,
    pub los: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionRecord {
    pub epochs: Vec<EpochRecord>,
    pub final_users: Vec<[f64; 2]>,
    pub final_uav: Vec<[f64; 2]>,
    pub params: ChannelParams,
    pub labels: Vec<LabelRecord>,
    pub warnings: Vec<String>,
}

impl MissionRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mission record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct MissionOutcome {
    pub trajectory: Vec<Point3>,
    pub measurements: MeasurementSet,
    pub estimate: Estimate,
    pub record: MissionRecord,
}

fn xy(p: &Point2) -> [f64; 2] {
    [p.x, p.y]
}

/// Per-link LoS weights for planning: hard labels where an estimate exists,
/// the elevation predictor for epochs past the estimate.
fn planning_weights(
    est: &Estimate,
    trajectory: &[Point3],
    n_bs: usize,
    predictor: &LosPredictorParams,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = est.state.users.len();
    let n_est = est.state.uav.len();
    let labels = &est.labels.labels;
    let label = |i: usize| {
        if labels.get(i).copied().unwrap_or(false) {
            1.0
        } else {
            0.0
        }
    };
    let w_uav = trajectory
        .iter()
        .enumerate()
        .map(|(n, x)| {
            (0..k)
                .map(|j| {
                    if n < n_est && !labels.is_empty() {
                        label(n * k + j)
                    } else {
                        los_probability(predictor, x, &est.state.users[j])
                    }
                })
                .collect()
        })
        .collect();
    let bs_offset = n_est * k + n_est * n_bs;
    let w_bs = (0..n_bs)
        .map(|m| (0..k).map(|j| label(bs_offset + m * k + j)).collect())
        .collect();
    (w_uav, w_bs)
}

/// Fly the greedy planner, re-estimating along the way, then run a full
/// estimator pass on all data.
pub fn run_mission_online<R: Rng + ?Sized>(
    map: &UrbanMap,
    users: &[Point2],
    setup: &MissionSetup,
    rng: &mut R,
) -> Result<MissionOutcome> {
    setup.planner.validate()?;
    let est_cfg = &setup.estimator;
    let light = PassOptions {
        max_outer: setup.mission.light_outer_iters,
        solver_iters: setup.mission.light_solver_iters,
        reinit: false,
    };
    let mut planning = setup.estimator.prior;
    let mut ms = MeasurementSet::new(users.len(), map.bs_sites.len());
    ms.collect_bs_ue(map, &setup.channel, users, rng)?;
    let mut x = setup.planner.x_start;
    let mut trajectory = vec![x];
    ms.collect_epoch(map, &setup.channel, &setup.noise, None, &x, users, rng)?;
    let mut est = est_cfg.run(
        &ms,
        map,
        None,
        PassOptions {
            reinit: true,
            ..light
        },
    )?;
    let mut epochs = Vec::with_capacity(setup.planner.n_total);
    let mut warnings = std::mem::take(&mut est.warnings);

    for n in 1..setup.planner.n_total {
        if est_cfg.mode == EstimatorMode::Full {
            planning = est.params;
        } else {
            planning.los.sigma_tau = est_cfg.prior.los.sigma_tau;
            planning.nlos.sigma_tau = est_cfg.prior.nlos.sigma_tau;
        }
        let (w_uav, w_bs) =
            planning_weights(&est, &trajectory, map.bs_sites.len(), &setup.predictor);
        let fim = fim_from_history(
            &est.state.users,
            &map.bs_sites,
            &w_bs,
            &trajectory,
            &w_uav,
            &planning,
            setup.planner.prior_fim_eps,
        );
        let (next, crb) = match fim {
            Ok(f) => (
                greedy_step(
                    &x,
                    &f,
                    &est.state.users,
                    &setup.predictor,
                    &planning,
                    &setup.planner,
                ),
                Some(f.crb_trace()),
            ),
            Err(e) => {
                warnings.push(format!("epoch {n}: FIM unavailable ({e}); homing"));
                let remaining = (setup.planner.n_total - n) as f64;
                (x + (setup.planner.x_end - x) / remaining, None)
            }
        };
        epochs.push(EpochRecord {
            epoch: n,
            uav_true: [x.x, x.y, x.z],
            uav_estimate: est.state.uav.last().map_or([f64::NAN; 2], xy),
            users_estimate: est.state.users.iter().map(xy).collect(),
            crb_trace: crb,
        });
        ms.collect_epoch(
            map,
            &setup.channel,
            &setup.noise,
            Some(&x),
            &next,
            users,
            rng,
        )?;
        x = next;
        trajectory.push(x);
        if n % setup.mission.replan_stride == 0 {
            let reinit = n % est_cfg.outer.reinit_every == 0;
            match est_cfg.run(&ms, map, Some(&est), PassOptions { reinit, ..light }) {
                Ok(mut e) => {
                    warnings.extend(e.warnings.drain(..).map(|w| format!("epoch {n}: {w}")));
                    est = e;
                }
                Err(e) => warnings.push(format!(
                    "epoch {n}: estimator failed ({e}); keeping previous estimate"
                )),
            }
        }
    }
    // The light passes can settle in a poor basin, so the final pass also
    // starts cold and the lower objective wins.
    let warm = est_cfg.run(&ms, map, Some(&est), est_cfg.full_pass())?;
    let mut est = match est_cfg.run(&ms, map, None, est_cfg.full_pass()) {
        Ok(cold) if final_objective(&cold) < final_objective(&warm) => cold,
        Ok(_) => warm,
        Err(e) => {
            warnings.push(format!("cold final pass failed ({e})"));
            warm
        }
    };
    warnings.append(&mut est.warnings);
    epochs.push(EpochRecord {
        epoch: setup.planner.n_total,
        uav_true: [x.x, x.y, x.z],
        uav_estimate: est.state.uav.last().map_or([f64::NAN; 2], xy),
        users_estimate: est.state.users.iter().map(xy).collect(),
        crb_trace: None,
    });
    let record = MissionRecord {
        epochs,
        final_users: est.state.users.iter().map(xy).collect(),
        final_uav: est.state.uav.iter().map(xy).collect(),
        params: est.params,
        labels: ms
            .links()
            .zip(est.labels.omega.iter().zip(&est.labels.labels))
            .map(|((id, _), (w, l))| LabelRecord {
                link: id.to_string(),
                omega: *w,
                los: *l,
            })
            .collect(),
        warnings,
    };
    est.warnings = record.warnings.clone();
    Ok(MissionOutcome {
        trajectory,
        measurements: ms,
        estimate: est,
        record,
    })
}

fn final_objective(est: &Estimate) -> f64 {
    let trace = &est.objective_trace;
    match (est.converged, trace.last()) {
        (true, Some(v)) => *v,
        _ => trace.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Square loop centred at `center` through `n` points spaced evenly along
/// the perimeter from the south-west corner, scaled so the flown polyline is
/// `length` long.
pub fn rectangle_trajectory(center: &Point2, length: f64, n: usize, altitude: f64) -> Vec<Point3> {
    let unit = square_loop(&Point2::zeros(), 1.0, n);
    let unit_len: f64 = unit.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let side = if unit_len > 0.0 {
        length / unit_len
    } else {
        0.0
    };
    square_loop(center, side, n)
        .into_iter()
        .map(|p| Point3::new(p.x, p.y, altitude))
        .collect()
}

fn square_loop(center: &Point2, side: f64, n: usize) -> Vec<Point2> {
    let length = 4.0 * side;
    let corner = center - Point2::new(side / 2.0, side / 2.0);
    let step = if n > 1 { length / (n - 1) as f64 } else { 0.0 };
    (0..n)
        .map(|i| {
            let s = (i as f64 * step).min(length);
            let leg = if side > 0.0 {
                (s / side).floor().min(3.0)
            } else {
                0.0
            };
            let along = s - leg * side;
            match leg as u8 {
                0 => corner + Point2::new(along, 0.0),
                1 => corner + Point2::new(side, along),
                2 => corner + Point2::new(side - along, side),
                _ => corner + Point2::new(0.0, side - along),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Rect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rectangle_has_matched_length() {
        let traj = rectangle_trajectory(&Point2::new(300.0, 400.0), 800.0, 101, 80.0);
        let len: f64 = traj.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        assert!((len - 800.0).abs() < 1e-9, "{len}");
        assert!((traj[0] - traj[100]).norm() < 1e-9);
        let cx = traj.iter().map(|p| p.x).sum::<f64>() / 101.0;
        assert!((cx - 300.0).abs() < 2.0 + 1e-9);
    }

    fn small_scenario() -> (Scenario, UrbanMap) {
        let mut sc = Scenario::default();
        sc.mission.epochs = 30;
        sc.mission.budget = 300.0;
        let map = UrbanMap::empty(Rect::new(0.0, 600.0, 0.0, 800.0).unwrap())
            .with_bs_sites(sc.active_bs_sites())
            .unwrap();
        (sc, map)
    }

    #[test]
    fn mission_is_feasible_and_deterministic() {
        let (sc, map) = small_scenario();
        let users = vec![Point2::new(200.0, 300.0), Point2::new(380.0, 520.0)];
        let setup = MissionSetup::from_scenario(&sc);
        let a =
            run_mission_online(&map, &users, &setup, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b =
            run_mission_online(&map, &users, &setup, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.record, b.record);
        assert_eq!(a.trajectory.len(), 30);
        for w in a.trajectory.windows(2) {
            assert!((w[1] - w[0]).norm() <= setup.planner.d_max + 1e-9);
        }
        assert!(
            (a.trajectory[29] - setup.planner.x_end).norm() <= setup.planner.neighbor_step / 2.0
        );
        assert_eq!(a.record.epochs.len(), 30);
        assert_eq!(a.record.labels.len(), a.measurements.n_links());
        for (u, t) in a.estimate.state.users.iter().zip(&users) {
            assert!((u - t).norm() < 5.0, "{u} vs {t}");
        }
    }

    #[test]
    fn noiseless_mission_is_accurate() {
        let (mut sc, map) = small_scenario();
        for s in [&mut sc.channel.los, &mut sc.channel.nlos] {
            s.gain_variance = 1e-8;
            s.toa_variance = 1e-8;
        }
        sc.odometry.gps_variance = 1e-8;
        sc.odometry.velocity_variance = 1e-8;
        let users = vec![Point2::new(250.0, 350.0)];
        let setup = MissionSetup::from_scenario(&sc);
        let out =
            run_mission_online(&map, &users, &setup, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((out.estimate.state.users[0] - users[0]).norm() < 0.5);
    }
}
