//! The alternating estimator: EM with positions fixed, then least squares
//! with labels and channel fixed, until the positions settle.

use crate::em::{
    e_step, fit_toa_params, hard_classify, initial_gain_params, run_em_gain, ClassificationState,
    EmConfig, GainObservation, ToaObservation,
};
use crate::geo::{Rect, UrbanMap};
use crate::radio::{ChannelParams, MeasurementSet, OdometryNoise, Segment};
use crate::slam::{
    build_graph, evaluate_loss, link_distance, link_endpoints, solve_gauss_newton, Endpoint,
    GraphOptions, IterationRecord, Residual, ResidualBlock, SolverConfig, StateVector,
};
use crate::{lift, Point2, Result};

use super::scenario::{EstimatorMode, OuterConfig, Scenario};

#[derive(Clone, Debug)]
pub struct Estimate {
    pub state: StateVector,
    pub params: ChannelParams,
    /// Soft responsibilities and hard labels for every link.
    pub labels: ClassificationState,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Negative log-likelihood (up to a constant) after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// Solver iterations of the last outer iteration.
    pub solver_trace: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

/// Knobs of one estimator pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassOptions {
    pub max_outer: usize,
    pub solver_iters: usize,
    /// Re-check every user against a grid search on the labelled loss.
    pub reinit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimator {
    pub mode: EstimatorMode,
    pub em: EmConfig,
    pub solver: SolverConfig,
    pub outer: OuterConfig,
    /// Odometry noise assumed by the estimator.
    pub noise: OdometryNoise,
    pub prior: ChannelParams,
    /// Search area for user positions.
    pub area: Rect,
}

impl Estimator {
    pub fn from_scenario(sc: &Scenario) -> Self {
        Estimator {
            mode: sc.estimator,
            em: sc.em,
            solver: sc.solver,
            outer: sc.outer,
            noise: sc.odometry.noise(),
            prior: sc.prior.params(),
            area: sc.area(),
        }
    }

    pub fn full_pass(&self) -> PassOptions {
        PassOptions {
            max_outer: self.outer.max_iters,
            solver_iters: self.solver.max_iters,
            reinit: true,
        }
    }

    fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            use_gain: true,
            use_toa: self.mode == EstimatorMode::Full,
        }
    }

    /// Run the alternation on `ms`, optionally warm-started from an estimate
    /// of a prefix of the same mission.
    pub fn run(
        &self,
        ms: &MeasurementSet,
        map: &UrbanMap,
        warm: Option<&Estimate>,
        pass: PassOptions,
    ) -> Result<Estimate> {
        let mut warnings = Vec::new();
        let uav: Vec<Point2> = (0..ms.n_epochs())
            .map(|n| match warm {
                Some(w) if n < w.state.uav.len() => w.state.uav[n],
                _ => ms.odometry[n].gps,
            })
            .collect();
        let mut state = StateVector::new(uav, Vec::new());
        state.users = match warm {
            Some(w) if w.state.users.len() == ms.n_users => w.state.users.clone(),
            _ => self.robust_user_guess(ms, map, &state),
        };
        let mut params = warm.map_or(self.prior, |w| w.params);
        let mut fresh_gain = warm.is_none();
        let mut labels = ClassificationState::default();
        let mut trace = Vec::new();
        let mut solver_trace = Vec::new();
        let mut best: Option<(f64, StateVector, ChannelParams, ClassificationState)> = None;
        let mut converged = false;
        let mut iterations = 0;
        let solver = SolverConfig {
            max_iters: pass.solver_iters,
            ..self.solver
        };

        for it in 1..=pass.max_outer {
            iterations = it;
            let distances = link_distances(ms, map, &state);
            let gains: Vec<GainObservation> = ms
                .links()
                .zip(&distances)
                .map(|((_, l), d)| GainObservation {
                    gain: l.gain,
                    log_distance: d.max(self.solver.min_distance).log10(),
                })
                .collect();
            let start = if fresh_gain {
                match initial_gain_params(&gains, &params, &self.em) {
                    Ok(p) => p,
                    Err(e) => {
                        warnings.push(format!("gain initialisation failed: {e}"));
                        params
                    }
                }
            } else {
                params
            };
            fresh_gain = false;
            let (mut learned, soft) = match run_em_gain(&self.em, &start, &gains) {
                Ok(out) => (out.params, out.state),
                Err(e) => {
                    warnings.push(format!("EM failed at outer iteration {it}: {e}"));
                    (params, ClassificationState::soft(e_step(&params, &gains)))
                }
            };
            if self.mode == EstimatorMode::Full {
                let toa: Vec<ToaObservation> = ms
                    .links()
                    .zip(&distances)
                    .map(|((_, l), d)| ToaObservation {
                        toa_range: l.toa_range,
                        distance: *d,
                    })
                    .collect();
                let before = learned;
                let _ = fit_toa_params(&soft.omega, &toa, &mut learned, &self.em);
                for s in Segment::ALL {
                    let mass: f64 = soft
                        .omega
                        .iter()
                        .map(|w| if s == Segment::Los { *w } else { 1.0 - w })
                        .sum();
                    if mass < self.outer.min_toa_mass {
                        let keep = before.segment(s);
                        let seg = learned.segment_mut(s);
                        seg.mu_tau = keep.mu_tau;
                        seg.sigma_tau = keep.sigma_tau;
                    }
                }
            }
            params = learned;
            labels = hard_classify(&soft);

            let blocks = build_graph(ms, &labels, &params, &self.noise, map, self.graph_options())?;
            if it == 1 && pass.reinit {
                self.grid_reinit(&blocks, &mut state);
            }
            let previous = state.clone();
            match solve_gauss_newton(&blocks, &state, &solver) {
                Ok(sol) => {
                    state = sol.state;
                    solver_trace = sol.trace;
                }
                Err(e) => warnings.push(format!("solver failed at outer iteration {it}: {e}")),
            }
            let objective = objective(&blocks, &state, self.solver.min_distance);
            trace.push(objective);
            if best.as_ref().is_none_or(|b| objective < b.0) {
                best = Some((objective, state.clone(), params, labels.clone()));
            }
            if state.max_displacement(&previous) < self.outer.tol {
                converged = true;
                break;
            }
        }

        if !converged && pass.max_outer >= self.outer.max_iters {
            warnings.push(format!(
                "outer loop not converged after {iterations} iterations"
            ));
        }
        if !converged {
            if let Some((_, s, p, l)) = best {
                state = s;
                params = p;
                labels = l;
            }
        }
        Ok(Estimate {
            state,
            params,
            labels,
            outer_iterations: iterations,
            converged,
            objective_trace: trace,
            solver_trace,
            warnings,
        })
    }

    /// First guess per user: grid minimum of a robust ToA loss, or of the
    /// profiled line-fit residual when only gains are used.
    fn robust_user_guess(
        &self,
        ms: &MeasurementSet,
        map: &UrbanMap,
        state: &StateVector,
    ) -> Vec<Point2> {
        let grid = self.grid();
        (0..ms.n_users)
            .map(|k| {
                let links: Vec<(crate::Point3, f64, f64)> = user_links(ms, map, state, k);
                let cost = |u: &Point2| -> f64 {
                    let p = lift(u, 0.0);
                    match self.mode {
                        EstimatorMode::Full => links
                            .iter()
                            .map(|(a, _, toa)| {
                                let r = (toa - (a - p).norm()) / self.outer.cauchy_scale;
                                (1.0 + r * r).ln()
                            })
                            .sum(),
                        EstimatorMode::RssOnly => profile_line_sse(&links, &p),
                    }
                };
                argmin(&grid, cost).unwrap_or_else(|| self.area.center())
            })
            .collect()
    }

    fn grid(&self) -> Vec<Point2> {
        let step = self.outer.grid_step;
        let nx = (self.area.width() / step).floor() as usize;
        let ny = (self.area.height() / step).floor() as usize;
        (0..=nx)
            .flat_map(|i| {
                (0..=ny).map(move |j| {
                    Point2::new(
                        self.area.x_min + i as f64 * step,
                        self.area.y_min + j as f64 * step,
                    )
                })
            })
            .collect()
    }

    /// Move a user to the refined grid minimum of its labelled loss when that
    /// beats the refined current position.
    fn grid_reinit(&self, blocks: &[ResidualBlock], state: &mut StateVector) {
        let grid = self.grid();
        let cfg = SolverConfig {
            max_iters: 20,
            ..self.solver
        };
        for k in 0..state.users.len() {
            let sub = user_subproblem(blocks, k, state);
            if sub.is_empty() {
                continue;
            }
            let loss_at = |u: &Point2| {
                evaluate_loss(&sub, &StateVector::new(vec![], vec![*u]), cfg.min_distance).weighted
            };
            let refine = |u: Point2| -> (Point2, f64) {
                let init = StateVector::new(vec![], vec![u]);
                match solve_gauss_newton(&sub, &init, &cfg) {
                    Ok(s) => (s.state.users[0], s.loss),
                    Err(_) => (u, loss_at(&u)),
                }
            };
            let Some(g) = argmin(&grid, loss_at) else {
                continue;
            };
            let (candidate, c_loss) = refine(g);
            let (current, k_loss) = refine(state.users[k]);
            state.users[k] = if c_loss < k_loss { candidate } else { current };
        }
    }
}

/// Alternating estimator with a full pass and no warm start.
pub fn run_algorithm1(
    ms: &MeasurementSet,
    map: &UrbanMap,
    estimator: &Estimator,
) -> Result<Estimate> {
    estimator.run(ms, map, None, estimator.full_pass())
}

/// Sum of weighted squared residuals plus the log-variance of every block.
fn objective(blocks: &[ResidualBlock], state: &StateVector, min_distance: f64) -> f64 {
    let weighted = evaluate_loss(blocks, state, min_distance).weighted;
    weighted - blocks.iter().map(|b| b.weight.ln()).sum::<f64>()
}

fn link_distances(ms: &MeasurementSet, map: &UrbanMap, state: &StateVector) -> Vec<f64> {
    ms.links()
        .map(|(id, _)| {
            let (a, b) = link_endpoints(ms, map, id);
            link_distance(state, a, b)
        })
        .collect()
}

/// `(anchor position, gain, toa)` of every link touching user `k`.
fn user_links(
    ms: &MeasurementSet,
    map: &UrbanMap,
    state: &StateVector,
    k: usize,
) -> Vec<(crate::Point3, f64, f64)> {
    let mut out: Vec<_> = ms
        .bs_ue
        .iter()
        .zip(&map.bs_sites)
        .map(|(row, b)| (*b, row[k].gain, row[k].toa_range))
        .collect();
    out.extend(ms.uav_ue.iter().enumerate().map(|(n, row)| {
        (
            lift(&state.uav[n], ms.altitude[n]),
            row[k].gain,
            row[k].toa_range,
        )
    }));
    out
}

/// Residual sum of squares of the best line `g = beta + alpha * log10(d)`.
fn profile_line_sse(links: &[(crate::Point3, f64, f64)], p: &crate::Point3) -> f64 {
    let n = links.len() as f64;
    if links.len() < 3 {
        return 0.0;
    }
    let phis: Vec<f64> = links
        .iter()
        .map(|(a, _, _)| (a - p).norm().max(0.5).log10())
        .collect();
    let mx = phis.iter().sum::<f64>() / n;
    let my = links.iter().map(|l| l.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (phi, l) in phis.iter().zip(links) {
        let (dx, dy) = (phi - mx, l.1 - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        syy
    } else {
        syy - sxy * sxy / sxx
    }
}

fn argmin(grid: &[Point2], cost: impl Fn(&Point2) -> f64) -> Option<Point2> {
    grid.iter()
        .map(|p| (cost(p), p))
        .filter(|(c, _)| c.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| *p)
}

/// Blocks touching user `k`, with all UAV endpoints frozen at `state` and the
/// user renumbered to 0.
fn user_subproblem(blocks: &[ResidualBlock], k: usize, state: &StateVector) -> Vec<ResidualBlock> {
    let freeze = |e: Endpoint| -> Option<Endpoint> {
        match e {
            Endpoint::User { k: j } if j == k => Some(Endpoint::User { k: 0 }),
            Endpoint::User { .. } => None,
            Endpoint::Uav { n, altitude } => Some(Endpoint::Fixed(lift(&state.uav[n], altitude))),
            f => Some(f),
        }
    };
    let touches = |a: Endpoint, b: Endpoint| {
        matches!(a, Endpoint::User { k: j } if j == k)
            || matches!(b, Endpoint::User { k: j } if j == k)
    };
    blocks
        .iter()
        .filter_map(|b| {
            let residual = match b.residual {
                Residual::Gain {
                    a,
                    b: e,
                    observed,
                    alpha,
                    beta,
                } if touches(a, e) => Residual::Gain {
                    a: freeze(a)?,
                    b: freeze(e)?,
                    observed,
                    alpha,
                    beta,
                },
                Residual::Toa {
                    a,
                    b: e,
                    observed,
                    bias,
                } if touches(a, e) => Residual::Toa {
                    a: freeze(a)?,
                    b: freeze(e)?,
                    observed,
                    bias,
                },
                _ => return None,
            };
            Some(ResidualBlock { residual, ..*b })
        })
        .collect()
}
