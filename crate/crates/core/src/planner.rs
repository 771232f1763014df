//! Greedy trajectory planning on the Fisher information of ToA measurements.

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::geo::{los_probability, LosPredictorParams, Rect};
use crate::radio::ChannelParams;
use crate::{lift, Error, Point2, Point3, Result};

/// Fisher information over the stacked user coordinates, with its inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct FimState {
    pub f: DMatrix<f64>,
    pub f_inv: DMatrix<f64>,
    /// Number of epochs accumulated so far.
    pub n: usize,
}

impl FimState {
    /// `eps * I` for `n_users` users.
    pub fn prior(n_users: usize, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Domain(format!(
                "prior FIM loading must be positive, got {eps}"
            )));
        }
        let dim = 2 * n_users;
        Ok(FimState {
            f: DMatrix::identity(dim, dim) * eps,
            f_inv: DMatrix::identity(dim, dim) / eps,
            n: 0,
        })
    }

    pub fn n_users(&self) -> usize {
        self.f.nrows() / 2
    }

    /// trace(F^-1), the CRB on the summed squared user error.
    pub fn crb_trace(&self) -> f64 {
        self.f_inv.trace()
    }

    /// Add per-user blocks without advancing the epoch counter.
    pub fn add_blocks(&mut self, blocks: &[Matrix2<f64>]) -> Result<()> {
        self.f += block_diagonal(blocks);
        self.f_inv = invert_block_diagonal(&self.f)?;
        Ok(())
    }
}

fn block_diagonal(blocks: &[Matrix2<f64>]) -> DMatrix<f64> {
    let dim = 2 * blocks.len();
    let mut m = DMatrix::zeros(dim, dim);
    for (k, b) in blocks.iter().enumerate() {
        m.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(b);
    }
    m
}

fn invert_block_diagonal(f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = DMatrix::zeros(f.nrows(), f.ncols());
    for k in 0..f.nrows() / 2 {
        let b: Matrix2<f64> = f.fixed_view::<2, 2>(2 * k, 2 * k).into_owned();
        let bi = b.try_inverse().ok_or(Error::Singular(b.determinant()))?;
        inv.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(&bi);
    }
    Ok(inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Maximum travel per epoch, meters.
    pub d_max: f64,
    /// Number of epochs N, counting the start position.
    pub n_total: usize,
    pub x_start: Point3,
    pub x_end: Point3,
    /// Radius of the eight-neighbour action ring, meters.
    pub neighbor_step: f64,
    pub prior_fim_eps: f64,
    /// Candidates outside this area score minus infinity.
    pub bounds: Option<Rect>,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0) || self.n_total < 2 {
            return Err(Error::InvalidConfig(format!(
                "need d_max > 0 and at least 2 epochs, got {} and {}",
                self.d_max, self.n_total
            )));
        }
        if !(self.neighbor_step > 0.0 && self.neighbor_step <= self.d_max * (1.0 + 1e-12)) {
            return Err(Error::InvalidConfig(format!(
                "neighbor_step {} must be in (0, d_max = {}]",
                self.neighbor_step, self.d_max
            )));
        }
        if !(self.prior_fim_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "prior_fim_eps must be positive".into(),
            ));
        }
        let reach = self.d_max * (self.n_total - 1) as f64;
        if (self.x_start - self.x_end).xy().norm() > reach {
            return Err(Error::InvalidConfig(format!(
                "end point unreachable: {} m apart, budget {reach} m",
                (self.x_start - self.x_end).xy().norm()
            )));
        }
        Ok(())
    }

    /// Reachability radius for a position taken at 1-based epoch `m`.
    pub fn reach(&self, m: usize) -> f64 {
        self.d_max * self.n_total.saturating_sub(m) as f64
    }
}

/// Per-user ToA information from one UAV position, mixed over the link state.
pub fn fim_contribution(
    uav: &Point3,
    user: &Point2,
    w: f64,
    params: &ChannelParams,
) -> Result<Matrix2<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("LoS probability {w} outside [0, 1]")));
    }
    let delta = lift(user, 0.0) - uav;
    let d = delta.norm();
    if !(d > 1e-9) {
        return Err(Error::Domain(format!("degenerate link distance {d}")));
    }
    let g = delta.xy() / d;
    let info = w / params.los.sigma_tau.powi(2) + (1.0 - w) / params.nlos.sigma_tau.powi(2);
    Ok(g * g.transpose() * info)
}

/// `F_n = F_{n-1} + blockdiag(H_k)`; advances the epoch counter.
pub fn fim_accumulate(state: &FimState, contributions: &[Matrix2<f64>]) -> Result<FimState> {
    assert_eq!(contributions.len(), state.n_users());
    let mut next = state.clone();
    next.add_blocks(contributions)?;
    next.n += 1;
    Ok(next)
}

/// Reduction of the inverse FIM from adding `contributions`.
pub fn improvement_matrix(state: &FimState, contributions: &[Matrix2<f64>]) -> DMatrix<f64> {
    let sum_h = block_diagonal(contributions);
    let invertible = {
        let eig = sum_h.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        hi > 0.0 && lo > 1e-10 * hi
    };
    if invertible {
        if let Some(h_inv) = sum_h.clone().cholesky().map(|c| c.inverse()) {
            if let Some(mid) = (h_inv + &state.f_inv).cholesky() {
                return &state.f_inv * mid.inverse() * &state.f_inv;
            }
        }
    }
    let updated = &state.f + &sum_h;
    let inv = invert_block_diagonal(&updated).unwrap_or_else(|_| {
        updated
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::zeros(updated.nrows(), updated.ncols()))
    });
    &state.f_inv - inv
}

/// Score of moving to `candidate`, taken at 1-based epoch `step`.
pub fn greedy_objective(
    candidate: &Point3,
    step: usize,
    state: &FimState,
    users: &[Point2],
    predictor: &LosPredictorParams,
    params: &ChannelParams,
    config: &PlannerConfig,
) -> f64 {
    if (candidate - config.x_end).xy().norm() > config.reach(step) + 1e-9 {
        return f64::NEG_INFINITY;
    }
    if let Some(b) = &config.bounds {
        if !b.contains(&candidate.xy()) {
            return f64::NEG_INFINITY;
        }
    }
    let contributions: Result<Vec<Matrix2<f64>>> = users
        .iter()
        .map(|u| {
            fim_contribution(
                candidate,
                u,
                los_probability(predictor, candidate, u),
                params,
            )
        })
        .collect();
    match contributions {
        Ok(c) => improvement_matrix(state, &c).trace(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// The action set: E, NE, N, NW, W, SW, S, SE on a ring, then stay.
pub fn candidates(current: &Point3, radius: f64) -> [Point3; 9] {
    let mut out = [*current; 9];
    for (i, c) in out.iter_mut().take(8).enumerate() {
        let t = i as f64 * std::f64::consts::FRAC_PI_4;
        *c = current + Point3::new(radius * t.cos(), radius * t.sin(), 0.0);
    }
    out
}

/// Next waypoint from `current`, which was taken at epoch `state.n`.
/// `state.n` must be below `config.n_total`.
pub fn greedy_step(
    current: &Point3,
    state: &FimState,
    users: &[Point2],
    predictor: &LosPredictorParams,
    params: &ChannelParams,
    config: &PlannerConfig,
) -> Point3 {
    let n = state.n.max(1);
    let step = n + 1;
    let mut best = None;
    let mut best_score = f64::NEG_INFINITY;
    for c in candidates(current, config.neighbor_step) {
        let s = greedy_objective(&c, step, state, users, predictor, params, config);
        if s > best_score {
            best_score = s;
            best = Some(c);
        }
    }
    best.unwrap_or_else(|| {
        let to_end = config.x_end - current;
        let dist = to_end.xy().norm();
        let remaining = config.n_total.saturating_sub(n).max(1) as f64;
        if dist == 0.0 {
            *current
        } else {
            current + to_end * (dist / remaining / to_end.norm())
        }
    })
}

/// FIM held after flying `uav` with link-state weights `w_uav[n][k]`, on top of
/// the BS-user information with weights `w_bs[m][k]` and the diagonal prior.
pub fn fim_from_history(
    users: &[Point2],
    bs_sites: &[Point3],
    w_bs: &[Vec<f64>],
    uav: &[Point3],
    w_uav: &[Vec<f64>],
    params: &ChannelParams,
    eps: f64,
) -> Result<FimState> {
    let mut state = FimState::prior(users.len(), eps)?;
    let mut blocks = vec![Matrix2::zeros(); users.len()];
    for (b, ws) in bs_sites.iter().zip(w_bs) {
        for ((u, w), acc) in users.iter().zip(ws).zip(&mut blocks) {
            *acc += fim_contribution(b, u, *w, params)?;
        }
    }
    for (x, ws) in uav.iter().zip(w_uav) {
        for ((u, w), acc) in users.iter().zip(ws).zip(&mut blocks) {
            *acc += fim_contribution(x, u, *w, params)?;
        }
    }
    state.add_blocks(&blocks)?;
    state.n = uav.len();
    Ok(state)
}
