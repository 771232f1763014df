//! Joint UAV tracking and user localization as weighted nonlinear least squares.
//!
//! The state holds the horizontal UAV positions `x[0..N]` followed by the user
//! positions `u[0..K]`; UAV altitude is known per epoch and users sit at z = 0.
//! The normal matrix has an arrow shape: a block-tridiagonal UAV part from
//! odometry, a block-diagonal user part, and a dense UAV-user coupling. It is
//! factored by banded Cholesky on the UAV part and a dense Schur complement
//! on the users.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::em::ClassificationState;
use crate::geo::UrbanMap;
use crate::radio::{ChannelParams, LinkId, MeasurementSet, OdometryNoise, Segment};
use crate::{lift, Error, Point2, Point3, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub uav: Vec<Point2>,
    pub users: Vec<Point2>,
}

impl StateVector {
    pub fn new(uav: Vec<Point2>, users: Vec<Point2>) -> Self {
        StateVector { uav, users }
    }

    pub fn dim(&self) -> usize {
        2 * (self.uav.len() + self.users.len())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.uav.iter().chain(&self.users).flat_map(|p| [p.x, p.y]),
        )
    }

    pub fn from_slice(n_uav: usize, n_users: usize, v: &[f64]) -> Self {
        assert_eq!(v.len(), 2 * (n_uav + n_users));
        let pts: Vec<Point2> = v.chunks(2).map(|c| Point2::new(c[0], c[1])).collect();
        let users = pts[n_uav..].to_vec();
        let mut uav = pts;
        uav.truncate(n_uav);
        StateVector { uav, users }
    }

    fn offset(&self, delta: &DVector<f64>) -> Self {
        let mut v = self.to_vector();
        v += delta;
        StateVector::from_slice(self.uav.len(), self.users.len(), v.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.uav
            .iter()
            .chain(&self.users)
            .all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Largest per-node horizontal displacement between two states.
    pub fn max_displacement(&self, other: &StateVector) -> f64 {
        self.uav
            .iter()
            .zip(&other.uav)
            .chain(self.users.iter().zip(&other.users))
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    fn position(&self, e: Endpoint) -> Point3 {
        match e {
            Endpoint::Uav { n, altitude } => lift(&self.uav[n], altitude),
            Endpoint::User { k } => lift(&self.users[k], 0.0),
            Endpoint::Fixed(p) => p,
        }
    }
}

/// One end of a radio link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Endpoint {
    Uav { n: usize, altitude: f64 },
    User { k: usize },
    Fixed(Point3),
}

impl Endpoint {
    fn var(&self) -> Option<Var> {
        match *self {
            Endpoint::Uav { n, .. } => Some(Var::Uav(n)),
            Endpoint::User { k } => Some(Var::User(k)),
            Endpoint::Fixed(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Var {
    Uav(usize),
    User(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Gps,
    Velocity,
    Gain,
    Toa,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Residual {
    /// `gps - x[n]`
    Gps { n: usize, observed: Point2 },
    /// `v - (x[n] - x[n-1]) / dt`
    Velocity { n: usize, observed: Point2, dt: f64 },
    /// `g - beta - alpha * log10 |a - b|`
    Gain {
        a: Endpoint,
        b: Endpoint,
        observed: f64,
        alpha: f64,
        beta: f64,
    },
    /// `range - |a - b| - bias`
    Toa {
        a: Endpoint,
        b: Endpoint,
        observed: f64,
        bias: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub residual: Residual,
    /// Inverse variance.
    pub weight: f64,
    pub segment: Option<Segment>,
    /// `log(var / var_nlos)` of this block's segment; zero for NLoS and odometry.
    pub log_variance_ratio: f64,
}

struct Linearized {
    rows: usize,
    e: [f64; 2],
    terms: [Option<(Var, Matrix2<f64>)>; 2],
    clamped: bool,
}

impl ResidualBlock {
    pub fn kind(&self) -> BlockKind {
        match self.residual {
            Residual::Gps { .. } => BlockKind::Gps,
            Residual::Velocity { .. } => BlockKind::Velocity,
            Residual::Gain { .. } => BlockKind::Gain,
            Residual::Toa { .. } => BlockKind::Toa,
        }
    }

    /// Bias for ToA blocks.
    pub fn bias(&self) -> Option<f64> {
        match self.residual {
            Residual::Toa { bias, .. } => Some(bias),
            _ => None,
        }
    }

    /// Residual vector (length 1 or 2) at `state`.
    pub fn residual_at(&self, state: &StateVector, min_distance: f64) -> Vec<f64> {
        let l = self.linearize(state, min_distance);
        l.e[..l.rows].to_vec()
    }

    fn linearize(&self, state: &StateVector, min_distance: f64) -> Linearized {
        match self.residual {
            Residual::Gps { n, observed } => {
                let e = observed - state.uav[n];
                Linearized {
                    rows: 2,
                    e: [e.x, e.y],
                    terms: [Some((Var::Uav(n), -Matrix2::identity())), None],
                    clamped: false,
                }
            }
            Residual::Velocity { n, observed, dt } => {
                let e = observed - (state.uav[n] - state.uav[n - 1]) / dt;
                let j = Matrix2::identity() / dt;
                Linearized {
                    rows: 2,
                    e: [e.x, e.y],
                    terms: [Some((Var::Uav(n), -j)), Some((Var::Uav(n - 1), j))],
                    clamped: false,
                }
            }
            Residual::Gain {
                a,
                b,
                observed,
                alpha,
                beta,
            } => {
                let (d, diff, clamped) = separation(state, a, b, min_distance);
                let e = observed - beta - alpha * d.log10();
                let g = diff * (-alpha / (std::f64::consts::LN_10 * d * d));
                scalar_block(e, a, b, g, clamped)
            }
            Residual::Toa {
                a,
                b,
                observed,
                bias,
            } => {
                let (d, diff, clamped) = separation(state, a, b, min_distance);
                let e = observed - d - bias;
                scalar_block(e, a, b, diff * (-1.0 / d), clamped)
            }
        }
    }
}

fn separation(
    state: &StateVector,
    a: Endpoint,
    b: Endpoint,
    min_distance: f64,
) -> (f64, Vector2<f64>, bool) {
    let delta = state.position(a) - state.position(b);
    let d = delta.norm();
    let clamped = d < min_distance;
    (d.max(min_distance), delta.xy(), clamped)
}

/// `grad_a` is the derivative of the residual with respect to endpoint `a`.
fn scalar_block(
    e: f64,
    a: Endpoint,
    b: Endpoint,
    grad_a: Vector2<f64>,
    clamped: bool,
) -> Linearized {
    let row = |g: Vector2<f64>| Matrix2::new(g.x, g.y, 0.0, 0.0);
    Linearized {
        rows: 1,
        e: [e, 0.0],
        terms: [
            a.var().map(|v| (v, row(grad_a))),
            b.var().map(|v| (v, row(-grad_a))),
        ],
        clamped,
    }
}

/// Which measurement kinds enter the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub use_gain: bool,
    pub use_toa: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            use_gain: true,
            use_toa: true,
        }
    }
}

/// Endpoints of link `id` in `measurements`.
pub fn link_endpoints(
    measurements: &MeasurementSet,
    map: &UrbanMap,
    id: LinkId,
) -> (Endpoint, Endpoint) {
    let uav = |n: usize| Endpoint::Uav {
        n,
        altitude: measurements.altitude[n],
    };
    match id {
        LinkId::UavUe { n, k } => (uav(n), Endpoint::User { k }),
        LinkId::BsUav { n, m } => (Endpoint::Fixed(map.bs_sites[m]), uav(n)),
        LinkId::BsUe { m, k } => (Endpoint::Fixed(map.bs_sites[m]), Endpoint::User { k }),
    }
}

/// Link distance at `state`.
pub fn link_distance(state: &StateVector, a: Endpoint, b: Endpoint) -> f64 {
    (state.position(a) - state.position(b)).norm()
}

/// Assemble every residual block of the loss under hard `labels`.
pub fn build_graph(
    measurements: &MeasurementSet,
    labels: &ClassificationState,
    params: &ChannelParams,
    noise: &OdometryNoise,
    map: &UrbanMap,
    options: GraphOptions,
) -> Result<Vec<ResidualBlock>> {
    if map.bs_sites.len() != measurements.n_bs {
        return Err(Error::InvalidConfig(format!(
            "map has {} BS sites, measurements expect {}",
            map.bs_sites.len(),
            measurements.n_bs
        )));
    }
    let n_links = measurements.n_links();
    if labels.labels.len() < n_links {
        let missing = measurements
            .links()
            .nth(labels.labels.len())
            .map(|(id, _)| id);
        return Err(Error::MissingLabel(
            missing.map_or_else(|| "unknown link".to_string(), |id| id.to_string()),
        ));
    }
    let gps_w = 1.0 / (noise.sigma_gps * noise.sigma_gps);
    let vel_w = 1.0 / (noise.sigma_vel * noise.sigma_vel);
    let mut blocks = Vec::with_capacity(2 * measurements.n_epochs() + 2 * n_links);
    for (n, odo) in measurements.odometry.iter().enumerate() {
        blocks.push(ResidualBlock {
            residual: Residual::Gps {
                n,
                observed: odo.gps,
            },
            weight: gps_w,
            segment: None,
            log_variance_ratio: 0.0,
        });
    }
    for (n, odo) in measurements.odometry.iter().enumerate().skip(1) {
        if let Some(v) = odo.velocity {
            blocks.push(ResidualBlock {
                residual: Residual::Velocity {
                    n,
                    observed: v,
                    dt: noise.dt,
                },
                weight: vel_w,
                segment: None,
                log_variance_ratio: 0.0,
            });
        }
    }
    for ((id, link), &los) in measurements.links().zip(&labels.labels) {
        let s = Segment::from_los(los);
        let p = params.segment(s);
        let (a, b) = link_endpoints(measurements, map, id);
        if options.use_gain {
            let ratio = p.sigma * p.sigma / (params.nlos.sigma * params.nlos.sigma);
            blocks.push(ResidualBlock {
                residual: Residual::Gain {
                    a,
                    b,
                    observed: link.gain,
                    alpha: p.alpha,
                    beta: p.beta,
                },
                weight: 1.0 / (p.sigma * p.sigma),
                segment: Some(s),
                log_variance_ratio: ratio.ln(),
            });
        }
        if options.use_toa {
            let ratio = p.sigma_tau * p.sigma_tau / (params.nlos.sigma_tau * params.nlos.sigma_tau);
            blocks.push(ResidualBlock {
                residual: Residual::Toa {
                    a,
                    b,
                    observed: link.toa_range,
                    bias: p.mu_tau,
                },
                weight: 1.0 / (p.sigma_tau * p.sigma_tau),
                segment: Some(s),
                log_variance_ratio: ratio.ln(),
            });
        }
    }
    Ok(blocks)
}

/// Gauss-Newton normal equations in arrow form.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    n_uav: usize,
    n_users: usize,
    /// `band[i][d]` = H[i][i - d] of the UAV part, d = 0..=3.
    band: Vec<[f64; 4]>,
    /// UAV-user coupling, 2N x 2K.
    coupling: DMatrix<f64>,
    /// User part, 2K x 2K.
    users: DMatrix<f64>,
    /// `sum J^T Q^-1 e`; the loss gradient is twice this.
    pub b: DVector<f64>,
    pub loss: f64,
    /// Number of link blocks whose distance hit the floor.
    pub clamped: usize,
}

impl NormalEquations {
    fn zeros(n_uav: usize, n_users: usize) -> Self {
        NormalEquations {
            n_uav,
            n_users,
            band: vec![[0.0; 4]; 2 * n_uav],
            coupling: DMatrix::zeros(2 * n_uav, 2 * n_users),
            users: DMatrix::zeros(2 * n_users, 2 * n_users),
            b: DVector::zeros(2 * (n_uav + n_users)),
            loss: 0.0,
            clamped: 0,
        }
    }

    fn global(&self, v: Var) -> usize {
        match v {
            Var::Uav(n) => 2 * n,
            Var::User(k) => 2 * (self.n_uav + k),
        }
    }

    fn add(&mut self, vi: Var, vj: Var, m: &Matrix2<f64>) {
        match (vi, vj) {
            (Var::Uav(a), Var::Uav(b)) if a >= b => {
                for r in 0..2 {
                    for c in 0..2 {
                        let (row, col) = (2 * a + r, 2 * b + c);
                        if row >= col {
                            self.band[row][row - col] += m[(r, c)];
                        }
                    }
                }
            }
            (Var::Uav(a), Var::User(k)) => {
                for r in 0..2 {
                    for c in 0..2 {
                        self.coupling[(2 * a + r, 2 * k + c)] += m[(r, c)];
                    }
                }
            }
            (Var::User(k), Var::User(l)) => {
                for r in 0..2 {
                    for c in 0..2 {
                        self.users[(2 * k + r, 2 * l + c)] += m[(r, c)];
                    }
                }
            }
            _ => {}
        }
    }

    /// The full symmetric normal matrix.
    pub fn dense_h(&self) -> DMatrix<f64> {
        let nx = 2 * self.n_uav;
        let dim = nx + 2 * self.n_users;
        let mut h = DMatrix::zeros(dim, dim);
        for (i, row) in self.band.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                if d <= i {
                    h[(i, i - d)] = *v;
                    h[(i - d, i)] = *v;
                }
            }
        }
        h.view_mut((0, nx), (nx, 2 * self.n_users))
            .copy_from(&self.coupling);
        h.view_mut((nx, 0), (2 * self.n_users, nx))
            .copy_from(&self.coupling.transpose());
        h.view_mut((nx, nx), (2 * self.n_users, 2 * self.n_users))
            .copy_from(&self.users);
        h
    }

    /// Solve `(H + lambda I) delta = -b`, or `None` if not positive definite.
    pub fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let nx = 2 * self.n_uav;
        let nu = 2 * self.n_users;
        let mut band = self.band.clone();
        for row in &mut band {
            row[0] += lambda;
        }
        let chol = BandCholesky::factor(band)?;
        let bx = self.b.rows(0, nx).into_owned();
        let bu = self.b.rows(nx, nu).into_owned();
        let ainv_b = {
            let mut m = self.coupling.clone();
            for mut col in m.column_iter_mut() {
                chol.solve_in_place(col.as_mut_slice());
            }
            m
        };
        let mut ainv_bx = bx.clone();
        chol.solve_in_place(ainv_bx.as_mut_slice());
        let du = if nu > 0 {
            let mut s = &self.users - self.coupling.transpose() * &ainv_b;
            for i in 0..nu {
                s[(i, i)] += lambda;
            }
            let s = (&s + s.transpose()) * 0.5;
            let rhs = -&bu + self.coupling.transpose() * &ainv_bx;
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        // dx = A^-1 (-bx - B du)
        let dx = -ainv_bx - &ainv_b * &du;
        let mut out = DVector::zeros(nx + nu);
        out.rows_mut(0, nx).copy_from(&dx);
        out.rows_mut(nx, nu).copy_from(&du);
        if out.iter().all(|v| v.is_finite()) {
            Some(out)
        } else {
            None
        }
    }
}

/// Cholesky factor of a symmetric banded matrix with half-bandwidth 3.
struct BandCholesky {
    l: Vec<[f64; 4]>,
}

impl BandCholesky {
    fn factor(a: Vec<[f64; 4]>) -> Option<Self> {
        let n = a.len();
        let mut l = vec![[0.0; 4]; n];
        for i in 0..n {
            for j in i.saturating_sub(3)..=i {
                let mut s = a[i][i - j];
                for k in i.saturating_sub(3)..j {
                    s -= l[i][i - k] * l[j][j - k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l[i][0] = s.sqrt();
                } else {
                    l[i][i - j] = s / l[j][0];
                }
            }
        }
        Some(BandCholesky { l })
    }

    #[allow(clippy::needless_range_loop)]
    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.l.len();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(3)..i {
                s -= self.l[i][i - k] * x[k];
            }
            x[i] = s / self.l[i][0];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n.min(i + 4) {
                s -= self.l[k][k - i] * x[k];
            }
            x[i] = s / self.l[i][0];
        }
    }
}

/// Linearize every block at `state` and accumulate the normal equations.
pub fn linearize(
    blocks: &[ResidualBlock],
    state: &StateVector,
    min_distance: f64,
) -> NormalEquations {
    let mut ne = NormalEquations::zeros(state.uav.len(), state.users.len());
    for block in blocks {
        let lin = block.linearize(state, min_distance);
        if lin.clamped {
            ne.clamped += 1;
        }
        let w = block.weight;
        ne.loss += w * lin.e[..lin.rows].iter().map(|e| e * e).sum::<f64>();
        let e = Vector2::new(lin.e[0], lin.e[1]);
        let terms: Vec<(Var, Matrix2<f64>)> = lin.terms.iter().flatten().copied().collect();
        for (vi, ji) in &terms {
            let g = ji.transpose() * e * w;
            let gi = ne.global(*vi);
            ne.b[gi] += g.x;
            ne.b[gi + 1] += g.y;
            for (vj, jj) in &terms {
                let m = ji.transpose() * jj * w;
                ne.add(*vi, *vj, &m);
            }
        }
    }
    if ne.clamped > 0 {
        log::debug!("{} link distances clamped to {min_distance} m", ne.clamped);
    }
    ne
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// `sum e^T Q^-1 e`
    pub weighted: f64,
    /// State-independent log-variance-ratio term.
    pub constant: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.weighted + self.constant
    }
}

pub fn evaluate_loss(
    blocks: &[ResidualBlock],
    state: &StateVector,
    min_distance: f64,
) -> LossBreakdown {
    let mut out = LossBreakdown {
        weighted: 0.0,
        constant: 0.0,
    };
    for block in blocks {
        let lin = block.linearize(state, min_distance);
        out.weighted += block.weight * lin.e[..lin.rows].iter().map(|e| e * e).sum::<f64>();
        out.constant += block.log_variance_ratio;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once the step norm drops below this, meters.
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    pub min_distance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 50,
            step_tol: 1e-6,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            min_distance: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters >= 1
            && self.step_tol > 0.0
            && self.lambda_init >= 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.lambda_max > self.lambda_init
            && self.min_distance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad solver config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Loss after this iteration.
    pub loss: f64,
    pub step_norm: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub state: StateVector,
    pub loss: f64,
    pub initial_loss: f64,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

/// Levenberg-damped Gauss-Newton from `init`.
pub fn solve_gauss_newton(
    blocks: &[ResidualBlock],
    init: &StateVector,
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    let mut state = init.clone();
    let mut ne = linearize(blocks, &state, config.min_distance);
    if !ne.loss.is_finite() {
        return Err(Error::NonFinite(0));
    }
    let initial_loss = ne.loss;
    let mut lambda = config.lambda_init;
    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 1..=config.max_iters {
        let delta = loop {
            match ne.solve(lambda) {
                Some(d) => break d,
                None => {
                    lambda = (lambda * config.lambda_up).max(1e-9);
                    if lambda > config.lambda_max {
                        return Err(Error::Singular(lambda));
                    }
                }
            }
        };
        let step_norm = delta.norm();
        let candidate = state.offset(&delta);
        let new_loss = evaluate_loss(blocks, &candidate, config.min_distance).weighted;
        let accepted = new_loss.is_finite() && new_loss < ne.loss;
        if accepted {
            state = candidate;
            ne = linearize(blocks, &state, config.min_distance);
            lambda *= config.lambda_down;
        } else {
            if !candidate.is_finite() && step_norm.is_finite() {
                return Err(Error::NonFinite(iteration));
            }
            lambda = (lambda * config.lambda_up).max(1e-9);
        }
        trace.push(IterationRecord {
            iteration,
            loss: ne.loss,
            step_norm,
            lambda,
            accepted,
        });
        if step_norm < config.step_tol || lambda > config.lambda_max {
            converged = step_norm < config.step_tol;
            break;
        }
    }
    Ok(Solution {
        state,
        loss: ne.loss,
        initial_loss,
        trace,
        converged,
    })
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.iteration,
            self.loss,
            self.step_norm,
            self.lambda,
            u8::from(self.accepted)
        )
    }
}

/// Write an iteration trace as CSV.
pub fn write_trace(path: impl AsRef<Path>, trace: &[IterationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,loss,step_norm,lambda,accepted\n");
    for r in trace {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::em::ClassificationState;
    use crate::geo::Rect;
    use crate::radio::{collect_mission, SegmentParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn default_params() -> ChannelParams {
        ChannelParams {
            los: SegmentParams {
                alpha: -22.0,
                beta: -32.0,
                sigma: 2f64.sqrt(),
                mu_tau: 0.0,
                sigma_tau: 2f64.sqrt(),
            },
            nlos: SegmentParams {
                alpha: -32.0,
                beta: -35.0,
                sigma: 5f64.sqrt(),
                mu_tau: 50.0,
                sigma_tau: 40f64.sqrt(),
            },
            pi_los: 0.5,
        }
    }

    fn noiseless() -> ChannelParams {
        let mut p = default_params();
        for s in Segment::ALL {
            p.segment_mut(s).sigma = 0.0;
            p.segment_mut(s).sigma_tau = 0.0;
        }
        p
    }

    pub(crate) fn open_map() -> UrbanMap {
        UrbanMap::empty(Rect::new(0.0, 600.0, 0.0, 800.0).unwrap())
            .with_bs_sites(vec![
                Point3::new(100.0, 150.0, 25.0),
                Point3::new(520.0, 220.0, 25.0),
                Point3::new(260.0, 700.0, 25.0),
            ])
            .unwrap()
    }

    fn circle(n: usize) -> Vec<Point3> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                Point3::new(300.0 + 150.0 * t.cos(), 400.0 + 150.0 * t.sin(), 80.0)
            })
            .collect()
    }

    struct Problem {
        ms: MeasurementSet,
        map: UrbanMap,
        truth: StateVector,
        blocks: Vec<ResidualBlock>,
    }

    fn problem(
        seed: u64,
        n: usize,
        users: &[Point2],
        data: &ChannelParams,
        odo: OdometryNoise,
    ) -> Problem {
        let map = open_map();
        let traj = circle(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms = collect_mission(&map, data, &odo, &traj, users, &mut rng).unwrap();
        let labels = ClassificationState::from_labels(ms.true_labels().collect());
        let model = default_params();
        let model_odo = OdometryNoise {
            sigma_gps: 5f64.sqrt(),
            sigma_vel: 0.2f64.sqrt(),
            dt: odo.dt,
        };
        let blocks = build_graph(
            &ms,
            &labels,
            &model,
            &model_odo,
            &map,
            GraphOptions::default(),
        )
        .unwrap();
        let truth = StateVector::new(traj.iter().map(|p| p.xy()).collect(), users.to_vec());
        Problem {
            ms,
            map,
            truth,
            blocks,
        }
    }

    fn quiet_odometry() -> OdometryNoise {
        OdometryNoise {
            sigma_gps: 0.0,
            sigma_vel: 0.0,
            dt: 1.0,
        }
    }

    fn users() -> Vec<Point2> {
        vec![Point2::new(200.0, 300.0), Point2::new(420.0, 560.0)]
    }

    fn random_state(rng: &mut ChaCha8Rng, truth: &StateVector, spread: f64) -> StateVector {
        let mut jitter = |p: &Point2| {
            p + Point2::new(
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            )
        };
        StateVector::new(
            truth.uav.iter().map(&mut jitter).collect(),
            truth.users.iter().map(&mut jitter).collect(),
        )
    }

    #[test]
    fn block_counting() {
        let p = problem(
            1,
            2,
            &[Point2::new(100.0, 100.0)],
            &default_params(),
            quiet_odometry(),
        );
        let map = UrbanMap::empty(p.map.area);
        let mut ms = p.ms.clone();
        ms.n_bs = 0;
        ms.bs_uav = vec![Vec::new(); 2];
        ms.bs_ue = Vec::new();
        let labels = ClassificationState::from_labels(ms.true_labels().collect());
        let blocks = build_graph(
            &ms,
            &labels,
            &default_params(),
            &quiet_odometry(),
            &map,
            GraphOptions::default(),
        );
        assert_eq!(blocks.unwrap().len(), 7);

        // N + (N-1) + 2(NK + NM + MK)
        let p = problem(2, 10, &users(), &default_params(), quiet_odometry());
        assert_eq!(p.blocks.len(), 10 + 9 + 2 * (20 + 30 + 6));
    }

    #[test]
    fn missing_label_is_an_error() {
        let p = problem(3, 4, &users(), &default_params(), quiet_odometry());
        let mut labels: Vec<bool> = p.ms.true_labels().collect();
        labels.pop();
        let err = build_graph(
            &p.ms,
            &ClassificationState::from_labels(labels),
            &default_params(),
            &quiet_odometry(),
            &p.map,
            GraphOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::MissingLabel(ref s) if s.contains("bs_ue")),
            "{err}"
        );
    }

    #[test]
    fn los_labels_carry_no_nlos_bias() {
        let p = problem(4, 5, &users(), &default_params(), quiet_odometry());
        let labels = ClassificationState::from_labels(vec![true; p.ms.n_links()]);
        let blocks = build_graph(
            &p.ms,
            &labels,
            &default_params(),
            &quiet_odometry(),
            &p.map,
            GraphOptions::default(),
        )
        .unwrap();
        assert!(blocks
            .iter()
            .filter_map(ResidualBlock::bias)
            .all(|b| b == 0.0));
    }

    #[test]
    fn noiseless_truth_is_a_stationary_point() {
        let p = problem(5, 12, &users(), &noiseless(), quiet_odometry());
        let ne = linearize(&p.blocks, &p.truth, 0.5);
        assert!(ne.loss < 1e-18, "{}", ne.loss);
        assert!(ne.b.amax() < 1e-9);
        let sol = solve_gauss_newton(&p.blocks, &p.truth, &SolverConfig::default()).unwrap();
        assert_eq!(sol.trace.len(), 1);
        assert_eq!(sol.state, p.truth);
    }

    #[test]
    fn loss_matches_termwise_oracle() {
        let p = problem(
            6,
            15,
            &users(),
            &default_params(),
            OdometryNoise {
                sigma_gps: 5f64.sqrt(),
                sigma_vel: 0.2f64.sqrt(),
                dt: 1.0,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels: Vec<bool> = p.ms.true_labels().collect();
        let model = default_params();
        for trial in 0..5 {
            let st = if trial == 0 {
                p.truth.clone()
            } else {
                random_state(&mut rng, &p.truth, 20.0)
            };
            // direct summation of the loss, independent of the block machinery
            let mut oracle = 0.0;
            let mut constant = 0.0;
            for (n, o) in p.ms.odometry.iter().enumerate() {
                oracle += (o.gps - st.uav[n]).norm_squared() / 5.0;
                if n > 0 {
                    oracle +=
                        (o.velocity.unwrap() - (st.uav[n] - st.uav[n - 1])).norm_squared() / 0.2;
                }
            }
            let pos = |id: LinkId| -> (Point3, Point3) {
                match id {
                    LinkId::UavUe { n, k } => (lift(&st.uav[n], 80.0), lift(&st.users[k], 0.0)),
                    LinkId::BsUav { n, m } => (p.map.bs_sites[m], lift(&st.uav[n], 80.0)),
                    LinkId::BsUe { m, k } => (p.map.bs_sites[m], lift(&st.users[k], 0.0)),
                }
            };
            for ((id, l), los) in p.ms.links().zip(&labels) {
                let (a, b) = pos(id);
                let d = (a - b).norm();
                let s = model.segment(Segment::from_los(*los));
                oracle += (l.gain - s.beta - s.alpha * d.log10()).powi(2) / s.sigma.powi(2);
                oracle += (l.toa_range - d - s.mu_tau).powi(2) / s.sigma_tau.powi(2);
                if *los {
                    constant += (2.0f64 / 5.0 * 2.0 / 40.0).ln();
                }
            }
            let got = evaluate_loss(&p.blocks, &st, 0.5);
            assert!(
                (got.weighted - oracle).abs() < 1e-9 * oracle.max(1.0),
                "{} vs {oracle}",
                got.weighted
            );
            assert!((got.constant - constant).abs() < 1e-9 * constant.abs().max(1.0));
        }
    }

    #[test]
    fn variance_scaling() {
        let p = problem(8, 6, &users(), &default_params(), quiet_odometry());
        let st = random_state(&mut ChaCha8Rng::seed_from_u64(9), &p.truth, 5.0);
        let base = evaluate_loss(&p.blocks, &st, 0.5).weighted;
        let scaled: Vec<ResidualBlock> = p
            .blocks
            .iter()
            .map(|b| ResidualBlock {
                weight: b.weight / 4.0,
                ..*b
            })
            .collect();
        assert!((evaluate_loss(&scaled, &st, 0.5).weighted - base / 4.0).abs() < 1e-9 * base);
    }

    pub(crate) fn finite_difference_gradient(
        blocks: &[ResidualBlock],
        st: &StateVector,
        h: f64,
    ) -> DVector<f64> {
        let v = st.to_vector();
        let (n, k) = (st.uav.len(), st.users.len());
        DVector::from_iterator(
            v.len(),
            (0..v.len()).map(|i| {
                let mut plus = v.clone();
                let mut minus = v.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp =
                    evaluate_loss(blocks, &StateVector::from_slice(n, k, plus.as_slice()), 0.5)
                        .weighted;
                let lm = evaluate_loss(
                    blocks,
                    &StateVector::from_slice(n, k, minus.as_slice()),
                    0.5,
                )
                .weighted;
                (lp - lm) / (2.0 * h)
            }),
        )
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = problem(10, 6, &users(), &default_params(), quiet_odometry());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let st = random_state(&mut rng, &p.truth, 30.0);
            for block in &p.blocks {
                let lin = block.linearize(&st, 0.5);
                for (var, j) in lin.terms.iter().flatten() {
                    for c in 0..2 {
                        let bump = |h: f64| {
                            let mut s = st.clone();
                            match var {
                                Var::Uav(n) => s.uav[*n][c] += h,
                                Var::User(k) => s.users[*k][c] += h,
                            }
                            block.residual_at(&s, 0.5)
                        };
                        let (rp, rm) = (bump(1e-5), bump(-1e-5));
                        for r in 0..lin.rows {
                            let fd = (rp[r] - rm[r]) / 2e-5;
                            let an = j[(r, c)];
                            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = problem(
            22,
            8,
            &users(),
            &default_params(),
            OdometryNoise {
                sigma_gps: 2.0,
                sigma_vel: 0.4,
                dt: 1.0,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let st = random_state(&mut rng, &p.truth, 25.0);
            let analytic = linearize(&p.blocks, &st, 0.5).b * 2.0;
            let fd = finite_difference_gradient(&p.blocks, &st, 1e-5);
            let scale = analytic.amax().max(1.0);
            assert!((analytic - fd).amax() < 1e-5 * scale);
        }
    }

    #[test]
    fn single_gain_block_information_is_rank_one() {
        let blocks = [ResidualBlock {
            residual: Residual::Gain {
                a: Endpoint::Fixed(Point3::new(0.0, 0.0, 0.0)),
                b: Endpoint::User { k: 0 },
                observed: -70.0,
                alpha: -22.0,
                beta: -32.0,
            },
            weight: 0.5,
            segment: Some(Segment::Los),
            log_variance_ratio: 0.0,
        }];
        let st = StateVector::new(vec![], vec![Point2::new(30.0, 40.0)]);
        let h = linearize(&blocks, &st, 0.5).dense_h();
        let eig = h.clone().symmetric_eigen();
        let (imax, _) = eig.eigenvalues.argmax();
        let (_, min) = eig.eigenvalues.argmin();
        assert!(min.abs() < 1e-12 * eig.eigenvalues.amax());
        let v = eig.eigenvectors.column(imax);
        assert!((v[0].abs() - 0.6).abs() < 1e-9 && (v[1].abs() - 0.8).abs() < 1e-9);
    }

    #[test]
    fn sparse_solve_matches_dense() {
        let p = problem(
            12,
            20,
            &users(),
            &default_params(),
            OdometryNoise {
                sigma_gps: 2.0,
                sigma_vel: 0.4,
                dt: 1.0,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for lambda in [0.0, 1e-3, 1.0] {
            let st = random_state(&mut rng, &p.truth, 10.0);
            let ne = linearize(&p.blocks, &st, 0.5);
            let mut h = ne.dense_h();
            for i in 0..h.nrows() {
                h[(i, i)] += lambda;
            }
            let dense = h.cholesky().unwrap().solve(&(-&ne.b));
            let sparse = ne.solve(lambda).unwrap();
            assert!((dense - sparse).amax() < 1e-9);
        }
    }

    #[test]
    fn normal_matrix_is_positive_definite_with_gps() {
        let p = problem(14, 10, &users(), &default_params(), quiet_odometry());
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let st = random_state(&mut rng, &p.truth, 50.0);
            let h = linearize(&p.blocks, &st, 0.5).dense_h();
            assert!(h.symmetric_eigen().eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn gauss_newton_descends_and_recovers_noiseless_truth() {
        let p = problem(16, 30, &users(), &noiseless(), quiet_odometry());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let init = random_state(&mut rng, &p.truth, 15.0);
        let cfg = SolverConfig {
            step_tol: 1e-9,
            max_iters: 200,
            ..SolverConfig::default()
        };
        let sol = solve_gauss_newton(&p.blocks, &init, &cfg).unwrap();
        assert!(sol.loss <= sol.initial_loss);
        let accepted: Vec<f64> = sol
            .trace
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.loss)
            .collect();
        assert!(accepted.windows(2).all(|w| w[1] < w[0]));
        assert!(sol.state.max_displacement(&p.truth) < 10.0 * cfg.step_tol.max(1e-6));
    }

    #[test]
    fn solves_without_uav() {
        let p = problem(18, 3, &users(), &noiseless(), quiet_odometry());
        let ms = p.ms.without_uav();
        let labels = ClassificationState::from_labels(ms.true_labels().collect());
        let blocks = build_graph(
            &ms,
            &labels,
            &default_params(),
            &quiet_odometry(),
            &p.map,
            GraphOptions::default(),
        )
        .unwrap();
        assert_eq!(blocks.len(), 2 * 6);
        let init = StateVector::new(
            vec![],
            users().iter().map(|u| u + Point2::new(8.0, -6.0)).collect(),
        );
        let sol = solve_gauss_newton(&blocks, &init, &SolverConfig::default()).unwrap();
        for (a, b) in sol.state.users.iter().zip(&users()) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn translation_covariance() {
        let users = users();
        let t = Point2::new(37.0, -21.0);
        let base = problem(
            19,
            15,
            &users,
            &default_params(),
            OdometryNoise {
                sigma_gps: 2.0,
                sigma_vel: 0.4,
                dt: 1.0,
            },
        );
        let shift = |e: Endpoint| match e {
            Endpoint::Fixed(p) => Endpoint::Fixed(p + Point3::new(t.x, t.y, 0.0)),
            e => e,
        };
        let moved: Vec<ResidualBlock> = base
            .blocks
            .iter()
            .map(|b| {
                let residual = match b.residual {
                    Residual::Gps { n, observed } => Residual::Gps {
                        n,
                        observed: observed + t,
                    },
                    Residual::Gain {
                        a,
                        b,
                        observed,
                        alpha,
                        beta,
                    } => Residual::Gain {
                        a: shift(a),
                        b: shift(b),
                        observed,
                        alpha,
                        beta,
                    },
                    Residual::Toa {
                        a,
                        b,
                        observed,
                        bias,
                    } => Residual::Toa {
                        a: shift(a),
                        b: shift(b),
                        observed,
                        bias,
                    },
                    r => r,
                };
                ResidualBlock { residual, ..*b }
            })
            .collect();
        let cfg = SolverConfig {
            step_tol: 1e-10,
            max_iters: 100,
            ..SolverConfig::default()
        };
        let a = solve_gauss_newton(&base.blocks, &base.truth, &cfg).unwrap();
        let init = StateVector::new(
            base.truth.uav.iter().map(|p| p + t).collect(),
            base.truth.users.iter().map(|p| p + t).collect(),
        );
        let b = solve_gauss_newton(&moved, &init, &cfg).unwrap();
        for (p, q) in a
            .state
            .uav
            .iter()
            .chain(&a.state.users)
            .zip(b.state.uav.iter().chain(&b.state.users))
        {
            assert!((p + t - q).norm() < 1e-6);
        }
    }

    #[test]
    fn sparse_solution_is_independent_of_block_order() {
        let p = problem(
            20,
            10,
            &users(),
            &default_params(),
            OdometryNoise {
                sigma_gps: 2.0,
                sigma_vel: 0.4,
                dt: 1.0,
            },
        );
        let st = random_state(&mut ChaCha8Rng::seed_from_u64(21), &p.truth, 5.0);
        let mut rev = p.blocks.clone();
        rev.reverse();
        let a = linearize(&p.blocks, &st, 0.5).solve(1e-4).unwrap();
        let b = linearize(&rev, &st, 0.5).solve(1e-4).unwrap();
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn trace_export() {
        let dir = tempfile::tempdir().unwrap();
        let trace = [IterationRecord {
            iteration: 1,
            loss: 2.5,
            step_norm: 0.1,
            lambda: 1e-4,
            accepted: true,
        }];
        let path = dir.path().join("trace.csv");
        write_trace(&path, &trace).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(
            text,
            "iteration,loss,step_norm,lambda,accepted\n1,2.5,0.1,0.0001,1\n"
        );
    }
}
