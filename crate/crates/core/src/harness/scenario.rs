use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::geo::{generate_city, CityConfig, LosPredictorParams, Rect, UrbanMap};
use crate::radio::{ChannelParams, OdometryNoise, SegmentParams};
use crate::slam::SolverConfig;
use crate::{Error, Point2, Point3, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerMode {
    #[default]
    Optimized,
    RandomRectangle,
    StaticBsOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// RSS and ToA.
    #[default]
    Full,
    RssOnly,
}

/// Channel segment with variances as configured; see [`SegmentConfig::params`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub alpha: f64,
    pub beta: f64,
    /// dB^2
    pub gain_variance: f64,
    /// meters
    pub toa_bias: f64,
    /// m^2
    pub toa_variance: f64,
}

impl SegmentConfig {
    pub fn params(&self) -> SegmentParams {
        SegmentParams {
            alpha: self.alpha,
            beta: self.beta,
            sigma: self.gain_variance.sqrt(),
            mu_tau: self.toa_bias,
            sigma_tau: self.toa_variance.sqrt(),
        }
    }
}

/// True channel of the simulated world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub los: SegmentConfig,
    pub nlos: SegmentConfig,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            los: SegmentConfig {
                alpha: -22.0,
                beta: -32.0,
                gain_variance: 2.0,
                toa_bias: 0.0,
                toa_variance: 2.0,
            },
            nlos: SegmentConfig {
                alpha: -32.0,
                beta: -35.0,
                gain_variance: 5.0,
                toa_bias: 50.0,
                toa_variance: 40.0,
            },
        }
    }
}

impl ChannelConfig {
    pub fn params(&self) -> ChannelParams {
        ChannelParams {
            los: self.los.params(),
            nlos: self.nlos.params(),
            pi_los: 0.5,
        }
    }
}

/// Estimator starting point for the channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub los: SegmentConfig,
    pub nlos: SegmentConfig,
    pub los_fraction: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            los: SegmentConfig {
                alpha: -20.0,
                beta: -30.0,
                gain_variance: 4.0,
                toa_bias: 0.0,
                toa_variance: 1.0,
            },
            nlos: SegmentConfig {
                alpha: -30.0,
                beta: -40.0,
                gain_variance: 9.0,
                toa_bias: 20.0,
                toa_variance: 100.0,
            },
            los_fraction: 0.5,
        }
    }
}

impl PriorConfig {
    pub fn params(&self) -> ChannelParams {
        ChannelParams {
            los: self.los.params(),
            nlos: self.nlos.params(),
            pi_los: self.los_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    /// m^2 per axis
    pub gps_variance: f64,
    /// (m/s)^2 per axis
    pub velocity_variance: f64,
    /// seconds per epoch
    pub dt: f64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            gps_variance: 5.0,
            velocity_variance: 0.2,
            dt: 1.0,
        }
    }
}

impl OdometryConfig {
    pub fn noise(&self) -> OdometryNoise {
        OdometryNoise {
            sigma_gps: self.gps_variance.sqrt(),
            sigma_vel: self.velocity_variance.sqrt(),
            dt: self.dt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Load the map from this file instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// City seed; when absent every trial draws its own city from the trial seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub city: CityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsersConfig {
    /// Number of randomly placed users; ignored when `positions` is set.
    pub count: usize,
    /// Random users keep this distance from the area edge, meters.
    pub margin: f64,
    pub positions: Vec<[f64; 2]>,
}

impl Default for UsersConfig {
    fn default() -> Self {
        UsersConfig {
            count: 8,
            margin: 20.0,
            positions: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    /// Trajectory length, meters.
    pub budget: f64,
    /// Number of epochs N including the start.
    pub epochs: usize,
    pub altitude: f64,
    pub start: [f64; 2],
    pub end: [f64; 2],
    /// Action ring radius; defaults to budget / epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbor_step: Option<f64>,
    pub prior_fim_eps: f64,
    /// Rerun the estimator every this many epochs.
    pub replan_stride: usize,
    /// Outer iterations of the per-epoch estimator pass.
    pub light_outer_iters: usize,
    /// Solver iterations of the per-epoch estimator pass.
    pub light_solver_iters: usize,
}

impl Default for MissionConfig {
    fn default() -> Self {
        MissionConfig {
            budget: 1000.0,
            epochs: 100,
            altitude: 80.0,
            start: [300.0, 400.0],
            end: [300.0, 400.0],
            neighbor_step: None,
            prior_fim_eps: 1e-4,
            replan_stride: 1,
            light_outer_iters: 2,
            light_solver_iters: 10,
        }
    }
}

impl MissionConfig {
    pub fn d_max(&self) -> f64 {
        self.budget / self.epochs as f64
    }

    pub fn start_point(&self) -> Point3 {
        Point3::new(self.start[0], self.start[1], self.altitude)
    }

    pub fn end_point(&self) -> Point3 {
        Point3::new(self.end[0], self.end[1], self.altitude)
    }
}

/// Outer loop of the alternating estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    pub max_iters: usize,
    /// Stop when no position moves more than this, meters.
    pub tol: f64,
    /// Pitch of the user initialisation grid, meters.
    pub grid_step: f64,
    /// Scale of the robust ToA loss used for the first user guess, meters.
    pub cauchy_scale: f64,
    /// Re-check user positions on the grid every this many epochs.
    pub reinit_every: usize,
    /// Minimum responsibility mass before a segment's ToA parameters are learned.
    pub min_toa_mass: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            max_iters: 10,
            tol: 1e-3,
            grid_step: 10.0,
            cauchy_scale: 5.0,
            reinit_every: 10,
            min_toa_mass: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub planner: PlannerMode,
    pub estimator: EstimatorMode,
    pub seeds: Vec<u64>,
    pub bs_sites: Vec<[f64; 3]>,
    /// BS sites of the static-BS-only benchmark.
    pub static_bs_sites: Vec<[f64; 3]>,
    pub map: MapConfig,
    pub users: UsersConfig,
    pub channel: ChannelConfig,
    pub prior: PriorConfig,
    pub odometry: OdometryConfig,
    pub mission: MissionConfig,
    pub predictor: LosPredictorParams,
    pub outer: OuterConfig,
    pub em: EmConfig,
    pub solver: SolverConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            planner: PlannerMode::Optimized,
            estimator: EstimatorMode::Full,
            seeds: (1..=20).collect(),
            bs_sites: vec![
                [100.0, 150.0, 25.0],
                [520.0, 220.0, 25.0],
                [260.0, 700.0, 25.0],
            ],
            static_bs_sites: vec![
                [100.0, 150.0, 25.0],
                [520.0, 220.0, 25.0],
                [260.0, 700.0, 25.0],
                [520.0, 650.0, 25.0],
            ],
            map: MapConfig::default(),
            users: UsersConfig::default(),
            channel: ChannelConfig::default(),
            prior: PriorConfig::default(),
            odometry: OdometryConfig::default(),
            mission: MissionConfig::default(),
            predictor: LosPredictorParams::default(),
            outer: OuterConfig::default(),
            em: EmConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> std::result::Result<Self, String> {
        let sc: Scenario = toml::from_str(s).map_err(|e| e.to_string())?;
        sc.validate().map_err(|e| e.to_string())?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Load a scenario file; a relative map path is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sc = Scenario::from_toml_str(&text).map_err(|m| Error::parse(path, m))?;
        if let Some(f) = &sc.map.file {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    sc.map.file = Some(dir.join(f));
                }
            }
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.mission.budget > 0.0) {
            return bad(format!(
                "budget must be positive, got {}",
                self.mission.budget
            ));
        }
        if self.mission.epochs < 2 {
            return bad("a mission needs at least 2 epochs".into());
        }
        if self.mission.replan_stride == 0
            || self.mission.light_outer_iters == 0
            || self.mission.light_solver_iters == 0
        {
            return bad("replan_stride and light pass iterations must be at least 1".into());
        }
        if self.users.positions.is_empty() && self.users.count == 0 {
            return bad("scenario has no users".into());
        }
        if self.outer.max_iters == 0 || !(self.outer.tol > 0.0) || !(self.outer.grid_step > 0.0) {
            return bad(format!("bad outer loop config {:?}", self.outer));
        }
        if self.outer.reinit_every == 0 || !(self.outer.cauchy_scale > 0.0) {
            return bad("reinit_every and cauchy_scale must be positive".into());
        }
        self.channel.params().validate()?;
        let mut prior = self.prior.params();
        prior.pi_los = self.prior.los_fraction;
        prior.validate()?;
        self.odometry.noise().validate()?;
        self.em.validate()?;
        self.solver.validate()?;
        self.map.city.area.validate()?;
        Ok(())
    }

    pub fn area(&self) -> Rect {
        self.map.city.area
    }

    /// BS sites used under the scenario's planner mode.
    pub fn active_bs_sites(&self) -> Vec<Point3> {
        let sites = match self.planner {
            PlannerMode::StaticBsOnly => &self.static_bs_sites,
            _ => &self.bs_sites,
        };
        sites
            .iter()
            .map(|s| Point3::new(s[0], s[1], s[2]))
            .collect()
    }

    /// World map of a trial.
    pub fn build_map(&self, trial_seed: u64) -> Result<UrbanMap> {
        let base = match &self.map.file {
            Some(path) => UrbanMap::load(path)?,
            None => generate_city(self.map.seed.unwrap_or(trial_seed), &self.map.city)?,
        };
        base.with_bs_sites(self.active_bs_sites())
    }

    /// Ground truth user positions; random users avoid buildings.
    pub fn place_users<R: Rng + ?Sized>(&self, map: &UrbanMap, rng: &mut R) -> Result<Vec<Point2>> {
        if !self.users.positions.is_empty() {
            return Ok(self
                .users
                .positions
                .iter()
                .map(|p| Point2::new(p[0], p[1]))
                .collect());
        }
        let a = map.area;
        let m = self.users.margin;
        if a.width() <= 2.0 * m || a.height() <= 2.0 * m {
            return Err(Error::InvalidConfig(format!(
                "user margin {m} m leaves no room"
            )));
        }
        let mut users = Vec::with_capacity(self.users.count);
        let mut attempts = 0;
        while users.len() < self.users.count {
            attempts += 1;
            if attempts > 10_000 * self.users.count {
                return Err(Error::Placement {
                    placed: users.len(),
                    requested: self.users.count,
                    attempts,
                });
            }
            let p = Point2::new(
                rng.random_range(a.x_min + m..a.x_max - m),
                rng.random_range(a.y_min + m..a.y_max - m),
            );
            if !map.inside_building(&p) {
                users.push(p);
            }
        }
        Ok(users)
    }
}
