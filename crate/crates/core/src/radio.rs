//! Radio and odometry measurement models.
//!
//! Channel gain follows a log-distance law with Gaussian shadowing per link
//! segment; ToA is handled throughout as a range in meters (`c * tau`), so the
//! speed of light never appears past [`range_from_seconds`].

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geo::UrbanMap;
use crate::{lift, Error, Point2, Point3, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn range_from_seconds(tau: f64) -> f64 {
    tau * SPEED_OF_LIGHT
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Los,
    Nlos,
}

impl Segment {
    pub const ALL: [Segment; 2] = [Segment::Los, Segment::Nlos];

    pub fn from_los(los: bool) -> Self {
        if los {
            Segment::Los
        } else {
            Segment::Nlos
        }
    }
}

/// Per-segment propagation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// Path-loss slope on log10 distance.
    pub alpha: f64,
    /// Gain at 1 m, dB.
    pub beta: f64,
    /// Shadowing standard deviation, dB.
    pub sigma: f64,
    /// ToA bias as range, meters.
    pub mu_tau: f64,
    /// ToA standard deviation as range, meters.
    pub sigma_tau: f64,
}

impl SegmentParams {
    pub fn mean_gain(&self, distance: f64) -> f64 {
        self.beta + self.alpha * distance.log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub los: SegmentParams,
    pub nlos: SegmentParams,
    /// Mixture prior of the LoS segment; NLoS gets `1 - pi_los`.
    pub pi_los: f64,
}

impl ChannelParams {
    pub fn segment(&self, s: Segment) -> &SegmentParams {
        match s {
            Segment::Los => &self.los,
            Segment::Nlos => &self.nlos,
        }
    }

    pub fn segment_mut(&mut self, s: Segment) -> &mut SegmentParams {
        match s {
            Segment::Los => &mut self.los,
            Segment::Nlos => &mut self.nlos,
        }
    }

    pub fn prior(&self, s: Segment) -> f64 {
        match s {
            Segment::Los => self.pi_los,
            Segment::Nlos => 1.0 - self.pi_los,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in Segment::ALL {
            let p = self.segment(s);
            if !(p.sigma > 0.0 && p.sigma_tau > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{s:?} standard deviations must be > 0"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.pi_los) {
            return Err(Error::InvalidConfig(format!(
                "pi_los = {} outside [0, 1]",
                self.pi_los
            )));
        }
        Ok(())
    }
}

fn check_distance(distance: f64) -> Result<()> {
    if distance > 0.0 && distance.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("distance {distance} must be > 0")))
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

pub fn sample_gain<R: Rng + ?Sized>(
    params: &ChannelParams,
    distance: f64,
    is_los: bool,
    rng: &mut R,
) -> Result<f64> {
    check_distance(distance)?;
    let p = params.segment(Segment::from_los(is_los));
    Ok(p.mean_gain(distance) + normal(rng, p.sigma))
}

pub fn sample_toa_range<R: Rng + ?Sized>(
    params: &ChannelParams,
    distance: f64,
    is_los: bool,
    rng: &mut R,
) -> Result<f64> {
    check_distance(distance)?;
    let p = params.segment(Segment::from_los(is_los));
    Ok(distance + p.mu_tau + normal(rng, p.sigma_tau))
}

fn gaussian_logpdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn gain_loglik(
    params: &ChannelParams,
    gain: f64,
    distance: f64,
    segment: Segment,
) -> Result<f64> {
    check_distance(distance)?;
    let p = params.segment(segment);
    Ok(gaussian_logpdf(gain, p.mean_gain(distance), p.sigma))
}

pub fn toa_loglik(
    params: &ChannelParams,
    toa_range: f64,
    distance: f64,
    segment: Segment,
) -> Result<f64> {
    check_distance(distance)?;
    let p = params.segment(segment);
    Ok(gaussian_logpdf(toa_range, distance + p.mu_tau, p.sigma_tau))
}

/// GPS and IMU noise model for the fixed-altitude UAV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoise {
    pub sigma_gps: f64,
    pub sigma_vel: f64,
    /// Seconds per time step.
    pub dt: f64,
}

impl OdometryNoise {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_gps > 0.0 && self.sigma_vel > 0.0 && self.dt > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "odometry noise {self:?} must be positive"
            )))
        }
    }
}

/// GPS fix and, from the second step on, the IMU velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometrySample {
    pub gps: Point2,
    pub velocity: Option<Point2>,
}

/// One RSS + ToA pair drawn under a single link state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkMeasurement {
    pub gain: f64,
    pub toa_range: f64,
    /// Simulation ground truth, never read by the estimators.
    pub true_los: bool,
}

pub fn sample_odometry_step<R: Rng + ?Sized>(
    noise: &OdometryNoise,
    previous: Option<&Point3>,
    current: &Point3,
    rng: &mut R,
) -> OdometrySample {
    let gps =
        current.xy() + Point2::new(normal(rng, noise.sigma_gps), normal(rng, noise.sigma_gps));
    let velocity = previous.map(|prev| {
        (current.xy() - prev.xy()) / noise.dt
            + Point2::new(normal(rng, noise.sigma_vel), normal(rng, noise.sigma_vel))
    });
    OdometrySample { gps, velocity }
}

pub fn sample_odometry<R: Rng + ?Sized>(
    noise: &OdometryNoise,
    trajectory: &[Point3],
    rng: &mut R,
) -> Result<Vec<OdometrySample>> {
    if trajectory.len() < 2 {
        return Err(Error::Domain(
            "odometry needs at least two positions".into(),
        ));
    }
    Ok(trajectory
        .iter()
        .enumerate()
        .map(|(n, x)| sample_odometry_step(noise, n.checked_sub(1).map(|p| &trajectory[p]), x, rng))
        .collect())
}

/// Draw gain and ToA for the link `a`-`b` under the true LoS state of `map`.
pub fn sample_link<R: Rng + ?Sized>(
    map: &UrbanMap,
    params: &ChannelParams,
    a: &Point3,
    b: &Point3,
    rng: &mut R,
) -> Result<LinkMeasurement> {
    let distance = (a - b).norm();
    let los = map.is_los(a, b);
    Ok(LinkMeasurement {
        gain: sample_gain(params, distance, los, rng)?,
        toa_range: sample_toa_range(params, distance, los, rng)?,
        true_los: los,
    })
}

/// Everything the UAV has at hand: odometry, UAV-user, BS-UAV and BS-user links.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    /// Known flight altitude per epoch, meters.
    pub altitude: Vec<f64>,
    pub odometry: Vec<OdometrySample>,
    /// `uav_ue[n][k]`
    pub uav_ue: Vec<Vec<LinkMeasurement>>,
    /// `bs_uav[n][m]`
    pub bs_uav: Vec<Vec<LinkMeasurement>>,
    /// `bs_ue[m][k]`
    pub bs_ue: Vec<Vec<LinkMeasurement>>,
    pub n_users: usize,
    pub n_bs: usize,
}

impl MeasurementSet {
    pub fn new(n_users: usize, n_bs: usize) -> Self {
        MeasurementSet {
            altitude: Vec::new(),
            odometry: Vec::new(),
            uav_ue: Vec::new(),
            bs_uav: Vec::new(),
            bs_ue: Vec::new(),
            n_users,
            n_bs,
        }
    }

    pub fn n_epochs(&self) -> usize {
        self.odometry.len()
    }

    pub fn n_links(&self) -> usize {
        let n = self.n_epochs();
        n * self.n_users + n * self.n_bs + self.bs_ue.len() * self.n_users
    }

    /// Measurements taken by the BSs from the ground users.
    pub fn collect_bs_ue<R: Rng + ?Sized>(
        &mut self,
        map: &UrbanMap,
        params: &ChannelParams,
        users: &[Point2],
        rng: &mut R,
    ) -> Result<()> {
        self.bs_ue = map
            .bs_sites
            .iter()
            .map(|b| {
                users
                    .iter()
                    .map(|u| sample_link(map, params, b, &lift(u, 0.0), rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Append one epoch: odometry at `position`, UAV-user and BS-UAV links.
    #[allow(clippy::too_many_arguments)]
    pub fn collect_epoch<R: Rng + ?Sized>(
        &mut self,
        map: &UrbanMap,
        params: &ChannelParams,
        noise: &OdometryNoise,
        previous: Option<&Point3>,
        position: &Point3,
        users: &[Point2],
        rng: &mut R,
    ) -> Result<()> {
        let odo = sample_odometry_step(noise, previous, position, rng);
        let ue = users
            .iter()
            .map(|u| sample_link(map, params, position, &lift(u, 0.0), rng))
            .collect::<Result<Vec<_>>>()?;
        let bs = map
            .bs_sites
            .iter()
            .map(|b| sample_link(map, params, b, position, rng))
            .collect::<Result<Vec<_>>>()?;
        self.altitude.push(position.z);
        self.odometry.push(odo);
        self.uav_ue.push(ue);
        self.bs_uav.push(bs);
        Ok(())
    }

    pub fn true_labels(&self) -> impl Iterator<Item = bool> + '_ {
        self.links().map(|(_, l)| l.true_los)
    }

    /// All link measurements in canonical order: uav_ue (n-major), bs_uav
    /// (n-major), bs_ue (m-major).
    pub fn links(&self) -> impl Iterator<Item = (LinkId, &LinkMeasurement)> + '_ {
        let a = self.uav_ue.iter().enumerate().flat_map(|(n, row)| {
            row.iter()
                .enumerate()
                .map(move |(k, l)| (LinkId::UavUe { n, k }, l))
        });
        let b = self.bs_uav.iter().enumerate().flat_map(|(n, row)| {
            row.iter()
                .enumerate()
                .map(move |(m, l)| (LinkId::BsUav { n, m }, l))
        });
        let c = self.bs_ue.iter().enumerate().flat_map(|(m, row)| {
            row.iter()
                .enumerate()
                .map(move |(k, l)| (LinkId::BsUe { m, k }, l))
        });
        a.chain(b).chain(c)
    }

    /// Drop every UAV-related measurement (static-BS-only benchmark).
    pub fn without_uav(&self) -> Self {
        MeasurementSet {
            altitude: Vec::new(),
            odometry: Vec::new(),
            uav_ue: Vec::new(),
            bs_uav: Vec::new(),
            bs_ue: self.bs_ue.clone(),
            n_users: self.n_users,
            n_bs: self.n_bs,
        }
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = format!("# users={} bs={}\n", self.n_users, self.n_bs);

        let path = dir.join("odometry.csv");
        let mut w = csv::Writer::from_writer(header.clone().into_bytes());
        for (n, (o, z)) in self.odometry.iter().zip(&self.altitude).enumerate() {
            w.serialize(OdometryRow {
                n,
                gps_x: o.gps.x,
                gps_y: o.gps.y,
                altitude: *z,
                vel_x: o.velocity.map(|v| v.x),
                vel_y: o.velocity.map(|v| v.y),
            })
            .map_err(|e| Error::parse(&path, e))?;
        }
        write_csv(&path, w)?;

        let links_path = dir.join("links.csv");
        let truth_path = dir.join("truth.csv");
        let mut links = csv::Writer::from_writer(header.clone().into_bytes());
        let mut truth = csv::Writer::from_writer(header.into_bytes());
        for (id, l) in self.links() {
            let (kind, n, m, k) = id.columns();
            links
                .serialize(LinkRow {
                    kind: kind.clone(),
                    n,
                    m,
                    k,
                    gain: l.gain,
                    toa_range: l.toa_range,
                })
                .map_err(|e| Error::parse(&links_path, e))?;
            truth
                .serialize(TruthRow {
                    kind,
                    n,
                    m,
                    k,
                    los: u8::from(l.true_los),
                })
                .map_err(|e| Error::parse(&truth_path, e))?;
        }
        write_csv(&links_path, links)?;
        write_csv(&truth_path, truth)
    }

    /// Loads a directory written by [`MeasurementSet::save_dir`]. The truth
    /// file is optional; without it every `true_los` flag is `false`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let odo_path = dir.join("odometry.csv");
        let (n_users, n_bs) = read_header(&odo_path)?;
        let mut set = MeasurementSet::new(n_users, n_bs);
        for row in read_rows::<OdometryRow>(&odo_path)? {
            if row.n != set.odometry.len() {
                return Err(Error::parse(&odo_path, "epochs out of order"));
            }
            let velocity = match (row.vel_x, row.vel_y) {
                (Some(x), Some(y)) => Some(Point2::new(x, y)),
                _ => None,
            };
            set.odometry.push(OdometrySample {
                gps: Point2::new(row.gps_x, row.gps_y),
                velocity,
            });
            set.altitude.push(row.altitude);
        }
        let n = set.odometry.len();
        let blank = LinkMeasurement {
            gain: f64::NAN,
            toa_range: f64::NAN,
            true_los: false,
        };
        set.uav_ue = vec![vec![blank; n_users]; n];
        set.bs_uav = vec![vec![blank; n_bs]; n];
        let links_path = dir.join("links.csv");
        let rows = read_rows::<LinkRow>(&links_path)?;
        let has_bs_ue = rows.iter().any(|r| r.kind == "bs_ue");
        if has_bs_ue {
            set.bs_ue = vec![vec![blank; n_users]; n_bs];
        }
        for r in rows {
            let slot = set
                .slot_mut(&r.kind, r.n, r.m, r.k)
                .ok_or_else(|| Error::parse(&links_path, format!("bad link row {r:?}")))?;
            slot.gain = r.gain;
            slot.toa_range = r.toa_range;
        }
        if set
            .links()
            .any(|(_, l)| !l.gain.is_finite() || !l.toa_range.is_finite())
        {
            return Err(Error::parse(
                &links_path,
                "missing or non-finite link measurements",
            ));
        }
        let truth_path = dir.join("truth.csv");
        if truth_path.exists() {
            for r in read_rows::<TruthRow>(&truth_path)? {
                let slot = set
                    .slot_mut(&r.kind, r.n, r.m, r.k)
                    .ok_or_else(|| Error::parse(&truth_path, format!("bad truth row {r:?}")))?;
                slot.true_los = r.los != 0;
            }
        }
        Ok(set)
    }

    fn slot_mut(
        &mut self,
        kind: &str,
        n: Option<usize>,
        m: Option<usize>,
        k: Option<usize>,
    ) -> Option<&mut LinkMeasurement> {
        match (kind, n, m, k) {
            ("uav_ue", Some(n), None, Some(k)) => self.uav_ue.get_mut(n)?.get_mut(k),
            ("bs_uav", Some(n), Some(m), None) => self.bs_uav.get_mut(n)?.get_mut(m),
            ("bs_ue", None, Some(m), Some(k)) => self.bs_ue.get_mut(m)?.get_mut(k),
            _ => None,
        }
    }
}

/// Generate a full mission's measurements along a known trajectory.
pub fn collect_mission<R: Rng + ?Sized>(
    map: &UrbanMap,
    params: &ChannelParams,
    noise: &OdometryNoise,
    trajectory: &[Point3],
    users: &[Point2],
    rng: &mut R,
) -> Result<MeasurementSet> {
    let mut set = MeasurementSet::new(users.len(), map.bs_sites.len());
    set.collect_bs_ue(map, params, users, rng)?;
    for (n, x) in trajectory.iter().enumerate() {
        let prev = n.checked_sub(1).map(|p| &trajectory[p]);
        set.collect_epoch(map, params, noise, prev, x, users, rng)?;
    }
    Ok(set)
}

/// Identifies one link measurement inside a [`MeasurementSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinkId {
    UavUe { n: usize, k: usize },
    BsUav { n: usize, m: usize },
    BsUe { m: usize, k: usize },
}

impl LinkId {
    fn columns(&self) -> (String, Option<usize>, Option<usize>, Option<usize>) {
        match *self {
            LinkId::UavUe { n, k } => ("uav_ue".into(), Some(n), None, Some(k)),
            LinkId::BsUav { n, m } => ("bs_uav".into(), Some(n), Some(m), None),
            LinkId::BsUe { m, k } => ("bs_ue".into(), None, Some(m), Some(k)),
        }
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkId::UavUe { n, k } => write!(f, "uav_ue[n={n}, k={k}]"),
            LinkId::BsUav { n, m } => write!(f, "bs_uav[n={n}, m={m}]"),
            LinkId::BsUe { m, k } => write!(f, "bs_ue[m={m}, k={k}]"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OdometryRow {
    n: usize,
    gps_x: f64,
    gps_y: f64,
    altitude: f64,
    vel_x: Option<f64>,
    vel_y: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkRow {
    kind: String,
    n: Option<usize>,
    m: Option<usize>,
    k: Option<usize>,
    gain: f64,
    toa_range: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    kind: String,
    n: Option<usize>,
    m: Option<usize>,
    k: Option<usize>,
    los: u8,
}

fn write_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    let mut users = None;
    let mut bs = None;
    for tok in first.trim_start_matches('#').split_whitespace() {
        match tok.split_once('=') {
            Some(("users", v)) => users = v.parse().ok(),
            Some(("bs", v)) => bs = v.parse().ok(),
            _ => {}
        }
    }
    users
        .zip(bs)
        .ok_or_else(|| Error::parse(path, "missing '# users=K bs=M' header"))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::parse(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Rect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ChannelParams {
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
        let mut p = params();
        for s in Segment::ALL {
            p.segment_mut(s).sigma = 0.0;
            p.segment_mut(s).sigma_tau = 0.0;
        }
        p
    }

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    }

    #[test]
    fn gain_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = noiseless();
        assert_eq!(sample_gain(&p, 1.0, true, &mut rng).unwrap(), -32.0);
        assert_eq!(sample_gain(&p, 100.0, true, &mut rng).unwrap(), -76.0);
        assert!(sample_gain(&p, 0.0, true, &mut rng).is_err());
        assert!(sample_gain(&p, -3.0, false, &mut rng).is_err());
    }

    #[test]
    fn gain_and_toa_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params();
        let n = 100_000;
        let d = 150.0;
        for los in [true, false] {
            let seg = p.segment(Segment::from_los(los));
            let g: Vec<f64> = (0..n)
                .map(|_| sample_gain(&p, d, los, &mut rng).unwrap())
                .collect();
            let (m, s) = mean_std(&g);
            let se = seg.sigma / (n as f64).sqrt();
            assert!((m - seg.mean_gain(d)).abs() < 3.0 * se, "gain mean {m}");
            assert!((s - seg.sigma).abs() < 5.0 * seg.sigma / (2.0 * n as f64).sqrt());

            let t: Vec<f64> = (0..n)
                .map(|_| sample_toa_range(&p, d, los, &mut rng).unwrap())
                .collect();
            let (m, s) = mean_std(&t);
            assert!((m - d - seg.mu_tau).abs() < 5.0 * seg.sigma_tau / (n as f64).sqrt());
            assert!((s - seg.sigma_tau).abs() < 0.05 * seg.sigma_tau);
        }
    }

    #[test]
    fn toa_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = noiseless();
        assert_eq!(sample_toa_range(&p, 123.4, true, &mut rng).unwrap(), 123.4);
        assert_eq!(sample_toa_range(&p, 200.0, false, &mut rng).unwrap(), 250.0);
        assert!(sample_toa_range(&p, 0.0, false, &mut rng).is_err());
    }

    #[test]
    fn noiseless_round_trip_inverts_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = noiseless();
        for d in [1.5, 20.0, 333.0] {
            let g = sample_gain(&p, d, true, &mut rng).unwrap();
            let back = 10f64.powf((g - p.los.beta) / p.los.alpha);
            assert!((back - d).abs() < 1e-9 * d);
            assert_eq!(sample_toa_range(&p, d, true, &mut rng).unwrap(), d);
        }
    }

    #[test]
    fn odometry_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero = OdometryNoise {
            sigma_gps: 0.0,
            sigma_vel: 0.0,
            dt: 2.0,
        };
        let traj: Vec<Point3> = (0..5)
            .map(|i| Point3::new(i as f64 * 3.0, 1.0, 80.0))
            .collect();
        let odo = sample_odometry(&zero, &traj, &mut rng).unwrap();
        assert!(odo[0].velocity.is_none());
        for (n, o) in odo.iter().enumerate() {
            assert_eq!(o.gps, traj[n].xy());
            if n > 0 {
                assert_eq!(o.velocity.unwrap(), Point2::new(1.5, 0.0));
            }
        }
        let still = vec![Point3::new(4.0, 4.0, 80.0); 4];
        let odo = sample_odometry(&zero, &still, &mut rng).unwrap();
        assert!(odo[1..].iter().all(|o| o.velocity == Some(Point2::zeros())));
        assert!(sample_odometry(&zero, &still[..1], &mut rng).is_err());
    }

    #[test]
    fn gps_variance_matches_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = OdometryNoise {
            sigma_gps: 5f64.sqrt(),
            sigma_vel: 0.2f64.sqrt(),
            dt: 1.0,
        };
        let x = Point3::new(10.0, 20.0, 80.0);
        let n = 100_000;
        let errs: Vec<f64> = (0..n)
            .map(|_| sample_odometry_step(&noise, None, &x, &mut rng).gps.x - x.x)
            .collect();
        let var = errs.iter().map(|e| e * e).sum::<f64>() / n as f64;
        assert!((var - 5.0).abs() < 0.5, "{var}");
    }

    fn open_map() -> UrbanMap {
        UrbanMap::empty(Rect::new(0.0, 500.0, 0.0, 500.0).unwrap())
            .with_bs_sites(vec![
                Point3::new(10.0, 10.0, 25.0),
                Point3::new(400.0, 30.0, 25.0),
                Point3::new(200.0, 450.0, 25.0),
            ])
            .unwrap()
    }

    #[test]
    fn mission_counts_and_empty_links() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = OdometryNoise {
            sigma_gps: 1.0,
            sigma_vel: 0.1,
            dt: 1.0,
        };
        let traj: Vec<Point3> = (0..50)
            .map(|i| Point3::new(100.0 + i as f64, 200.0, 80.0))
            .collect();
        let users: Vec<Point2> = (0..8)
            .map(|k| Point2::new(30.0 * k as f64 + 5.0, 50.0))
            .collect();
        let map = open_map();
        let set = collect_mission(&map, &params(), &noise, &traj, &users, &mut rng).unwrap();
        assert_eq!(set.uav_ue.iter().map(Vec::len).sum::<usize>(), 400);
        assert_eq!(set.bs_uav.iter().map(Vec::len).sum::<usize>(), 150);
        assert_eq!(set.bs_ue.iter().map(Vec::len).sum::<usize>(), 24);
        assert_eq!(set.n_links(), 574);
        assert!(set.true_labels().all(|l| l));

        let bare = UrbanMap::empty(map.area);
        let set = collect_mission(&bare, &params(), &noise, &traj, &[], &mut rng).unwrap();
        assert_eq!(set.n_links(), 0);
        assert_eq!(set.odometry.len(), 50);
    }

    #[test]
    fn shared_link_state_for_gain_and_toa() {
        // NLoS everywhere: a wall between the UAV corridor and the users
        let area = Rect::new(0.0, 500.0, 0.0, 500.0).unwrap();
        let wall =
            crate::geo::Building::new(Rect::new(0.0, 500.0, 100.0, 110.0).unwrap(), 400.0).unwrap();
        let map = UrbanMap::new(area, vec![wall], vec![]).unwrap();
        let p = noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let uav = Point3::new(250.0, 300.0, 80.0);
        let user = Point3::new(250.0, 20.0, 0.0);
        let l = sample_link(&map, &p, &uav, &user, &mut rng).unwrap();
        let d = (uav - user).norm();
        assert!(!l.true_los);
        assert_eq!(l.gain, p.nlos.mean_gain(d));
        assert_eq!(l.toa_range, d + 50.0);
    }

    fn quadrature(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        // composite Simpson
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn loglik_peak_one_sigma_and_normalisation() {
        let p = params();
        let d = 87.0;
        for s in Segment::ALL {
            let seg = p.segment(s);
            let peak = -(seg.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let mean = seg.mean_gain(d);
            assert!((gain_loglik(&p, mean, d, s).unwrap() - peak).abs() < 1e-12);
            assert!(
                (gain_loglik(&p, mean + seg.sigma, d, s).unwrap() - (peak - 0.5)).abs() < 1e-12
            );
            let mass = quadrature(
                |g| gain_loglik(&p, g, d, s).unwrap().exp(),
                mean - 12.0 * seg.sigma,
                mean + 12.0 * seg.sigma,
                4000,
            );
            assert!((mass - 1.0).abs() < 1e-9);

            let tpeak = -(seg.sigma_tau * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let tmean = d + seg.mu_tau;
            assert!((toa_loglik(&p, tmean, d, s).unwrap() - tpeak).abs() < 1e-12);
            assert!(
                (toa_loglik(&p, tmean - seg.sigma_tau, d, s).unwrap() - (tpeak - 0.5)).abs()
                    < 1e-12
            );
            let mass = quadrature(
                |t| toa_loglik(&p, t, d, s).unwrap().exp(),
                tmean - 12.0 * seg.sigma_tau,
                tmean + 12.0 * seg.sigma_tau,
                4000,
            );
            assert!((mass - 1.0).abs() < 1e-9);
        }
        assert!(gain_loglik(&p, -70.0, 0.0, Segment::Los).is_err());
        assert!(toa_loglik(&p, 10.0, -1.0, Segment::Nlos).is_err());
    }

    #[test]
    fn measurement_files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = OdometryNoise {
            sigma_gps: 1.0,
            sigma_vel: 0.1,
            dt: 1.0,
        };
        let traj: Vec<Point3> = (0..6)
            .map(|i| Point3::new(100.0 + 7.0 * i as f64, 200.0, 80.0))
            .collect();
        let users = vec![Point2::new(50.0, 60.0), Point2::new(300.0, 20.0)];
        let set = collect_mission(&open_map(), &params(), &noise, &traj, &users, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let back = MeasurementSet::load_dir(dir.path()).unwrap();
        assert_eq!(set, back);

        std::fs::remove_file(dir.path().join("truth.csv")).unwrap();
        let blind = MeasurementSet::load_dir(dir.path()).unwrap();
        assert!(blind.true_labels().all(|l| !l));
    }
}
