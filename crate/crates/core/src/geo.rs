//! Urban environment: rectangular-prism buildings, base-station sites, exact
//! line-of-sight queries and the elevation-angle LoS probability model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Point2, Point3, Result};

/// Axis-aligned rectangle in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let r = Rect {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Domain(format!("degenerate rectangle {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point2 {
        Point2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x_min >= self.x_min
            && other.x_max <= self.x_max
            && other.y_min >= self.y_min
            && other.y_max <= self.y_max
    }

    /// True when the two rectangles are closer than `gap` along both axes.
    pub fn overlaps(&self, other: &Rect, gap: f64) -> bool {
        self.x_min < other.x_max + gap
            && other.x_min < self.x_max + gap
            && self.y_min < other.y_max + gap
            && other.y_min < self.y_max + gap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Rect,
    pub height: f64,
}

impl Building {
    pub fn new(footprint: Rect, height: f64) -> Result<Self> {
        footprint.validate()?;
        if !(height > 0.0 && height.is_finite()) {
            return Err(Error::Domain(format!(
                "building height {height} must be > 0"
            )));
        }
        Ok(Building { footprint, height })
    }

    /// Whether the segment `p + t (q - p)` for `t` in the open interval (0, 1)
    /// passes through the prism volume with positive length.
    pub fn blocks(&self, p: &Point3, q: &Point3) -> bool {
        let lo = [self.footprint.x_min, self.footprint.y_min, 0.0];
        let hi = [self.footprint.x_max, self.footprint.y_max, self.height];
        let d = q - p;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for axis in 0..3 {
            let o = p[axis];
            let v = d[axis];
            if v.abs() < 1e-15 {
                if o < lo[axis] || o > hi[axis] {
                    return false;
                }
                continue;
            }
            let mut ta = (lo[axis] - o) / v;
            let mut tb = (hi[axis] - o) / v;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 >= t1 {
                return false;
            }
        }
        t1 - t0 > 1e-12
    }
}

/// Buildings plus base-station sites inside a bounding area.
#[derive(Clone, Debug, PartialEq)]
pub struct UrbanMap {
    pub area: Rect,
    pub buildings: Vec<Building>,
    pub bs_sites: Vec<Point3>,
}

impl UrbanMap {
    pub fn new(area: Rect, buildings: Vec<Building>, bs_sites: Vec<Point3>) -> Result<Self> {
        area.validate()?;
        for b in &buildings {
            if !area.contains_rect(&b.footprint) {
                return Err(Error::Domain(format!("building {b:?} outside area")));
            }
        }
        for s in &bs_sites {
            if !area.contains(&s.xy()) {
                return Err(Error::Domain(format!("BS site {s:?} outside area")));
            }
        }
        Ok(UrbanMap {
            area,
            buildings,
            bs_sites,
        })
    }

    pub fn empty(area: Rect) -> Self {
        UrbanMap {
            area,
            buildings: Vec::new(),
            bs_sites: Vec::new(),
        }
    }

    /// Install BS sites, dropping any building whose footprint contains a site.
    pub fn with_bs_sites(mut self, sites: Vec<Point3>) -> Result<Self> {
        for s in &sites {
            if !self.area.contains(&s.xy()) {
                return Err(Error::Domain(format!("BS site {s:?} outside area")));
            }
        }
        self.buildings
            .retain(|b| !sites.iter().any(|s| b.footprint.contains(&s.xy())));
        self.bs_sites = sites;
        Ok(self)
    }

    /// Exact segment-versus-prism line-of-sight test. Symmetric in `p`, `q`.
    pub fn is_los(&self, p: &Point3, q: &Point3) -> bool {
        !self.buildings.iter().any(|b| b.blocks(p, q))
    }

    pub fn inside_building(&self, p: &Point2) -> bool {
        self.buildings.iter().any(|b| b.footprint.contains(p))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&MapFile::from(self)).expect("map serialization is infallible")
    }

    pub fn from_toml_str(s: &str) -> std::result::Result<Self, String> {
        let file: MapFile = toml::from_str(s).map_err(|e| e.to_string())?;
        file.into_map().map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|m| Error::parse(path, m))
    }
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    area: Rect,
    #[serde(default)]
    bs_sites: Vec<[f64; 3]>,
    #[serde(default)]
    buildings: Vec<BuildingRecord>,
}

#[derive(Serialize, Deserialize)]
struct BuildingRecord {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    height: f64,
}

impl From<&UrbanMap> for MapFile {
    fn from(m: &UrbanMap) -> Self {
        MapFile {
            area: m.area,
            bs_sites: m.bs_sites.iter().map(|s| [s.x, s.y, s.z]).collect(),
            buildings: m
                .buildings
                .iter()
                .map(|b| BuildingRecord {
                    x_min: b.footprint.x_min,
                    x_max: b.footprint.x_max,
                    y_min: b.footprint.y_min,
                    y_max: b.footprint.y_max,
                    height: b.height,
                })
                .collect(),
        }
    }
}

impl MapFile {
    fn into_map(self) -> Result<UrbanMap> {
        let buildings = self
            .buildings
            .into_iter()
            .map(|b| Building::new(Rect::new(b.x_min, b.x_max, b.y_min, b.y_max)?, b.height))
            .collect::<Result<Vec<_>>>()?;
        let sites = self
            .bs_sites
            .into_iter()
            .map(|s| Point3::new(s[0], s[1], s[2]))
            .collect();
        UrbanMap::new(self.area, buildings, sites)
    }
}

/// Parameters of the random city generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityConfig {
    pub area: Rect,
    pub n_buildings: usize,
    /// Rayleigh scale of building heights, meters.
    pub height_scale: f64,
    /// Heights are clamped into this range, meters.
    pub height_range: (f64, f64),
    /// Side lengths are drawn uniformly from this range, meters.
    pub footprint_range: (f64, f64),
    /// Minimum street width between buildings, meters.
    pub min_gap: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        CityConfig {
            area: Rect {
                x_min: 0.0,
                x_max: 600.0,
                y_min: 0.0,
                y_max: 800.0,
            },
            n_buildings: 40,
            height_scale: 15.0,
            height_range: (5.0, 40.0),
            footprint_range: (25.0, 60.0),
            min_gap: 10.0,
        }
    }
}

/// Place non-overlapping buildings by bounded rejection sampling
/// (at most `100 * n_buildings` attempts). Heights are Rayleigh distributed
/// and clamped to `height_range`. Deterministic for a fixed seed.
pub fn generate_city(seed: u64, cfg: &CityConfig) -> Result<UrbanMap> {
    cfg.area.validate()?;
    let (h_min, h_max) = cfg.height_range;
    if !(0.0 < h_min && h_min < h_max) {
        return Err(Error::InvalidConfig(format!(
            "height range {:?} must satisfy 0 < min < max",
            cfg.height_range
        )));
    }
    let (s_min, s_max) = cfg.footprint_range;
    if !(0.0 < s_min && s_min <= s_max) || !(cfg.height_scale > 0.0) {
        return Err(Error::InvalidConfig(
            "footprint range and height scale must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buildings: Vec<Building> = Vec::with_capacity(cfg.n_buildings);
    let max_attempts = 100 * cfg.n_buildings;
    let mut attempts = 0;
    let area = cfg.area;
    while buildings.len() < cfg.n_buildings {
        if attempts >= max_attempts {
            return Err(Error::Placement {
                placed: buildings.len(),
                requested: cfg.n_buildings,
                attempts,
            });
        }
        attempts += 1;
        let w = rng.random_range(s_min..=s_max).min(area.width());
        let h = rng.random_range(s_min..=s_max).min(area.height());
        let x0 = area.x_min + rng.random::<f64>() * (area.width() - w);
        let y0 = area.y_min + rng.random::<f64>() * (area.height() - h);
        let footprint = Rect {
            x_min: x0,
            x_max: x0 + w,
            y_min: y0,
            y_max: y0 + h,
        };
        // Draw the height even on rejection so the stream is layout-independent.
        let u: f64 = rng.random();
        let height = (cfg.height_scale * (-2.0 * (1.0 - u).ln()).sqrt()).clamp(h_min, h_max);
        if buildings
            .iter()
            .any(|b| b.footprint.overlaps(&footprint, cfg.min_gap))
        {
            continue;
        }
        buildings.push(Building { footprint, height });
    }
    UrbanMap::new(area, buildings, Vec::new())
}

/// Coefficients of the elevation-angle sigmoid `1 / (1 + exp(a ψ + b))`.
///
/// With the formula as written a negative `a` makes LoS more likely at high
/// elevation, which is the convention used by [`LosPredictorParams::default`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosPredictorParams {
    pub a: f64,
    pub b: f64,
}

impl Default for LosPredictorParams {
    fn default() -> Self {
        LosPredictorParams {
            a: -9.6,
            b: 0.28 * 9.6,
        }
    }
}

/// Elevation angle of `uav` seen from ground point `user`, radians.
/// Directly overhead maps to π/2.
pub fn elevation_angle(uav: &Point3, user: &Point2) -> f64 {
    let r = (uav.xy() - user).norm();
    if r == 0.0 {
        if uav.z >= 0.0 {
            std::f64::consts::FRAC_PI_2
        } else {
            -std::f64::consts::FRAC_PI_2
        }
    } else {
        (uav.z / r).atan()
    }
}

pub fn los_probability(params: &LosPredictorParams, uav: &Point3, user: &Point2) -> f64 {
    let psi = elevation_angle(uav, user);
    1.0 / (1.0 + (params.a * psi + params.b).exp())
}
