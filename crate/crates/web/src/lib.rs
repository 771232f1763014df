//! Browser bindings. Every entry point returns a JSON string that the static
//! page in `www/` draws on a canvas.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::Serialize;
use wasm_bindgen::prelude::*;

use uavloc::geo::{elevation_angle, los_probability, LosPredictorParams, Rect, UrbanMap};
use uavloc::harness::{run_trial_detailed, PlannerMode, Scenario};
use uavloc::{Point2, Point3};

#[derive(Serialize)]
struct Box2 {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl From<&Rect> for Box2 {
    fn from(r: &Rect) -> Self {
        Box2 {
            x_min: r.x_min,
            x_max: r.x_max,
            y_min: r.y_min,
            y_max: r.y_max,
        }
    }
}

#[derive(Serialize)]
struct BuildingView {
    footprint: Box2,
    height: f64,
}

#[derive(Serialize)]
struct MapView {
    area: Box2,
    buildings: Vec<BuildingView>,
    bs_sites: Vec<[f64; 3]>,
}

impl From<&UrbanMap> for MapView {
    fn from(m: &UrbanMap) -> Self {
        MapView {
            area: (&m.area).into(),
            buildings: m
                .buildings
                .iter()
                .map(|b| BuildingView {
                    footprint: (&b.footprint).into(),
                    height: b.height,
                })
                .collect(),
            bs_sites: m.bs_sites.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

#[derive(Serialize)]
struct LosField {
    map: MapView,
    uav: [f64; 3],
    cell: f64,
    nx: usize,
    ny: usize,
    /// Row-major from the south-west cell: 1 when the cell centre sees the UAV.
    los: Vec<u8>,
}

fn scenario_with_buildings(n_buildings: u32) -> Scenario {
    let mut sc = Scenario::default();
    sc.map.city.n_buildings = n_buildings as usize;
    sc
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("views serialize")
}

/// City for `seed` and which ground cells see a UAV at `(x, y, altitude)`.
pub fn city_los_json(
    seed: u32,
    n_buildings: u32,
    x: f64,
    y: f64,
    altitude: f64,
    cell: f64,
) -> Result<String, String> {
    if !(cell >= 1.0) {
        return Err(format!("cell size {cell} must be at least 1 m"));
    }
    let sc = scenario_with_buildings(n_buildings);
    let map = sc.build_map(u64::from(seed)).map_err(|e| e.to_string())?;
    let uav = Point3::new(x, y, altitude);
    let nx = (map.area.width() / cell).ceil() as usize;
    let ny = (map.area.height() / cell).ceil() as usize;
    let los = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let p = Point3::new(
                map.area.x_min + (i as f64 + 0.5) * cell,
                map.area.y_min + (j as f64 + 0.5) * cell,
                0.0,
            );
            u8::from(!map.inside_building(&p.xy()) && map.is_los(&uav, &p))
        })
        .collect();
    Ok(to_json(&LosField {
        map: (&map).into(),
        uav: [x, y, altitude],
        cell,
        nx,
        ny,
        los,
    }))
}

#[derive(Serialize)]
struct CurvePoint {
    distance: f64,
    elevation_deg: f64,
    probability: f64,
}

/// LoS probability against horizontal distance for the elevation model.
pub fn los_curve_json(
    a: f64,
    b: f64,
    altitude: f64,
    max_distance: f64,
    samples: u32,
) -> Result<String, String> {
    if samples < 2 || !(max_distance > 0.0) || !(altitude > 0.0) {
        return Err("need samples >= 2, max_distance > 0 and altitude > 0".into());
    }
    let params = LosPredictorParams { a, b };
    let uav = Point3::new(0.0, 0.0, altitude);
    let points: Vec<CurvePoint> = (0..samples)
        .map(|i| {
            let r = max_distance * f64::from(i) / f64::from(samples - 1);
            let user = Point2::new(r, 0.0);
            CurvePoint {
                distance: r,
                elevation_deg: elevation_angle(&uav, &user).to_degrees(),
                probability: los_probability(&params, &uav, &user),
            }
        })
        .collect();
    Ok(to_json(&points))
}

#[derive(Serialize)]
struct MissionView {
    map: MapView,
    users_true: Vec<[f64; 2]>,
    users_estimate: Vec<[f64; 2]>,
    trajectory: Vec<[f64; 2]>,
    uav_estimate: Vec<[f64; 2]>,
    user_errors: Vec<f64>,
    uav_rmse: Option<f64>,
    classification_error: f64,
    crb_trace: Vec<f64>,
}

/// Fly one mission and return truth, estimates and the planner's CRB trace.
pub fn plan_mission_json(
    seed: u32,
    n_buildings: u32,
    users: u32,
    budget: f64,
    epochs: u32,
    optimized: bool,
) -> Result<String, String> {
    let mut sc = scenario_with_buildings(n_buildings);
    sc.users.count = users as usize;
    sc.mission.budget = budget;
    sc.mission.epochs = epochs as usize;
    sc.planner = if optimized {
        PlannerMode::Optimized
    } else {
        PlannerMode::RandomRectangle
    };
    let t = run_trial_detailed(&sc, u64::from(seed)).map_err(|e| e.to_string())?;
    let xy = |p: &Point2| [p.x, p.y];
    Ok(to_json(&MissionView {
        map: (&t.map).into(),
        users_true: t.users.iter().map(xy).collect(),
        users_estimate: t.estimate.state.users.iter().map(xy).collect(),
        trajectory: t.trajectory.iter().map(|p| [p.x, p.y]).collect(),
        uav_estimate: t.estimate.state.uav.iter().map(xy).collect(),
        user_errors: t.result.user_errors.clone(),
        uav_rmse: t.result.uav_rmse,
        classification_error: t.result.classification_error,
        crb_trace: t
            .record
            .iter()
            .flat_map(|r| r.epochs.iter().filter_map(|e| e.crb_trace))
            .collect(),
    }))
}

#[wasm_bindgen]
pub fn city_los(
    seed: u32,
    n_buildings: u32,
    x: f64,
    y: f64,
    altitude: f64,
    cell: f64,
) -> Result<String, JsError> {
    city_los_json(seed, n_buildings, x, y, altitude, cell).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn los_curve(
    a: f64,
    b: f64,
    altitude: f64,
    max_distance: f64,
    samples: u32,
) -> Result<String, JsError> {
    los_curve_json(a, b, altitude, max_distance, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn plan_mission(
    seed: u32,
    n_buildings: u32,
    users: u32,
    budget: f64,
    epochs: u32,
    optimized: bool,
) -> Result<String, JsError> {
    plan_mission_json(seed, n_buildings, users, budget, epochs, optimized)
        .map_err(|e| JsError::new(&e))
}
