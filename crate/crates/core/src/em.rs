//! LoS/NLoS classification and channel learning by expectation-maximization.
//!
//! Positions are held fixed here; every link contributes its measured gain
//! and its log-distance at the current position estimates. Classification
//! uses gains only, ToA parameters are fitted afterwards from the final
//! responsibilities.

use serde::{Deserialize, Serialize};

use crate::radio::{ChannelParams, Segment};
use crate::{Error, Result};

/// One gain measurement with its log10 distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainObservation {
    pub gain: f64,
    pub log_distance: f64,
}

/// One ToA range with the geometric distance at the current estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToaObservation {
    pub toa_range: f64,
    pub distance: f64,
}

/// Normalisation of the variance, prior and bias estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Responsibility mass of the segment (the exact M-step maximiser).
    #[default]
    ResponsibilityMass,
    /// Total number of measurements.
    TotalCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the largest relative parameter change falls below this.
    pub tol: f64,
    /// Floor on learned shadowing std, dB.
    pub min_sigma: f64,
    /// Floor on learned ToA std, meters.
    pub min_sigma_tau: f64,
    /// A segment whose responsibility mass is below `responsibility_floor * n`
    /// is treated as empty.
    pub responsibility_floor: f64,
    pub denominator: Denominator,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            tol: 1e-8,
            min_sigma: 1e-3,
            min_sigma_tau: 1e-3,
            responsibility_floor: 1e-6,
            denominator: Denominator::ResponsibilityMass,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters >= 1
            && self.tol > 0.0
            && self.min_sigma > 0.0
            && self.min_sigma_tau > 0.0
            && self.responsibility_floor > 0.0
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad EM config {self:?}")))
        }
    }
}

/// Soft responsibilities and (after [`hard_classify`]) hard labels, one per
/// link in the canonical order of [`crate::radio::MeasurementSet::links`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassificationState {
    /// LoS responsibility; the NLoS one is `1 - omega`.
    pub omega: Vec<f64>,
    /// `true` = LoS. Empty until hard classification.
    pub labels: Vec<bool>,
}

impl ClassificationState {
    pub fn soft(omega: Vec<f64>) -> Self {
        ClassificationState {
            omega,
            labels: Vec::new(),
        }
    }

    pub fn from_labels(labels: Vec<bool>) -> Self {
        ClassificationState {
            omega: labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn responsibility(&self, i: usize, s: Segment) -> f64 {
        match s {
            Segment::Los => self.omega[i],
            Segment::Nlos => 1.0 - self.omega[i],
        }
    }
}

fn log_normal(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn segment_log_joint(params: &ChannelParams, s: Segment, o: &GainObservation) -> f64 {
    let p = params.segment(s);
    params.prior(s).ln() + log_normal(o.gain, p.beta + p.alpha * o.log_distance, p.sigma)
}

/// LoS posterior of every observation under `params`, in log space.
pub fn e_step(params: &ChannelParams, obs: &[GainObservation]) -> Vec<f64> {
    obs.iter()
        .map(|o| {
            let l = segment_log_joint(params, Segment::Los, o);
            let n = segment_log_joint(params, Segment::Nlos, o);
            if !l.is_finite() && !n.is_finite() {
                let dl = (o.gain - (params.los.beta + params.los.alpha * o.log_distance)).abs();
                let dn = (o.gain - (params.nlos.beta + params.nlos.alpha * o.log_distance)).abs();
                return if dl < dn { 1.0 } else { 0.0 };
            }
            let diff = n - l;
            if diff > 0.0 {
                let e = (-diff).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + diff.exp())
            }
        })
        .collect()
}

fn weight(omega: f64, s: Segment) -> f64 {
    match s {
        Segment::Los => omega,
        Segment::Nlos => 1.0 - omega,
    }
}

/// Closed-form maximiser of the EM surrogate over `(alpha, beta, sigma)` of
/// both segments and the prior, given responsibilities. ToA fields of
/// `previous` are carried through untouched.
pub fn m_step_gain(
    omega: &[f64],
    obs: &[GainObservation],
    previous: &ChannelParams,
    config: &EmConfig,
) -> Result<ChannelParams> {
    assert_eq!(omega.len(), obs.len());
    let n_total = obs.len() as f64;
    let mut out = *previous;
    let mut los_mass = 0.0;
    for s in Segment::ALL {
        let (mut s0, mut s1, mut t0) = (0.0, 0.0, 0.0);
        for (w, o) in omega.iter().zip(obs) {
            let w = weight(*w, s);
            s0 += w;
            s1 += w * o.log_distance;
            t0 += w * o.gain;
        }
        if s == Segment::Los {
            los_mass = s0;
        }
        if s0 <= config.responsibility_floor * n_total.max(1.0) {
            continue;
        }
        let phi_bar = s1 / s0;
        let g_bar = t0 / s0;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (w, o) in omega.iter().zip(obs) {
            let w = weight(*w, s);
            let dx = o.log_distance - phi_bar;
            sxx += w * dx * dx;
            sxy += w * dx * (o.gain - g_bar);
        }
        if sxx <= 1e-12 * s0 * (1.0 + phi_bar * phi_bar) {
            return Err(Error::DegenerateSegment(s));
        }
        let alpha = sxy / sxx;
        let beta = g_bar - alpha * phi_bar;
        let sse: f64 = omega
            .iter()
            .zip(obs)
            .map(|(w, o)| {
                let r = o.gain - beta - alpha * o.log_distance;
                weight(*w, s) * r * r
            })
            .sum();
        let denom = match config.denominator {
            Denominator::ResponsibilityMass => s0,
            Denominator::TotalCount => n_total,
        };
        let seg = out.segment_mut(s);
        seg.alpha = alpha;
        seg.beta = beta;
        seg.sigma = (sse / denom).sqrt().max(config.min_sigma);
    }
    out.pi_los = if n_total > 0.0 {
        los_mass / n_total
    } else {
        previous.pi_los
    };
    Ok(out)
}

/// Value of the Jensen lower bound
/// `sum_i sum_s Omega_is * log(p(g_i | s) pi_s / Omega_is)`.
pub fn surrogate_bound(params: &ChannelParams, omega: &[f64], obs: &[GainObservation]) -> f64 {
    let mut total = 0.0;
    for (w, o) in omega.iter().zip(obs) {
        for s in Segment::ALL {
            let r = weight(*w, s);
            if r <= 0.0 {
                continue;
            }
            total += r * (segment_log_joint(params, s, o) - r.ln());
        }
    }
    total
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub params: ChannelParams,
    pub state: ClassificationState,
    pub iterations: usize,
    pub converged: bool,
    /// Lower-bound values: the tight bound before each M-step followed by the
    /// bound right after it.
    pub bound_trace: Vec<f64>,
}

fn relative_change(a: &ChannelParams, b: &ChannelParams) -> f64 {
    let mut worst = ((a.pi_los - b.pi_los).abs()).max(0.0);
    for s in Segment::ALL {
        let (x, y) = (a.segment(s), b.segment(s));
        for (u, v) in [(x.alpha, y.alpha), (x.beta, y.beta), (x.sigma, y.sigma)] {
            worst = worst.max((u - v).abs() / u.abs().max(1.0));
        }
    }
    worst
}

/// Swap segment identities when the "LoS" line is weaker than the "NLoS" one
/// at the median log-distance of the data.
pub fn canonicalize(
    params: &mut ChannelParams,
    omega: &mut [f64],
    obs: &[GainObservation],
) -> bool {
    if obs.is_empty() {
        return false;
    }
    let mut phis: Vec<f64> = obs.iter().map(|o| o.log_distance).collect();
    let mid = phis.len() / 2;
    let (_, median, _) = phis.select_nth_unstable_by(mid, f64::total_cmp);
    let median = *median;
    let at = |p: &crate::radio::SegmentParams| p.beta + p.alpha * median;
    if at(&params.los) >= at(&params.nlos) {
        return false;
    }
    let (los, nlos) = (params.los, params.nlos);
    params.los.alpha = nlos.alpha;
    params.los.beta = nlos.beta;
    params.los.sigma = nlos.sigma;
    params.nlos.alpha = los.alpha;
    params.nlos.beta = los.beta;
    params.nlos.sigma = los.sigma;
    params.pi_los = 1.0 - params.pi_los;
    for w in omega.iter_mut() {
        *w = 1.0 - *w;
    }
    true
}

/// Alternate E- and M-steps until the parameters settle or `max_iters` is
/// reached. Under the responsibility-mass denominator the bound trace is
/// checked for monotonicity and a decrease is reported as an error.
pub fn run_em_gain(
    config: &EmConfig,
    init: &ChannelParams,
    obs: &[GainObservation],
) -> Result<EmOutcome> {
    config.validate()?;
    let mut params = *init;
    let mut trace = Vec::with_capacity(2 * config.max_iters);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iters {
        iterations = it;
        let omega = e_step(&params, obs);
        trace.push(surrogate_bound(&params, &omega, obs));
        let next = m_step_gain(&omega, obs, &params, config)?;
        trace.push(surrogate_bound(&next, &omega, obs));
        if config.denominator == Denominator::ResponsibilityMass {
            check_monotone(&trace)?;
        }
        let change = relative_change(&params, &next);
        params = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    // responsibilities consistent with the returned parameters
    let mut omega = e_step(&params, obs);
    canonicalize(&mut params, &mut omega, obs);
    Ok(EmOutcome {
        params,
        state: ClassificationState::soft(omega),
        iterations,
        converged,
        bound_trace: trace,
    })
}

fn check_monotone(trace: &[f64]) -> Result<()> {
    if let [.., prev, cur] = trace {
        let tol = 1e-9 * prev.abs().max(1.0);
        if *cur < *prev - tol {
            return Err(Error::EmNonMonotone {
                iteration: trace.len() / 2,
                previous: *prev,
                current: *cur,
            });
        }
    }
    Ok(())
}

/// Data-driven starting point: fit one line to all gains, send the
/// above-median residuals to LoS and the rest to NLoS, then fit each group.
pub fn initial_gain_params(
    obs: &[GainObservation],
    template: &ChannelParams,
    config: &EmConfig,
) -> Result<ChannelParams> {
    let ones = vec![1.0; obs.len()];
    let pooled = m_step_gain(&ones, obs, template, config)?;
    let residuals: Vec<f64> = obs
        .iter()
        .map(|o| o.gain - pooled.los.beta - pooled.los.alpha * o.log_distance)
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let split: Vec<f64> = residuals
        .iter()
        .map(|&r| if r > median { 1.0 } else { 0.0 })
        .collect();
    let mut out = match m_step_gain(&split, obs, template, config) {
        Ok(p) => p,
        // a group with one distinct distance: start both segments on the pooled line
        Err(Error::DegenerateSegment(_)) => {
            let mut p = *template;
            for s in Segment::ALL {
                let seg = p.segment_mut(s);
                seg.alpha = pooled.los.alpha;
                seg.beta = pooled.los.beta;
                seg.sigma = pooled.los.sigma;
            }
            p.nlos.beta -= pooled.los.sigma;
            p
        }
        Err(e) => return Err(e),
    };
    out.pi_los = 0.5;
    Ok(out)
}

/// Fit ToA bias and spread per segment from the final responsibilities.
/// Segments without responsibility mass keep their values from `params`;
/// a warning is returned for each. The LoS bias is clamped to zero.
pub fn fit_toa_params(
    omega: &[f64],
    obs: &[ToaObservation],
    params: &mut ChannelParams,
    config: &EmConfig,
) -> Vec<String> {
    assert_eq!(omega.len(), obs.len());
    let n_total = obs.len() as f64;
    let mut warnings = Vec::new();
    for s in Segment::ALL {
        let mass: f64 = omega.iter().map(|w| weight(*w, s)).sum();
        if mass <= config.responsibility_floor * n_total.max(1.0) {
            warnings.push(format!(
                "no responsibility mass for {s:?} ToA fit; keeping prior"
            ));
            continue;
        }
        let denom = match config.denominator {
            Denominator::ResponsibilityMass => mass,
            Denominator::TotalCount => n_total,
        };
        let mu = omega
            .iter()
            .zip(obs)
            .map(|(w, o)| weight(*w, s) * (o.toa_range - o.distance))
            .sum::<f64>()
            / denom;
        let var = omega
            .iter()
            .zip(obs)
            .map(|(w, o)| {
                let r = o.toa_range - o.distance - mu;
                weight(*w, s) * r * r
            })
            .sum::<f64>()
            / denom;
        let seg = params.segment_mut(s);
        seg.mu_tau = if s == Segment::Los { 0.0 } else { mu };
        seg.sigma_tau = var.sqrt().max(config.min_sigma_tau);
    }
    warnings
}

/// `true` (LoS) iff the LoS responsibility is strictly above one half.
pub fn hard_classify(soft: &ClassificationState) -> ClassificationState {
    ClassificationState {
        omega: soft.omega.clone(),
        labels: soft.omega.iter().map(|&w| w > 0.5).collect(),
    }
}
