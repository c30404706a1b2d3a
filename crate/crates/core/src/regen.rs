//! Regeneration times, speed estimation and tail fits for the first
//! regeneration time.
//!
//! A time `k > 0` is a regeneration when it is the first visit to generation
//! `|X_k|`, the vertex `X_k` has at least two children, and the walk never
//! again drops below `|X_k|`. On a finite run the last condition can only be
//! checked up to the horizon, so regenerations within `margin` generations of
//! the highest level reached are censored.

use crate::error::{Error, Result};
use crate::fmt::num;
use crate::walker::{ConditionedSampler, SamplerTelemetry, Trajectory, Walk};

pub const DEFAULT_MARGIN: u32 = 25;
/// Minimum number of uncensored records for a speed estimate.
pub const MIN_SPEED_RECORDS: usize = 100;
/// Minimum surviving samples for a survival point to enter a tail fit.
pub const MIN_SURVIVORS: u64 = 30;
/// Minimum number of points in a tail fit window.
pub const MIN_FIT_POINTS: usize = 8;
/// Default width of the tail fit window, in decades of `n`.
pub const DEFAULT_FIT_DECADES: f64 = 2.0;

/// Increment between consecutive regenerations. The first record of a
/// trajectory runs from time 0 to the first regeneration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegenRecord {
    pub time_increment: u64,
    pub level_increment: u32,
    pub censored: bool,
}

/// A regeneration time and its level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Regeneration {
    pub time: u64,
    pub level: i32,
    pub censored: bool,
}

/// All regenerations of `traj` (censored ones last).
pub fn regenerations(traj: &Trajectory, margin: u32) -> Vec<Regeneration> {
    let prof = &traj.level_profile;
    let len = prof.len();
    // suffix_min[k] = min of prof[k..]
    let mut suffix_min = vec![i32::MAX; len + 1];
    for k in (0..len).rev() {
        suffix_min[k] = suffix_min[k + 1].min(prof[k]);
    }
    let max_level = traj.max_level();
    let mut out = Vec::new();
    for (n, &k) in traj.tau.iter().enumerate().skip(1) {
        if traj.fresh_nu[n] < 2 {
            continue;
        }
        let k = k as usize;
        if suffix_min[k + 1] < n as i32 {
            continue;
        }
        out.push(Regeneration {
            time: k as u64,
            level: n as i32,
            censored: n as i32 > max_level - margin as i32,
        });
    }
    out
}

/// Regeneration increments of `traj`.
pub fn find_regenerations(traj: &Trajectory, margin: u32) -> Vec<RegenRecord> {
    let mut prev = (0u64, 0i32);
    regenerations(traj, margin)
        .into_iter()
        .map(|r| {
            let rec = RegenRecord {
                time_increment: r.time - prev.0,
                level_increment: (r.level - prev.1) as u32,
                censored: r.censored,
            };
            prev = (r.time, r.level);
            rec
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedEstimate {
    pub v_hat: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub records: usize,
}

/// Ratio of mean level increment to mean time increment over uncensored
/// records, with a delta-method 95% interval.
pub fn speed_estimate(records: &[RegenRecord]) -> Result<SpeedEstimate> {
    let used: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.censored)
        .map(|r| (r.level_increment as f64, r.time_increment as f64))
        .collect();
    let n = used.len();
    if n < MIN_SPEED_RECORDS {
        return Err(Error::InsufficientData(format!(
            "speed estimate needs {MIN_SPEED_RECORDS} uncensored records, got {n}"
        )));
    }
    let nf = n as f64;
    let ml = used.iter().map(|r| r.0).sum::<f64>() / nf;
    let mt = used.iter().map(|r| r.1).sum::<f64>() / nf;
    let v = ml / mt;
    let (mut sll, mut stt, mut slt) = (0.0, 0.0, 0.0);
    for &(l, t) in &used {
        sll += (l - ml) * (l - ml);
        stt += (t - mt) * (t - mt);
        slt += (l - ml) * (t - mt);
    }
    let d = (nf - 1.0).max(1.0);
    let var = (sll / d - 2.0 * v * slt / d + v * v * stt / d).max(0.0) / (nf * mt * mt);
    let se = var.sqrt();
    Ok(SpeedEstimate { v_hat: v, stderr: se, ci95: (v - 1.96 * se, v + 1.96 * se), records: n })
}

/// Regeneration records from `draws` conditioned trajectories of
/// `total_steps` steps each, draws `first..first + draws`.
pub fn collect_records(
    sampler: &mut ConditionedSampler,
    first: u64,
    draws: u64,
    total_steps: u64,
    margin: u32,
) -> Result<Vec<RegenRecord>> {
    let mut out = Vec::new();
    for j in first..first + draws {
        let traj = sampler.draw_extended(j, total_steps)?;
        out.extend(find_regenerations(&traj, margin));
    }
    Ok(out)
}

/// Online detection of the first regeneration: candidates are pushed at
/// fresh levels with `nu >= 2`, dropped when the walk goes below them, and
/// the lowest one is confirmed once the walk is `margin` generations above it.
#[derive(Debug, Clone)]
pub struct RegenTracker {
    margin: u32,
    candidates: Vec<(i32, u64)>,
    confirmed: Option<(i32, u64)>,
}

impl RegenTracker {
    pub fn new(margin: u32) -> Self {
        RegenTracker { margin, candidates: Vec::new(), confirmed: None }
    }

    /// Call after every step.
    pub fn observe(&mut self, walk: &Walk) {
        let l = walk.level();
        while self.candidates.last().is_some_and(|c| c.0 > l) {
            self.candidates.pop();
        }
        if l > 0 && l == walk.max_level() && walk.tau(l as usize) == Some(walk.steps()) && walk.fresh_nu(l as usize) >= 2 {
            self.candidates.push((l, walk.steps()));
        }
        if self.confirmed.is_none() {
            if let Some(&c) = self.candidates.first() {
                if walk.max_level() >= c.0 + self.margin as i32 {
                    self.confirmed = Some(c);
                }
            }
        }
    }

    /// `(level, time)` of the confirmed first regeneration.
    pub fn confirmed(&self) -> Option<(i32, u64)> {
        self.confirmed
    }

    /// Lower bound for the first regeneration time when the run stops now.
    pub fn censoring_time(&self, now: u64) -> u64 {
        self.candidates.first().map_or(now, |c| c.1)
    }
}

/// One observation of the first regeneration time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gamma1Sample {
    pub time: u64,
    /// The true value is at least `time`.
    pub censored: bool,
}

/// First regeneration time of draw `j` under the conditioned law. The draw
/// must reach the level cut before exiting the root; the walk then runs until
/// the first regeneration is confirmed (or the horizon, which censors it).
pub fn gamma1_draw(sampler: &mut ConditionedSampler, draw: u64, margin: u32) -> Result<Gamma1Sample> {
    let cut = sampler.config().level_cut as i32;
    let horizon = sampler.config().horizon;
    enum Outcome {
        Accept(Gamma1Sample),
        Early,
        Late,
        Horizon,
    }
    let mut a = 0;
    loop {
        let outcome = sampler.with_walk(draw, a, |w| {
            let mut tracker = RegenTracker::new(margin);
            loop {
                if w.exited_root().is_some() {
                    return if w.max_level() >= cut { Outcome::Late } else { Outcome::Early };
                }
                if w.max_level() >= cut {
                    if let Some((_, t)) = tracker.confirmed() {
                        return Outcome::Accept(Gamma1Sample { time: t, censored: false });
                    }
                }
                if w.steps() >= horizon {
                    if w.max_level() >= cut {
                        let t = tracker.censoring_time(w.steps());
                        return Outcome::Accept(Gamma1Sample { time: t, censored: true });
                    }
                    return Outcome::Horizon;
                }
                w.step();
                tracker.observe(w);
            }
        });
        let tel = sampler.telemetry_mut();
        tel.attempts += 1;
        match outcome {
            Outcome::Accept(s) => {
                tel.accepted += 1;
                return Ok(s);
            }
            Outcome::Early => tel.root_exits += 1,
            Outcome::Late => tel.late_returns += 1,
            Outcome::Horizon => tel.horizon_hits += 1,
        }
        tel.check_starvation()?;
        a += 1;
    }
}

/// First regeneration times of draws `first..first + draws`.
pub fn gamma1_samples(
    sampler: &mut ConditionedSampler,
    first: u64,
    draws: u64,
    margin: u32,
) -> Result<(Vec<Gamma1Sample>, SamplerTelemetry)> {
    let before = *sampler.telemetry();
    let samples = (first..first + draws)
        .map(|j| gamma1_draw(sampler, j, margin))
        .collect::<Result<Vec<_>>>()?;
    let after = *sampler.telemetry();
    let tel = SamplerTelemetry {
        attempts: after.attempts - before.attempts,
        accepted: after.accepted - before.accepted,
        root_exits: after.root_exits - before.root_exits,
        horizon_hits: after.horizon_hits - before.horizon_hits,
        late_returns: after.late_returns - before.late_returns,
    };
    Ok((samples, tel))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalPoint {
    pub n: u64,
    /// Samples whose recorded time exceeds `n`.
    pub survivors: u64,
    pub total: u64,
    /// Estimate of `P(Gamma_1 > n)`.
    pub p_hat: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    pub points: Vec<SurvivalPoint>,
}

impl SurvivalCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,survivors,total,p_hat,stderr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{},{}\n", p.n, p.survivors, p.total, num(p.p_hat), num(p.stderr)));
        }
        out
    }
}

/// `n` values `1, ..., n_max` spaced `per_decade` to a decade, deduplicated.
pub fn log_grid(n_max: u64, per_decade: u32) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    let mut j = 0u32;
    loop {
        let n = 10f64.powf(j as f64 / per_decade as f64).round() as u64;
        if n > n_max.max(1) {
            break;
        }
        if out.last() != Some(&n) {
            out.push(n);
        }
        j += 1;
    }
    out
}

/// Kaplan-Meier estimate of `P(Gamma_1 > n)` on a logarithmic grid with
/// Greenwood standard errors. Without censoring this is the empirical
/// survival fraction with its binomial error.
pub fn survival_curve(samples: &[Gamma1Sample], per_decade: u32) -> SurvivalCurve {
    let total = samples.len() as u64;
    let mut sorted: Vec<(u64, bool)> = samples.iter().map(|s| (s.time, s.censored)).collect();
    sorted.sort_unstable();
    let n_max = sorted.last().map_or(1, |s| s.0);
    let grid = log_grid(n_max, per_decade);

    let mut points = Vec::with_capacity(grid.len());
    let (mut s, mut green) = (1.0f64, 0.0f64);
    let mut idx = 0;
    for &n in &grid {
        while idx < sorted.len() && sorted[idx].0 <= n {
            let t = sorted[idx].0;
            let at_risk = (sorted.len() - idx) as f64;
            let mut events = 0u64;
            let mut j = idx;
            while j < sorted.len() && sorted[j].0 == t {
                if !sorted[j].1 {
                    events += 1;
                }
                j += 1;
            }
            if events > 0 {
                let d = events as f64;
                s *= 1.0 - d / at_risk;
                if at_risk > d {
                    green += d / (at_risk * (at_risk - d));
                }
            }
            idx = j;
        }
        let survivors = (sorted.len() - idx) as u64;
        points.push(SurvivalPoint { n, survivors, total, p_hat: s, stderr: s * green.sqrt() });
    }
    SurvivalCurve { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailRegime {
    Polynomial,
    Stretched,
}

impl TailRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            TailRegime::Polynomial => "polynomial",
            TailRegime::Stretched => "stretched",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub regime: TailRegime,
    /// Slope of `ln P` on `ln n` (polynomial) or `d` in `P = exp(-c n^d)`.
    pub exponent: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub fit_window: (u64, u64),
    /// Weighted squared residual of `ln P`, comparable across regimes.
    pub residual: f64,
    pub points: usize,
    /// `d` in (0, 1) for the stretched fit; always true for polynomial.
    pub valid: bool,
}

/// Straight-line fit of `ln P` against `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailComparison {
    pub polynomial: TailFit,
    pub stretched: TailFit,
    pub exponential: LinearFit,
    pub preferred: TailRegime,
}

/// Points usable for fitting: at least `MIN_SURVIVORS` survivors, relative
/// error below 1/2, `0 < P < 1`, inside the upper `decades` decades of `n`.
pub fn fit_window(curve: &SurvivalCurve, decades: f64) -> Result<Vec<SurvivalPoint>> {
    let good: Vec<SurvivalPoint> = curve
        .points
        .iter()
        .copied()
        .filter(|p| p.survivors >= MIN_SURVIVORS && p.p_hat > 0.0 && p.p_hat < 1.0 && p.stderr < 0.5 * p.p_hat)
        .collect();
    let n_max = good.iter().map(|p| p.n).max().unwrap_or(0);
    let window: Vec<SurvivalPoint> = good.into_iter().filter(|p| p.n as f64 >= n_max as f64 / 10f64.powf(decades)).collect();
    if window.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData(format!(
            "tail fit needs {MIN_FIT_POINTS} usable points, got {}",
            window.len()
        )));
    }
    Ok(window)
}

struct Wls {
    slope: f64,
    intercept: f64,
    slope_se: f64,
}

fn wls(x: &[f64], y: &[f64], w: &[f64]) -> Wls {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = (0..x.len()).map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2)).sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    Wls { slope, intercept, slope_se: (ssr / dof / sxx).sqrt() }
}

/// Inverse-variance weights for `ln P`, or unit weights if any error is zero.
fn log_weights(pts: &[SurvivalPoint]) -> Vec<f64> {
    if pts.iter().all(|p| p.stderr > 0.0) {
        pts.iter().map(|p| (p.p_hat / p.stderr).powi(2)).collect()
    } else {
        vec![1.0; pts.len()]
    }
}

fn fit_on(pts: &[SurvivalPoint], regime: TailRegime) -> TailFit {
    let wlog = log_weights(pts);
    let lnp: Vec<f64> = pts.iter().map(|p| p.p_hat.ln()).collect();
    let lnn: Vec<f64> = pts.iter().map(|p| (p.n as f64).ln()).collect();
    let (fit, predicted): (Wls, Vec<f64>) = match regime {
        TailRegime::Polynomial => {
            let f = wls(&lnn, &lnp, &wlog);
            let pred = lnn.iter().map(|x| f.intercept + f.slope * x).collect();
            (f, pred)
        }
        TailRegime::Stretched => {
            let y: Vec<f64> = lnp.iter().map(|l| (-l).ln()).collect();
            // var(ln(-ln P)) = var(ln P) / (ln P)^2
            let w: Vec<f64> = wlog.iter().zip(&lnp).map(|(w, l)| w * l * l).collect();
            let f = wls(&lnn, &y, &w);
            let pred = lnn.iter().map(|x| -(f.intercept + f.slope * x).exp()).collect();
            (f, pred)
        }
    };
    let residual = (0..pts.len()).map(|i| wlog[i] * (lnp[i] - predicted[i]).powi(2)).sum();
    TailFit {
        regime,
        exponent: fit.slope,
        intercept: fit.intercept,
        stderr: fit.slope_se,
        fit_window: (pts[0].n, pts[pts.len() - 1].n),
        residual,
        points: pts.len(),
        valid: regime == TailRegime::Polynomial || (fit.slope > 0.0 && fit.slope < 1.0),
    }
}

pub fn fit_tail(curve: &SurvivalCurve, regime: TailRegime) -> Result<TailFit> {
    fit_tail_in(curve, regime, DEFAULT_FIT_DECADES)
}

pub fn fit_tail_in(curve: &SurvivalCurve, regime: TailRegime, decades: f64) -> Result<TailFit> {
    Ok(fit_on(&fit_window(curve, decades)?, regime))
}

/// Both fits on the same window, the exponential line, and the preferred
/// regime by residual among valid fits.
pub fn compare_tails(curve: &SurvivalCurve) -> Result<TailComparison> {
    compare_tails_in(curve, DEFAULT_FIT_DECADES)
}

pub fn compare_tails_in(curve: &SurvivalCurve, decades: f64) -> Result<TailComparison> {
    let pts = fit_window(curve, decades)?;
    let polynomial = fit_on(&pts, TailRegime::Polynomial);
    let stretched = fit_on(&pts, TailRegime::Stretched);
    let preferred = if stretched.valid && stretched.residual < polynomial.residual {
        TailRegime::Stretched
    } else {
        TailRegime::Polynomial
    };
    Ok(TailComparison { polynomial, stretched, exponential: exponential_fit(&pts), preferred })
}

/// Weighted fit of `ln P` on `n` with its weighted `R^2`.
pub fn exponential_fit(pts: &[SurvivalPoint]) -> LinearFit {
    let w = log_weights(pts);
    let x: Vec<f64> = pts.iter().map(|p| p.n as f64).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.p_hat.ln()).collect();
    let f = wls(&x, &y, &w);
    let sw: f64 = w.iter().sum();
    let my = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sst: f64 = (0..x.len()).map(|i| w[i] * (y[i] - my).powi(2)).sum();
    let ssr: f64 = (0..x.len()).map(|i| w[i] * (y[i] - f.intercept - f.slope * x[i]).powi(2)).sum();
    LinearFit { slope: f.slope, intercept: f.intercept, r2: 1.0 - ssr / sst }
}
