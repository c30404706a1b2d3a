//! Model parameters and the closed-form criteria derived from them.
//!
//! A model is an offspring law `q_k` (with `q_0 = 0`, mean `m > 1`) together
//! with a finite discrete law for the environment weight `A`. Everything in
//! this module is a deterministic function of the model except the
//! Monte Carlo mode of `psi`, which takes an explicit seed.
//!
//! Atom lists are stored sorted, so every quantity here is invariant under
//! permutation of the input atoms, bit for bit.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Sum-to-one tolerance for probability vectors.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Distance to a threshold below which a criterion is reported as a boundary case.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Default cap on the number of configurations enumerated by exact `psi`.
pub const DEFAULT_PSI_BUDGET: f64 = 1e7;

const LAMBDA_TOL: f64 = 1e-10;
const LAMBDA_T_CAP: f64 = 1e6;

fn check_weights(what: &str, weights: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    for w in weights {
        if !(w.is_finite() && (0.0..=1.0).contains(&w)) {
            return Err(Error::InvalidModel(format!("{what}: weight {w} not in [0,1]")));
        }
        total += w;
    }
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidModel(format!("{what}: weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Offspring distribution `(k, q_k)` of the Galton-Watson tree.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringLaw {
    atoms: Vec<(u32, f64)>,
    sampler: WeightedIndex<f64>,
}

impl OffspringLaw {
    pub fn new(atoms: &[(u32, f64)]) -> Result<Self> {
        check_weights("offspring law", atoms.iter().map(|a| a.1))?;
        let mut atoms: Vec<(u32, f64)> = atoms.iter().copied().filter(|a| a.1 > 0.0).collect();
        if atoms.iter().any(|a| a.0 == 0) {
            return Err(Error::InvalidModel("offspring law: q_0 must be 0".into()));
        }
        atoms.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
        let mean: f64 = atoms.iter().map(|&(k, q)| k as f64 * q).sum();
        if mean <= 1.0 {
            return Err(Error::InvalidModel(format!(
                "offspring law: mean {mean} is not supercritical (> 1)"
            )));
        }
        let sampler = WeightedIndex::new(atoms.iter().map(|a| a.1))
            .map_err(|e| Error::InvalidModel(format!("offspring law: {e}")))?;
        Ok(OffspringLaw { atoms, sampler })
    }

    /// Deterministic `b`-ary tree.
    pub fn regular(b: u32) -> Result<Self> {
        Self::new(&[(b, 1.0)])
    }

    pub fn atoms(&self) -> &[(u32, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|&(k, q)| k as f64 * q).sum()
    }

    pub fn prob(&self, k: u32) -> f64 {
        self.atoms.iter().filter(|a| a.0 == k).map(|a| a.1).sum()
    }

    pub fn q1(&self) -> f64 {
        self.prob(1)
    }

    pub fn nu_min(&self) -> u32 {
        self.atoms[0].0
    }

    pub fn nu_max(&self) -> u32 {
        self.atoms[self.atoms.len() - 1].0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.atoms[self.sampler.sample(rng)].0
    }
}

/// Finite discrete law of the environment weight `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvLaw {
    atoms: Vec<(f64, f64)>,
    sampler: WeightedIndex<f64>,
}

impl EnvLaw {
    pub fn new(atoms: &[(f64, f64)]) -> Result<Self> {
        check_weights("environment law", atoms.iter().map(|a| a.1))?;
        let mut atoms: Vec<(f64, f64)> = atoms.iter().copied().filter(|a| a.1 > 0.0).collect();
        if let Some(bad) = atoms.iter().find(|a| !(a.0.is_finite() && a.0 > 0.0)) {
            return Err(Error::InvalidModel(format!(
                "environment law: atom {} must be positive and finite",
                bad.0
            )));
        }
        atoms.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        let sampler = WeightedIndex::new(atoms.iter().map(|a| a.1))
            .map_err(|e| Error::InvalidModel(format!("environment law: {e}")))?;
        Ok(EnvLaw { atoms, sampler })
    }

    pub fn constant(a: f64) -> Result<Self> {
        Self::new(&[(a, 1.0)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Essential infimum `i`.
    pub fn ess_inf(&self) -> f64 {
        self.atoms[0].0
    }

    /// Essential supremum `s`.
    pub fn ess_sup(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.atoms[self.sampler.sample(rng)].0
    }

    /// `ln E[A^t]`, evaluated as a log-sum-exp so large `|t|` cannot overflow.
    pub fn log_moment(&self, t: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        let terms: Vec<f64> = self.atoms.iter().map(|&(a, w)| w.ln() + t * a.ln()).collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
    }

    /// `d/dt ln E[A^t]`, nondecreasing in `t`.
    pub fn log_moment_slope(&self, t: f64) -> f64 {
        let terms: Vec<f64> = self.atoms.iter().map(|&(a, w)| w.ln() + t * a.ln()).collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (x, &(a, _)) in terms.iter().zip(&self.atoms) {
            let p = (x - top).exp();
            num += p * a.ln();
            den += p;
        }
        num / den
    }
}

/// The pair (offspring law, environment law).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub offspring: OffspringLaw,
    pub env: EnvLaw,
}

impl ModelSpec {
    pub fn new(offspring: OffspringLaw, env: EnvLaw) -> Self {
        ModelSpec { offspring, env }
    }

    /// `b`-ary tree with `A` identically equal to `lambda`.
    pub fn constant(b: u32, lambda: f64) -> Result<Self> {
        Ok(ModelSpec::new(OffspringLaw::regular(b)?, EnvLaw::constant(lambda)?))
    }

    /// Binary tree with `A = 0.01` w.p. 0.8 and `A = 500` w.p. 0.2: transient,
    /// yet the annealed and quenched rate functions differ at speed one.
    pub fn two_point_binary_example() -> Self {
        ModelSpec::new(
            OffspringLaw::regular(2).expect("valid"),
            EnvLaw::new(&[(0.01, 0.8), (500.0, 0.2)]).expect("valid"),
        )
    }
}

/// `E[A^t]`.
pub fn moment(model: &ModelSpec, t: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    model.env.atoms().iter().map(|&(a, w)| w * a.powf(t)).sum()
}

/// Minimizer and minimum of `t -> E[A^t]` over `[0, 1]`.
///
/// The map is log-convex, so the slope of its logarithm is monotone and the
/// minimizer is found by bisection on the slope's sign (tolerance 1e-10).
pub fn min_moment_unit_interval(model: &ModelSpec) -> (f64, f64) {
    let slope = |t: f64| model.env.log_moment_slope(t);
    let t = if slope(0.0) >= 0.0 {
        0.0
    } else if slope(1.0) <= 0.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > 1e-10 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    (t, moment(model, t))
}

fn ternary_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let (a, b) = (lo, hi);
    while hi - lo > tol {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let mut best = 0.5 * (lo + hi);
    let mut val = f(best);
    for end in [a, b] {
        let v = f(end);
        if v < val {
            best = end;
            val = v;
        }
    }
    (best, val)
}

/// Lebesgue measure of `{t : E[A^t] <= 1/r}` for `r` in `[0, 1]`.
///
/// `r = 0` means the threshold is infinite and the result is `+inf`.
/// The set is an interval by log-convexity; its ends are bracketed by
/// doubling steps out from an interior point and refined by bisection.
/// A scan that passes `|t| = 1e6` without leaving the set reports `+inf`.
pub fn lambda_param(model: &ModelSpec, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) || r.is_nan() {
        return Err(Error::OutOfRange(format!("lambda_param: r = {r} not in [0,1]")));
    }
    if r == 0.0 {
        return Ok(f64::INFINITY);
    }
    let level = -r.ln();
    let f = |t: f64| model.env.log_moment(t);
    // 0 is always inside for r <= 1; pick the interior anchor anyway so the
    // routine is also correct if the sublevel set does not contain 0.
    let anchor = if f(0.0) <= level {
        0.0
    } else {
        let (t, v) = unbounded_min(&f);
        if v > level {
            return Ok(0.0);
        }
        t
    };
    let upper = match scan_edge(&f, anchor, 1.0, level) {
        Some(t) => t,
        None => return Ok(f64::INFINITY),
    };
    let lower = match scan_edge(&f, anchor, -1.0, level) {
        Some(t) => t,
        None => return Ok(f64::INFINITY),
    };
    Ok(upper - lower)
}

fn unbounded_min(f: &impl Fn(f64) -> f64) -> (f64, f64) {
    let mut width = 1.0;
    loop {
        let (t, v) = ternary_min(f, -width, width, 1e-12);
        if (t.abs() < 0.999 * width) || width > LAMBDA_T_CAP {
            return (t, v);
        }
        width *= 2.0;
    }
}

/// Edge of the sublevel set in direction `dir`, or `None` if unbounded.
fn scan_edge(f: &impl Fn(f64) -> f64, anchor: f64, dir: f64, level: f64) -> Option<f64> {
    let mut inside = anchor;
    let mut step = 1.0;
    loop {
        let t = anchor + dir * step;
        if t.abs() > LAMBDA_T_CAP {
            return None;
        }
        if f(t) > level {
            let mut outside = t;
            while (outside - inside).abs() > LAMBDA_TOL {
                let mid = 0.5 * (inside + outside);
                if f(mid) <= level {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            return Some(0.5 * (inside + outside));
        }
        inside = t;
        step *= 2.0;
    }
}

/// `Lambda` itself: `lambda_param` at `r = q_1`.
pub fn lambda(model: &ModelSpec) -> f64 {
    lambda_param(model, model.offspring.q1()).expect("q1 is a probability")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowdownRegime {
    Exponential,
    StretchedExponential,
    Polynomial,
    DegenerateZeroRate,
}

impl SlowdownRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            SlowdownRegime::Exponential => "exponential",
            SlowdownRegime::StretchedExponential => "stretched_exponential",
            SlowdownRegime::Polynomial => "polynomial",
            SlowdownRegime::DegenerateZeroRate => "degenerate_zero_rate",
        }
    }
}

/// A comparison that landed within `BOUNDARY_TOL` of its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `inf_[0,1] E[A^t]` against `1/m`.
    Transience,
    /// `Lambda` against 1.
    SpeedPositivity,
    /// `i` against `1/nu_min`.
    CriticalEssInf,
    /// `s` against 1 when `q_1 > 0`.
    EssSupAtOne,
    /// `psi'(1)` against `psi(1)`.
    RateCoincidence,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Transience => "transience",
            Criterion::SpeedPositivity => "speed_positivity",
            Criterion::CriticalEssInf => "critical_ess_inf",
            Criterion::EssSupAtOne => "ess_sup_at_one",
            Criterion::RateCoincidence => "rate_coincidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub transient: bool,
    pub lambda: f64,
    pub speed_positive: bool,
    pub slowdown_regime: SlowdownRegime,
    pub min_moment: f64,
    pub min_moment_at: f64,
    pub inverse_mean: f64,
    /// Criteria whose comparison was too close to call; the boolean fields
    /// still carry the strict comparison, but callers must not rely on them.
    pub boundary: Vec<Criterion>,
}

impl RegimeReport {
    pub fn is_boundary(&self) -> bool {
        !self.boundary.is_empty()
    }
}

fn near(x: f64, threshold: f64) -> bool {
    (x - threshold).abs() < BOUNDARY_TOL
}

pub fn classify(model: &ModelSpec) -> RegimeReport {
    let (t_star, min_moment) = min_moment_unit_interval(model);
    let inverse_mean = 1.0 / model.offspring.mean();
    let lambda = lambda(model);
    let i = model.env.ess_inf();
    let s = model.env.ess_sup();
    let q1 = model.offspring.q1();
    let critical = 1.0 / model.offspring.nu_min() as f64;

    let mut boundary = Vec::new();
    if near(min_moment, inverse_mean) {
        boundary.push(Criterion::Transience);
    }
    if lambda.is_finite() && near(lambda, 1.0) {
        boundary.push(Criterion::SpeedPositivity);
    }
    let i_critical = near(i, critical);
    if i_critical {
        boundary.push(Criterion::CriticalEssInf);
    }
    let s_at_one = q1 > 0.0 && near(s, 1.0);
    if s_at_one {
        boundary.push(Criterion::EssSupAtOne);
    }

    let slowdown_regime = if i_critical {
        SlowdownRegime::DegenerateZeroRate
    } else if i > critical {
        SlowdownRegime::Exponential
    } else if q1 > 0.0 && s > 1.0 && !s_at_one {
        SlowdownRegime::Polynomial
    } else if q1 == 0.0 || (s < 1.0 && !s_at_one) {
        SlowdownRegime::StretchedExponential
    } else {
        SlowdownRegime::DegenerateZeroRate
    };

    RegimeReport {
        transient: min_moment > inverse_mean,
        lambda,
        speed_positive: lambda > 1.0,
        slowdown_regime,
        min_moment,
        min_moment_at: t_star,
        inverse_mean,
        boundary,
    }
}

/// How `psi` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiMode {
    /// Enumerate every `(nu, A_1..A_nu)` configuration.
    Exact { budget: f64 },
    /// Average over sampled root configurations.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for PsiMode {
    fn default() -> Self {
        PsiMode::Exact { budget: DEFAULT_PSI_BUDGET }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiValue {
    pub value: f64,
    /// Zero in exact mode.
    pub stderr: f64,
}

/// Weighted table of root configurations: for each configuration its
/// probability and the transition probabilities `w(e, e_i)` to its children.
#[derive(Debug, Clone)]
pub struct ChildKernel {
    weights: Vec<f64>,
    offsets: Vec<usize>,
    omegas: Vec<f64>,
    exact: bool,
}

impl ChildKernel {
    pub fn new(model: &ModelSpec, mode: PsiMode) -> Result<Self> {
        match mode {
            PsiMode::Exact { budget } => Self::exact(model, budget),
            PsiMode::MonteCarlo { samples, seed } => Ok(Self::sampled(model, samples, seed)),
        }
    }

    pub fn exact(model: &ModelSpec, budget: f64) -> Result<Self> {
        let n_atoms = model.env.atoms().len() as f64;
        let size: f64 = model.offspring.atoms().iter().map(|&(k, _)| n_atoms.powi(k as i32)).sum();
        if size > budget {
            return Err(Error::BudgetExceeded { what: "exact psi enumeration", needed: size, budget });
        }
        let env = model.env.atoms();
        let mut kernel = ChildKernel { weights: vec![], offsets: vec![0], omegas: vec![], exact: true };
        for &(k, qk) in model.offspring.atoms() {
            let k = k as usize;
            let mut idx = vec![0usize; k];
            loop {
                let prob = idx.iter().fold(qk, |p, &j| p * env[j].1);
                let total: f64 = 1.0 + idx.iter().map(|&j| env[j].0).sum::<f64>();
                kernel.omegas.extend(idx.iter().map(|&j| env[j].0 / total));
                kernel.weights.push(prob);
                kernel.offsets.push(kernel.omegas.len());
                // odometer
                let mut pos = 0;
                while pos < k {
                    idx[pos] += 1;
                    if idx[pos] < env.len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == k {
                    break;
                }
            }
        }
        Ok(kernel)
    }

    pub fn sampled(model: &ModelSpec, samples: usize, seed: u64) -> Self {
        let mut rng = StreamKey::new(seed).domain("psi").rng();
        let weight = 1.0 / samples as f64;
        let mut kernel = ChildKernel {
            weights: Vec::with_capacity(samples),
            offsets: vec![0],
            omegas: vec![],
            exact: false,
        };
        let mut a = Vec::new();
        for _ in 0..samples {
            let nu = model.offspring.sample(&mut rng);
            a.clear();
            a.extend((0..nu).map(|_| model.env.sample(&mut rng)));
            let total = 1.0 + a.iter().sum::<f64>();
            kernel.omegas.extend(a.iter().map(|x| x / total));
            kernel.weights.push(weight);
            kernel.offsets.push(kernel.omegas.len());
        }
        kernel
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn config(&self, c: usize) -> &[f64] {
        &self.omegas[self.offsets[c]..self.offsets[c + 1]]
    }

    /// `psi(theta) = ln E[sum_i w(e,e_i)^theta]`.
    pub fn psi(&self, theta: f64) -> PsiValue {
        let mut mean = 0.0;
        let mut second = 0.0;
        for c in 0..self.len() {
            let s: f64 = self.config(c).iter().map(|w| w.powf(theta)).sum();
            mean += self.weights[c] * s;
            second += self.weights[c] * s * s;
        }
        let stderr = if self.exact {
            0.0
        } else {
            let n = self.len() as f64;
            let var = (second - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            (var / n).sqrt() / mean
        };
        PsiValue { value: mean.ln(), stderr }
    }

    /// `psi'(theta)`: a weighted sum in exact mode, a central difference
    /// (step 1e-5) on the common sample in Monte Carlo mode.
    pub fn psi_derivative(&self, theta: f64) -> f64 {
        if !self.exact {
            let h = 1e-5;
            return (self.psi(theta + h).value - self.psi(theta - h).value) / (2.0 * h);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..self.len() {
            for &w in self.config(c) {
                let p = w.powf(theta);
                num += self.weights[c] * p * w.ln();
                den += self.weights[c] * p;
            }
        }
        num / den
    }
}

pub fn psi(model: &ModelSpec, theta: f64, mode: PsiMode) -> Result<PsiValue> {
    Ok(ChildKernel::new(model, mode)?.psi(theta))
}

/// Annealed and quenched rate functions at `b = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateAtOne {
    pub ia1: f64,
    pub iq1: f64,
    pub coincide: bool,
    pub psi1: f64,
    pub dpsi1: f64,
    /// Minimizer of `psi(theta)/theta` over `(0, 1]`.
    pub theta_star: f64,
    pub boundary: bool,
}

/// Infimum of `psi(theta)/theta` over `(0, 1]`: grid of step 1e-3, then
/// golden-section refinement around the best grid point.
pub fn inf_psi_over_theta(kernel: &ChildKernel) -> (f64, f64) {
    let g = |t: f64| kernel.psi(t).value / t;
    let steps = 1000;
    let (mut best_j, mut best) = (steps, g(1.0));
    for j in 1..steps {
        let v = g(j as f64 / steps as f64);
        if v < best {
            best = v;
            best_j = j;
        }
    }
    let lo = (best_j - 1).max(1) as f64 / steps as f64;
    let hi = ((best_j + 1).min(steps)) as f64 / steps as f64;
    let (t, v) = golden_min(g, lo, hi, 1e-9);
    if v < best {
        (t, v)
    } else {
        (best_j as f64 / steps as f64, best)
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

pub fn rate_at_one(model: &ModelSpec, mode: PsiMode) -> Result<RateAtOne> {
    let kernel = ChildKernel::new(model, mode)?;
    let psi1 = kernel.psi(1.0).value;
    let dpsi1 = kernel.psi_derivative(1.0);
    let (theta_star, inf) = inf_psi_over_theta(&kernel);
    Ok(RateAtOne {
        ia1: -psi1,
        iq1: -inf.min(psi1),
        coincide: dpsi1 <= psi1,
        psi1,
        dpsi1,
        theta_star,
        boundary: near(dpsi1, psi1),
    })
}
