//! Nearest-neighbour random walk in random environment on the integers.
//!
//! The environment is given through the ratios `A(i) = w(i, i+1)/w(i, i-1)`
//! for sites `0..len`; sites `-1` and `len` are only ever used as absorbing
//! ends. With the potential `V(0) = 0`, `V(l) = -sum_{i<l} ln A(i)`, the walk
//! started at `x` in `(lo, hi)` hits `hi` before `lo` with probability
//! `sum_{m=lo+1}^{x} e^V(m) / sum_{m=lo+1}^{hi} e^V(m)`. All sums are taken
//! relative to their largest exponent with compensated summation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::StreamKey;

pub const DEFAULT_C7: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LineEnv {
    a: Vec<f64>,
    v: Vec<f64>,
}

impl LineEnv {
    pub fn new(a_values: Vec<f64>) -> Result<Self> {
        if a_values.is_empty() {
            return Err(Error::InvalidModel("line environment needs at least one site".into()));
        }
        if let Some(bad) = a_values.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidModel(format!("line environment: A = {bad} is not positive")));
        }
        let mut v = Vec::with_capacity(a_values.len() + 1);
        v.push(0.0);
        let mut acc = 0.0;
        for a in &a_values {
            acc -= a.ln();
            v.push(acc);
        }
        Ok(LineEnv { a: a_values, v })
    }

    /// Homogeneous environment `A = rho` on `len` sites.
    pub fn homogeneous(rho: f64, len: usize) -> Result<Self> {
        Self::new(vec![rho; len])
    }

    /// `A(i)`, i.i.d. from the model's environment law.
    pub fn sample(model: &ModelSpec, len: usize, key: StreamKey) -> Self {
        let mut rng = key.rng();
        let a = (0..len).map(|_| model.env.sample(&mut rng)).collect();
        Self::new(a).expect("environment atoms are positive")
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn a(&self, i: usize) -> f64 {
        self.a[i]
    }

    /// `w(i, i+1)`.
    pub fn up(&self, i: usize) -> f64 {
        self.a[i] / (1.0 + self.a[i])
    }

    /// `w(i, i-1)`.
    pub fn down(&self, i: usize) -> f64 {
        1.0 / (1.0 + self.a[i])
    }

    pub fn potential(&self) -> Potential {
        Potential::new(self.v.clone())
    }
}

/// `V`, `H_1` and on-demand `H_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub v: Vec<f64>,
    /// `H_1(l) = max_{0<=i<=l} V(i) - V(l)`.
    pub h1: Vec<f64>,
}

impl Potential {
    fn new(v: Vec<f64>) -> Self {
        let mut run = f64::NEG_INFINITY;
        let h1 = v
            .iter()
            .map(|&x| {
                run = run.max(x);
                run - x
            })
            .collect();
        Potential { v, h1 }
    }

    /// `H_2(l, k) = max_{l<=i<=k} V(i) - V(l)`.
    pub fn h2(&self, l: usize, k: usize) -> f64 {
        let top = self.v[l..=k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top - self.v[l]
    }
}

/// Neumaier-compensated sum of `exp(x - shift)`.
fn shifted_exp_sum(xs: &[f64], shift: f64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in xs {
        let term = (x - shift).exp();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Probability that the walk from `start` hits `hi` before `lo`.
pub fn hit_before(env: &LineEnv, start: i64, lo: i64, hi: i64) -> Result<f64> {
    if lo == hi {
        return Err(Error::DegenerateInterval(lo));
    }
    if !(lo < hi && lo <= start && start <= hi) {
        return Err(Error::OutOfRange(format!("need lo <= start <= hi, got {lo}, {start}, {hi}")));
    }
    if lo < -1 || hi > env.len() as i64 {
        return Err(Error::OutOfRange(format!("sites must lie in -1..={}", env.len())));
    }
    if start == hi {
        return Ok(1.0);
    }
    if start == lo {
        return Ok(0.0);
    }
    let all = &env.v[(lo + 1) as usize..=hi as usize];
    let shift = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let num = shifted_exp_sum(&all[..(start - lo) as usize], shift);
    let den = shifted_exp_sum(all, shift);
    Ok((num / den).clamp(0.0, 1.0))
}

/// `P^l(T_l^* > T_0 ∧ T_k)`: the walk leaves `l` and reaches `0` or `k`
/// before coming back to `l`. At `l = 0` only the step up counts, and at
/// `l = k` only the step down.
pub fn return_escape(env: &LineEnv, l: usize, k: usize) -> Result<f64> {
    if l > k {
        return Err(Error::OutOfRange(format!("need l <= k, got l = {l}, k = {k}")));
    }
    if k == 0 {
        return Err(Error::DegenerateInterval(0));
    }
    if l >= env.len() {
        return Err(Error::OutOfRange(format!("site {l} has no environment (length {})", env.len())));
    }
    if k > env.len() {
        return Err(Error::OutOfRange(format!("site {k} beyond the environment (length {})", env.len())));
    }
    let (l, k_) = (l as i64, k as i64);
    let up = if l < k_ { env.up(l as usize) * hit_before(env, l + 1, l, k_)? } else { 0.0 };
    let down = if l > 0 { env.down(l as usize) * (1.0 - hit_before(env, l - 1, 0, l)?) } else { 0.0 };
    Ok(up + down)
}

/// Both hitting probabilities bounded through the potential, with the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HittingBounds {
    /// `P^{l+1}(T_k < T_l)`.
    pub forward: f64,
    /// `e^{-H_2(l+1, k)} / (k+1)` and `e^{-H_2(l+1, k)}`.
    pub forward_bounds: (f64, f64),
    /// `P^{l-1}(T_{-1} < T_l)`.
    pub backward: f64,
    /// `e^{-H_1(l)} / (k+1)` and `e^{-H_1(l)}`.
    pub backward_bounds: (f64, f64),
}

impl HittingBounds {
    /// Whether both probabilities lie within their bounds, up to a relative
    /// slack `rel` for rounding.
    pub fn holds(&self, rel: f64) -> bool {
        let within = |p: f64, (lo, hi): (f64, f64)| p >= lo * (1.0 - rel) && p <= hi * (1.0 + rel);
        within(self.forward, self.forward_bounds) && within(self.backward, self.backward_bounds)
    }
}

/// Requires `0 <= l < k <= len`.
pub fn hitting_bounds(env: &LineEnv, l: usize, k: usize) -> Result<HittingBounds> {
    if !(l < k && k <= env.len()) {
        return Err(Error::OutOfRange(format!("need 0 <= l < k <= {}, got l = {l}, k = {k}", env.len())));
    }
    let pot = env.potential();
    let (li, ki) = (l as i64, k as i64);
    let forward = hit_before(env, li + 1, li, ki)?;
    let backward = 1.0 - hit_before(env, li - 1, -1, li)?;
    let e2 = (-pot.h2(l + 1, k)).exp();
    let e1 = (-pot.h1[l]).exp();
    let kk = (k + 1) as f64;
    Ok(HittingBounds { forward, forward_bounds: (e2 / kk, e2), backward, backward_bounds: (e1 / kk, e1) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// `p(l, k, n) = E[(1 - c7 P^l(T_l^* > T_0 ∧ T_k))^n]` over environments
/// with i.i.d. `A(i)` from the model, averaged over `env_samples` draws.
pub fn p_lkn(
    model: &ModelSpec,
    l: usize,
    k: usize,
    n: u32,
    c7: f64,
    env_samples: usize,
    seed: u64,
) -> Result<MeanEstimate> {
    if !(c7 > 0.0 && c7 < 1.0) {
        return Err(Error::OutOfRange(format!("c7 = {c7} not in (0,1)")));
    }
    if env_samples == 0 {
        return Err(Error::InvalidConfig("env_samples must be positive".into()));
    }
    if n == 0 {
        return Ok(MeanEstimate { mean: 1.0, stderr: 0.0 });
    }
    let key = StreamKey::new(seed).domain("line-env");
    let mut vals = Vec::with_capacity(env_samples);
    for s in 0..env_samples as u64 {
        let env = LineEnv::sample(model, k + 1, key.split(s));
        let p = return_escape(&env, l, k)?;
        vals.push((1.0 - c7 * p).powi(n as i32));
    }
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok(MeanEstimate { mean, stderr: (var / m).sqrt() })
}

/// `sum_{0 <= l <= k <= k_max, k >= 1} r^k p(l, k, n)`.
pub fn weighted_p_sum(
    model: &ModelSpec,
    r: f64,
    n: u32,
    k_max: usize,
    c7: f64,
    env_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 1..=k_max {
        for l in 0..=k {
            if l == k && l == 0 {
                continue;
            }
            let s = StreamKey::new(seed).split(k as u64).split(l as u64).raw();
            total += r.powi(k as i32) * p_lkn(model, l, k, n, c7, env_samples, s)?.mean;
        }
    }
    Ok(total)
}

/// Probability that the walk with up-probability `p_up` started at 0 hits
/// `-1` before `h`: `1 - 1/(1 + rho + ... + rho^h)` with `rho = (1-p)/p`.
pub fn ruin_escape(p_up: f64, h: u32) -> Result<f64> {
    if !(p_up > 0.0 && p_up < 1.0) {
        return Err(Error::OutOfRange(format!("p_up = {p_up} not in (0,1)")));
    }
    if h < 1 {
        return Err(Error::OutOfRange("h must be at least 1".into()));
    }
    let rho = (1.0 - p_up) / p_up;
    let mut s = 0.0;
    let mut term = 1.0;
    for _ in 0..=h {
        s += term;
        term *= rho;
    }
    Ok(1.0 - 1.0 / s)
}

/// Simulates the walk from `start` until it hits `lo` or `hi`; `true` at `hi`.
pub fn simulate_hit<R: Rng + ?Sized>(env: &LineEnv, start: i64, lo: i64, hi: i64, rng: &mut R) -> bool {
    let mut x = start;
    while x != lo && x != hi {
        x += if rng.random::<f64>() < env.up(x as usize) { 1 } else { -1 };
    }
    x == hi
}
