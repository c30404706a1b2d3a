//! Exact quenched computations on truncated trees.
//!
//! `beta` iterates `1/b(x) = 1 + 1/sum_i A(x_i) b(x_i)` from the leaves of a
//! truncation (boundary value 1) up to `x`. `passage_distribution` pushes the
//! law of the walk forward step by step with the level-`n` leaves and the
//! root's parent absorbing. The counting estimators `en_hb`, `rate_curve` and
//! `cascade_growth` are built on top of these over independent sampled trees.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt::num;
use crate::model::{rate_at_one, ModelSpec, PsiMode};
use crate::rng::draw_seed;
use crate::tree_env::{LazyTree, NodeId, TruncatedTree, VertexState, DEFAULT_NODE_BUDGET};

/// Cap on `t_max * vertices` for one passage computation.
pub const DEFAULT_PASSAGE_BUDGET: f64 = 1e9;
/// Largest `n` accepted by the counting estimators by default.
pub const DEFAULT_MAX_GENERATION: u32 = 10;
/// Standard error used in place of zero when comparing exact estimates.
pub const ZERO_STDERR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BetaEstimate {
    /// Boundary-1 values, one per truncation depth in `depths`; nonincreasing.
    pub upper: Vec<f64>,
    pub depths: Vec<u32>,
    pub value: f64,
    /// Last successive difference (against 1 for a single depth).
    pub gap: f64,
    /// `1 - 1/(i nu_min)` when `i nu_min > 1`, a lower bound for every vertex.
    pub floor: Option<f64>,
}

/// Boundary-1 value of the recursion at `j` with the boundary `rel_depth`
/// generations below it.
fn beta_at(tree: &TruncatedTree, j: usize, rel_depth: u32, scratch: &mut [f64]) -> f64 {
    let nodes = tree.subtree(j, rel_depth);
    let bottom = tree.node(j).depth + rel_depth;
    for &v in nodes.iter().rev() {
        let node = tree.node(v);
        scratch[v] = if node.depth == bottom {
            1.0
        } else {
            let s: f64 = node
                .children()
                .zip(&node.state.child_weights)
                .map(|(c, a)| a * scratch[c])
                .sum();
            s / (1.0 + s)
        };
    }
    scratch[j]
}

/// `beta(x)` by truncations at the relative depths of `schedule`, stopping
/// once successive values differ by less than `tol`.
pub fn beta(tree: &TruncatedTree, x: &NodeId, schedule: &[u32], tol: f64) -> Result<BetaEstimate> {
    let j = tree
        .find(x)
        .ok_or_else(|| Error::OutOfRange(format!("vertex {x} is not in the truncation")))?;
    let room = tree.depth() - tree.node(j).depth;
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(Error::InvalidConfig("depth schedule must be positive and increasing".into()));
    }
    if let Some(&d) = schedule.iter().find(|&&d| d > room) {
        return Err(Error::OutOfRange(format!("depth {d} exceeds the {room} generations below {x}")));
    }
    let mut scratch = vec![0.0; tree.len()];
    let mut upper = Vec::new();
    let mut depths = Vec::new();
    let mut prev = 1.0;
    let mut gap = f64::INFINITY;
    for &d in schedule {
        let v = beta_at(tree, j, d, &mut scratch);
        gap = (prev - v).abs();
        upper.push(v);
        depths.push(d);
        prev = v;
        if gap < tol {
            return Ok(BetaEstimate { value: v, upper, depths, gap, floor: None });
        }
    }
    Err(Error::NoConvergence { gap, value: prev })
}

/// `beta` plus the floor `1 - 1/(i nu_min)` of the model when `i nu_min > 1`.
pub fn beta_for_model(
    model: &ModelSpec,
    tree: &TruncatedTree,
    x: &NodeId,
    schedule: &[u32],
    tol: f64,
) -> Result<BetaEstimate> {
    let mut est = beta(tree, x, schedule, tol)?;
    let v = model.env.ess_inf() * model.offspring.nu_min() as f64;
    est.floor = (v > 1.0).then(|| 1.0 - 1.0 / v);
    Ok(est)
}

/// Boundary-1 values of the recursion at every vertex of the truncation,
/// with the boundary at the truncation depth.
pub fn beta_all(tree: &TruncatedTree) -> Vec<f64> {
    let mut out = vec![0.0; tree.len()];
    for v in (0..tree.len()).rev() {
        let node = tree.node(v);
        out[v] = if node.depth == tree.depth() {
            1.0
        } else {
            let s: f64 = node.children().zip(&node.state.child_weights).map(|(c, a)| a * out[c]).sum();
            s / (1.0 + s)
        };
    }
    out
}

/// `gamma = sum_k w(x, x_k) beta(x_k)`.
pub fn gamma_from_beta(vertex: &VertexState, child_betas: &[f64]) -> Result<f64> {
    if child_betas.len() != vertex.nu as usize {
        return Err(Error::LengthMismatch { expected: vertex.nu as usize, got: child_betas.len() });
    }
    Ok(vertex.trans_children.iter().zip(child_betas).map(|(w, b)| w * b).sum())
}

/// Law of the walk from the root on a truncation of depth `n`, stopped at
/// the first visit to generation `n` or to the root's parent.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageDistribution {
    pub n: u32,
    pub t_max: u32,
    /// Breadth-first positions of the generation-`n` vertices.
    pub leaves: Vec<usize>,
    /// `arrivals[i][t]`: probability that generation `n` is first hit at
    /// step `t`, at `leaves[i]`, before any visit to the root's parent.
    pub arrivals: Vec<Vec<f64>>,
    /// Cumulative probability of having stepped to the root's parent by `t`.
    pub root_absorbed: Vec<f64>,
    /// Probability of still being in generations `0..n` at step `t`.
    pub running: Vec<f64>,
    /// Largest `|arrived + absorbed + running - 1|` over all steps.
    pub max_mass_defect: f64,
}

impl PassageDistribution {
    /// Probability of arriving at leaf `i` by `t_max`.
    pub fn leaf_mass(&self, i: usize) -> f64 {
        self.arrivals[i].iter().sum()
    }

    /// Probability of arriving at leaf `i` by step `t`.
    pub fn leaf_mass_by(&self, i: usize, t: u32) -> f64 {
        self.arrivals[i][..=t.min(self.t_max) as usize].iter().sum()
    }
}

pub fn passage_distribution(tree: &TruncatedTree, t_max: u32) -> Result<PassageDistribution> {
    passage_distribution_budget(tree, t_max, DEFAULT_PASSAGE_BUDGET)
}

pub fn passage_distribution_budget(tree: &TruncatedTree, t_max: u32, budget: f64) -> Result<PassageDistribution> {
    let n = tree.depth();
    if t_max < n {
        return Err(Error::Precondition(format!("t_max = {t_max} is below the target generation {n}")));
    }
    let cost = t_max as f64 * tree.len() as f64;
    if cost > budget {
        return Err(Error::BudgetExceeded { what: "passage distribution", needed: cost, budget });
    }
    let leaf_range = tree.level(n);
    let leaves: Vec<usize> = leaf_range.clone().collect();
    let width = t_max as usize + 1;
    let mut arrivals = vec![vec![0.0; width]; leaves.len()];
    let mut root_absorbed = vec![0.0; width];
    let mut running = vec![0.0; width];
    if n == 0 {
        arrivals[0][0] = 1.0;
        return Ok(PassageDistribution {
            n,
            t_max,
            leaves,
            arrivals,
            root_absorbed,
            running,
            max_mass_defect: 0.0,
        });
    }
    let inner = leaf_range.start;
    let mut p = vec![0.0; inner];
    let mut q = vec![0.0; inner];
    p[0] = 1.0;
    running[0] = 1.0;
    let mut arrived_total = 0.0;
    let mut absorbed = 0.0;
    let mut defect: f64 = 0.0;
    for t in 1..width {
        q.iter_mut().for_each(|x| *x = 0.0);
        for (v, &mass) in p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let node = tree.node(v);
            for (c, &w) in node.children().zip(&node.state.trans_children) {
                if c >= inner {
                    let a = mass * w;
                    arrivals[c - inner][t] += a;
                    arrived_total += a;
                } else {
                    q[c] += mass * w;
                }
            }
            let up = mass * node.state.trans_parent;
            match node.parent {
                Some(par) => q[par] += up,
                None => absorbed += up,
            }
        }
        std::mem::swap(&mut p, &mut q);
        let run: f64 = p.iter().sum();
        running[t] = run;
        root_absorbed[t] = absorbed;
        defect = defect.max((arrived_total + absorbed + run - 1.0).abs());
    }
    Ok(PassageDistribution { n, t_max, leaves, arrivals, root_absorbed, running, max_mass_defect: defect })
}

/// Per-leaf exponents `-ln(P(arrive at x by floor(b n)))/n` for a truncation
/// of depth `n`, sorted ascending; `+inf` for leaves that cannot be reached.
/// A leaf counts towards `e_n(h, b)` exactly when its exponent is `<= h`.
pub fn leaf_exponents(tree: &TruncatedTree, b: f64) -> Result<Vec<f64>> {
    let n = tree.depth();
    if n == 0 {
        return Err(Error::OutOfRange("leaf exponents need n >= 1".into()));
    }
    if b.is_nan() || b < 1.0 {
        return Err(Error::OutOfRange(format!("b = {b} must be at least 1")));
    }
    let t_max = (b * n as f64).floor() as u32;
    let dist = passage_distribution(tree, t_max)?;
    let mut out: Vec<f64> = (0..dist.leaves.len())
        .map(|i| {
            let m = dist.leaf_mass(i);
            if m > 0.0 {
                -m.ln() / n as f64
            } else {
                f64::INFINITY
            }
        })
        .collect();
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

fn count_at_most(sorted: &[f64], h: f64) -> usize {
    sorted.partition_point(|&x| x <= h)
}

/// Estimate of `e_n(h, b)` over sampled trees.
#[derive(Debug, Clone, PartialEq)]
pub struct EnEstimate {
    pub h: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Qualifying leaves per sampled tree.
    pub counts: Vec<u64>,
    /// `Z_n` per sampled tree.
    pub populations: Vec<u64>,
}

fn check_generation(n: u32) -> Result<()> {
    if n == 0 || n > DEFAULT_MAX_GENERATION {
        return Err(Error::OutOfRange(format!(
            "n = {n} outside 1..={DEFAULT_MAX_GENERATION} for exact counting"
        )));
    }
    Ok(())
}

fn sampled_exponents(model: &ModelSpec, b: f64, n: u32, tree_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    check_generation(n)?;
    if tree_samples == 0 {
        return Err(Error::InvalidConfig("tree_samples must be positive".into()));
    }
    (0..tree_samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut lazy = LazyTree::new(model.clone(), draw_seed(seed, "en-tree", s));
            let tree = lazy.enumerate_to_depth(n, DEFAULT_NODE_BUDGET)?;
            leaf_exponents(&tree, b)
        })
        .collect()
}

fn mean_se(counts: &[u64]) -> (f64, f64) {
    let k = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / k;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    (mean, (var / k).sqrt())
}

fn estimate_at(exps: &[Vec<f64>], h: f64) -> EnEstimate {
    let counts: Vec<u64> = exps.iter().map(|e| count_at_most(e, h) as u64).collect();
    let populations = exps.iter().map(|e| e.len() as u64).collect();
    let (mean, stderr) = mean_se(&counts);
    EnEstimate { h, mean, stderr, counts, populations }
}

/// `e_n(h, b)`: mean number of generation-`n` vertices reached first, by
/// time `floor(b n)`, without visiting the root's parent, with probability at
/// least `exp(-h n)`. Tree `s` is seeded from `(seed, s)`.
pub fn en_hb(model: &ModelSpec, h: f64, b: f64, n: u32, tree_samples: usize, seed: u64) -> Result<EnEstimate> {
    Ok(en_hb_grid(model, &[h], b, n, tree_samples, seed)?.remove(0))
}

/// `en_hb` for several `h` on the same sampled trees.
pub fn en_hb_grid(
    model: &ModelSpec,
    hs: &[f64],
    b: f64,
    n: u32,
    tree_samples: usize,
    seed: u64,
) -> Result<Vec<EnEstimate>> {
    let exps = sampled_exponents(model, b, n, tree_samples, seed)?;
    Ok(hs.iter().map(|&h| estimate_at(&exps, h)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateGridPoint {
    pub h: f64,
    pub k: u32,
    /// `(1/k) ln e_k(h, b)`; `-inf` when no leaf qualifies.
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    pub b: f64,
    pub grid: Vec<RateGridPoint>,
    /// `(h, ln e(h, b), stderr)` on the `h` grid.
    pub e_of_h: Vec<(f64, f64, f64)>,
    pub ja: f64,
    pub ja_stderr: f64,
    pub jq: f64,
    pub jq_stderr: f64,
    /// Smallest grid `h` with a nonzero estimate; limited by grid resolution.
    pub h_c: Option<f64>,
}

impl RateCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,k,estimate,stderr\n");
        for p in &self.grid {
            out.push_str(&format!("{},{},{},{}\n", num(p.h), p.k, num(p.value), num(p.stderr)));
        }
        out
    }
}

/// `ln e(h, b)` as `max_k (1/k) ln e_k(h, b)` with the stderr of the best `k`.
fn ln_e(per_k: &[(u32, Vec<Vec<f64>>)], merged: &[Vec<f64>], h: f64, with_se: bool) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (i, (k, exps)) in per_k.iter().enumerate() {
        let total = count_at_most(&merged[i], h) as f64 / exps.len() as f64;
        let v = if total > 0.0 { total.ln() / *k as f64 } else { f64::NEG_INFINITY };
        if v > best.0 {
            let se = if with_se {
                let e = estimate_at(exps, h);
                e.stderr / (e.mean * *k as f64)
            } else {
                0.0
            };
            best = (v, se);
        }
    }
    best
}

/// Grid estimates of `e_k(h, b)` and `e(h, b)`, and the two rate values
/// `Ja = -sup_h (-h + ln e(h))` and `Jq`, the same supremum over
/// `{h : e(h) > 1}`. Besides the grid, the suprema are evaluated at every
/// jump of the estimated `e(h)` inside the grid range, where the piecewise
/// constant `-h + ln e(h)` attains its local maxima.
pub fn rate_curve(
    model: &ModelSpec,
    b: f64,
    hs: &[f64],
    ks: &[u32],
    tree_samples: usize,
    seed: u64,
) -> Result<RateCurve> {
    if hs.is_empty() || ks.is_empty() {
        return Err(Error::InvalidConfig("rate curve needs nonempty h and k grids".into()));
    }
    if hs.windows(2).any(|w| w[0] >= w[1]) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("h and k grids must be strictly increasing".into()));
    }
    let per_k: Vec<(u32, Vec<Vec<f64>>)> = ks
        .iter()
        .map(|&k| Ok((k, sampled_exponents(model, b, k, tree_samples, seed.wrapping_add(k as u64))?)))
        .collect::<Result<_>>()?;
    let merged: Vec<Vec<f64>> = per_k
        .iter()
        .map(|(_, e)| {
            let mut all: Vec<f64> = e.iter().flatten().copied().filter(|x| x.is_finite()).collect();
            all.sort_by(|a, b| a.total_cmp(b));
            all
        })
        .collect();

    let mut grid = Vec::new();
    for &h in hs {
        for (k, exps) in &per_k {
            let e = estimate_at(exps, h);
            let (value, stderr) = if e.mean > 0.0 {
                (e.mean.ln() / *k as f64, e.stderr / (e.mean * *k as f64))
            } else {
                (f64::NEG_INFINITY, 0.0)
            };
            grid.push(RateGridPoint { h, k: *k, value, stderr });
        }
    }
    let e_of_h: Vec<(f64, f64, f64)> = hs
        .iter()
        .map(|&h| {
            let (v, se) = ln_e(&per_k, &merged, h, true);
            (h, v, se)
        })
        .collect();
    let h_c = e_of_h.iter().find(|e| e.1 > f64::NEG_INFINITY).map(|e| e.0);

    let (lo, hi) = (hs[0], hs[hs.len() - 1]);
    let mut candidates: Vec<f64> = hs.to_vec();
    for m in &merged {
        candidates.extend(m.iter().copied().filter(|&x| x >= lo && x <= hi));
    }
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    let mut best_all: (f64, f64) = (f64::NEG_INFINITY, f64::NAN);
    let mut best_s: (f64, f64) = (f64::NEG_INFINITY, f64::NAN);
    for &h in &candidates {
        let (le, _) = ln_e(&per_k, &merged, h, false);
        let obj = -h + le;
        if obj > best_all.0 {
            best_all = (obj, h);
        }
        if le > 0.0 && obj > best_s.0 {
            best_s = (obj, h);
        }
    }
    let se_at = |h: f64| if h.is_nan() { 0.0 } else { ln_e(&per_k, &merged, h, true).1 };
    Ok(RateCurve {
        b,
        grid,
        e_of_h,
        ja: -best_all.0,
        ja_stderr: se_at(best_all.1),
        jq: -best_s.0,
        jq_stderr: se_at(best_s.1),
        h_c,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeGrowth {
    pub n: u32,
    /// `(1/n) ln sum_{|x| = n} prod w` per sampled tree.
    pub per_tree: Vec<f64>,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// `inf_{(0,1]} psi(theta)/theta`.
    pub target: f64,
    pub psi1: f64,
}

/// Sum over generation `n` of the products of `w` along the geodesics.
pub fn cascade_sum(tree: &TruncatedTree) -> f64 {
    let mut prod = vec![0.0; tree.len()];
    prod[0] = 1.0;
    for v in 0..tree.len() {
        let node = tree.node(v);
        for (c, w) in node.children().zip(&node.state.trans_children) {
            prod[c] = prod[v] * w;
        }
    }
    tree.level(tree.depth()).map(|j| prod[j]).sum()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn cascade_growth(model: &ModelSpec, n: u32, tree_samples: usize, seed: u64) -> Result<CascadeGrowth> {
    if n == 0 || tree_samples == 0 {
        return Err(Error::InvalidConfig("cascade growth needs n >= 1 and tree_samples >= 1".into()));
    }
    let rates = rate_at_one(model, PsiMode::default())?;
    let per_tree: Vec<f64> = (0..tree_samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut lazy = LazyTree::new(model.clone(), draw_seed(seed, "cascade-tree", s));
            let tree = lazy.enumerate_to_depth(n, DEFAULT_NODE_BUDGET)?;
            Ok(cascade_sum(&tree).ln() / n as f64)
        })
        .collect::<Result<_>>()?;
    let mut sorted = per_tree.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(CascadeGrowth {
        n,
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
        per_tree,
        target: -rates.iq1,
        psi1: rates.psi1,
    })
}
