//! Quenched random walk on a [`LazyTree`].
//!
//! Each step consumes one uniform `u` from the walk stream. From a vertex `x`
//! the walk moves to child `x_i` when `u` falls in the `i`-th slot of the
//! partial sums of `w(x, x_.)` and to the parent otherwise; from the root's
//! parent it returns to the root.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fmt::num;
use crate::model::{classify, Criterion, ModelSpec};
use crate::rng::{StreamKey, StreamRng};
use crate::tree_env::{LazyTree, NodeId, VertexHandle};

pub const DEFAULT_LEVEL_CUT: u32 = 50;
pub const DEFAULT_HORIZON: u64 = 10_000_000;
/// Attempts after which a low acceptance rate is reported as starvation.
pub const STARVATION_ATTEMPTS: u64 = 100_000;
pub const STARVATION_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// The root's parent.
    RootParent,
    At(VertexHandle),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkStatus {
    Running,
    ReachedLevel,
    StepBudget,
    RootExit,
}

impl WalkStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            WalkStatus::Running => "running",
            WalkStatus::ReachedLevel => "reached_level",
            WalkStatus::StepBudget => "step_budget",
            WalkStatus::RootExit => "root_exit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    pub target_level: Option<u32>,
    pub stop_on_root_exit: bool,
    pub max_steps: u64,
}

impl StopRule {
    pub fn steps(max_steps: u64) -> Self {
        StopRule { target_level: None, stop_on_root_exit: false, max_steps }
    }

    pub fn level(target: u32, max_steps: u64) -> Self {
        StopRule { target_level: Some(target), stop_on_root_exit: false, max_steps }
    }

    pub fn with_root_exit(mut self) -> Self {
        self.stop_on_root_exit = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tree_seed: u64,
    pub walk_seed: u64,
    /// `|X_k|` for every `k`, with `-1` at the root's parent.
    pub level_profile: Vec<i32>,
    /// Final position; `None` at the root's parent.
    pub current: Option<NodeId>,
    /// `tau[n]`: first step at which generation `n` is hit.
    pub tau: Vec<u64>,
    /// `nu` of the vertex occupied at `tau[n]`.
    pub fresh_nu: Vec<u32>,
    /// Visit counts indexed by vertex handle of the walked tree.
    pub local_time: Vec<u64>,
    pub root_parent_time: u64,
    /// First step `k` with `X_{k-1} = e` and `X_k` the root's parent.
    pub exited_root: Option<u64>,
    pub horizon: u64,
    pub status: WalkStatus,
}

impl Trajectory {
    pub fn steps(&self) -> u64 {
        self.level_profile.len() as u64 - 1
    }

    pub fn max_level(&self) -> i32 {
        self.tau.len() as i32 - 1
    }

    pub fn final_level(&self) -> i32 {
        *self.level_profile.last().expect("nonempty profile")
    }

    /// Local times keyed by vertex, sorted by path word.
    pub fn local_times_by_node(&self, tree: &LazyTree) -> Vec<(NodeId, u64)> {
        let mut out: Vec<(NodeId, u64)> = self
            .local_time
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(j, &n)| (tree.node_id(tree.handle(j)), n))
            .collect();
        out.sort();
        out
    }

    /// One CSV row: tree_seed, walk_seed, status, steps, max_level, then
    /// `tau` at each requested level (empty when not reached).
    pub fn summary_row(&self, levels: &[u32]) -> String {
        let mut row = format!(
            "{},{},{},{},{}",
            self.tree_seed,
            self.walk_seed,
            self.status.as_str(),
            self.steps(),
            self.max_level()
        );
        for &l in levels {
            row.push(',');
            if let Some(t) = self.tau.get(l as usize) {
                row.push_str(&t.to_string());
            }
        }
        row
    }

    pub fn summary_header(levels: &[u32]) -> String {
        let mut h = String::from("tree_seed,walk_seed,status,steps,max_level");
        for l in levels {
            h.push_str(&format!(",tau_{l}"));
        }
        h
    }
}

/// A walk in progress.
pub struct Walk<'t> {
    tree: &'t mut LazyTree,
    rng: StreamRng,
    walk_seed: u64,
    pos: Position,
    level: i32,
    steps: u64,
    level_profile: Vec<i32>,
    tau: Vec<u64>,
    fresh_nu: Vec<u32>,
    local_time: Vec<u64>,
    root_parent_time: u64,
    exited_root: Option<u64>,
}

impl<'t> Walk<'t> {
    pub fn new(tree: &'t mut LazyTree, walk_seed: u64) -> Self {
        let rng = StreamKey::new(walk_seed).domain("walk").rng();
        let root = tree.root();
        let root_nu = tree.state(root).nu;
        let mut w = Walk {
            tree,
            rng,
            walk_seed,
            pos: Position::At(root),
            level: 0,
            steps: 0,
            level_profile: vec![0],
            tau: vec![0],
            fresh_nu: vec![root_nu],
            local_time: Vec::new(),
            root_parent_time: 0,
            exited_root: None,
        };
        w.visit();
        w
    }

    fn visit(&mut self) {
        match self.pos {
            Position::RootParent => self.root_parent_time += 1,
            Position::At(h) => {
                let j = h.index();
                if j >= self.local_time.len() {
                    self.local_time.resize(j + 1, 0);
                }
                self.local_time[j] += 1;
            }
        }
    }

    pub fn position(&self) -> Position {
        self.pos
    }

    pub fn level(&self) -> i32 {
        self.level
    }

    pub fn max_level(&self) -> i32 {
        self.tau.len() as i32 - 1
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn exited_root(&self) -> Option<u64> {
        self.exited_root
    }

    /// `nu` of the vertex first reached at generation `n`.
    pub fn fresh_nu(&self, n: usize) -> u32 {
        self.fresh_nu[n]
    }

    pub fn tau(&self, n: usize) -> Option<u64> {
        self.tau.get(n).copied()
    }

    pub fn tree(&mut self) -> &mut LazyTree {
        self.tree
    }

    /// Performs one step and returns the uniform that drove it.
    pub fn step(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        self.pos = match self.pos {
            Position::RootParent => Position::At(self.tree.root()),
            Position::At(h) => {
                let st = self.tree.state(h);
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &w) in st.trans_children.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = Some(i as u32);
                        break;
                    }
                }
                match pick {
                    Some(i) => Position::At(self.tree.child(h, i)),
                    None => match self.tree.parent(h) {
                        Some(p) => Position::At(p),
                        None => Position::RootParent,
                    },
                }
            }
        };
        self.steps += 1;
        let down = matches!(self.pos, Position::RootParent);
        self.level = match self.pos {
            Position::RootParent => -1,
            Position::At(h) => self.tree.depth(h) as i32,
        };
        if down && self.exited_root.is_none() {
            self.exited_root = Some(self.steps);
        }
        if self.level as usize == self.tau.len() {
            if let Position::At(h) = self.pos {
                self.tau.push(self.steps);
                let nu = self.tree.state(h).nu;
                self.fresh_nu.push(nu);
            }
        }
        self.level_profile.push(self.level);
        self.visit();
        u
    }

    /// Steps until the rule fires.
    pub fn advance(&mut self, stop: &StopRule) -> WalkStatus {
        loop {
            let status = self.check(stop);
            if status != WalkStatus::Running {
                return status;
            }
            self.step();
        }
    }

    fn check(&self, stop: &StopRule) -> WalkStatus {
        if stop.stop_on_root_exit && self.exited_root.is_some() {
            WalkStatus::RootExit
        } else if stop.target_level.is_some_and(|n| self.level == n as i32) {
            WalkStatus::ReachedLevel
        } else if self.steps >= stop.max_steps {
            WalkStatus::StepBudget
        } else {
            WalkStatus::Running
        }
    }

    pub fn finish(mut self, horizon: u64, status: WalkStatus) -> Trajectory {
        self.take_trajectory(horizon, status)
    }

    /// Moves the recorded data out; the walk is left empty.
    pub fn take_trajectory(&mut self, horizon: u64, status: WalkStatus) -> Trajectory {
        let current = match self.pos {
            Position::RootParent => None,
            Position::At(h) => Some(self.tree.node_id(h)),
        };
        Trajectory {
            tree_seed: self.tree.master_seed(),
            walk_seed: self.walk_seed,
            level_profile: std::mem::take(&mut self.level_profile),
            current,
            tau: std::mem::take(&mut self.tau),
            fresh_nu: std::mem::take(&mut self.fresh_nu),
            local_time: std::mem::take(&mut self.local_time),
            root_parent_time: self.root_parent_time,
            exited_root: self.exited_root,
            horizon,
            status,
        }
    }
}

pub fn run(tree: &mut LazyTree, walk_seed: u64, stop: &StopRule) -> Trajectory {
    let mut walk = Walk::new(tree, walk_seed);
    let status = walk.advance(stop);
    walk.finish(stop.max_steps, status)
}

/// `p = i nu_min / (1 + i nu_min)`, the up-probability of the dominated
/// biased walk; an error unless `i nu_min > 1`.
pub fn coupling_bias(model: &ModelSpec) -> Result<f64> {
    let x = model.env.ess_inf() * model.offspring.nu_min() as f64;
    if x <= 1.0 {
        return Err(Error::Precondition(format!(
            "coupling needs i * nu_min > 1, got {}",
            num(x)
        )));
    }
    Ok(x / (1.0 + x))
}

/// Runs the tree walk for `steps` steps together with a biased walk `Y` on
/// the integers that shares its uniforms: `Y` steps up iff `u <= p`.
pub fn coupled_run_with_biased_walk(
    tree: &mut LazyTree,
    walk_seed: u64,
    steps: u64,
) -> Result<(Trajectory, Vec<i64>)> {
    let p = coupling_bias(tree.model())?;
    let mut walk = Walk::new(tree, walk_seed);
    let mut y = Vec::with_capacity(steps as usize + 1);
    y.push(0i64);
    let mut cur = 0i64;
    for _ in 0..steps {
        let u = walk.step();
        cur += if u <= p { 1 } else { -1 };
        y.push(cur);
    }
    Ok((walk.finish(steps, WalkStatus::StepBudget), y))
}

/// Where the environment of each attempt comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreePolicy {
    /// Fresh tree per attempt, seeded from `(tree_master, draw, attempt)`.
    Annealed { tree_master: u64 },
    /// One fixed tree; only the walk seed changes.
    Quenched { tree_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub level_cut: u32,
    pub horizon: u64,
    pub walk_master: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { level_cut: DEFAULT_LEVEL_CUT, horizon: DEFAULT_HORIZON, walk_master: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplerTelemetry {
    pub attempts: u64,
    pub accepted: u64,
    pub root_exits: u64,
    pub horizon_hits: u64,
    /// Attempts that reached the level cut but exited the root later on.
    pub late_returns: u64,
}

impl SamplerTelemetry {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }

    pub fn merge(&mut self, other: &SamplerTelemetry) {
        self.attempts += other.attempts;
        self.accepted += other.accepted;
        self.root_exits += other.root_exits;
        self.horizon_hits += other.horizon_hits;
        self.late_returns += other.late_returns;
    }

    pub fn check_starvation(&self) -> Result<()> {
        if self.attempts >= STARVATION_ATTEMPTS && self.acceptance_rate() < STARVATION_RATE {
            return Err(Error::AcceptanceStarved { accepted: self.accepted, attempts: self.attempts });
        }
        Ok(())
    }
}

/// Rejection sampler for the walk conditioned on never stepping from the
/// root to its parent, approximated by reaching `level_cut` first.
///
/// Draw `j`, attempt `a` uses seeds split from `(master, j, a)`, so the
/// accepted trajectory of draw `j` does not depend on any other draw.
#[derive(Debug, Clone)]
pub struct ConditionedSampler {
    model: ModelSpec,
    policy: TreePolicy,
    config: SamplerConfig,
    fixed_tree: Option<LazyTree>,
    telemetry: SamplerTelemetry,
}

impl ConditionedSampler {
    pub fn new(model: ModelSpec, policy: TreePolicy, config: SamplerConfig) -> Result<Self> {
        if config.level_cut < 1 {
            return Err(Error::InvalidConfig("level_cut must be at least 1".into()));
        }
        let report = classify(&model);
        if !report.transient || report.boundary.contains(&Criterion::Transience) {
            return Err(Error::Precondition("conditioned sampling needs a transient model".into()));
        }
        let fixed_tree = match policy {
            TreePolicy::Quenched { tree_seed } => Some(LazyTree::new(model.clone(), tree_seed)),
            TreePolicy::Annealed { .. } => None,
        };
        Ok(ConditionedSampler { model, policy, config, fixed_tree, telemetry: SamplerTelemetry::default() })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn telemetry(&self) -> &SamplerTelemetry {
        &self.telemetry
    }

    pub fn telemetry_mut(&mut self) -> &mut SamplerTelemetry {
        &mut self.telemetry
    }

    /// `(tree_seed, walk_seed)` of attempt `a` of draw `j`.
    pub fn seeds(&self, draw: u64, attempt: u64) -> (u64, u64) {
        let walk = StreamKey::new(self.config.walk_master).domain("walk-draw").split(draw).split(attempt).raw();
        let tree = match self.policy {
            TreePolicy::Annealed { tree_master } => {
                StreamKey::new(tree_master).domain("tree-draw").split(draw).split(attempt).raw()
            }
            TreePolicy::Quenched { tree_seed } => tree_seed,
        };
        (tree, walk)
    }

    /// Runs `f` on a fresh walk for attempt `a` of draw `j`.
    pub fn with_walk<R>(&mut self, draw: u64, attempt: u64, f: impl FnOnce(&mut Walk) -> R) -> R {
        let (tree_seed, walk_seed) = self.seeds(draw, attempt);
        match &mut self.fixed_tree {
            Some(tree) => {
                let mut walk = Walk::new(tree, walk_seed);
                f(&mut walk)
            }
            None => {
                let mut tree = LazyTree::new(self.model.clone(), tree_seed);
                let mut walk = Walk::new(&mut tree, walk_seed);
                f(&mut walk)
            }
        }
    }

    /// One attempt: stops at the level cut, at a root exit, or at the horizon.
    pub fn attempt(&mut self, draw: u64, attempt: u64) -> Trajectory {
        let stop = StopRule::level(self.config.level_cut, self.config.horizon).with_root_exit();
        let traj = self.with_walk(draw, attempt, |w| {
            let status = w.advance(&stop);
            w.take_trajectory(stop.max_steps, status)
        });
        self.telemetry.attempts += 1;
        match traj.status {
            WalkStatus::ReachedLevel => self.telemetry.accepted += 1,
            WalkStatus::RootExit => self.telemetry.root_exits += 1,
            _ => self.telemetry.horizon_hits += 1,
        }
        traj
    }

    /// Accepted trajectory of draw `j`.
    pub fn draw(&mut self, draw: u64) -> Result<Trajectory> {
        let mut a = 0;
        loop {
            let traj = self.attempt(draw, a);
            if traj.status == WalkStatus::ReachedLevel {
                return Ok(traj);
            }
            self.telemetry.check_starvation()?;
            a += 1;
        }
    }
}

impl ConditionedSampler {
    /// Accepted trajectory of draw `j`, continued after the level cut up to
    /// `total_steps` steps. Attempts that exit the root after passing the cut
    /// are rejected and counted as late returns.
    pub fn draw_extended(&mut self, draw: u64, total_steps: u64) -> Result<Trajectory> {
        let cut = StopRule::level(self.config.level_cut, total_steps.min(self.config.horizon)).with_root_exit();
        let rest = StopRule::steps(total_steps).with_root_exit();
        let mut a = 0;
        loop {
            let traj = self.with_walk(draw, a, |w| {
                let status = w.advance(&cut);
                if status != WalkStatus::ReachedLevel {
                    return w.take_trajectory(total_steps, status);
                }
                let status = match w.advance(&rest) {
                    WalkStatus::RootExit => WalkStatus::RootExit,
                    _ => WalkStatus::ReachedLevel,
                };
                w.take_trajectory(total_steps, status)
            });
            self.telemetry.attempts += 1;
            match traj.status {
                WalkStatus::ReachedLevel => {
                    self.telemetry.accepted += 1;
                    return Ok(traj);
                }
                WalkStatus::RootExit if traj.max_level() >= self.config.level_cut as i32 => {
                    self.telemetry.late_returns += 1
                }
                WalkStatus::RootExit => self.telemetry.root_exits += 1,
                _ => self.telemetry.horizon_hits += 1,
            }
            self.telemetry.check_starvation()?;
            a += 1;
        }
    }
}

/// Fraction of `attempts` single-attempt draws that reach `level_cut`
/// before exiting the root.
pub fn escape_rate(
    model: &ModelSpec,
    policy: TreePolicy,
    config: SamplerConfig,
    attempts: u64,
) -> Result<SamplerTelemetry> {
    let mut s = ConditionedSampler::new(model.clone(), policy, config)?;
    for j in 0..attempts {
        s.attempt(j, 0);
    }
    Ok(*s.telemetry())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EnvLaw, OffspringLaw};

    fn random_model() -> ModelSpec {
        ModelSpec::new(
            OffspringLaw::new(&[(1, 0.3), (2, 0.4), (3, 0.3)]).unwrap(),
            EnvLaw::new(&[(0.4, 0.5), (1.5, 0.5)]).unwrap(),
        )
    }

    #[test]
    fn levels_move_by_one_and_local_times_add_up() {
        let mut tree = LazyTree::new(random_model(), 3);
        let t = run(&mut tree, 9, &StopRule::steps(20_000));
        assert!(t.level_profile.windows(2).all(|w| (w[1] - w[0]).abs() == 1));
        let total: u64 = t.local_time.iter().sum::<u64>() + t.root_parent_time;
        assert_eq!(total, t.steps() + 1);
        assert!(t.tau.windows(2).all(|w| w[0] < w[1]));
        for (n, &k) in t.tau.iter().enumerate() {
            assert_eq!(t.level_profile[k as usize], n as i32);
            assert!(t.level_profile[..k as usize].iter().all(|&l| l < n as i32));
        }
    }

    #[test]
    fn stop_at_level() {
        let mut tree = LazyTree::new(random_model(), 4);
        let t = run(&mut tree, 1, &StopRule::level(12, u64::MAX));
        assert_eq!(t.status, WalkStatus::ReachedLevel);
        assert_eq!(t.final_level(), 12);
        assert_eq!(t.tau[12], t.steps());
        assert_eq!(t.current.as_ref().unwrap().generation(), 12);
    }

    #[test]
    fn deterministic() {
        let a = run(&mut LazyTree::new(random_model(), 5), 7, &StopRule::steps(5000));
        let b = run(&mut LazyTree::new(random_model(), 5), 7, &StopRule::steps(5000));
        assert_eq!(a, b);
        let c = run(&mut LazyTree::new(random_model(), 5).with_cache_cap(8), 7, &StopRule::steps(5000));
        assert_eq!(a.level_profile, c.level_profile);
    }

    #[test]
    fn root_exit_is_recorded() {
        let m = ModelSpec::constant(2, 0.3).unwrap();
        let mut tree = LazyTree::new(m, 1);
        let t = run(&mut tree, 2, &StopRule::steps(1000).with_root_exit());
        assert_eq!(t.status, WalkStatus::RootExit);
        let k = t.exited_root.unwrap() as usize;
        assert_eq!(t.level_profile[k], -1);
        assert_eq!(t.level_profile[k - 1], 0);
    }

    #[test]
    fn coupling_rejects_weak_bias() {
        let mut tree = LazyTree::new(random_model(), 1);
        let err = coupled_run_with_biased_walk(&mut tree, 1, 10).unwrap_err();
        assert_eq!(err.kind(), "precondition");
    }

    #[test]
    fn recurrent_model_is_refused() {
        let m = ModelSpec::constant(2, 0.4).unwrap();
        let err = ConditionedSampler::new(m, TreePolicy::Annealed { tree_master: 1 }, SamplerConfig::default())
            .unwrap_err();
        assert_eq!(err.kind(), "precondition");
    }

    #[test]
    fn sampler_draws_are_independent_of_order() {
        let m = random_model();
        let cfg = SamplerConfig { level_cut: 8, horizon: 100_000, walk_master: 3 };
        let mut s1 = ConditionedSampler::new(m.clone(), TreePolicy::Annealed { tree_master: 2 }, cfg).unwrap();
        let mut s2 = s1.clone();
        let a: Vec<_> = (0..5).map(|j| s1.draw(j).unwrap()).collect();
        let b4 = s2.draw(4).unwrap();
        assert_eq!(a[4], b4);
        assert!(a.iter().all(|t| t.final_level() == 8 && t.exited_root.is_none()));
    }
}
