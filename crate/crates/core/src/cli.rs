//! Command-line experiments: config parsing, replica fan-out and artifacts.
//!
//! Every subcommand writes its CSV/JSON files into `--out`, then a
//! `manifest.json` with the SHA-256 of each of them, then `metadata.json`
//! with the wall-clock timestamp. Only `metadata.json` varies between
//! reruns with identical seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmt::num;
use crate::model::{classify, rate_at_one, EnvLaw, ModelSpec, OffspringLaw, PsiMode};
use crate::quenched_exact::rate_curve;
use crate::regen::{
    compare_tails_in, find_regenerations, gamma1_samples, speed_estimate, survival_curve, Gamma1Sample,
    RegenRecord, DEFAULT_FIT_DECADES,
};
use crate::rng::draw_seed;
use crate::tree_env::LazyTree;
use crate::walker::{run, ConditionedSampler, SamplerConfig, SamplerTelemetry, StopRule, TreePolicy};

pub const DEFAULT_HORIZON: u64 = 100_000;
pub const DEFAULT_LEVEL_CUT: u32 = 50;
pub const DEFAULT_MARGIN: u32 = 25;
pub const DEFAULT_DRAWS: u64 = 1000;
pub const DEFAULT_PSI_SAMPLES: usize = 100_000;

#[derive(Debug, Parser)]
#[command(name = "gwrwre", version, about = "Random walks in random environment on Galton-Watson trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transience, speed and slowdown regime, and the rates at b = 1.
    Criteria(CommonArgs),
    /// Plain walks; one summary row per walk.
    Simulate(CommonArgs),
    /// Regeneration records and the speed estimate.
    Regen(CommonArgs),
    /// Survival curve of the first regeneration time and tail fits.
    Tails(CommonArgs),
    /// Quenched-path rate curve on an (h, k) grid.
    Rates(CommonArgs),
}

impl Command {
    fn parts(&self) -> (ExperimentKind, &CommonArgs) {
        match self {
            Command::Criteria(a) => (ExperimentKind::Criteria, a),
            Command::Simulate(a) => (ExperimentKind::Simulate, a),
            Command::Regen(a) => (ExperimentKind::Regen, a),
            Command::Tails(a) => (ExperimentKind::Tails, a),
            Command::Rates(a) => (ExperimentKind::Rates, a),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model/config file (`key = value` lines).
    #[arg(long)]
    pub model: PathBuf,
    /// Master seed for environments.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Master seed for walks.
    #[arg(long)]
    pub walk_seed: Option<u64>,
    #[arg(long)]
    pub replicas: Option<u32>,
    /// Step budget per walk.
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub level_cut: Option<u32>,
    #[arg(long)]
    pub margin: Option<u32>,
    /// Number of walks (draws).
    #[arg(long)]
    pub draws: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Criteria,
    Simulate,
    Regen,
    Tails,
    Rates,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Criteria => "criteria",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Regen => "regen",
            ExperimentKind::Tails => "tails",
            ExperimentKind::Rates => "rates",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model_path: PathBuf,
    pub model: ModelSpec,
    pub seed: u64,
    pub walk_seed: u64,
    pub replicas: u32,
    pub horizon: u64,
    pub level_cut: u32,
    pub margin: u32,
    pub draws: u64,
    /// Fixed tree (seeded by `seed`) instead of a fresh tree per walk.
    pub quenched: bool,
    /// Levels whose hitting times go into the simulate output.
    pub n_grid: Vec<u32>,
    pub h_grid: Vec<f64>,
    pub k_grid: Vec<u32>,
    pub b: f64,
    /// Trees per grid point for `rates`.
    pub samples: usize,
    pub fit_decades: f64,
    pub per_decade: u32,
    pub psi_samples: usize,
    pub out: PathBuf,
}

/// Raw `key = value` pairs of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "offspring",
    "env",
    "seed",
    "walk_seed",
    "replicas",
    "horizon",
    "level_cut",
    "margin",
    "draws",
    "tree_policy",
    "n_grid",
    "h_grid",
    "k_grid",
    "b",
    "samples",
    "fit_decades",
    "per_decade",
    "psi_samples",
];

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::InvalidConfig(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    s.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {s:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// The model given by the `offspring` and `env` atom lists.
    pub fn model(&self) -> Result<ModelSpec> {
        let offspring = self
            .entries
            .get("offspring")
            .ok_or_else(|| Error::InvalidConfig("missing key offspring".into()))?;
        let env = self.entries.get("env").ok_or_else(|| Error::InvalidConfig("missing key env".into()))?;
        let off_atoms: Vec<(u32, f64)> = parse_atoms("offspring", offspring)?;
        let env_atoms: Vec<(f64, f64)> = parse_atoms("env", env)?;
        Ok(ModelSpec::new(OffspringLaw::new(&off_atoms)?, EnvLaw::new(&env_atoms)?))
    }
}

/// `x:w, x:w, ...`
fn parse_atoms<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<(T, f64)>> {
    text.split(',')
        .map(|atom| {
            let atom = atom.trim();
            let (x, w) = atom
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("{key}: atom {atom:?} is not value:weight")))?;
            let x = x.trim().parse().map_err(|_| Error::InvalidConfig(format!("{key}: bad value in {atom:?}")))?;
            let w = w.trim().parse().map_err(|_| Error::InvalidConfig(format!("{key}: bad weight in {atom:?}")))?;
            Ok((x, w))
        })
        .collect()
}

/// Serializes a model in the config-file format.
pub fn model_to_config(model: &ModelSpec) -> String {
    let off: Vec<String> = model.offspring.atoms().iter().map(|(k, p)| format!("{k}:{}", num(*p))).collect();
    let env: Vec<String> = model.env.atoms().iter().map(|(a, w)| format!("{}:{}", num(*a), num(*w))).collect();
    format!("offspring = {}\nenv = {}\n", off.join(", "), env.join(", "))
}

fn positive<T: PartialOrd + Default + std::fmt::Display>(name: &str, v: T) -> Result<T> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

fn ascending<T: PartialOrd + Copy>(name: &str, v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!("{name} must be nonempty and strictly ascending")));
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Config file values, overridden by command-line flags.
    pub fn resolve(kind: ExperimentKind, args: &CommonArgs) -> Result<Self> {
        let file = ConfigFile::read(&args.model)?;
        let model = file.model()?;
        let seed = args.seed.or(file.get("seed")?).unwrap_or(0);
        let tree_policy: String = file.get("tree_policy")?.unwrap_or_else(|| "annealed".into());
        let quenched = match tree_policy.as_str() {
            "annealed" => false,
            "quenched" => true,
            other => return Err(Error::InvalidConfig(format!("tree_policy must be annealed or quenched, got {other:?}"))),
        };
        let fit_decades: f64 = file.get("fit_decades")?.unwrap_or(DEFAULT_FIT_DECADES);
        if fit_decades.is_nan() || fit_decades <= 0.0 {
            return Err(Error::InvalidConfig("fit_decades must be positive".into()));
        }
        let b: f64 = file.get("b")?.unwrap_or(1.0);
        if b.is_nan() || b < 1.0 {
            return Err(Error::InvalidConfig(format!("b must be at least 1, got {b}")));
        }
        Ok(ExperimentConfig {
            kind,
            model_path: args.model.clone(),
            model,
            seed,
            walk_seed: args.walk_seed.or(file.get("walk_seed")?).unwrap_or(seed),
            replicas: positive("replicas", args.replicas.or(file.get("replicas")?).unwrap_or(1))?,
            horizon: positive("horizon", args.horizon.or(file.get("horizon")?).unwrap_or(DEFAULT_HORIZON))?,
            level_cut: positive("level_cut", args.level_cut.or(file.get("level_cut")?).unwrap_or(DEFAULT_LEVEL_CUT))?,
            margin: positive("margin", args.margin.or(file.get("margin")?).unwrap_or(DEFAULT_MARGIN))?,
            draws: positive("draws", args.draws.or(file.get("draws")?).unwrap_or(DEFAULT_DRAWS))?,
            quenched,
            n_grid: ascending("n_grid", file.list("n_grid")?.unwrap_or_else(|| vec![1, 5, 10, 20, 50]))?,
            h_grid: ascending("h_grid", file.list("h_grid")?.unwrap_or_else(default_h_grid))?,
            k_grid: ascending("k_grid", file.list("k_grid")?.unwrap_or_else(|| vec![2, 4, 6]))?,
            b,
            samples: positive("samples", file.get("samples")?.unwrap_or(200))?,
            fit_decades,
            per_decade: positive("per_decade", file.get("per_decade")?.unwrap_or(10))?,
            psi_samples: positive("psi_samples", file.get("psi_samples")?.unwrap_or(DEFAULT_PSI_SAMPLES))?,
            out: args.out.clone(),
        })
    }

    fn policy(&self) -> TreePolicy {
        if self.quenched {
            TreePolicy::Quenched { tree_seed: self.seed }
        } else {
            TreePolicy::Annealed { tree_master: self.seed }
        }
    }

    fn sampler(&self) -> Result<ConditionedSampler> {
        let config = SamplerConfig { level_cut: self.level_cut, horizon: self.horizon, walk_master: self.walk_seed };
        ConditionedSampler::new(self.model.clone(), self.policy(), config)
    }

    /// Draw indices of replica `r`: a contiguous block of `0..draws`.
    pub fn replica_range(&self, r: u32) -> std::ops::Range<u64> {
        let (n, reps) = (self.draws, self.replicas as u64);
        let lo = n * r as u64 / reps;
        let hi = n * (r as u64 + 1) / reps;
        lo..hi
    }
}

fn default_h_grid() -> Vec<f64> {
    (1..=40).map(|i| i as f64 * 0.1).collect()
}

/// Runs replicas in parallel and returns their results in replica order.
fn fan_out<T: Send>(cfg: &ExperimentConfig, f: impl Fn(std::ops::Range<u64>) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..cfg.replicas)
        .into_par_iter()
        .map(|r| f(cfg.replica_range(r)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// JSON number with 12 significant digits; non-finite values become strings.
fn jnum(x: f64) -> Value {
    let s = num(x);
    if x.is_finite() {
        let v: f64 = s.parse().expect("formatted number parses");
        serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::String(s))
    } else {
        Value::String(s)
    }
}

#[derive(Debug, Default)]
struct Record(Map<String, Value>);

impl Record {
    fn f(&mut self, k: &str, x: f64) -> &mut Self {
        self.0.insert(k.into(), jnum(x));
        self
    }

    fn u(&mut self, k: &str, x: u64) -> &mut Self {
        self.0.insert(k.into(), Value::from(x));
        self
    }

    fn b(&mut self, k: &str, x: bool) -> &mut Self {
        self.0.insert(k.into(), Value::from(x));
        self
    }

    fn s(&mut self, k: &str, x: &str) -> &mut Self {
        self.0.insert(k.into(), Value::from(x));
        self
    }

    fn telemetry(&mut self, t: &SamplerTelemetry) -> &mut Self {
        self.u("attempts", t.attempts)
            .u("accepted", t.accepted)
            .u("root_exits", t.root_exits)
            .u("horizon_hits", t.horizon_hits)
            .u("late_returns", t.late_returns)
            .f("acceptance_rate", t.acceptance_rate())
    }

    fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.0).expect("json");
        s.push('\n');
        s
    }
}

/// Files written by one experiment, in write order.
#[derive(Debug, Default)]
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Artifacts { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: String) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, &body).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.files.push((name.to_string(), body));
        Ok(())
    }

    /// `manifest.json` over every file written so far.
    fn manifest(&self) -> String {
        let mut files: Vec<Value> = self
            .files
            .iter()
            .map(|(name, body)| {
                let mut m = Map::new();
                m.insert("name".into(), Value::from(name.as_str()));
                m.insert("bytes".into(), Value::from(body.len() as u64));
                m.insert("sha256".into(), Value::from(sha256_hex(body.as_bytes())));
                Value::Object(m)
            })
            .collect();
        files.sort_by(|a, b| a["name"].as_str().cmp(&b["name"].as_str()));
        let mut top = Map::new();
        top.insert("files".into(), Value::Array(files));
        let mut s = serde_json::to_string_pretty(&top).expect("json");
        s.push('\n');
        s
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn common_record(cfg: &ExperimentConfig) -> Record {
    let mut r = Record::default();
    r.s("experiment", cfg.kind.as_str())
        .u("seed", cfg.seed)
        .u("walk_seed", cfg.walk_seed);
    r
}

fn run_criteria(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let rep = classify(&cfg.model);
    let rates = match rate_at_one(&cfg.model, PsiMode::default()) {
        Err(Error::BudgetExceeded { .. }) => {
            rate_at_one(&cfg.model, PsiMode::MonteCarlo { samples: cfg.psi_samples, seed: cfg.seed })?
        }
        other => other?,
    };
    let mut r = common_record(cfg);
    let boundary: Vec<&str> = rep.boundary.iter().map(|c| c.as_str()).collect();
    r.b("transient", rep.transient)
        .f("lambda", rep.lambda)
        .b("speed_positive", rep.speed_positive)
        .s("slowdown_regime", rep.slowdown_regime.as_str())
        .f("min_moment", rep.min_moment)
        .f("min_moment_at", rep.min_moment_at)
        .f("inverse_mean", rep.inverse_mean)
        .s("boundary", &boundary.join(";"))
        .f("psi1", rates.psi1)
        .f("dpsi1", rates.dpsi1)
        .f("ia1", rates.ia1)
        .f("iq1", rates.iq1)
        .f("theta_star", rates.theta_star)
        .b("coincide", rates.coincide)
        .b("rates_boundary", rates.boundary);
    art.write("criteria.json", r.to_text())
}

fn run_simulate(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let stop = StopRule::level(cfg.level_cut, cfg.horizon);
    let blocks = fan_out(cfg, |range| {
        let mut fixed = cfg.quenched.then(|| LazyTree::new(cfg.model.clone(), cfg.seed));
        let mut rows = Vec::new();
        let (mut reached, mut exited) = (0u64, 0u64);
        for j in range {
            let walk_seed = draw_seed(cfg.walk_seed, "sim-walk", j);
            let traj = match fixed.as_mut() {
                Some(tree) => run(tree, walk_seed, &stop),
                None => run(&mut LazyTree::new(cfg.model.clone(), draw_seed(cfg.seed, "sim-tree", j)), walk_seed, &stop),
            };
            reached += (traj.max_level() >= cfg.level_cut as i32) as u64;
            exited += traj.exited_root.is_some() as u64;
            rows.push(format!("{j},{}\n", traj.summary_row(&cfg.n_grid)));
        }
        Ok((rows, reached, exited))
    })?;
    let mut csv = format!("draw,{}\n", crate::walker::Trajectory::summary_header(&cfg.n_grid));
    let (mut reached, mut exited) = (0, 0);
    for (rows, r, e) in blocks {
        rows.iter().for_each(|row| csv.push_str(row));
        reached += r;
        exited += e;
    }
    art.write("trajectories.csv", csv)?;
    let mut r = common_record(cfg);
    r.u("draws", cfg.draws)
        .u("horizon", cfg.horizon)
        .u("level_cut", cfg.level_cut as u64)
        .u("reached_level_cut", reached)
        .u("exited_root", exited);
    art.write("simulate.json", r.to_text())
}

fn run_regen(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let blocks = fan_out(cfg, |range| {
        let mut sampler = cfg.sampler()?;
        let mut recs: Vec<(u64, RegenRecord)> = Vec::new();
        for j in range {
            let traj = sampler.draw_extended(j, cfg.horizon)?;
            recs.extend(find_regenerations(&traj, cfg.margin).into_iter().map(|r| (j, r)));
        }
        Ok((recs, *sampler.telemetry()))
    })?;
    let mut tel = SamplerTelemetry::default();
    let mut csv = String::from("draw,time_increment,level_increment,censored\n");
    let mut all = Vec::new();
    for (recs, t) in blocks {
        tel.merge(&t);
        for (j, r) in recs {
            csv.push_str(&format!("{j},{},{},{}\n", r.time_increment, r.level_increment, r.censored as u8));
            all.push(r);
        }
    }
    art.write("records.csv", csv)?;
    let est = speed_estimate(&all)?;
    let mut speed = String::from("v_hat,stderr,ci_lo,ci_hi,records,attempts,accepted,acceptance_rate\n");
    speed.push_str(&format!(
        "{},{},{},{},{},{},{},{}\n",
        num(est.v_hat),
        num(est.stderr),
        num(est.ci95.0),
        num(est.ci95.1),
        est.records,
        tel.attempts,
        tel.accepted,
        num(tel.acceptance_rate())
    ));
    art.write("speed.csv", speed)?;
    let mut r = common_record(cfg);
    r.u("draws", cfg.draws)
        .u("horizon", cfg.horizon)
        .u("level_cut", cfg.level_cut as u64)
        .u("margin", cfg.margin as u64)
        .f("v_hat", est.v_hat)
        .f("stderr", est.stderr)
        .u("records", est.records as u64)
        .telemetry(&tel);
    art.write("speed.json", r.to_text())
}

fn run_tails(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let blocks = fan_out(cfg, |range| {
        let mut sampler = cfg.sampler()?;
        let first = range.start;
        gamma1_samples(&mut sampler, first, range.end - first, cfg.margin)
    })?;
    let mut tel = SamplerTelemetry::default();
    let mut samples: Vec<Gamma1Sample> = Vec::new();
    for (s, t) in blocks {
        tel.merge(&t);
        samples.extend(s);
    }
    let mut csv = String::from("draw,time,censored\n");
    for (j, s) in samples.iter().enumerate() {
        csv.push_str(&format!("{j},{},{}\n", s.time, s.censored as u8));
    }
    art.write("gamma1.csv", csv)?;
    let curve = survival_curve(&samples, cfg.per_decade);
    art.write("survival.csv", curve.to_csv())?;
    let mut r = common_record(cfg);
    r.u("draws", cfg.draws)
        .u("horizon", cfg.horizon)
        .u("level_cut", cfg.level_cut as u64)
        .u("margin", cfg.margin as u64)
        .f("fit_decades", cfg.fit_decades)
        .u("censored", samples.iter().filter(|s| s.censored).count() as u64)
        .telemetry(&tel);
    match compare_tails_in(&curve, cfg.fit_decades) {
        Ok(cmp) => {
            r.f("polynomial_exponent", cmp.polynomial.exponent)
                .f("polynomial_stderr", cmp.polynomial.stderr)
                .f("polynomial_residual", cmp.polynomial.residual)
                .f("stretched_exponent", cmp.stretched.exponent)
                .f("stretched_stderr", cmp.stretched.stderr)
                .f("stretched_residual", cmp.stretched.residual)
                .b("stretched_valid", cmp.stretched.valid)
                .f("exponential_slope", cmp.exponential.slope)
                .f("exponential_r2", cmp.exponential.r2)
                .u("window_lo", cmp.polynomial.fit_window.0)
                .u("window_hi", cmp.polynomial.fit_window.1)
                .u("window_points", cmp.polynomial.points as u64)
                .s("preferred", cmp.preferred.as_str());
        }
        Err(e) => {
            r.s("fit_error", &e.to_string());
        }
    }
    art.write("tail_fit.json", r.to_text())
}

fn run_rates(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let curve = rate_curve(&cfg.model, cfg.b, &cfg.h_grid, &cfg.k_grid, cfg.samples, cfg.seed)?;
    art.write("rates.csv", curve.to_csv())?;
    let mut e = String::from("h,ln_e,stderr\n");
    for &(h, v, se) in &curve.e_of_h {
        e.push_str(&format!("{},{},{}\n", num(h), num(v), num(se)));
    }
    art.write("e_of_h.csv", e)?;
    let mut r = common_record(cfg);
    r.f("b", curve.b)
        .u("samples", cfg.samples as u64)
        .f("ja", curve.ja)
        .f("ja_stderr", curve.ja_stderr)
        .f("jq", curve.jq)
        .f("jq_stderr", curve.jq_stderr);
    match curve.h_c {
        Some(h) => r.f("h_c", h),
        None => r.s("h_c", "none"),
    };
    art.write("rates.json", r.to_text())
}

/// Runs one experiment and writes its artifacts, manifest and metadata.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let mut art = Artifacts::new(&cfg.out)?;
    art.write("model.cfg", model_to_config(&cfg.model))?;
    match cfg.kind {
        ExperimentKind::Criteria => run_criteria(cfg, &mut art)?,
        ExperimentKind::Simulate => run_simulate(cfg, &mut art)?,
        ExperimentKind::Regen => run_regen(cfg, &mut art)?,
        ExperimentKind::Tails => run_tails(cfg, &mut art)?,
        ExperimentKind::Rates => run_rates(cfg, &mut art)?,
    }
    let manifest = art.manifest();
    fs::write(cfg.out.join("manifest.json"), manifest)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut meta = Record::default();
    meta.u("unix_time", stamp)
        .s("version", env!("CARGO_PKG_VERSION"))
        .s("experiment", cfg.kind.as_str())
        .u("replicas", cfg.replicas as u64)
        .s("model_path", &cfg.model_path.display().to_string());
    fs::write(cfg.out.join("metadata.json"), meta.to_text())?;
    Ok(art)
}

/// One-line machine-parsable error.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error kind={} message=\"{msg}\"", e.kind())
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line(&Error::InvalidConfig(first)));
            return 2;
        }
    };
    let (kind, args) = cli.command.parts();
    let result = ExperimentConfig::resolve(kind, args).and_then(|cfg| run_experiment(&cfg).map(|a| (cfg, a)));
    match result {
        Ok((cfg, art)) => {
            println!("wrote {} files to {}", art.names().len() + 2, cfg.out.display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
