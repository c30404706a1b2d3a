//! Acceptance suite: twelve end-to-end checks, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are
//! always printed; exits nonzero if any check fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use gwrwre::cli::{run_experiment, CommonArgs, ExperimentConfig, ExperimentKind};
use gwrwre::line_walk::{hitting_bounds, LineEnv};
use gwrwre::model::{classify, lambda, rate_at_one, EnvLaw, ModelSpec, OffspringLaw, PsiMode};
use gwrwre::quenched_exact::{beta, en_hb, passage_distribution, rate_curve, ZERO_STDERR_FLOOR};
use gwrwre::regen::{
    collect_records, compare_tails_in, exponential_fit, fit_window, gamma1_samples, speed_estimate, survival_curve,
    TailRegime,
};
use gwrwre::rng::{draw_seed, StreamKey};
use gwrwre::tree_env::{LazyTree, NodeId};
use gwrwre::walker::{
    coupled_run_with_biased_walk, escape_rate, run, ConditionedSampler, SamplerConfig, StopRule, TreePolicy,
    WalkStatus,
};
use rand::Rng;
use statrs::distribution::{DiscreteCDF, Poisson};

type Check = Result<String, String>;

fn model(off: &[(u32, f64)], env: &[(f64, f64)]) -> ModelSpec {
    ModelSpec::new(OffspringLaw::new(off).unwrap(), EnvLaw::new(env).unwrap())
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn annealed(m: &ModelSpec, level_cut: u32, horizon: u64, seed: u64) -> ConditionedSampler {
    let cfg = SamplerConfig { level_cut, horizon, walk_master: seed };
    ConditionedSampler::new(m.clone(), TreePolicy::Annealed { tree_master: seed.wrapping_add(1) }, cfg).unwrap()
}

fn c1_example_criteria() -> Check {
    let m = ModelSpec::two_point_binary_example();
    let rep = classify(&m);
    let r = rate_at_one(&m, PsiMode::default()).map_err(|e| e.to_string())?;
    ensure(
        rep.transient && !r.coincide && r.dpsi1 > r.psi1,
        format!("transient={} coincide={} psi'(1)={:.6} psi(1)={:.6}", rep.transient, r.coincide, r.dpsi1, r.psi1),
    )
}

fn c2_constant_speed() -> Check {
    let (b, l) = (2u32, 2.0f64);
    let m = ModelSpec::constant(b, l).unwrap();
    let bl = b as f64 * l;
    let target = (bl - 1.0) / (bl + 1.0);
    let mut s = annealed(&m, 20, 100_000, 21);
    let recs = collect_records(&mut s, 0, 40, 5_000, 25).map_err(|e| e.to_string())?;
    let e = speed_estimate(&recs).map_err(|e| e.to_string())?;
    let rel = (e.v_hat - target).abs() / target;
    ensure(
        e.records >= 10_000 && rel < 0.02,
        format!("v_hat={:.5} target={:.5} rel_err={:.4} records={}", e.v_hat, target, rel, e.records),
    )
}

fn c3_beta_and_acceptance() -> Check {
    let (b, l) = (2u32, 2.0f64);
    let m = ModelSpec::constant(b, l).unwrap();
    let target = 1.0 - 1.0 / (b as f64 * l);
    let tree = LazyTree::new(m.clone(), 0).enumerate_to_depth(18, 1_000_000).map_err(|e| e.to_string())?;
    let sched: Vec<u32> = (1..=18).collect();
    let be = beta(&tree, &NodeId::root(), &sched, 1e-10).map_err(|e| e.to_string())?;
    let attempts = 100_000u64;
    let mut rates = Vec::new();
    for cut in [10u32, 25, 50] {
        let cfg = SamplerConfig { level_cut: cut, horizon: 1_000_000, walk_master: 33 };
        let t = escape_rate(&m, TreePolicy::Annealed { tree_master: 34 }, cfg, attempts).map_err(|e| e.to_string())?;
        rates.push((cut, t.accepted, t.acceptance_rate()));
    }
    let se = (target * (1.0 - target) / attempts as f64).sqrt();
    let monotone = rates.windows(2).all(|w| w[1].1 <= w[0].1);
    let close = rates.iter().all(|r| (r.2 - target).abs() < 4.0 * se);
    ensure(
        be.gap < 1e-10 && (be.value - target).abs() < 1e-10 && monotone && close,
        format!(
            "beta={:.12} gap={:.1e} target={target}; acceptance {:?}",
            be.value,
            be.gap,
            rates.iter().map(|r| (r.0, (r.2 * 1e5).round() / 1e5)).collect::<Vec<_>>()
        ),
    )
}

/// Two-sided 4-sigma test for a binomial count; exact Poisson tails when the
/// expected count is below 10.
fn bin_ok(observed: u64, n: u64, p: f64) -> bool {
    const TAIL: f64 = 3.167e-5; // one side of the two-sided normal 4-sigma level
    if p == 0.0 {
        return observed == 0;
    }
    let e = n as f64 * p;
    if e < 10.0 {
        let pois = Poisson::new(e).unwrap();
        if (observed as f64) > e {
            1.0 - pois.cdf(observed - 1) >= TAIL
        } else {
            pois.cdf(observed) >= TAIL
        }
    } else {
        (observed as f64 - e).abs() < 4.0 * (e * (1.0 - p)).sqrt()
    }
}

fn c4_passage_vs_simulation() -> Check {
    let m = model(&[(1, 0.2), (2, 0.5), (3, 0.3)], &[(0.5, 0.5), (1.8, 0.5)]);
    let (depth, t_max) = (5u32, 25u32);
    let mut lazy = LazyTree::new(m, 4);
    let tree = lazy.enumerate_to_depth(depth, 1_000_000).map_err(|e| e.to_string())?;
    let dist = passage_distribution(&tree, t_max).map_err(|e| e.to_string())?;
    let leaf_pos: HashMap<usize, usize> = dist.leaves.iter().enumerate().map(|(i, &j)| (j, i)).collect();
    let walks = 1_000_000u64;
    let mut counts = vec![vec![0u64; t_max as usize + 1]; dist.leaves.len()];
    let stop = StopRule::level(depth, t_max as u64).with_root_exit();
    for s in 0..walks {
        let traj = run(&mut lazy, draw_seed(77, "passage-walk", s), &stop);
        if traj.status == WalkStatus::ReachedLevel {
            let id = traj.current.as_ref().expect("walk ended on a vertex");
            let j = tree.find(id).expect("leaf in truncation");
            counts[leaf_pos[&j]][traj.steps() as usize] += 1;
        }
    }
    let mut bad = 0;
    let mut bins = 0;
    for (i, row) in counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            bins += 1;
            if !bin_ok(c, walks, dist.arrivals[i][t]) {
                bad += 1;
            }
        }
    }
    ensure(
        bad == 0 && dist.max_mass_defect < 1e-10,
        format!("{bins} bins over {} leaves, {bad} outside 4 sigma; max mass defect {:.1e}", dist.leaves.len(), dist.max_mass_defect),
    )
}

fn c5_psi_identity() -> Check {
    let m = ModelSpec::two_point_binary_example();
    let psi1 = rate_at_one(&m, PsiMode::default()).map_err(|e| e.to_string())?.psi1;
    let samples = 1_000_000u64;
    let mut out = Vec::new();
    let mut ok = true;
    for n in [4u32, 6, 8] {
        let mut hits = 0u64;
        for s in 0..samples {
            let mut tree = LazyTree::new(m.clone(), draw_seed(50 + n as u64, "psi-tree", s));
            let traj = run(&mut tree, draw_seed(60 + n as u64, "psi-walk", s), &StopRule::steps(n as u64));
            hits += (traj.final_level() == n as i32) as u64;
        }
        let p = (n as f64 * psi1).exp();
        let phat = hits as f64 / samples as f64;
        let se = (p * (1.0 - p) / samples as f64).sqrt();
        ok &= (phat - p).abs() < 4.0 * se;
        out.push(format!("n={n}: {phat:.3e} vs {p:.3e} ({:.2} sigma)", (phat - p) / se));
    }
    ensure(ok, out.join("; "))
}

fn c6_polynomial_tail() -> Check {
    let a = 6.513;
    let m = model(&[(1, 0.3), (3, 0.7)], &[(a, 0.5), (1.0 / a, 0.5)]);
    let big_lambda = lambda(&m);
    let mut s = annealed(&m, 30, 1_000_000, 66);
    let draws = 1_000_000u64;
    let (samples, tel) = gamma1_samples(&mut s, 0, draws, 25).map_err(|e| e.to_string())?;
    let curve = survival_curve(&samples, 10);
    let cmp = compare_tails_in(&curve, 1.0).map_err(|e| e.to_string())?;
    let rel = (cmp.polynomial.exponent + big_lambda).abs() / big_lambda;
    ensure(
        tel.accepted >= 100_000 && rel <= 0.25 && cmp.preferred == TailRegime::Polynomial,
        format!(
            "Lambda={big_lambda:.4} exponent={:.4} rel_err={rel:.3} window={:?} residual poly={:.3} stretched={:.3} accepted={}",
            cmp.polynomial.exponent, cmp.polynomial.fit_window, cmp.polynomial.residual, cmp.stretched.residual, tel.accepted
        ),
    )
}

fn c7_exponential_tail() -> Check {
    let m = model(&[(2, 1.0)], &[(0.6, 0.5), (2.0, 0.5)]);
    let mut s = annealed(&m, 20, 1_000_000, 77);
    let (samples, _) = gamma1_samples(&mut s, 0, 300_000, 25).map_err(|e| e.to_string())?;
    let curve = survival_curve(&samples, 10);
    let window = fit_window(&curve, 1.0).map_err(|e| e.to_string())?;
    let fit = exponential_fit(&window);
    ensure(
        fit.r2 > 0.95,
        format!(
            "R^2={:.4} slope={:.4} window=({}, {}) points={}",
            fit.r2,
            fit.slope,
            window[0].n,
            window.last().unwrap().n,
            window.len()
        ),
    )
}

fn c8_coupling() -> Check {
    let m = model(&[(2, 1.0)], &[(0.6, 0.5), (2.0, 0.5)]);
    let mut violations = 0u64;
    let mut checked = 0u64;
    for r in 0..1_000u64 {
        let mut tree = LazyTree::new(m.clone(), draw_seed(8, "coupling-tree", r));
        let (traj, y) = coupled_run_with_biased_walk(&mut tree, draw_seed(8, "coupling-walk", r), 10_000)
            .map_err(|e| e.to_string())?;
        let stop = traj.exited_root.map_or(traj.level_profile.len() - 1, |t| t as usize - 1);
        for k in 0..stop {
            checked += 1;
            let dx = (traj.level_profile[k + 1] - traj.level_profile[k]) as i64;
            violations += (dx < y[k + 1] - y[k]) as u64;
        }
    }
    ensure(violations == 0, format!("{checked} steps checked, {violations} violations"))
}

fn c9_supermultiplicativity() -> Check {
    let models = [
        model(&[(1, 0.5), (2, 0.5)], &[(0.5, 0.5), (2.0, 0.5)]),
        model(&[(2, 1.0)], &[(0.3, 0.5), (1.5, 0.5)]),
        model(&[(2, 0.5), (3, 0.5)], &[(0.2, 0.3), (1.0, 0.4), (4.0, 0.3)]),
    ];
    let (b, trees) = (1.5, 2_000usize);
    let mut ok = true;
    let mut out = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        let h = -rate_at_one(m, PsiMode::default()).map_err(|e| e.to_string())?.psi1 + 0.8;
        let mut ln_e = HashMap::new();
        for n in [3u32, 4, 6, 7] {
            let e = en_hb(m, h, b, n, trees, draw_seed(9, "super", (mi as u64) << 8 | n as u64))
                .map_err(|e| e.to_string())?;
            let se = (e.stderr / e.mean).max(ZERO_STDERR_FLOOR);
            ln_e.insert(n, (e.mean.ln(), se));
        }
        for (p, q) in [(3u32, 3u32), (3, 4)] {
            let (a, sa) = ln_e[&(p + q)];
            let (x, sx) = ln_e[&p];
            let (y, sy) = ln_e[&q];
            let comb = (sa * sa + sx * sx + sy * sy).sqrt();
            let margin = a - x - y;
            ok &= margin >= -2.0 * comb;
            out.push(format!("m{mi} ({p},{q}): {margin:.3} vs -2*{comb:.3}"));
        }
    }
    ensure(ok, out.join("; "))
}

fn c10_rate_curve_at_one() -> Check {
    let m = ModelSpec::constant(2, 1.0).unwrap();
    let psi1 = rate_at_one(&m, PsiMode::default()).map_err(|e| e.to_string())?.psi1;
    let hs: Vec<f64> = (1..=60).map(|i| i as f64 * 0.05).collect();
    let c = rate_curve(&m, 1.0, &hs, &[2, 3, 4, 5, 6], 200, 10).map_err(|e| e.to_string())?;
    let se = c.ja_stderr.max(ZERO_STDERR_FLOOR);
    let err = (-c.ja - psi1).abs();
    ensure(err <= 3.0 * se, format!("-Ja={:.12} psi(1)={psi1:.12} |diff|={err:.1e} se={se:.1e}", -c.ja))
}

fn c11_line_sandwich() -> Check {
    let key = StreamKey::new(11).domain("line-sandwich");
    let mut checked = 0u64;
    let mut failures = 0u64;
    let mut strict_failures = 0u64;
    for e in 0..1_000u64 {
        let mut rng = key.split(e).rng();
        let len = rng.random_range(1..=50usize);
        let a: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
        let env = LineEnv::new(a).map_err(|e| e.to_string())?;
        for k in 1..=len {
            for l in 0..k {
                let hb = hitting_bounds(&env, l, k).map_err(|e| e.to_string())?;
                checked += 1;
                failures += !hb.holds(1e-12) as u64;
                strict_failures += !hb.holds(0.0) as u64;
            }
        }
    }
    ensure(
        failures == 0,
        format!("{checked} (l, k) pairs on 1000 environments, {failures} violations ({strict_failures} without rounding slack)"),
    )
}

fn c12_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model_path = dir.path().join("m.cfg");
    std::fs::write(
        &model_path,
        "offspring = 1:0.2, 2:0.8\nenv = 0.5:0.5, 3.0:0.5\nk_grid = 2, 3\nh_grid = 0.5, 1, 1.5, 2\nsamples = 20\n",
    )
    .map_err(|e| e.to_string())?;
    let mut compared = 0;
    for kind in [
        ExperimentKind::Criteria,
        ExperimentKind::Simulate,
        ExperimentKind::Regen,
        ExperimentKind::Tails,
        ExperimentKind::Rates,
    ] {
        let mut bodies: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
        for (tag, replicas) in [("a", 1u32), ("b", 1), ("c", 4)] {
            let out: PathBuf = dir.path().join(format!("{}-{tag}", kind.as_str()));
            let args = CommonArgs {
                model: model_path.clone(),
                seed: Some(12),
                walk_seed: Some(13),
                replicas: Some(replicas),
                horizon: Some(5_000),
                level_cut: Some(10),
                margin: Some(10),
                draws: Some(400),
                out: out.clone(),
            };
            let cfg = ExperimentConfig::resolve(kind, &args).map_err(|e| e.to_string())?;
            let art = run_experiment(&cfg).map_err(|e| e.to_string())?;
            let mut files: Vec<(String, Vec<u8>)> = art
                .names()
                .iter()
                .map(|n| (n.to_string(), std::fs::read(out.join(n)).unwrap()))
                .collect();
            files.push(("manifest.json".into(), std::fs::read(out.join("manifest.json")).unwrap()));
            bodies.push(files);
        }
        if bodies[0] != bodies[1] {
            return Err(format!("{}: rerun differs", kind.as_str()));
        }
        if bodies[0] != bodies[2] {
            return Err(format!("{}: 4 replicas differ from 1", kind.as_str()));
        }
        compared += bodies[0].len();
    }
    Ok(format!("5 experiments, {compared} files byte-identical across reruns and replica counts"))
}

fn main() {
    let checks: [(u32, &str, Duration, fn() -> Check); 12] = [
        (1, "two-point binary example criteria", Duration::from_secs(1), c1_example_criteria),
        (2, "constant-environment speed", Duration::from_secs(120), c2_constant_speed),
        (3, "beta closed form and acceptance trend", Duration::from_secs(60), c3_beta_and_acceptance),
        (4, "exact vs simulated first passage", Duration::from_secs(300), c4_passage_vs_simulation),
        (5, "psi(1) identity", Duration::from_secs(300), c5_psi_identity),
        (6, "polynomial tail exponent", Duration::from_secs(1800), c6_polynomial_tail),
        (7, "exponential regime tail", Duration::from_secs(600), c7_exponential_tail),
        (8, "coupling domination", Duration::from_secs(120), c8_coupling),
        (9, "supermultiplicativity", Duration::from_secs(600), c9_supermultiplicativity),
        (10, "rate curve at b = 1", Duration::from_secs(600), c10_rate_curve_at_one),
        (11, "line-walk sandwich bounds", Duration::from_secs(60), c11_line_sandwich),
        (12, "determinism and replica invariance", Duration::from_secs(600), c12_determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in checks {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = t0.elapsed();
        let (verdict, detail) = match result {
            Ok(d) if took <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {}s budget", budget.as_secs())),
            Err(d) => ("FAIL", d),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} criterion {id:>2} {name} [{:.1}s]: {detail}", took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
