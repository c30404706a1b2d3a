mod common;

use common::build;
use gwrwre::model::{classify, ModelSpec};
use gwrwre::regen::{
    collect_records, find_regenerations, fit_tail, gamma1_samples, speed_estimate, survival_curve, RegenRecord,
    SurvivalCurve, SurvivalPoint, TailRegime,
};
use gwrwre::walker::{ConditionedSampler, SamplerConfig, TreePolicy};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn sampler(m: &ModelSpec, level_cut: u32, horizon: u64, seed: u64) -> ConditionedSampler {
    let cfg = SamplerConfig { level_cut, horizon, walk_master: seed };
    ConditionedSampler::new(m.clone(), TreePolicy::Annealed { tree_master: seed ^ 0xABCD }, cfg).unwrap()
}

/// Squared distance covariance with O(n) memory:
/// `S1 + S2 - 2 S3` over the pairwise distance matrices.
fn dcov2(x: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    let n = x.len();
    let d = |p: &[f64; 2], q: &[f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let (mut s1, mut sa, mut sb) = (0.0, 0.0, 0.0);
    let mut row_a = vec![0.0; n];
    let mut row_b = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let a = d(&x[i], &x[j]);
            let b = d(&y[i], &y[j]);
            s1 += a * b;
            row_a[i] += a;
            row_b[i] += b;
        }
        sa += row_a[i];
        sb += row_b[i];
    }
    let nf = n as f64;
    let s3: f64 = row_a.iter().zip(&row_b).map(|(a, b)| a * b).sum::<f64>() / nf.powi(3);
    s1 / (nf * nf) + (sa / (nf * nf)) * (sb / (nf * nf)) - 2.0 * s3
}

fn dcor(x: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    let xy = dcov2(x, y);
    let xx = dcov2(x, x);
    let yy = dcov2(y, y);
    (xy / (xx * yy).sqrt()).max(0.0).sqrt()
}

#[test]
fn consecutive_increments_look_independent() {
    let m = build(&[(2, 1.0)], &[(0.6, 0.5), (2.0, 0.5)]);
    let mut s = sampler(&m, 20, 20_000, 4);
    let mut pairs: Vec<([f64; 2], [f64; 2])> = Vec::new();
    let mut j = 0;
    while pairs.len() < 10_000 {
        let traj = s.draw_extended(j, 4_000).unwrap();
        let recs: Vec<RegenRecord> = find_regenerations(&traj, 25).into_iter().filter(|r| !r.censored).collect();
        // the first increment starts at the root and has its own law
        for w in recs.windows(2).skip(1) {
            let f = |r: &RegenRecord| [(r.time_increment as f64).ln(), r.level_increment as f64];
            pairs.push((f(&w[0]), f(&w[1])));
        }
        j += 1;
    }
    pairs.truncate(10_000);
    let x: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
    let mut y: Vec<[f64; 2]> = pairs.iter().map(|p| p.1).collect();
    let observed = dcor(&x, &y);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let null: Vec<f64> = (0..19)
        .map(|_| {
            y.shuffle(&mut rng);
            dcor(&x, &y)
        })
        .collect();
    let (mean, se) = common::mean_se(&null);
    let sd = se * (null.len() as f64).sqrt();
    assert!(observed < mean + 4.0 * sd, "dcor {observed} vs shuffled {mean} +- {sd}");
}

#[test]
fn positive_speed_is_separated_from_zero() {
    let m = build(&[(2, 1.0)], &[(0.6, 0.5), (2.0, 0.5)]);
    assert!(classify(&m).lambda > 1.0);
    let mut s = sampler(&m, 20, 20_000, 8);
    let recs = collect_records(&mut s, 0, 200, 5_000, 25).unwrap();
    let e = speed_estimate(&recs).unwrap();
    assert!(e.v_hat > 3.0 * e.stderr, "{e:?}");
}

#[test]
fn zero_speed_regime_degrades_with_horizon() {
    let a = 194.0;
    let m = build(&[(1, 0.5), (3, 0.5)], &[(a, 0.5), (1.0 / a, 0.5)]);
    let rep = classify(&m);
    assert!(rep.transient && rep.lambda < 1.0);
    let v: Vec<f64> = [1_000u64, 10_000, 100_000]
        .iter()
        .map(|&h| {
            let mut s = sampler(&m, 5, h, 2);
            let recs = collect_records(&mut s, 0, 2_000_000 / h, h, 10).unwrap();
            speed_estimate(&recs).unwrap().v_hat
        })
        .collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
}

#[test]
fn doubling_the_margin_stays_within_the_interval() {
    let m = ModelSpec::constant(2, 1.0).unwrap();
    let run = |margin| {
        let mut s = sampler(&m, 20, 20_000, 3);
        speed_estimate(&collect_records(&mut s, 0, 100, 5_000, margin).unwrap()).unwrap()
    };
    let (a, b) = (run(10), run(20));
    let width = a.ci95.1 - a.ci95.0;
    assert!((a.v_hat - b.v_hat).abs() < width, "{a:?} vs {b:?}");
}

#[test]
fn scaling_time_halves_speed() {
    let recs: Vec<RegenRecord> = (0..200)
        .map(|i| RegenRecord { time_increment: 3 + i % 7, level_increment: 1 + (i % 3) as u32, censored: false })
        .collect();
    let doubled: Vec<RegenRecord> =
        recs.iter().map(|r| RegenRecord { time_increment: 2 * r.time_increment, ..*r }).collect();
    let (a, b) = (speed_estimate(&recs).unwrap(), speed_estimate(&doubled).unwrap());
    assert!((a.v_hat - 2.0 * b.v_hat).abs() < 1e-12);
}

#[test]
fn synthetic_tail_fits() {
    let curve = |f: &dyn Fn(f64) -> f64| SurvivalCurve {
        points: (0..=40)
            .map(|j| {
                let n = 10f64.powf(j as f64 / 10.0).round() as u64;
                let p = f(n as f64);
                SurvivalPoint { n, survivors: 1_000_000, total: 1_000_000_000, p_hat: p, stderr: 0.0 }
            })
            .collect(),
    };
    let poly = fit_tail(&curve(&|n| n.powi(-2)), TailRegime::Polynomial).unwrap();
    assert!((poly.exponent + 2.0).abs() < 1e-6);
    let st = fit_tail(&curve(&|n| (-n.sqrt() / 20.0).exp()), TailRegime::Stretched).unwrap();
    assert!((st.exponent - 0.5).abs() < 1e-6 && st.valid);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn record_invariants(seed in any::<u64>(), lo in 0.55f64..1.0, hi in 1.0f64..4.0, margin in 1u32..30) {
        let m = build(&[(2, 0.7), (3, 0.3)], &[(lo, 0.5), (hi, 0.5)]);
        let mut s = sampler(&m, 10, 50_000, seed);
        let traj = s.draw_extended(0, 3_000).unwrap();
        let recs = find_regenerations(&traj, margin);
        let mut censored_seen = false;
        for r in &recs {
            prop_assert!(r.level_increment >= 1);
            prop_assert!(r.time_increment >= r.level_increment as u64);
            prop_assert!(!censored_seen || r.censored);
            censored_seen |= r.censored;
        }
    }

    #[test]
    fn survival_is_antitone(seed in any::<u64>()) {
        let m = build(&[(1, 0.2), (2, 0.8)], &[(0.5, 0.5), (3.0, 0.5)]);
        let mut s = sampler(&m, 10, 20_000, seed);
        let (samples, _) = gamma1_samples(&mut s, 0, 200, 10).unwrap();
        let c = survival_curve(&samples, 10);
        for w in c.points.windows(2) {
            prop_assert!(w[1].p_hat <= w[0].p_hat + 1e-15);
        }
    }
}
