#![allow(dead_code)]

use gwrwre::model::{EnvLaw, ModelSpec, OffspringLaw};
use proptest::prelude::*;

pub fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    let mut out: Vec<f64> = w.iter().map(|x| x / s).collect();
    // push the rounding residue into the last weight
    let rest: f64 = out[..out.len() - 1].iter().sum();
    *out.last_mut().unwrap() = 1.0 - rest;
    out
}

pub fn build(off: &[(u32, f64)], env: &[(f64, f64)]) -> ModelSpec {
    let ow = normalize(&off.iter().map(|a| a.1).collect::<Vec<_>>());
    let ew = normalize(&env.iter().map(|a| a.1).collect::<Vec<_>>());
    let off: Vec<(u32, f64)> = off.iter().zip(ow).map(|(a, w)| (a.0, w)).collect();
    let env: Vec<(f64, f64)> = env.iter().zip(ew).map(|(a, w)| (a.0, w)).collect();
    ModelSpec::new(OffspringLaw::new(&off).unwrap(), EnvLaw::new(&env).unwrap())
}

/// Offspring atoms on `{1..=4}` with mean above 1, environment atoms on
/// `[0.05, 20]` (log-uniform), distinct values.
pub fn model_strategy() -> impl Strategy<Value = (Vec<(u32, f64)>, Vec<(f64, f64)>)> {
    let off = prop::collection::btree_map(1u32..=4, 0.05f64..1.0, 1..=3)
        .prop_filter("supercritical", |m| {
            let s: f64 = m.values().sum();
            m.iter().map(|(k, w)| *k as f64 * w).sum::<f64>() / s > 1.05
        })
        .prop_map(|m| m.into_iter().collect::<Vec<_>>());
    let env = prop::collection::btree_map(-300i32..=300, 0.05f64..1.0, 1..=3).prop_map(|m| {
        m.into_iter()
            .map(|(e, w)| ((e as f64 / 100.0).exp(), w))
            .collect::<Vec<_>>()
    });
    (off, env)
}

pub fn random_model() -> impl Strategy<Value = ModelSpec> {
    model_strategy().prop_map(|(o, e)| build(&o, &e))
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}
