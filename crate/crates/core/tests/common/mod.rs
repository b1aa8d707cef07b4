//! Property checks shared by the proptest suite and the acceptance runner.
//! Each check drives a proptest `TestRunner` and reports the first
//! (shrunk) counterexample as a string.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spj_core::design::{standardize, Dataset};
use spj_core::inference::{confusion, mcc};
use spj_core::pipeline::{run_fit, run_fit_stats, LambdaChoice, RunConfig, RunInputs};
use spj_core::projection::{kkt_check, project, ProjectionConfig, KKT_TOL};
use spj_core::stats::{compute_shard_stats, merge, merge_merged, MergedStats, ShardStats};

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

pub fn normal_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector(n: usize, seed: u64, scale: f64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Standardized random design with a sparse signal plus noise.
pub fn random_dataset(n: usize, p: usize, seed: u64) -> Dataset {
    let x = normal_matrix(n, p, seed);
    let mut y = normal_vector(n, seed ^ 0x5eed, 1.0);
    for j in 0..p.min(2) {
        y.axpy(1.5, &x.column(j), 1.0);
    }
    Dataset::new(x, y).expect("random design is standardizable")
}

pub fn random_stats(n: usize, p: usize, seed: u64) -> MergedStats {
    MergedStats::from_dataset(&random_dataset(n, p, seed)).unwrap()
}

fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn outcome(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// `‖θ*(λ)‖₁` is nonincreasing in `λ`.
pub fn l1_monotone_in_lambda(cases: u32) -> Result<(), String> {
    let strat = (3usize..40, 1usize..9, any::<u64>(), 0.0f64..2.0, 0.0f64..2.0);
    outcome(runner(cases).run(&strat, |(n, p, seed, a, b)| {
        let stats = random_stats(n.max(3), p, seed);
        let theta = normal_vector(p, seed.wrapping_add(1), 2.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let u_lo = project(&theta, &stats, &ProjectionConfig::new(lo), None).map_err(|e| fail(e.to_string()))?;
        let u_hi = project(&theta, &stats, &ProjectionConfig::new(hi), None).map_err(|e| fail(e.to_string()))?;
        let (l_lo, l_hi) = (u_lo.l1_norm(), u_hi.l1_norm());
        prop_assert!(l_hi <= l_lo + 1e-6 * (1.0 + l_lo), "λ {lo} → {l_lo}, λ {hi} → {l_hi}");
        Ok(())
    }))
}

fn shard(n: usize, p: usize, seed: u64) -> ShardStats {
    compute_shard_stats(&normal_matrix(n, p, seed), &normal_vector(n, seed ^ 1, 1.0), 42).unwrap()
}

/// Merge order and grouping change results by rounding only.
pub fn merge_associative_commutative(cases: u32) -> Result<(), String> {
    let strat = (1usize..7, prop::collection::vec((1usize..30, any::<u64>()), 2..7));
    outcome(runner(cases).run(&strat, |(p, specs)| {
        let shards: Vec<ShardStats> = specs.iter().map(|&(n, s)| shard(n, p, s)).collect();
        let all = merge(&shards).map_err(|e| fail(e.to_string()))?;
        let mut reversed = shards.clone();
        reversed.reverse();
        let rev = merge(&reversed).map_err(|e| fail(e.to_string()))?;
        let k = shards.len() / 2;
        let left = merge(&shards[..k.max(1)]).map_err(|e| fail(e.to_string()))?;
        let right = merge(&shards[k.max(1)..]).map_err(|e| fail(e.to_string()))?;
        let grouped = merge_merged(&[right, left]).map_err(|e| fail(e.to_string()))?;
        for other in [&rev, &grouped] {
            prop_assert_eq!(other.n, all.n);
            prop_assert!(rel_mat(&other.xtx, &all.xtx) < 1e-12);
            prop_assert!((&other.xty - &all.xty).amax() <= 1e-12 * all.xty.amax().max(1.0));
            prop_assert!((other.yty - all.yty).abs() <= 1e-12 * all.yty);
        }
        Ok(())
    }))
}

/// Standardizing twice equals standardizing once.
pub fn standardize_idempotent(cases: u32) -> Result<(), String> {
    let strat = (2usize..30, 1usize..8, any::<u64>(), 0.01f64..100.0, any::<bool>());
    outcome(runner(cases).run(&strat, |(n, p, seed, scale, center)| {
        let x = normal_matrix(n, p, seed) * scale;
        let (once, _) = standardize(&x, center).map_err(|e| fail(e.to_string()))?;
        let (twice, info) = standardize(&once, center).map_err(|e| fail(e.to_string()))?;
        prop_assert!((&twice - &once).amax() < 1e-12, "diff {}", (&twice - &once).amax());
        for c in &info {
            prop_assert!((c.scale - 1.0).abs() < 1e-12);
        }
        Ok(())
    }))
}

/// MCC equals 1 exactly when the selected set is the true support.
pub fn mcc_one_iff_exact_support(cases: u32) -> Result<(), String> {
    let strat = (1usize..=6).prop_flat_map(|p| (prop::collection::vec(any::<bool>(), p), prop::collection::vec(any::<bool>(), p)));
    outcome(runner(cases).run(&strat, |(sel, truth)| {
        let (tp, fp, tn, fn_) = confusion(&sel, &truth);
        let m = mcc(tp, fp, tn, fn_);
        prop_assert!((-1.0..=1.0).contains(&m));
        prop_assert_eq!(m == 1.0, sel == truth, "mcc {} for {:?} vs {:?}", m, sel, truth);
        Ok(())
    }))
}

fn small_config(seed: u64, workers: Option<usize>) -> RunConfig {
    RunConfig {
        draws: 60,
        seed,
        workers,
        cv_folds: 3,
        ..RunConfig::default()
    }
}

/// Same config and seed give identical reports, for any worker count.
pub fn seed_determinism(cases: u32) -> Result<(), String> {
    let strat = (20usize..50, 2usize..8, any::<u64>(), 1usize..4);
    outcome(runner(cases).run(&strat, |(n, p, seed, workers)| {
        let data = random_dataset(n, p, seed);
        let (a, art_a) = run_fit(&data, &small_config(seed, Some(1))).map_err(|e| fail(e.to_string()))?;
        let (b, art_b) = run_fit(&data, &small_config(seed, Some(workers))).map_err(|e| fail(e.to_string()))?;
        let ja = serde_json::to_string(&RunConfigless(&a)).unwrap();
        let jb = serde_json::to_string(&RunConfigless(&b)).unwrap();
        prop_assert_eq!(ja, jb);
        prop_assert_eq!(&art_a.projected.draws, &art_b.projected.draws);
        prop_assert_eq!(art_a.sigma_star, art_b.sigma_star);
        Ok(())
    }))
}

/// Serializes a report without its config echo (which records `workers`).
struct RunConfigless<'a>(&'a spj_core::RunReport);

impl serde::Serialize for RunConfigless<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(self.0).map_err(serde::ser::Error::custom)?;
        v.as_object_mut().unwrap().remove("config");
        v.serialize(s)
    }
}

/// A fit from sufficient statistics alone equals the fit from raw rows.
pub fn gram_only_equivalence(cases: u32) -> Result<(), String> {
    let strat = (15usize..50, 1usize..8, any::<u64>(), 0.05f64..1.0);
    outcome(runner(cases).run(&strat, |(n, p, seed, lambda)| {
        let data = random_dataset(n, p, seed);
        let cfg = RunConfig {
            lambda: LambdaChoice::Fixed(lambda),
            ..small_config(seed, None)
        };
        let (raw, _) = run_fit(&data, &cfg).map_err(|e| fail(e.to_string()))?;
        let stats = MergedStats::from_dataset(&data).unwrap();
        let (gram, _) = run_fit_stats(&stats, &cfg, RunInputs::default()).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(
            serde_json::to_value(&raw).unwrap(),
            serde_json::to_value(&gram).unwrap()
        );
        Ok(())
    }))
}

/// Every projection passes the KKT check, cold or warm started.
pub fn kkt_certified(cases: u32) -> Result<(), String> {
    let strat = (2usize..60, 1usize..40, any::<u64>(), 0.0f64..3.0);
    outcome(runner(cases).run(&strat, |(n, p, seed, lambda)| {
        let stats = random_stats(n, p, seed);
        let cfg = ProjectionConfig::new(lambda);
        let mut warm = None;
        for k in 0..3u64 {
            let theta = normal_vector(p, seed.wrapping_add(k), 1.5);
            let u = project(&theta, &stats, &cfg, warm.as_ref()).map_err(|e| fail(e.to_string()))?;
            let rep = kkt_check(&u, &theta, &stats, lambda, KKT_TOL);
            prop_assert!(rep.satisfied, "{:?}", rep);
            warm = Some(u);
        }
        Ok(())
    }))
}

pub const PROPERTIES: &[(&str, fn(u32) -> Result<(), String>)] = &[
    ("l1 norm monotone in lambda", l1_monotone_in_lambda),
    ("merge associative and commutative", merge_associative_commutative),
    ("standardize idempotent", standardize_idempotent),
    ("MCC = 1 iff exact support (p <= 6)", mcc_one_iff_exact_support),
    ("end-to-end seed determinism", seed_determinism),
    ("Gram-only equivalence", gram_only_equivalence),
    ("KKT certification", kkt_certified),
];
