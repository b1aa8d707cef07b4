//! Shared fixtures for the benchmarks.

use spj_core::design::{generate, SimConfig};
use spj_core::posterior::{fit_ridge_posterior, sample_draws, SigmaImmersion};
use spj_core::{MergedStats, PosteriorDraw, RidgePosterior};

pub struct Fixture {
    pub stats: MergedStats,
    pub posterior: RidgePosterior,
    pub draws: Vec<PosteriorDraw>,
}

/// Simulated problem with `s0` signals of size 2 and `count` posterior draws.
pub fn fixture(n: usize, p: usize, s0: usize, count: usize) -> Fixture {
    let (data, _) = generate(&SimConfig {
        n,
        p,
        s0,
        seed: 11,
        ..Default::default()
    })
    .expect("valid simulation config");
    let stats = MergedStats::from_dataset(&data).expect("stats");
    let posterior = fit_ridge_posterior(&stats, 1.0).expect("posterior");
    let imm = SigmaImmersion::new(1.0, 1.0, n).expect("immersion");
    let draws = sample_draws(&posterior, &imm, 3, count);
    Fixture {
        stats,
        posterior,
        draws,
    }
}
