//! Empirical convergence of `P^n μ` to the invariant measure in the
//! Fortet–Mourier distance.

use crate::error::{invalid, Result};
use crate::kernel::{estimate_pushforward, run_chain, Kernel, Start};
use crate::measure::{fortet_mourier_capped, EmpiricalMeasure};
use crate::rng::{derive_seed, domain, par_replicas, stream_rng};
use crate::stats::{fit_geometric, GeometricFit};
use serde::Serialize;

/// `count` independent chains run `burn_in` steps from `start`, as a
/// uniform empirical measure. `stream` separates independent samples.
pub fn stationary_sample<K: Kernel>(
    kernel: &K,
    start: &Start<'_, K::Point>,
    burn_in: usize,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<EmpiricalMeasure<K::Point>> {
    let sample_seed = derive_seed(seed, stream);
    let points = par_replicas(count, |r| {
        let mut rng = stream_rng(sample_seed, domain::STATIONARY, r as u64);
        let x0 = match start {
            Start::At(p) => p.clone(),
            Start::Draw(f) => f(&mut rng),
        };
        run_chain(kernel, x0, burn_in, &mut rng, |_, _| {})
    });
    EmpiricalMeasure::uniform(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicityReport {
    /// `(n, d_FM(P^n μ̂, μ̂*))` for `n = 0..=n_max`.
    pub distances: Vec<(usize, f64)>,
    /// `d_FM` between two independent stationary samples of the same size.
    pub noise: f64,
    /// Geometric fit over the steps whose distance exceeds `10 · noise`.
    pub fit: Option<GeometricFit>,
    /// Whether the distance strictly decreases over the fitted steps.
    pub decreasing: bool,
    /// Largest merged support seen by the distance solver.
    pub max_support: usize,
}

/// Settings for [`ergodicity_curve`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErgodicityPlan {
    pub n_max: usize,
    /// Support cap passed to the distance solver.
    pub support_cap: usize,
}

/// `d_FM(P^n μ̂, μ̂*)` for `n ≤ n_max`, where `P^n μ̂` pushes every atom of
/// `initial` forward by one simulated path.
///
/// `project` maps states onto a finite grid before the distance is taken;
/// it must be applied alike to everything compared, and it keeps the
/// merged supports within the solver's cap. The identity is fine for
/// finite state spaces.
#[allow(clippy::too_many_arguments)]
pub fn ergodicity_curve<K: Kernel>(
    kernel: &K,
    initial: &EmpiricalMeasure<K::Point>,
    stationary: &EmpiricalMeasure<K::Point>,
    noise_reference: &EmpiricalMeasure<K::Point>,
    project: &(dyn Fn(&K::Point) -> K::Point + Sync),
    plan: &ErgodicityPlan,
    seed: u64,
) -> Result<ErgodicityReport> {
    if initial.len() != stationary.len() || stationary.len() != noise_reference.len() {
        return Err(invalid(
            "initial and stationary samples must have equal sizes",
        ));
    }
    let reduce = |m: &EmpiricalMeasure<K::Point>| m.map_points(project).merged();
    let target = reduce(stationary);
    let floor = fortet_mourier_capped(kernel, &target, &reduce(noise_reference), plan.support_cap)?;
    let noise = floor.distance;
    let mut max_support = 0;
    let mut distances = Vec::with_capacity(plan.n_max + 1);
    // Step n reuses the atoms of step n-1, so each atom follows one path.
    let mut current = initial.clone();
    for n in 0..=plan.n_max {
        if n > 0 {
            current = estimate_pushforward(kernel, &current, 1, derive_seed(seed, n as u64));
        }
        let reduced = reduce(&current);
        max_support = max_support.max(reduced.len() + target.len());
        let d = fortet_mourier_capped(kernel, &reduced, &target, plan.support_cap)?.distance;
        distances.push((n, d));
    }
    let signal: Vec<(usize, f64)> = distances
        .iter()
        .copied()
        .filter(|(_, d)| *d > 10.0 * noise)
        .collect();
    let fit = fit_geometric(&signal);
    let decreasing = signal.windows(2).all(|w| w[1].1 < w[0].1);
    Ok(ErgodicityReport {
        distances,
        noise,
        fit,
        decreasing,
        max_support,
    })
}
