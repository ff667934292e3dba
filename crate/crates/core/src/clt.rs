//! Partial sums `s_n(ḡ)`, their distributional tests, and the
//! Maxwell–Woodroofe resolvent sums `𝒱_n ḡ = Σ_{k=1}^n U^k ḡ`.

use crate::error::{invalid, Error, Result};
use crate::kernel::{run_chain, Kernel, MetricSpace, Start};
use crate::measure::EmpiricalMeasure;
use crate::rng::{derive_seed, domain, par_replicas, stream_rng};
use crate::stats::{
    brownian_max_cdf, default_batch_len, kolmogorov_critical_1pct, ks_statistic, normal_cdf,
    BatchAccumulator, BatchMeans, Estimate, StableAccumulator,
};
use serde::Serialize;
use std::sync::Arc;

/// Variances below this are treated as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// A bounded Lipschitz function together with its declared bounds.
pub struct Observable<P> {
    g: Arc<dyn Fn(&P) -> f64 + Send + Sync>,
    pub lip_bound: f64,
    pub sup_bound: f64,
}

impl<P> Clone for Observable<P> {
    fn clone(&self) -> Self {
        Observable {
            g: Arc::clone(&self.g),
            lip_bound: self.lip_bound,
            sup_bound: self.sup_bound,
        }
    }
}

impl<P: 'static> Observable<P> {
    pub fn new(
        g: impl Fn(&P) -> f64 + Send + Sync + 'static,
        lip_bound: f64,
        sup_bound: f64,
    ) -> Self {
        Observable {
            g: Arc::new(g),
            lip_bound,
            sup_bound,
        }
    }

    /// `c·g + d`, with bounds scaled accordingly.
    pub fn affine(&self, c: f64, d: f64) -> Self {
        let g = Arc::clone(&self.g);
        Observable {
            g: Arc::new(move |x: &P| c * g(x) + d),
            lip_bound: c.abs() * self.lip_bound,
            sup_bound: c.abs() * self.sup_bound + d.abs(),
        }
    }
}

impl<P> Observable<P> {
    #[inline]
    pub fn eval(&self, x: &P) -> f64 {
        (self.g)(x)
    }

    /// Largest violation of the declared sup and Lipschitz bounds over the
    /// given points and all pairs of them.
    pub fn bound_violation<M: MetricSpace<Point = P>>(&self, space: &M, points: &[P]) -> f64 {
        let values: Vec<f64> = points.iter().map(|p| self.eval(p)).collect();
        let mut worst = values
            .iter()
            .map(|v| v.abs() - self.sup_bound)
            .fold(f64::NEG_INFINITY, f64::max);
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                let excess = (values[a] - values[b]).abs()
                    - self.lip_bound * space.dist(&points[a], &points[b]);
                worst = worst.max(excess);
            }
        }
        worst.max(0.0)
    }
}

/// `(Σ_{k=1}^n (g(φ_k) - center)) / √n` for `states = [φ_0, .., φ_n]`.
pub fn partial_sum<P>(states: &[P], g: &Observable<P>, center: f64) -> Result<f64> {
    if states.len() < 2 {
        return Err(invalid("partial sums need at least one transition"));
    }
    let n = states.len() - 1;
    let mut sum = 0.0;
    for x in &states[1..] {
        sum += g.eval(x) - center;
    }
    Ok(sum / (n as f64).sqrt())
}

/// Long-run time average of `g` after a burn-in, with batch-means
/// estimates of its standard error and of the asymptotic variance.
pub fn long_run<K: Kernel>(
    kernel: &K,
    g: &Observable<K::Point>,
    start: &Start<'_, K::Point>,
    burn_in: usize,
    n: usize,
    seed: u64,
) -> Result<BatchMeans> {
    let mut rng = stream_rng(seed, domain::AUXILIARY, 0);
    let x0 = match start {
        Start::At(p) => p.clone(),
        Start::Draw(f) => f(&mut rng),
    };
    let x = run_chain(kernel, x0, burn_in, &mut rng, |_, _| {});
    let mut acc = BatchAccumulator::new(default_batch_len(n))?;
    run_chain(kernel, x, n, &mut rng, |_, s| acc.push(g.eval(s)));
    acc.finish()
}

/// `⟨g, μ̂*⟩` from [`long_run`].
pub fn estimate_center<K: Kernel>(
    kernel: &K,
    g: &Observable<K::Point>,
    start: &Start<'_, K::Point>,
    burn_in: usize,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    let bm = long_run(kernel, g, start, burn_in, n, seed)?;
    Ok(Estimate {
        mean: bm.mean,
        stderr: bm.mean_stderr,
        count: bm.batches * bm.batch_len,
    })
}

/// Replica settings shared by the CLT and Donsker tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicaPlan {
    /// Steps per replica.
    pub n: usize,
    pub replicas: usize,
    /// Steps discarded before the `n` counted ones.
    pub burn_in: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub n: usize,
    pub replicas: usize,
    pub burn_in: usize,
    pub center: f64,
    pub sigma2: f64,
    pub sigma2_stderr: f64,
    /// `s_n(ḡ) / σ̂` per replica, in replica order.
    pub standardized: Vec<f64>,
    pub ks: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Per-replica features of the partial-sum path `B_n(ḡ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathFeatures {
    /// `B_n(1)`; equals `s_n(ḡ)`.
    pub endpoint: f64,
    /// `sup_{t ∈ [0,1]} B_n(t)`, at least `max(0, endpoint)`.
    pub running_max: f64,
    /// `sup_t |B_n(t) - t B_n(1)|`.
    pub bridge_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DonskerReport {
    pub n: usize,
    pub replicas: usize,
    pub burn_in: usize,
    pub sigma2: f64,
    pub features: Vec<PathFeatures>,
    /// KS distance of `sup_t B_n / σ̂` against `max(0, 2Φ(x) - 1)`.
    pub ks_max: f64,
    /// KS distance of `B_n(1) / σ̂` against `Φ`.
    pub ks_endpoint: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn check_reference(reference: &BatchMeans) -> Result<()> {
    if !(reference.sigma2 >= DEGENERATE_VARIANCE) {
        return Err(Error::DegenerateVariance(reference.sigma2));
    }
    Ok(())
}

fn check_plan(plan: &ReplicaPlan) -> Result<()> {
    if plan.n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    if plan.replicas < 10 {
        return Err(invalid("at least 10 replicas are needed for a KS test"));
    }
    Ok(())
}

/// Path of one replica: burn-in, then `n` steps passed to `visit`.
fn replica_path<K: Kernel>(
    kernel: &K,
    start: &Start<'_, K::Point>,
    plan: &ReplicaPlan,
    seed: u64,
    r: usize,
    mut visit: impl FnMut(&K::Point),
) {
    let mut rng = stream_rng(seed, domain::REPLICA, r as u64);
    let x0 = match start {
        Start::At(p) => p.clone(),
        Start::Draw(f) => f(&mut rng),
    };
    let x = run_chain(kernel, x0, plan.burn_in, &mut rng, |_, _| {});
    run_chain(kernel, x, plan.n, &mut rng, |_, s| visit(s));
}

/// Independent replicas of `s_n(ḡ)` standardised by `σ̂` from `reference`,
/// tested against the standard normal at the 1% Kolmogorov level.
///
/// `reference` should come from a run independent of the replicas, e.g.
/// [`long_run`] with a different seed; its mean is the centering.
pub fn clt_test<K: Kernel>(
    kernel: &K,
    g: &Observable<K::Point>,
    start: &Start<'_, K::Point>,
    plan: &ReplicaPlan,
    reference: &BatchMeans,
    seed: u64,
) -> Result<CltReport> {
    check_plan(plan)?;
    check_reference(reference)?;
    let center = reference.mean;
    let sigma = reference.sigma2.sqrt();
    let root_n = (plan.n as f64).sqrt();
    let standardized = par_replicas(plan.replicas, |r| {
        let mut sum = 0.0;
        replica_path(kernel, start, plan, seed, r, |s| sum += g.eval(s) - center);
        sum / root_n / sigma
    });
    let ks = ks_statistic(&standardized, normal_cdf)?;
    let threshold = kolmogorov_critical_1pct(plan.replicas);
    Ok(CltReport {
        n: plan.n,
        replicas: plan.replicas,
        burn_in: plan.burn_in,
        center,
        sigma2: reference.sigma2,
        sigma2_stderr: reference.stderr,
        standardized,
        ks,
        threshold,
        pass: ks < threshold,
    })
}

/// Step-function path `B_n(t) = S_{⌈nt⌉} / √n` of one replica.
///
/// Replicas use the same streams as [`clt_test`], so with the same seed and
/// plan each endpoint is bit-identical to the corresponding `s_n`.
pub fn donsker_test<K: Kernel>(
    kernel: &K,
    g: &Observable<K::Point>,
    start: &Start<'_, K::Point>,
    plan: &ReplicaPlan,
    reference: &BatchMeans,
    seed: u64,
) -> Result<DonskerReport> {
    check_plan(plan)?;
    check_reference(reference)?;
    let center = reference.mean;
    let sigma = reference.sigma2.sqrt();
    let n = plan.n;
    let root_n = (n as f64).sqrt();
    let features = par_replicas(plan.replicas, |r| {
        let mut sums = Vec::with_capacity(n);
        let mut sum = 0.0;
        replica_path(kernel, start, plan, seed, r, |s| {
            sum += g.eval(s) - center;
            sums.push(sum);
        });
        let end = sum / root_n;
        // B_n(0) = 0 counts towards the maximum.
        let running_max = sums.iter().fold(0.0f64, |m, s| m.max(s / root_n));
        let bridge_deviation = sums
            .iter()
            .enumerate()
            .map(|(k, s)| (s / root_n - (k + 1) as f64 / n as f64 * end).abs())
            .fold(0.0f64, f64::max);
        PathFeatures {
            endpoint: end,
            running_max,
            bridge_deviation,
        }
    });
    let maxima: Vec<f64> = features.iter().map(|f| f.running_max / sigma).collect();
    let ends: Vec<f64> = features.iter().map(|f| f.endpoint / sigma).collect();
    let ks_max = ks_statistic(&maxima, brownian_max_cdf)?;
    let ks_endpoint = ks_statistic(&ends, normal_cdf)?;
    let threshold = kolmogorov_critical_1pct(plan.replicas);
    Ok(DonskerReport {
        n,
        replicas: plan.replicas,
        burn_in: plan.burn_in,
        sigma2: reference.sigma2,
        features,
        ks_max,
        ks_endpoint,
        threshold,
        pass: ks_max < threshold,
    })
}

/// Estimates of `𝒱_n ḡ` at one horizon.
#[derive(Debug, Clone, Serialize)]
pub struct MwRow {
    pub n: usize,
    /// `𝒱_n ḡ(x)` per grid atom, stderr including the centering error.
    pub values: Vec<Estimate>,
    /// `⟨(𝒱_n ḡ)², μ̂*⟩^{1/2}`.
    pub norm: f64,
    pub norm_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MwReport {
    pub rows: Vec<MwRow>,
    /// Number of `(x, k)` for which the stderr of `U^k ḡ(x)` exceeds its magnitude.
    pub noisy_terms: usize,
    pub total_terms: usize,
    pub warnings: Vec<String>,
}

impl MwReport {
    pub fn norms(&self) -> Vec<(usize, f64, f64)> {
        self.rows
            .iter()
            .map(|r| (r.n, r.norm, r.norm_stderr))
            .collect()
    }
}

const MW_BLOCKS: usize = 256;

/// Monte-Carlo `𝒱_n ḡ(x) = Σ_{k≤n} U^k ḡ(x)` over the atoms of `grid`,
/// for each `n` in `n_list`, and the `grid`-weighted root mean square.
///
/// `center` carries its own standard error; since every term is shifted by
/// the same centering error, it contributes `n · stderr` to each value.
pub fn mw_diagnostic<K: Kernel>(
    kernel: &K,
    g: &Observable<K::Point>,
    center: &Estimate,
    n_list: &[usize],
    grid: &EmpiricalMeasure<K::Point>,
    replicas: usize,
    seed: u64,
) -> Result<MwReport> {
    if n_list.is_empty() || n_list[0] == 0 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("n_list must be strictly increasing and positive"));
    }
    if replicas < 2 {
        return Err(invalid("need at least 2 replicas"));
    }
    let n_max = *n_list.last().unwrap();
    let c = center.mean;
    let blocks = MW_BLOCKS.min(replicas);
    let mut per_atom = Vec::with_capacity(grid.len());
    let mut noisy_terms = 0;
    for (a, (x, _)) in grid.atoms().iter().enumerate() {
        let atom_seed = derive_seed(seed, a as u64);
        // Per block: (Σ_r ḡ(φ_k), Σ_r ḡ(φ_k)²) for every k, and
        // (Σ_r S_n, Σ_r S_n²) for every horizon in n_list.
        let partials = par_replicas(blocks, |b| {
            let lo = b * replicas / blocks;
            let hi = (b + 1) * replicas / blocks;
            let mut term = vec![(0.0, 0.0); n_max];
            let mut cumulative = vec![(0.0, 0.0); n_list.len()];
            for r in lo..hi {
                let mut rng = stream_rng(atom_seed, domain::REPLICA, r as u64);
                let mut sum = 0.0;
                let mut next = 0;
                run_chain(kernel, x.clone(), n_max, &mut rng, |k, s| {
                    let v = g.eval(s) - c;
                    term[k - 1].0 += v;
                    term[k - 1].1 += v * v;
                    sum += v;
                    if k == n_list[next] {
                        cumulative[next].0 += sum;
                        cumulative[next].1 += sum * sum;
                        next += 1;
                    }
                });
            }
            (term, cumulative)
        });
        let rf = replicas as f64;
        type Moments = Vec<(f64, f64)>;
        let merge = |pick: &dyn Fn(&(Moments, Moments)) -> &Moments, idx: usize| {
            let mut s = StableAccumulator::default();
            let mut q = StableAccumulator::default();
            for p in &partials {
                s.add(pick(p)[idx].0);
                q.add(pick(p)[idx].1);
            }
            let mean = s.value() / rf;
            let var = ((q.value() - rf * mean * mean) / (rf - 1.0)).max(0.0);
            (mean, (var / rf).sqrt())
        };
        for k in 0..n_max {
            let (m, se) = merge(&|p| &p.0, k);
            if se > m.abs() {
                noisy_terms += 1;
            }
        }
        let values: Vec<(f64, f64)> = (0..n_list.len()).map(|i| merge(&|p| &p.1, i)).collect();
        per_atom.push(values);
    }

    let rows = n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let shift_se = n as f64 * center.stderr;
            let values: Vec<Estimate> = per_atom
                .iter()
                .map(|v| Estimate {
                    mean: v[i].0,
                    stderr: (v[i].1 * v[i].1 + shift_se * shift_se).sqrt(),
                    count: replicas,
                })
                .collect();
            let weights: Vec<f64> = grid.atoms().iter().map(|(_, w)| *w).collect();
            // E[V̂²] = V² + se², so subtract the replica variance.
            let square: f64 = weights
                .iter()
                .zip(&per_atom)
                .map(|(w, v)| w * (v[i].0 * v[i].0 - v[i].1 * v[i].1))
                .sum();
            let norm = square.max(0.0).sqrt();
            let (norm_stderr, _) = if norm > 0.0 {
                let independent: f64 = weights
                    .iter()
                    .zip(&per_atom)
                    .map(|(w, v)| (w * v[i].0 / norm * v[i].1).powi(2))
                    .sum();
                let common: f64 = weights
                    .iter()
                    .zip(&per_atom)
                    .map(|(w, v)| w * v[i].0 / norm)
                    .sum();
                ((independent + (common * shift_se).powi(2)).sqrt(), ())
            } else {
                let worst = per_atom.iter().map(|v| v[i].1).fold(0.0, f64::max);
                ((worst * worst + shift_se * shift_se).sqrt(), ())
            };
            MwRow {
                n,
                values,
                norm,
                norm_stderr,
            }
        })
        .collect();

    let total_terms = n_max * grid.len();
    let mut warnings = Vec::new();
    if noisy_terms > 0 {
        warnings.push(format!(
            "{noisy_terms} of {total_terms} estimates of U^k g have stderr above their magnitude"
        ));
    }
    Ok(MwReport {
        rows,
        noisy_terms,
        total_terms,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{IdentityKernel, IidNormalKernel, MatrixKernel, RealLine};
    use crate::stats::batch_mean_variance;

    fn position() -> Observable<usize> {
        Observable::new(|s: &usize| *s as f64, 1.0, 10.0)
    }

    #[test]
    fn partial_sum_cases() {
        let constant = Observable::new(|_: &usize| 3.0, 0.0, 3.0);
        assert_eq!(
            partial_sum(&[0usize, 1, 2, 0], &constant, 3.0).unwrap(),
            0.0
        );
        assert_eq!(partial_sum(&[0usize, 2], &position(), 0.5).unwrap(), 1.5);
        assert_eq!(
            partial_sum(&[0usize, 1, 2, 0], &position(), 1.0).unwrap(),
            0.0
        );
        assert!(partial_sum(&[0usize], &position(), 0.0).is_err());
    }

    #[test]
    fn center_of_identity_is_exact() {
        let e = estimate_center(
            &IdentityKernel(RealLine),
            &Observable::new(|x: &f64| x * x, 1.0, 1.0),
            &Start::At(0.7),
            0,
            10_000,
            1,
        )
        .unwrap();
        assert_eq!(e.mean, 0.7 * 0.7);
        assert_eq!(e.stderr, 0.0);
        let zero = Observable::new(|_: &f64| 0.0, 0.0, 0.0);
        let e = estimate_center(
            &IidNormalKernel::default(),
            &zero,
            &Start::At(0.0),
            0,
            10_000,
            1,
        )
        .unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn two_state_center_and_variance() {
        let k = MatrixKernel::two_state(0.3, 0.6).unwrap();
        let bm = long_run(&k, &position(), &Start::At(0), 100, 2_000_000, 11).unwrap();
        assert!((bm.mean - 1.0 / 3.0).abs() < 3.0 * bm.mean_stderr, "{bm:?}");
        let exact = 2.0 / 9.0 * 1.1 / 0.9;
        assert!((bm.sigma2 - exact).abs() < 3.0 * bm.stderr, "{bm:?}");
    }

    #[test]
    fn iid_normal_clt_and_degenerate_cycle() {
        let k = IidNormalKernel::default();
        let g = Observable::new(|x: &f64| x.clamp(-10.0, 10.0), 1.0, 10.0);
        let reference = long_run(&k, &g, &Start::At(0.0), 0, 200_000, 3).unwrap();
        let plan = ReplicaPlan {
            n: 50,
            replicas: 2000,
            burn_in: 0,
        };
        let r = clt_test(&k, &g, &Start::At(0.0), &plan, &reference, 4).unwrap();
        assert!(r.pass, "ks={} thr={}", r.ks, r.threshold);

        let cycle = MatrixKernel::cycle(3).unwrap();
        // 27000 steps give batches of 30, a multiple of the period
        let reference = long_run(&cycle, &position(), &Start::At(0), 0, 27_000, 3).unwrap();
        assert!(reference.sigma2 < 1e-12);
        let err = clt_test(&cycle, &position(), &Start::At(0), &plan, &reference, 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance(_)));
    }

    #[test]
    fn donsker_endpoint_equals_clt_sum() {
        let k = MatrixKernel::two_state(0.3, 0.6).unwrap();
        let reference = long_run(&k, &position(), &Start::At(0), 100, 200_000, 1).unwrap();
        let plan = ReplicaPlan {
            n: 300,
            replicas: 200,
            burn_in: 20,
        };
        let c = clt_test(&k, &position(), &Start::At(0), &plan, &reference, 9).unwrap();
        let d = donsker_test(&k, &position(), &Start::At(0), &plan, &reference, 9).unwrap();
        let sigma = reference.sigma2.sqrt();
        for (s, f) in c.standardized.iter().zip(&d.features) {
            assert_eq!(s.to_bits(), (f.endpoint / sigma).to_bits());
            assert!(f.running_max >= f.endpoint.max(0.0));
        }
    }

    #[test]
    fn zero_observable_paths_vanish() {
        let k = IidNormalKernel::default();
        let zero = Observable::new(|_: &f64| 0.0, 0.0, 0.0);
        let reference = BatchMeans {
            sigma2: 1.0,
            stderr: 0.0,
            mean: 0.0,
            mean_stderr: 0.0,
            batches: 10,
            batch_len: 1,
        };
        let plan = ReplicaPlan {
            n: 20,
            replicas: 20,
            burn_in: 0,
        };
        let d = donsker_test(&k, &zero, &Start::At(0.0), &plan, &reference, 1).unwrap();
        assert!(d.features.iter().all(|f| *f
            == PathFeatures {
                endpoint: 0.0,
                running_max: 0.0,
                bridge_deviation: 0.0
            }));
    }

    #[test]
    fn mw_zero_and_identity() {
        let grid = EmpiricalMeasure::uniform(vec![0usize, 1]).unwrap();
        let k = MatrixKernel::two_state(0.3, 0.6).unwrap();
        let zero = Observable::new(|_: &usize| 0.0, 0.0, 0.0);
        let r = mw_diagnostic(&k, &zero, &Estimate::exact(0.0), &[5, 10], &grid, 10, 1).unwrap();
        assert!(r
            .rows
            .iter()
            .all(|row| row.norm == 0.0 && row.values.iter().all(|v| v.mean == 0.0)));

        let id = MatrixKernel::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = mw_diagnostic(
            &id,
            &position(),
            &Estimate::exact(0.5),
            &[10, 20, 40],
            &grid,
            10,
            1,
        )
        .unwrap();
        for row in &r.rows {
            assert!((row.norm - 0.5 * row.n as f64).abs() < 1e-12);
        }
        assert!(mw_diagnostic(&k, &zero, &Estimate::exact(0.0), &[5, 5], &grid, 10, 1).is_err());
    }

    #[test]
    fn observable_bounds_spot_check() {
        let g = Observable::new(|x: &f64| x.sin(), 1.0, 1.0);
        let pts: Vec<f64> = (0..50).map(|k| k as f64 * 0.37).collect();
        assert_eq!(g.bound_violation(&RealLine, &pts), 0.0);
        let bad = Observable::new(|x: &f64| 3.0 * x.sin(), 1.0, 1.0);
        assert!(bad.bound_violation(&RealLine, &pts) > 0.0);
        let shifted = g.affine(-2.0, 1.0);
        assert_eq!(shifted.eval(&0.0), 1.0);
        assert_eq!(shifted.bound_violation(&RealLine, &pts), 0.0);
    }

    #[test]
    fn batch_means_agrees_with_long_run() {
        let k = IidNormalKernel::default();
        let g = Observable::new(|x: &f64| *x, 1.0, 1.0);
        let mut rng = stream_rng(5, domain::AUXILIARY, 0);
        let mut series = Vec::new();
        run_chain(&k, 0.0, 1000, &mut rng, |_, s| series.push(*s));
        let direct = batch_mean_variance(&series, default_batch_len(1000)).unwrap();
        let streamed = long_run(&k, &g, &Start::At(0.0), 0, 1000, 5).unwrap();
        assert_eq!(direct, streamed);
    }
}
