//! Markovian couplings `C = Q + R` built from a substochastic kernel `Q`,
//! the augmented chain carrying the flag `θ` (1 when the `Q` part fired),
//! hitting/absorption times and the coupling-decay estimator.

use crate::error::{invalid, Error, Result};
use crate::kernel::{invert_cumulative, Kernel, MatrixKernel, MetricSpace, TransitionMatrix};
use crate::rng::{derive_seed, domain, par_replicas, stream_rng, SimRng};
use crate::stats::{fit_geometric, Estimate, GeometricFit};
use rand::Rng;
use serde::Serialize;

/// Point type of the kernel underlying a coupling.
pub type PointOf<C> = <<C as Coupling>::Base as MetricSpace>::Point;

/// Outcome of one step of the augmented coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledStep<P> {
    pub first: P,
    pub second: P,
    /// `θ = 1`: the step was drawn from the substochastic part `Q`.
    pub fired: bool,
}

/// A coupling of a kernel, samplable together with its `Q`/`R` flag.
///
/// Each coordinate of `step` must be distributed as `Π(x, ·)` and `Π(y, ·)`
/// respectively, and the law of a step may not depend on the previous flag.
pub trait Coupling: Sync {
    type Base: Kernel;

    fn base(&self) -> &Self::Base;

    fn step(
        &self,
        x: &PointOf<Self>,
        y: &PointOf<Self>,
        rng: &mut SimRng,
    ) -> CoupledStep<PointOf<Self>>;

    /// `Q(x, y, X²)` when it is known in closed form.
    fn exact_mass(&self, _x: &PointOf<Self>, _y: &PointOf<Self>) -> Option<f64> {
        None
    }
}

/// Substochastic kernel `Q` on pairs, given by its mass and normalised law.
pub trait SubKernel<P>: Sync {
    /// `Q(x, y, X²) ∈ [0, 1]`.
    fn mass(&self, x: &P, y: &P) -> f64;

    /// A draw from `Q(x, y, ·) / mass(x, y)`; only called when the mass is positive.
    fn sample_given_fire(&self, x: &P, y: &P, rng: &mut SimRng) -> (P, P);
}

/// Sampler for the normalised residual `R(x, y, ·) / (1 - mass(x, y))`.
pub trait Residual<P>: Sync {
    fn sample(&self, x: &P, y: &P, rng: &mut SimRng) -> (P, P);
}

/// User-supplied residual.
pub struct FnResidual<F>(pub F);

impl<P, F> Residual<P> for FnResidual<F>
where
    F: Fn(&P, &P, &mut SimRng) -> (P, P) + Sync,
{
    fn sample(&self, x: &P, y: &P, rng: &mut SimRng) -> (P, P) {
        (self.0)(x, y, rng)
    }
}

/// `C = Q + R`: fire `Q` with probability `mass(x, y)`, otherwise draw from `R`.
pub struct QrCoupling<K, Q, R> {
    pub kernel: K,
    pub sub: Q,
    pub residual: R,
}

impl<K, Q, R> Coupling for QrCoupling<K, Q, R>
where
    K: Kernel,
    Q: SubKernel<K::Point>,
    R: Residual<K::Point>,
{
    type Base = K;

    fn base(&self) -> &K {
        &self.kernel
    }

    fn step(&self, x: &K::Point, y: &K::Point, rng: &mut SimRng) -> CoupledStep<K::Point> {
        let q = self.sub.mass(x, y);
        let u: f64 = rng.random();
        let fired = u < q;
        let (first, second) = if fired {
            self.sub.sample_given_fire(x, y, rng)
        } else {
            self.residual.sample(x, y, rng)
        };
        CoupledStep {
            first,
            second,
            fired,
        }
    }

    fn exact_mass(&self, x: &K::Point, y: &K::Point) -> Option<f64> {
        Some(self.sub.mass(x, y))
    }
}

/// A draw from the residual part; an error when `Q` has full mass at `(x, y)`.
pub fn residual_step<K, Q, R>(
    coupling: &QrCoupling<K, Q, R>,
    x: &K::Point,
    y: &K::Point,
    rng: &mut SimRng,
) -> Result<(K::Point, K::Point)>
where
    K: Kernel,
    Q: SubKernel<K::Point>,
    R: Residual<K::Point>,
{
    if coupling.sub.mass(x, y) >= 1.0 {
        return Err(Error::FullMass);
    }
    Ok(coupling.residual.sample(x, y, rng))
}

/// One step of the augmented coupling.
pub fn coupled_step<C: Coupling>(
    coupling: &C,
    x: &PointOf<C>,
    y: &PointOf<C>,
    rng: &mut SimRng,
) -> CoupledStep<PointOf<C>> {
    coupling.step(x, y, rng)
}

/// Substochastic kernel on a finite state space, stored densely as
/// `q[x][y][u][v]`.
#[derive(Debug, Clone)]
pub struct FiniteSubKernel {
    n: usize,
    entries: Vec<f64>,
    masses: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
}

impl FiniteSubKernel {
    pub fn new(n: usize, q: impl Fn(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut entries = Vec::with_capacity(n * n * n * n);
        let mut masses = Vec::with_capacity(n * n);
        let mut cumulative = Vec::with_capacity(n * n);
        for x in 0..n {
            for y in 0..n {
                let block: Vec<f64> = (0..n)
                    .flat_map(|u| (0..n).map(move |v| (u, v)))
                    .map(|(u, v)| q(x, y, u, v))
                    .collect();
                if block.iter().any(|e| !(*e >= 0.0)) {
                    return Err(invalid(format!("Q({x},{y},·) has a negative or NaN entry")));
                }
                let m: f64 = block.iter().sum();
                if m > 1.0 + 1e-12 {
                    return Err(invalid(format!("Q({x},{y},·) has mass {m} > 1")));
                }
                let mut acc = 0.0;
                cumulative.push(
                    block
                        .iter()
                        .map(|e| {
                            acc += e / m.max(f64::MIN_POSITIVE);
                            acc
                        })
                        .collect(),
                );
                masses.push(m.min(1.0));
                entries.extend(block);
            }
        }
        Ok(FiniteSubKernel {
            n,
            entries,
            masses,
            cumulative,
        })
    }

    /// `Q(x, y, {(u, u)}) = scale · min(Π(x, u), Π(y, u))`: the diagonal part
    /// of a maximal coupling, shrunk by `scale ∈ [0, 1]`.
    pub fn diagonal_overlap(kernel: &MatrixKernel, scale: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(invalid("diagonal overlap scale must lie in [0, 1]"));
        }
        let p = kernel.matrix();
        Self::new(kernel.num_states(), |x, y, u, v| {
            if u == v {
                scale * p.get(x, u).min(p.get(y, u))
            } else {
                0.0
            }
        })
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn entry(&self, x: usize, y: usize, u: usize, v: usize) -> f64 {
        let n = self.n;
        self.entries[((x * n + y) * n + u) * n + v]
    }

    /// `u ↦ Q(x, y, {u} × X)`.
    pub fn first_marginal(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.n)
            .map(|u| (0..self.n).map(|v| self.entry(x, y, u, v)).sum())
            .collect()
    }

    /// `v ↦ Q(x, y, X × {v})`.
    pub fn second_marginal(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.n)
            .map(|v| (0..self.n).map(|u| self.entry(x, y, u, v)).sum())
            .collect()
    }

    /// Largest violation of `Q(x,y,·×X) ≤ Π(x,·)` and `Q(x,y,X×·) ≤ Π(y,·)`.
    pub fn domination_violation(&self, kernel: &MatrixKernel) -> f64 {
        let p = kernel.matrix();
        let mut worst = 0.0f64;
        for x in 0..self.n {
            for y in 0..self.n {
                let m1 = self.first_marginal(x, y);
                let m2 = self.second_marginal(x, y);
                for s in 0..self.n {
                    worst = worst.max(m1[s] - p.get(x, s)).max(m2[s] - p.get(y, s));
                }
            }
        }
        worst
    }
}

impl SubKernel<usize> for FiniteSubKernel {
    fn mass(&self, x: &usize, y: &usize) -> f64 {
        self.masses[x * self.n + y]
    }

    fn sample_given_fire(&self, x: &usize, y: &usize, rng: &mut SimRng) -> (usize, usize) {
        let u: f64 = rng.random();
        let k = invert_cumulative(&self.cumulative[x * self.n + y], u);
        (k / self.n, k % self.n)
    }
}

/// Independent residual: the two leftover marginals
/// `(Π(x,·) - Q(x,y,·×X)) / (1 - q)` and `(Π(y,·) - Q(x,y,X×·)) / (1 - q)`
/// drawn independently, so `R` is their product scaled by `1 - q`.
#[derive(Debug, Clone)]
pub struct FiniteResidual {
    n: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl FiniteResidual {
    pub fn independent(kernel: &MatrixKernel, sub: &FiniteSubKernel) -> Result<Self> {
        let n = kernel.num_states();
        if sub.num_states() != n {
            return Err(invalid(
                "kernel and substochastic kernel disagree on state count",
            ));
        }
        let violation = sub.domination_violation(kernel);
        if violation > 1e-12 {
            return Err(invalid(format!(
                "Q is not dominated by the kernel marginals (violation {violation:e})"
            )));
        }
        let p = kernel.matrix();
        let cumulate = |left: Vec<f64>| {
            let total: f64 = left.iter().sum();
            let mut acc = 0.0;
            left.iter()
                .map(|l| {
                    acc += l / total.max(f64::MIN_POSITIVE);
                    acc
                })
                .collect::<Vec<f64>>()
        };
        let mut first = Vec::with_capacity(n * n);
        let mut second = Vec::with_capacity(n * n);
        for x in 0..n {
            for y in 0..n {
                let m1 = sub.first_marginal(x, y);
                let m2 = sub.second_marginal(x, y);
                first.push(cumulate(
                    (0..n).map(|u| (p.get(x, u) - m1[u]).max(0.0)).collect(),
                ));
                second.push(cumulate(
                    (0..n).map(|v| (p.get(y, v) - m2[v]).max(0.0)).collect(),
                ));
            }
        }
        Ok(FiniteResidual { n, first, second })
    }
}

impl Residual<usize> for FiniteResidual {
    fn sample(&self, x: &usize, y: &usize, rng: &mut SimRng) -> (usize, usize) {
        let k = x * self.n + y;
        let u = invert_cumulative(&self.first[k], rng.random());
        let v = invert_cumulative(&self.second[k], rng.random());
        (u, v)
    }
}

pub type FiniteCoupling = QrCoupling<MatrixKernel, FiniteSubKernel, FiniteResidual>;

/// `Q + R` with the independent residual on a finite state space.
pub fn finite_coupling(kernel: MatrixKernel, sub: FiniteSubKernel) -> Result<FiniteCoupling> {
    let residual = FiniteResidual::independent(&kernel, &sub)?;
    Ok(QrCoupling {
        kernel,
        sub,
        residual,
    })
}

impl FiniteCoupling {
    /// Exact `Q(x, y, {(u,v)})` and `R(x, y, {(u,v)})`, indexed `u * n + v`.
    pub fn exact_parts(&self, x: usize, y: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.kernel.num_states();
        let p = self.kernel.matrix();
        let q: Vec<f64> = (0..n * n)
            .map(|k| self.sub.entry(x, y, k / n, k % n))
            .collect();
        let mass = self.sub.mass(&x, &y);
        let r = if mass < 1.0 {
            let m1 = self.sub.first_marginal(x, y);
            let m2 = self.sub.second_marginal(x, y);
            (0..n * n)
                .map(|k| {
                    let (u, v) = (k / n, k % n);
                    (p.get(x, u) - m1[u]) * (p.get(y, v) - m2[v]) / (1.0 - mass)
                })
                .collect()
        } else {
            vec![0.0; n * n]
        };
        (q, r)
    }

    /// Largest deviation between the marginals of `Q + R` and the kernel rows.
    pub fn marginal_error(&self) -> f64 {
        let n = self.kernel.num_states();
        let p = self.kernel.matrix();
        let mut worst = 0.0f64;
        for x in 0..n {
            for y in 0..n {
                let (q, r) = self.exact_parts(x, y);
                for s in 0..n {
                    let first: f64 = (0..n).map(|v| q[s * n + v] + r[s * n + v]).sum();
                    let second: f64 = (0..n).map(|u| q[u * n + s] + r[u * n + s]).sum();
                    worst = worst
                        .max((first - p.get(x, s)).abs())
                        .max((second - p.get(y, s)).abs());
                }
            }
        }
        worst
    }

    /// Transition matrix of the coupled chain on pairs, pair `(x, y)` ↦ `x * n + y`.
    pub fn pair_matrix(&self) -> Result<TransitionMatrix> {
        let n = self.kernel.num_states();
        let mut rows = Vec::with_capacity(n * n);
        for x in 0..n {
            for y in 0..n {
                let (q, r) = self.exact_parts(x, y);
                rows.push(q.iter().zip(&r).map(|(a, b)| a + b).collect::<Vec<f64>>());
            }
        }
        // The independent residual can leave rounding error of order 1e-16.
        for row in rows.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|e| *e /= s);
        }
        TransitionMatrix::new(rows)
    }
}

/// Realisation of the augmented coupling; `flags[0]` is the initial flag.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrajectory<P> {
    pub pairs: Vec<(P, P)>,
    pub flags: Vec<bool>,
    pub seed: u64,
}

/// Advance a pair `n` steps, calling `visit(k, step)` for `k = 1..=n`.
pub fn run_coupled<C: Coupling>(
    coupling: &C,
    x: PointOf<C>,
    y: PointOf<C>,
    n: usize,
    rng: &mut SimRng,
    mut visit: impl FnMut(usize, &CoupledStep<PointOf<C>>),
) {
    let (mut x, mut y) = (x, y);
    for k in 1..=n {
        let s = coupling.step(&x, &y, rng);
        visit(k, &s);
        x = s.first;
        y = s.second;
    }
}

pub fn simulate_coupled<C: Coupling>(
    coupling: &C,
    x0: &PointOf<C>,
    y0: &PointOf<C>,
    n: usize,
    seed: u64,
) -> CoupledTrajectory<PointOf<C>> {
    let mut rng = stream_rng(seed, domain::COUPLED, 0);
    let mut pairs = Vec::with_capacity(n + 1);
    let mut flags = Vec::with_capacity(n + 1);
    pairs.push((x0.clone(), y0.clone()));
    flags.push(false);
    run_coupled(coupling, x0.clone(), y0.clone(), n, &mut rng, |_, s| {
        pairs.push((s.first.clone(), s.second.clone()));
        flags.push(s.fired);
    });
    CoupledTrajectory { pairs, flags, seed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HitVariant {
    /// First `n ≥ 1` with the path in `A`.
    Rho,
    /// First `n ≥ m` with the path in `A`.
    RhoFrom(usize),
    /// First `n ≥ 1` after which every observed state stays in `A`.
    ///
    /// Only the states up to the horizon are seen, so an observed value `n`
    /// means "in `A` from `n` through the horizon"; the path-space absorption
    /// time can only be larger or equal.
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HitTime {
    At(usize),
    /// No qualifying time up to the horizon.
    Censored,
}

impl HitTime {
    pub fn value(&self) -> Option<usize> {
        match self {
            HitTime::At(n) => Some(*n),
            HitTime::Censored => None,
        }
    }
}

/// Hitting or absorption time of `A` along `path` (horizon `path.len() - 1`).
pub fn hitting_time<T>(path: &[T], in_set: impl Fn(&T) -> bool, variant: HitVariant) -> HitTime {
    let horizon = path.len().saturating_sub(1);
    match variant {
        HitVariant::Rho => first_from(path, &in_set, 1),
        HitVariant::RhoFrom(m) => first_from(path, &in_set, m),
        HitVariant::Tau => {
            if horizon == 0 || !in_set(&path[horizon]) {
                return HitTime::Censored;
            }
            let mut n = horizon;
            while n > 1 && in_set(&path[n - 1]) {
                n -= 1;
            }
            HitTime::At(n)
        }
    }
}

fn first_from<T>(path: &[T], in_set: &impl Fn(&T) -> bool, m: usize) -> HitTime {
    (m..path.len())
        .find(|&k| in_set(&path[k]))
        .map_or(HitTime::Censored, HitTime::At)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpMoment {
    /// Mean of `Λ^{-ρ}` over uncensored samples.
    pub estimate: Estimate,
    pub censored: usize,
    /// True when censoring occurred: the estimate is then only a lower bound.
    pub lower_bound: bool,
}

/// Estimate of `E(Λ^{-ρ})` from stopping-time samples.
pub fn exp_moment(samples: &[HitTime], lambda: f64) -> Result<ExpMoment> {
    if samples.is_empty() {
        return Err(invalid("no stopping-time samples"));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("Λ = {lambda} must lie in (0, 1)")));
    }
    let values: Vec<f64> = samples
        .iter()
        .filter_map(|s| s.value())
        .map(|n| lambda.powi(-(n as i32)))
        .collect();
    if values.is_empty() {
        return Err(Error::AllCensored);
    }
    let censored = samples.len() - values.len();
    Ok(ExpMoment {
        estimate: Estimate::from_samples(&values),
        censored,
        lower_bound: censored > 0,
    })
}

/// Per-step estimates of `E|g(φ¹_n) - g(φ²_n)|` and a fitted geometric rate.
#[derive(Debug, Clone, Serialize)]
pub struct DecayCurve {
    pub means: Vec<Estimate>,
    /// Fit over steps whose mean exceeds ten standard errors; `None` with
    /// fewer than three such steps.
    pub fit: Option<GeometricFit>,
}

pub fn decay_curve<C: Coupling>(
    coupling: &C,
    g: &(dyn Fn(&PointOf<C>) -> f64 + Sync),
    x0: &PointOf<C>,
    y0: &PointOf<C>,
    n_max: usize,
    replicas: usize,
    seed: u64,
) -> Result<DecayCurve> {
    if replicas < 100 {
        return Err(invalid("decay_curve needs at least 100 replicas"));
    }
    let paths = par_replicas(replicas, |r| {
        let mut rng = stream_rng(seed, domain::COUPLED, r as u64);
        let mut diffs = Vec::with_capacity(n_max + 1);
        diffs.push((g(x0) - g(y0)).abs());
        run_coupled(coupling, x0.clone(), y0.clone(), n_max, &mut rng, |_, s| {
            diffs.push((g(&s.first) - g(&s.second)).abs());
        });
        diffs
    });
    let means: Vec<Estimate> = (0..=n_max)
        .map(|k| {
            let column: Vec<f64> = paths.iter().map(|p| p[k]).collect();
            Estimate::from_samples(&column)
        })
        .collect();
    let usable: Vec<(usize, f64)> = means
        .iter()
        .enumerate()
        .filter(|(_, e)| e.mean > 0.0 && e.mean > 10.0 * e.stderr)
        .map(|(k, e)| (k, e.mean))
        .collect();
    Ok(DecayCurve {
        fit: fit_geometric(&usable),
        means,
    })
}

/// Declared constants for the contraction conditions on `Q` and the
/// return-time condition on the coupling.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BConditionParams {
    /// Contraction factor `δ ∈ (0, 1)`.
    pub delta: f64,
    /// Exponent `β ∈ (0, 1]` in the mass bound.
    pub beta: f64,
    /// Constant `c_β > 0` in the mass bound.
    pub c_beta: f64,
    /// Level `Γ` defining `K = {(x, y) ∈ F : V(x) + V(y) < Γ}`.
    pub level: f64,
    /// Rate `γ ∈ (0, 1)` in `E γ^{-ρ_K}`.
    pub gamma: f64,
    /// Drift constants `a`, `b` selecting the start set `V(x) + V(y) < 4b / (1 - a)`.
    pub a: f64,
    pub b: f64,
    pub replicas: usize,
    /// Horizon of the return-time simulations.
    pub horizon: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairCheck<P> {
    pub x: P,
    pub y: P,
    pub dist: f64,
    pub estimate: Estimate,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReturnCheck<P> {
    pub x: P,
    pub y: P,
    pub moment: Option<ExpMoment>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BConditionReport<P> {
    /// `∫ϱ(u,v) Q(x,y,du dv) ≤ δϱ(x,y)` per pair.
    pub contraction: Vec<PairCheck<P>>,
    /// Fired steps landing outside `F`.
    pub support_violations: usize,
    /// `Q(x, y, U(δϱ(x,y)))` per pair; the report keeps the minimiser.
    pub near_mass: Vec<PairCheck<P>>,
    pub near_mass_min: f64,
    pub near_mass_argmin: Option<(P, P)>,
    /// `1 - Q(x,y,X²) ≤ c_β ϱ^β(x,y)` per pair.
    pub mass_bound: Vec<PairCheck<P>>,
    /// Return-time moments from admissible starts.
    pub returns: Vec<ReturnCheck<P>>,
    /// Starts rejected because `V(x) + V(y) ≥ 4b / (1 - a)`.
    pub starts_skipped: usize,
    /// Largest `ϱ(x, y)` seen over visited pairs in `K`.
    pub gamma0: f64,
}

impl<P> BConditionReport<P> {
    pub fn contraction_pass(&self) -> bool {
        self.contraction.iter().all(|c| c.pass) && self.support_violations == 0
    }
    pub fn near_mass_pass(&self) -> bool {
        !self.near_mass.is_empty() && self.near_mass.iter().all(|c| c.pass)
    }
    pub fn mass_bound_pass(&self) -> bool {
        self.mass_bound.iter().all(|c| c.pass)
    }
    pub fn returns_pass(&self) -> bool {
        !self.returns.is_empty() && self.returns.iter().all(|c| c.pass)
    }
    pub fn all_pass(&self) -> bool {
        self.contraction_pass()
            && self.near_mass_pass()
            && self.mass_bound_pass()
            && self.returns_pass()
    }
}

/// Monte-Carlo report on the contraction, near-mass, mass-bound and
/// return-time conditions over user-declared sample pairs.
///
/// `in_f` describes the set `F`; `sample_pairs` must lie in `F`. The infimum
/// over `F` is replaced by the minimum over `sample_pairs`, and the return
/// condition is only probed from `starts`; neither is a certificate.
#[allow(clippy::too_many_arguments)]
pub fn check_b_conditions<C: Coupling>(
    coupling: &C,
    in_f: &(dyn Fn(&PointOf<C>, &PointOf<C>) -> bool + Sync),
    v: &(dyn Fn(&PointOf<C>) -> f64 + Sync),
    params: &BConditionParams,
    sample_pairs: &[(PointOf<C>, PointOf<C>)],
    starts: &[(PointOf<C>, PointOf<C>)],
    seed: u64,
) -> Result<BConditionReport<PointOf<C>>> {
    let p = params;
    if !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(invalid("δ must lie in (0, 1)"));
    }
    if !(p.beta > 0.0 && p.beta <= 1.0) || !(p.c_beta > 0.0) {
        return Err(invalid("β must lie in (0, 1] and c_β must be positive"));
    }
    if !(p.gamma > 0.0 && p.gamma < 1.0) || !(p.a > 0.0 && p.a < 1.0) || !(p.level > 0.0) {
        return Err(invalid("γ and a must lie in (0, 1), Γ must be positive"));
    }
    if p.replicas < 2 {
        return Err(invalid("need at least 2 replicas"));
    }
    if let Some((i, _)) = sample_pairs
        .iter()
        .enumerate()
        .find(|(_, (x, y))| !in_f(x, y))
    {
        return Err(invalid(format!("sample pair {i} does not lie in F")));
    }
    let space = coupling.base();

    let mut contraction = Vec::new();
    let mut near_mass = Vec::new();
    let mut mass_bound = Vec::new();
    let mut support_violations = 0usize;
    for (k, (x, y)) in sample_pairs.iter().enumerate() {
        let d = space.dist(x, y);
        let pair_seed = derive_seed(seed, k as u64);
        // (weighted distance, near indicator, fired, outside F)
        let draws: Vec<(f64, f64, f64, bool)> = par_replicas(p.replicas, |r| {
            let mut rng = stream_rng(pair_seed, domain::REPLICA, r as u64);
            let s = coupling.step(x, y, &mut rng);
            if s.fired {
                let duv = space.dist(&s.first, &s.second);
                let inside = in_f(&s.first, &s.second);
                let near = inside && duv <= p.delta * d;
                (duv, near as u8 as f64, 1.0, !inside)
            } else {
                (0.0, 0.0, 0.0, false)
            }
        });
        support_violations += draws.iter().filter(|d| d.3).count();
        let weighted = Estimate::from_samples(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
        let bound = p.delta * d;
        contraction.push(PairCheck {
            x: x.clone(),
            y: y.clone(),
            dist: d,
            estimate: weighted,
            bound,
            pass: weighted.mean <= bound + 3.0 * weighted.stderr,
        });
        let near = Estimate::from_samples(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
        near_mass.push(PairCheck {
            x: x.clone(),
            y: y.clone(),
            dist: d,
            estimate: near,
            bound: 0.0,
            pass: near.mean - 3.0 * near.stderr > 0.0,
        });
        let mass = match coupling.exact_mass(x, y) {
            Some(m) => Estimate::exact(m),
            None => Estimate::from_samples(&draws.iter().map(|d| d.2).collect::<Vec<_>>()),
        };
        let deficit = Estimate {
            mean: 1.0 - mass.mean,
            ..mass
        };
        let bound = p.c_beta * d.powf(p.beta);
        mass_bound.push(PairCheck {
            x: x.clone(),
            y: y.clone(),
            dist: d,
            estimate: deficit,
            bound,
            pass: deficit.mean <= bound + 3.0 * deficit.stderr + 1e-12,
        });
    }
    let (near_mass_min, near_mass_argmin) = near_mass
        .iter()
        .min_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean))
        .map_or((f64::NAN, None), |c| {
            (c.estimate.mean, Some((c.x.clone(), c.y.clone())))
        });

    let start_level = 4.0 * p.b / (1.0 - p.a);
    let in_k = |x: &PointOf<C>, y: &PointOf<C>| in_f(x, y) && v(x) + v(y) < p.level;
    let mut returns = Vec::new();
    let mut starts_skipped = 0usize;
    let mut gamma0 = 0.0f64;
    for (k, (x, y)) in starts.iter().enumerate() {
        if v(x) + v(y) >= start_level {
            starts_skipped += 1;
            continue;
        }
        let start_seed = derive_seed(seed ^ 0x5eed_0b5e, k as u64);
        let times: Vec<(HitTime, f64)> = par_replicas(p.replicas, |r| {
            let mut rng = stream_rng(start_seed, domain::COUPLED, r as u64);
            let mut hit = HitTime::Censored;
            let mut widest = 0.0f64;
            let (mut a, mut b) = (x.clone(), y.clone());
            for n in 1..=p.horizon {
                let s = coupling.step(&a, &b, &mut rng);
                a = s.first;
                b = s.second;
                if in_k(&a, &b) {
                    widest = widest.max(space.dist(&a, &b));
                    if hit == HitTime::Censored {
                        hit = HitTime::At(n);
                        break;
                    }
                }
            }
            (hit, widest)
        });
        gamma0 = times.iter().map(|t| t.1).fold(gamma0, f64::max);
        let hits: Vec<HitTime> = times.iter().map(|t| t.0).collect();
        let moment = exp_moment(&hits, p.gamma).ok();
        let pass = matches!(moment, Some(m) if m.censored == 0 && m.estimate.mean.is_finite());
        returns.push(ReturnCheck {
            x: x.clone(),
            y: y.clone(),
            moment,
            pass,
        });
    }

    Ok(BConditionReport {
        contraction,
        support_violations,
        near_mass,
        near_mass_min,
        near_mass_argmin,
        mass_bound,
        returns,
        starts_skipped,
        gamma0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{MapKernel, RealLine};

    fn half_half() -> MatrixKernel {
        MatrixKernel::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    /// `Q` putting mass 1/2 on the diagonal pair `(0, 0)` only.
    fn diag_q() -> FiniteSubKernel {
        FiniteSubKernel::new(2, |_, _, u, v| if u == 0 && v == 0 { 0.5 } else { 0.0 }).unwrap()
    }

    #[test]
    fn zero_q_residual_is_product() {
        let k = MatrixKernel::two_state(0.3, 0.6).unwrap();
        let c = finite_coupling(
            k.clone(),
            FiniteSubKernel::new(2, |_, _, _, _| 0.0).unwrap(),
        )
        .unwrap();
        let (q, r) = c.exact_parts(0, 1);
        assert!(q.iter().all(|e| *e == 0.0));
        let p = k.matrix();
        for u in 0..2 {
            for v in 0..2 {
                assert!((r[u * 2 + v] - p.get(0, u) * p.get(1, v)).abs() < 1e-15);
            }
        }
        let mut rng = stream_rng(1, domain::COUPLED, 0);
        let reps = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..reps {
            let s = coupled_step(&c, &0, &1, &mut rng);
            assert!(!s.fired);
            counts[s.first * 2 + s.second] += 1;
        }
        for k in 0..4 {
            let f = counts[k] as f64 / reps as f64;
            assert!((f - r[k]).abs() < 3.0 * (r[k] * (1.0 - r[k]) / reps as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn residual_on_half_half_enumerates() {
        // leftovers: first (0, .5) and second (0, .5), renormalised: both (0, 1)
        let c = finite_coupling(half_half(), diag_q()).unwrap();
        let (q, r) = c.exact_parts(0, 1);
        assert_eq!(q, vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(r, vec![0.0, 0.0, 0.0, 0.5]);
        let mut rng = stream_rng(2, domain::COUPLED, 0);
        for _ in 0..100 {
            assert_eq!(residual_step(&c, &0, &1, &mut rng).unwrap(), (1, 1));
        }
        assert!(c.marginal_error() < 1e-15);
    }

    #[test]
    fn full_mass_residual_is_an_error() {
        let k = MatrixKernel::from_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let full = FiniteSubKernel::new(2, |_, _, u, v| (u == 0 && v == 0) as u8 as f64).unwrap();
        let c = finite_coupling(k, full).unwrap();
        let mut rng = stream_rng(2, domain::COUPLED, 0);
        assert!(matches!(
            residual_step(&c, &0, &1, &mut rng),
            Err(Error::FullMass)
        ));
        // and the flag is always raised
        for _ in 0..50 {
            assert!(coupled_step(&c, &0, &1, &mut rng).fired);
        }
    }

    #[test]
    fn joint_law_of_augmented_step() {
        let c = finite_coupling(half_half(), diag_q()).unwrap();
        // exact: θ=1 and (0,0) w.p. 1/2; θ=0 and (1,1) w.p. 1/2
        let mut rng = stream_rng(3, domain::COUPLED, 0);
        let reps = 100_000;
        let mut fired00 = 0usize;
        for _ in 0..reps {
            let s = coupled_step(&c, &1, &0, &mut rng);
            match (s.fired, s.first, s.second) {
                (true, 0, 0) => fired00 += 1,
                (false, 1, 1) => {}
                other => panic!("impossible outcome {other:?}"),
            }
        }
        let f = fired00 as f64 / reps as f64;
        assert!((f - 0.5).abs() < 3.0 * 0.5 / (reps as f64).sqrt());
    }

    #[test]
    fn domination_is_enforced() {
        let k = MatrixKernel::two_state(0.3, 0.6).unwrap();
        let bad =
            FiniteSubKernel::new(2, |_, _, u, v| if u == 1 && v == 1 { 0.5 } else { 0.0 }).unwrap();
        assert!(finite_coupling(k, bad).is_err());
        assert!(FiniteSubKernel::new(2, |_, _, _, _| 0.3).is_err());
    }

    #[test]
    fn hitting_times_on_cycle() {
        let path = [0usize, 1, 2, 0, 1, 2, 0];
        assert_eq!(
            hitting_time(&path, |s| *s == 2, HitVariant::Rho),
            HitTime::At(2)
        );
        assert_eq!(
            hitting_time(&path, |s| *s == 2, HitVariant::RhoFrom(4)),
            HitTime::At(5)
        );
        assert_eq!(
            hitting_time(&path, |s| *s == 7, HitVariant::Rho),
            HitTime::Censored
        );
        assert_eq!(
            hitting_time(&path, |s| *s == 2, HitVariant::Tau),
            HitTime::Censored
        );
        let constant = [4usize; 6];
        assert_eq!(
            hitting_time(&constant, |s| *s == 4, HitVariant::Rho),
            HitTime::At(1)
        );
        assert_eq!(
            hitting_time(&constant, |s| *s == 4, HitVariant::Tau),
            HitTime::At(1)
        );
        let settles = [0usize, 1, 0, 1, 1, 1];
        assert_eq!(
            hitting_time(&settles, |s| *s == 1, HitVariant::Tau),
            HitTime::At(3)
        );
    }

    #[test]
    fn exp_moment_cases() {
        let m = exp_moment(&[HitTime::At(2); 10], 0.5).unwrap();
        assert_eq!(m.estimate.mean, 4.0);
        assert!(!m.lower_bound);
        assert!(exp_moment(&[HitTime::At(2)], 1.0).is_err());
        assert!(matches!(
            exp_moment(&[HitTime::Censored; 3], 0.5),
            Err(Error::AllCensored)
        ));
        let m = exp_moment(&[HitTime::At(1), HitTime::Censored], 0.5).unwrap();
        assert_eq!(m.censored, 1);
        assert!(m.lower_bound);
    }

    #[test]
    fn exp_moment_geometric() {
        // ρ ~ Geometric(p) on {1, 2, ...}: E Λ^{-ρ} = (p/Λ) / (1 - (1-p)/Λ)
        let (p, lambda): (f64, f64) = (0.5, 0.9);
        let closed = (p / lambda) / (1.0 - (1.0 - p) / lambda);
        let brute: f64 = (1..2000)
            .map(|n| p * (1.0 - p).powi(n - 1) * lambda.powi(-n))
            .sum();
        assert!((closed - 1.25).abs() < 1e-12);
        assert!((brute - closed).abs() < 1e-9);
        let mut rng = stream_rng(9, domain::REPLICA, 0);
        let samples: Vec<HitTime> = (0..200_000)
            .map(|_| {
                let mut n = 1;
                while rng.random::<f64>() >= p {
                    n += 1;
                }
                HitTime::At(n)
            })
            .collect();
        let m = exp_moment(&samples, lambda).unwrap();
        assert!(m.estimate.within(closed, 3.0), "{:?}", m.estimate);
    }

    #[test]
    fn decay_curve_trivial_cases() {
        let k = MatrixKernel::two_state(0.3, 0.6).unwrap();
        let c = finite_coupling(
            k.clone(),
            FiniteSubKernel::diagonal_overlap(&k, 1.0).unwrap(),
        )
        .unwrap();
        let g = |s: &usize| *s as f64;
        let same = decay_curve(&c, &g, &1, &1, 10, 200, 4).unwrap();
        assert!(same.means.iter().all(|e| e.mean == 0.0));
        assert!(same.fit.is_none());
        let flat = decay_curve(&c, &|_: &usize| 2.0, &0, &1, 10, 200, 4).unwrap();
        assert!(flat.means.iter().all(|e| e.mean == 0.0));
        assert!(decay_curve(&c, &g, &0, &1, 10, 99, 4).is_err());
    }

    #[test]
    fn coupled_trajectory_identity_diagonal() {
        let k = MatrixKernel::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = FiniteSubKernel::new(2, |x, y, u, v| (u == x && v == y) as u8 as f64).unwrap();
        let c = finite_coupling(k, q).unwrap();
        let t = simulate_coupled(&c, &0, &1, 8, 5);
        assert!(t.pairs.iter().all(|p| *p == (0, 1)));
        assert!(t.flags[1..].iter().all(|f| *f));
        assert_eq!(t.pairs.len(), t.flags.len());
        assert_eq!(t, simulate_coupled(&c, &0, &1, 8, 5));
    }

    #[test]
    fn diagonal_preserving_q_keeps_equal_pairs() {
        let k = MatrixKernel::from_rows(vec![
            vec![0.2, 0.5, 0.3],
            vec![0.4, 0.4, 0.2],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        let c = finite_coupling(
            k.clone(),
            FiniteSubKernel::diagonal_overlap(&k, 1.0).unwrap(),
        )
        .unwrap();
        let t = simulate_coupled(&c, &2, &2, 50, 8);
        assert!(t.pairs.iter().all(|(u, v)| u == v));
    }

    type Halving = MapKernel<RealLine, fn(&f64) -> f64>;

    /// Synchronous contraction on the line: `T(x) = x / 2`.
    fn contraction() -> QrCoupling<Halving, impl SubKernel<f64>, impl Residual<f64>> {
        struct Synced;
        impl SubKernel<f64> for Synced {
            fn mass(&self, _: &f64, _: &f64) -> f64 {
                1.0
            }
            fn sample_given_fire(&self, x: &f64, y: &f64, _: &mut SimRng) -> (f64, f64) {
                (x / 2.0, y / 2.0)
            }
        }
        fn half(x: &f64) -> f64 {
            x / 2.0
        }
        QrCoupling {
            kernel: MapKernel {
                space: RealLine,
                map: half as fn(&f64) -> f64,
            },
            sub: Synced,
            residual: FnResidual(|x: &f64, y: &f64, _: &mut SimRng| (x / 2.0, y / 2.0)),
        }
    }

    fn b_params(delta: f64) -> BConditionParams {
        BConditionParams {
            delta,
            beta: 1.0,
            c_beta: 1.0,
            level: 2.0,
            gamma: 0.5,
            a: 0.5,
            b: 1.0,
            replicas: 200,
            horizon: 50,
        }
    }

    #[test]
    fn synchronous_contraction_passes_all() {
        let c = contraction();
        let pairs = vec![(0.0, 1.0), (-2.0, 3.0), (0.5, 0.5)];
        let starts = vec![(0.0, 1.0), (1.0, 2.0), (100.0, 0.0)];
        let v = |x: &f64| x.abs();
        let r =
            check_b_conditions(&c, &|_, _| true, &v, &b_params(0.6), &pairs, &starts, 3).unwrap();
        assert!(r.contraction_pass());
        assert!(r.near_mass_pass());
        assert!(r.mass_bound_pass());
        assert!(r.returns_pass());
        assert!(r.all_pass());
        assert_eq!(r.starts_skipped, 1);
        assert!(r.gamma0 > 0.0);
    }

    #[test]
    fn declared_delta_too_small_fails_contraction() {
        let c = contraction();
        let pairs = vec![(0.0, 1.0), (-2.0, 3.0)];
        let v = |x: &f64| x.abs();
        let r = check_b_conditions(
            &c,
            &|_, _| true,
            &v,
            &b_params(0.3),
            &pairs,
            &[(0.0, 1.0)],
            3,
        )
        .unwrap();
        assert!(!r.contraction_pass());
        assert!(!r.all_pass());
    }

    proptest::proptest! {
        #[test]
        fn flag_frequency_matches_mass(seed in 0u64..50) {
            let k = MatrixKernel::from_rows(vec![
                vec![0.2, 0.5, 0.3],
                vec![0.4, 0.4, 0.2],
                vec![0.1, 0.1, 0.8],
            ]).unwrap();
            let c = finite_coupling(k.clone(), FiniteSubKernel::diagonal_overlap(&k, 0.7).unwrap()).unwrap();
            let mass = c.exact_mass(&0, &2).unwrap();
            let mut rng = stream_rng(seed, domain::COUPLED, 0);
            let reps = 4000;
            let fired = (0..reps).filter(|_| coupled_step(&c, &0, &2, &mut rng).fired).count();
            let f = fired as f64 / reps as f64;
            let se = (mass * (1.0 - mass) / reps as f64).sqrt();
            proptest::prop_assert!((f - mass).abs() < 4.5 * se);
        }
    }
}
