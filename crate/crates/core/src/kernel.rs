//! State spaces, one-step transition kernels and Monte-Carlo estimates of the
//! Markov operator `P^n mu` and its dual `U^n f`.

use crate::error::{invalid, Result};
use crate::measure::EmpiricalMeasure;
use crate::rng::{domain, par_replicas, stream_rng, SimRng};
use crate::stats::Estimate;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::fmt::Debug;

/// A metric space whose points the samplers move around.
pub trait MetricSpace: Sync {
    type Point: Clone + PartialEq + Debug + Send + Sync;

    fn dist(&self, a: &Self::Point, b: &Self::Point) -> f64;

    fn describe(&self) -> String;
}

/// A samplable one-step transition law `Π(x, ·)`.
///
/// `sample` must be a pure function of the state and the generator position.
pub trait Kernel: MetricSpace {
    fn sample(&self, x: &Self::Point, rng: &mut SimRng) -> Self::Point;
}

/// The real line with `|a - b|`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RealLine;

impl MetricSpace for RealLine {
    type Point = f64;
    fn dist(&self, a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }
    fn describe(&self) -> String {
        "real line".into()
    }
}

/// `R^d` with the Euclidean norm.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl MetricSpace for Euclidean {
    type Point = Vec<f64>;
    fn dist(&self, a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
    fn describe(&self) -> String {
        "euclidean space".into()
    }
}

/// Row-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(invalid("transition matrix must have at least one state"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(invalid(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(invalid(format!("row {i} has a negative or NaN entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("row {i} sums to {s}, expected 1")));
            }
        }
        Ok(TransitionMatrix { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    /// Matrix product `self * other` (apply `self`, then `other`).
    pub fn compose(&self, other: &TransitionMatrix) -> TransitionMatrix {
        let n = self.len();
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| self.rows[i][k] * other.rows[k][j]).sum())
                    .collect()
            })
            .collect();
        TransitionMatrix { rows }
    }

    pub fn power(&self, k: usize) -> TransitionMatrix {
        let n = self.len();
        let mut out = TransitionMatrix {
            rows: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        };
        for _ in 0..k {
            out = out.compose(self);
        }
        out
    }

    /// Distribution after one step from `mu` (row vector times matrix).
    pub fn push(&self, mu: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| (0..n).map(|i| mu[i] * self.rows[i][j]).sum())
            .collect()
    }

    /// Stationary vector by Gaussian elimination on `π(P - I) = 0, Σπ = 1`.
    ///
    /// Assumes the chain has a single recurrent class.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.len();
        // Columns of (P - I)^T with the last equation replaced by normalisation.
        let mut a = vec![vec![0.0; n + 1]; n];
        for (r, eq) in a.iter_mut().enumerate().take(n - 1) {
            for (i, row) in self.rows.iter().enumerate() {
                eq[i] = row[r] - if i == r { 1.0 } else { 0.0 };
            }
        }
        for i in 0..n {
            a[n - 1][i] = 1.0;
        }
        a[n - 1][n] = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for k in col..=n {
                a[col][k] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    if f != 0.0 {
                        for k in col..=n {
                            a[r][k] -= f * a[col][k];
                        }
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n]).collect()
    }
}

/// Finite-state kernel with an exact transition-matrix view.
///
/// States are indices; the metric is `|pos_i - pos_j|` for the supplied
/// positions (the index itself by default).
#[derive(Debug, Clone)]
pub struct MatrixKernel {
    matrix: TransitionMatrix,
    cumulative: Vec<Vec<f64>>,
    positions: Vec<f64>,
}

impl MatrixKernel {
    pub fn new(matrix: TransitionMatrix) -> Self {
        let positions = (0..matrix.len()).map(|i| i as f64).collect();
        Self::with_positions(matrix, positions).expect("index positions have the right length")
    }

    pub fn with_positions(matrix: TransitionMatrix, positions: Vec<f64>) -> Result<Self> {
        if positions.len() != matrix.len() {
            return Err(invalid("one position per state is required"));
        }
        let cumulative = matrix
            .rows()
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(MatrixKernel {
            matrix,
            cumulative,
            positions,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Ok(Self::new(TransitionMatrix::new(rows)?))
    }

    /// Two-state chain with `P(0→1) = p01`, `P(1→0) = p10`.
    pub fn two_state(p01: f64, p10: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p01) || !(0.0..=1.0).contains(&p10) {
            return Err(invalid(
                "two-state switching probabilities must lie in [0, 1]",
            ));
        }
        Self::from_rows(vec![vec![1.0 - p01, p01], vec![p10, 1.0 - p10]])
    }

    /// Deterministic cycle `x ↦ x + 1 mod n`.
    pub fn cycle(n: usize) -> Result<Self> {
        Self::from_rows(
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if j == (i + 1) % n { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.matrix
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn num_states(&self) -> usize {
        self.matrix.len()
    }
}

impl MetricSpace for MatrixKernel {
    type Point = usize;
    fn dist(&self, a: &usize, b: &usize) -> f64 {
        (self.positions[*a] - self.positions[*b]).abs()
    }
    fn describe(&self) -> String {
        format!("{}-state space", self.num_states())
    }
}

/// Index drawn from a cumulative distribution by inversion.
pub(crate) fn invert_cumulative(cumulative: &[f64], u: f64) -> usize {
    let last = cumulative.len() - 1;
    cumulative.iter().position(|&c| u < c).unwrap_or(last)
}

impl Kernel for MatrixKernel {
    fn sample(&self, x: &usize, rng: &mut SimRng) -> usize {
        let u: f64 = rng.random();
        invert_cumulative(&self.cumulative[*x], u)
    }
}

/// `Π(x, ·) = δ_x` on any space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityKernel<S>(pub S);

impl<S: MetricSpace> MetricSpace for IdentityKernel<S> {
    type Point = S::Point;
    fn dist(&self, a: &S::Point, b: &S::Point) -> f64 {
        self.0.dist(a, b)
    }
    fn describe(&self) -> String {
        format!("identity kernel on {}", self.0.describe())
    }
}

impl<S: MetricSpace> Kernel for IdentityKernel<S> {
    fn sample(&self, x: &S::Point, _rng: &mut SimRng) -> S::Point {
        x.clone()
    }
}

/// Deterministic kernel `Π(x, ·) = δ_{T(x)}`.
pub struct MapKernel<S, F> {
    pub space: S,
    pub map: F,
}

impl<S, F> MetricSpace for MapKernel<S, F>
where
    S: MetricSpace,
    F: Fn(&S::Point) -> S::Point + Sync,
{
    type Point = S::Point;
    fn dist(&self, a: &S::Point, b: &S::Point) -> f64 {
        self.space.dist(a, b)
    }
    fn describe(&self) -> String {
        format!("deterministic map on {}", self.space.describe())
    }
}

impl<S, F> Kernel for MapKernel<S, F>
where
    S: MetricSpace,
    F: Fn(&S::Point) -> S::Point + Sync,
{
    fn sample(&self, x: &S::Point, _rng: &mut SimRng) -> S::Point {
        (self.map)(x)
    }
}

/// State-independent kernel: every step draws `N(mean, sd²)` afresh.
#[derive(Debug, Clone, Copy)]
pub struct IidNormalKernel {
    pub mean: f64,
    pub sd: f64,
}

impl Default for IidNormalKernel {
    fn default() -> Self {
        IidNormalKernel { mean: 0.0, sd: 1.0 }
    }
}

impl MetricSpace for IidNormalKernel {
    type Point = f64;
    fn dist(&self, a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }
    fn describe(&self) -> String {
        format!("iid normal({}, {}^2) kernel", self.mean, self.sd)
    }
}

impl Kernel for IidNormalKernel {
    fn sample(&self, _x: &f64, rng: &mut SimRng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.sd * z
    }
}

/// Initial condition of a simulated chain.
pub enum Start<'a, P> {
    At(P),
    Draw(&'a (dyn Fn(&mut SimRng) -> P + Sync)),
}

impl<P: Clone> Start<'_, P> {
    fn resolve(&self, rng: &mut SimRng) -> P {
        match self {
            Start::At(p) => p.clone(),
            Start::Draw(f) => f(rng),
        }
    }
}

/// A finite realisation `states[0..=n]` of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<P> {
    pub states: Vec<P>,
    pub seed: u64,
}

impl<P> Trajectory<P> {
    /// Number of transitions `n`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Advance `x` by `n` steps, calling `visit(k, state)` for `k = 1..=n`.
pub fn run_chain<K: Kernel>(
    kernel: &K,
    x: K::Point,
    n: usize,
    rng: &mut SimRng,
    mut visit: impl FnMut(usize, &K::Point),
) -> K::Point {
    let mut state = x;
    for k in 1..=n {
        state = kernel.sample(&state, rng);
        visit(k, &state);
    }
    state
}

pub fn simulate_chain<K: Kernel>(
    kernel: &K,
    start: &Start<'_, K::Point>,
    n: usize,
    seed: u64,
) -> Trajectory<K::Point> {
    let mut rng = stream_rng(seed, domain::CHAIN, 0);
    let x0 = start.resolve(&mut rng);
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    run_chain(kernel, x0, n, &mut rng, |_, s| states.push(s.clone()));
    Trajectory { states, seed }
}

/// One `n`-step sample per atom of `mu`, weights preserved.
pub fn estimate_pushforward<K: Kernel>(
    kernel: &K,
    mu: &EmpiricalMeasure<K::Point>,
    n: usize,
    seed: u64,
) -> EmpiricalMeasure<K::Point> {
    if n == 0 {
        return mu.clone();
    }
    let atoms = par_replicas(mu.len(), |r| {
        let (x, w) = &mu.atoms()[r];
        let mut rng = stream_rng(seed, domain::PUSHFORWARD, r as u64);
        (run_chain(kernel, x.clone(), n, &mut rng, |_, _| {}), *w)
    });
    EmpiricalMeasure::from_trusted(atoms)
}

/// Monte-Carlo estimate of `U^n f(x) = E_x f(φ_n)` from independent replicas.
pub fn estimate_dual<K: Kernel>(
    kernel: &K,
    f: &(dyn Fn(&K::Point) -> f64 + Sync),
    x: &K::Point,
    n: usize,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    if replicas < 2 {
        return Err(invalid("estimate_dual needs at least 2 replicas"));
    }
    let values = par_replicas(replicas, |r| {
        let mut rng = stream_rng(seed, domain::REPLICA, r as u64);
        f(&run_chain(kernel, x.clone(), n, &mut rng, |_, _| {}))
    });
    Ok(Estimate::from_samples(&values))
}

/// Drift check at one grid state.
#[derive(Debug, Clone, Serialize)]
pub struct DriftPoint<P> {
    pub state: P,
    pub v: f64,
    /// Estimate of `UV(x)` or `UV²(x)`.
    pub estimate: Estimate,
    /// `aV(x) + b` or `(aV(x) + b)²`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport<P> {
    pub squared: bool,
    pub a: f64,
    pub b: f64,
    pub points: Vec<DriftPoint<P>>,
}

impl<P> DriftReport<P> {
    pub fn all_pass(&self) -> bool {
        self.points.iter().all(|p| p.pass)
    }

    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| !p.pass).count()
    }
}

/// Monte-Carlo check of `UV ≤ aV + b` (or `UV² ≤ (aV + b)²` when `squared`).
///
/// A grid point passes when the estimate is at most `bound + 3·stderr`.
/// Failing points are flagged in the report, not returned as errors.
#[allow(clippy::too_many_arguments)]
pub fn check_drift<K: Kernel>(
    kernel: &K,
    v: &(dyn Fn(&K::Point) -> f64 + Sync),
    grid: &[K::Point],
    a: f64,
    b: f64,
    squared: bool,
    replicas: usize,
    seed: u64,
) -> Result<DriftReport<K::Point>> {
    if !(a > 0.0 && a < 1.0) {
        return Err(invalid(format!(
            "drift constant a = {a} must lie in (0, 1)"
        )));
    }
    if !(b >= 0.0) {
        return Err(invalid(format!(
            "drift constant b = {b} must be nonnegative"
        )));
    }
    if grid.is_empty() {
        return Err(invalid("drift grid is empty"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for (g, x) in grid.iter().enumerate() {
        let vx = v(x);
        let f = |y: &K::Point| if squared { v(y).powi(2) } else { v(y) };
        let estimate = estimate_dual(
            kernel,
            &f,
            x,
            1,
            replicas,
            crate::rng::derive_seed(seed, g as u64),
        )?;
        let bound = if squared {
            (a * vx + b).powi(2)
        } else {
            a * vx + b
        };
        let pass = estimate.mean <= bound + 3.0 * estimate.stderr;
        points.push(DriftPoint {
            state: x.clone(),
            v: vx,
            estimate,
            bound,
            pass,
        });
    }
    Ok(DriftReport {
        squared,
        a,
        b,
        points,
    })
}
