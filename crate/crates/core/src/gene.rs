//! Post-jump chain of a switching gene-expression model.
//!
//! Between jumps the protein amount decays along one of `N` semiflows,
//! `S_i(t, y) = y e^{-r_i t}`. Jumps arrive at rate `λ`; each adds an
//! exponential burst `θ ~ Exp(β(y))` with `β(y) = β₀ + β₁ / (1 + y)` and a
//! uniform perturbation `h ~ U[0, ε]`. The next semiflow index is drawn from
//! `π_i·(y') = (1 - s(y')) P0_i· + s(y') P1_i·` with `s(y) = y / (1 + y)`.
//!
//! The state space `[0, ∞) × {0, .., N-1}` carries the metric
//! `ϱ((y₁, i), (y₂, j)) = |y₁ - y₂| + c̃·[i ≠ j]`.
//!
//! [`GeneCoupling`] is one concrete coupling of the chain with itself: both
//! copies share the waiting time and the perturbation, bursts are coupled
//! maximally, and so are the switching rows. The `Q` part fires exactly when
//! both the bursts and the new indices coincide. The model's theory only
//! asserts that some suitable `Q` exists; this one is a design choice.

use crate::coupling::{BConditionParams, CoupledStep, Coupling};
use crate::error::{invalid, Result};
use crate::kernel::{Kernel, MetricSpace};
use crate::rng::{derive_seed, stream_rng, SimRng};
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneModelConfig {
    /// Jump intensity `λ`.
    pub lambda: f64,
    /// Decay rate `r_i` of each semiflow. Negative rates model growth.
    pub decay_rates: Vec<f64>,
    pub beta0: f64,
    pub beta1: f64,
    /// Switching rows at `y = 0`.
    pub switch_low: Vec<Vec<f64>>,
    /// Switching rows as `y → ∞`.
    pub switch_high: Vec<Vec<f64>>,
    /// Perturbation width `ε ∈ [0, ε*]`.
    pub epsilon: f64,
    pub epsilon_max: f64,
    /// Weight `c̃` of the index mismatch in the metric.
    pub c_tilde: f64,
    /// Reference point `ȳ` of the Lyapunov function.
    pub y_ref: f64,
}

impl Default for GeneModelConfig {
    fn default() -> Self {
        GeneModelConfig {
            lambda: 1.0,
            decay_rates: vec![1.0, 2.0],
            beta0: 1.0,
            beta1: 0.5,
            switch_low: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            switch_high: vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            epsilon: 0.1,
            epsilon_max: 0.2,
            c_tilde: 1.0,
            y_ref: 0.0,
        }
    }
}

impl GeneModelConfig {
    /// All violated preconditions, in field order.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            out.push(("lambda", "jump intensity must be positive".to_string()));
        }
        if self.decay_rates.is_empty() {
            out.push((
                "decay_rates",
                "at least one semiflow is required".to_string(),
            ));
        }
        if self.decay_rates.iter().any(|r| !r.is_finite()) {
            out.push(("decay_rates", "decay rates must be finite".to_string()));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            out.push(("beta0", "burst rate beta0 must be positive".to_string()));
        }
        if !(self.beta1 >= 0.0 && self.beta1.is_finite()) {
            out.push(("beta1", "burst rate beta1 must be nonnegative".to_string()));
        }
        let n = self.decay_rates.len();
        for (name, m) in [
            ("switch_low", &self.switch_low),
            ("switch_high", &self.switch_high),
        ] {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                out.push((name, format!("switching matrix must be {n}x{n}")));
            } else if m.iter().any(|row| {
                row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12
            }) {
                out.push((
                    name,
                    "switching rows must be probability vectors".to_string(),
                ));
            }
        }
        if !(self.epsilon_max > 0.0 && self.epsilon_max.is_finite()) {
            out.push(("epsilon_max", "epsilon_max must be positive".to_string()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon <= self.epsilon_max) {
            out.push((
                "epsilon",
                "epsilon must lie in [0, epsilon_max]".to_string(),
            ));
        }
        if !(self.c_tilde > 0.0 && self.c_tilde.is_finite()) {
            out.push((
                "c_tilde",
                "metric weight c_tilde must be positive".to_string(),
            ));
        }
        if !(self.y_ref >= 0.0 && self.y_ref.is_finite()) {
            out.push((
                "y_ref",
                "reference point must be a nonnegative number".to_string(),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((field, msg)) => Err(invalid(format!("{field}: {msg}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelState {
    pub y: f64,
    /// Semiflow index, 0-based.
    pub i: usize,
}

impl ModelState {
    pub fn new(y: f64, i: usize) -> Self {
        ModelState { y, i }
    }
}

/// Random ingredients of one jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpRecord {
    pub dt: f64,
    pub y_mid: f64,
    pub theta: f64,
    pub h: f64,
    pub j: usize,
}

#[derive(Debug, Clone)]
pub struct GeneModel {
    cfg: GeneModelConfig,
}

impl GeneModel {
    pub fn new(cfg: GeneModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(GeneModel { cfg })
    }

    pub fn config(&self) -> &GeneModelConfig {
        &self.cfg
    }

    pub fn num_flows(&self) -> usize {
        self.cfg.decay_rates.len()
    }

    pub fn semiflow(&self, i: usize, t: f64, y: f64) -> f64 {
        y * (-self.cfg.decay_rates[i] * t).exp()
    }

    pub fn burst_rate(&self, y: f64) -> f64 {
        self.cfg.beta0 + self.cfg.beta1 / (1.0 + y)
    }

    pub fn burst_density(&self, y: f64, theta: f64) -> f64 {
        if theta < 0.0 {
            return 0.0;
        }
        let b = self.burst_rate(y);
        b * (-b * theta).exp()
    }

    pub fn switch_prob(&self, i: usize, j: usize, y: f64) -> f64 {
        let s = y / (1.0 + y);
        (1.0 - s) * self.cfg.switch_low[i][j] + s * self.cfg.switch_high[i][j]
    }

    pub fn switch_row(&self, i: usize, y: f64) -> Vec<f64> {
        (0..self.num_flows())
            .map(|j| self.switch_prob(i, j, y))
            .collect()
    }

    fn draw_switch(&self, i: usize, y: f64, u: f64) -> usize {
        let n = self.num_flows();
        let mut acc = 0.0;
        for j in 0..n {
            acc += self.switch_prob(i, j, y);
            if u < acc {
                return j;
            }
        }
        // rounding left u above the last partial sum
        (0..n)
            .rev()
            .find(|&j| self.switch_prob(i, j, y) > 0.0)
            .unwrap_or(n - 1)
    }

    pub fn lyapunov_v(&self, state: &ModelState) -> f64 {
        (state.y - self.cfg.y_ref).abs()
    }

    /// One step of the post-jump chain together with its random ingredients.
    pub fn post_jump_step(&self, state: &ModelState, rng: &mut SimRng) -> (ModelState, JumpRecord) {
        let e: f64 = rng.sample(Exp1);
        self.jump_after(state, e / self.cfg.lambda, rng)
    }

    /// The jump that follows a waiting time `dt` chosen by the caller.
    pub fn jump_after(
        &self,
        state: &ModelState,
        dt: f64,
        rng: &mut SimRng,
    ) -> (ModelState, JumpRecord) {
        let y_mid = self.semiflow(state.i, dt, state.y);
        let e: f64 = rng.sample(Exp1);
        let theta = e / self.burst_rate(y_mid);
        let h = self.cfg.epsilon * rng.random::<f64>();
        let y = y_mid + theta + h;
        let j = self.draw_switch(state.i, y, rng.random());
        (
            ModelState { y, i: j },
            JumpRecord {
                dt,
                y_mid,
                theta,
                h,
                j,
            },
        )
    }

    /// `g(y, i) = atan(min(y, 10)) + shift·[i = 0]`: bounded and Lipschitz
    /// with `|g|_Lip ≤ max(1, shift / c̃)`.
    pub fn squashed_observable(
        &self,
        shift: f64,
    ) -> impl Fn(&ModelState) -> f64 + Sync + Send + Copy {
        move |s: &ModelState| s.y.min(10.0).atan() + if s.i == 0 { shift } else { 0.0 }
    }

    /// Twenty drift-check states spread over `ȳ + [0, 100]`, cycling through indices.
    pub fn drift_grid(&self) -> Vec<ModelState> {
        const OFFSETS: [f64; 20] = [
            0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0, 12.0, 15.0, 20.0, 25.0, 30.0,
            40.0, 50.0, 75.0, 100.0,
        ];
        OFFSETS
            .iter()
            .enumerate()
            .map(|(k, d)| ModelState::new(self.cfg.y_ref + d, k % self.num_flows()))
            .collect()
    }
}

impl MetricSpace for GeneModel {
    type Point = ModelState;

    fn dist(&self, a: &ModelState, b: &ModelState) -> f64 {
        (a.y - b.y).abs() + if a.i != b.i { self.cfg.c_tilde } else { 0.0 }
    }

    fn describe(&self) -> String {
        format!(
            "gene model with {} semiflows (lambda={}, beta0={}, beta1={}, epsilon={})",
            self.num_flows(),
            self.cfg.lambda,
            self.cfg.beta0,
            self.cfg.beta1,
            self.cfg.epsilon
        )
    }
}

impl Kernel for GeneModel {
    fn sample(&self, x: &ModelState, rng: &mut SimRng) -> ModelState {
        self.post_jump_step(x, rng).0
    }
}

/// `∫ min(b₁e^{-b₁θ}, b₂e^{-b₂θ}) dθ`.
pub fn exp_overlap(b1: f64, b2: f64) -> f64 {
    if b1 == b2 {
        return 1.0;
    }
    let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
    // the densities cross once, at θ*
    let cross = (hi / lo).ln() / (hi - lo);
    1.0 - ((-lo * cross).exp() - (-hi * cross).exp())
}

/// Maximal coupling of `Exp(b1)` and `Exp(b2)`: returns the pair and whether
/// the draws coincide.
fn coupled_bursts(b1: f64, b2: f64, rng: &mut SimRng) -> (f64, f64, bool) {
    let density = |b: f64, t: f64| b * (-b * t).exp();
    let x = rng.sample::<f64, _>(Exp1) / b1;
    if rng.random::<f64>() * density(b1, x) <= density(b2, x) {
        return (x, x, true);
    }
    loop {
        let y = rng.sample::<f64, _>(Exp1) / b2;
        if rng.random::<f64>() * density(b2, y) > density(b1, y) {
            return (x, y, false);
        }
    }
}

pub struct GeneCoupling {
    model: GeneModel,
}

impl GeneCoupling {
    pub fn new(model: GeneModel) -> Self {
        GeneCoupling { model }
    }

    /// Pairs sharing the semiflow index.
    pub fn in_f(x: &ModelState, y: &ModelState) -> bool {
        x.i == y.i
    }

    fn coupled_switch(
        &self,
        x: &ModelState,
        y1: f64,
        y: &ModelState,
        y2: f64,
        rng: &mut SimRng,
    ) -> (usize, usize, bool) {
        let m = &self.model;
        let n = m.num_flows();
        let overlap: f64 = (0..n)
            .map(|j| m.switch_prob(x.i, j, y1).min(m.switch_prob(y.i, j, y2)))
            .sum();
        let u: f64 = rng.random();
        if u < overlap {
            let target = u;
            let mut acc = 0.0;
            for j in 0..n {
                acc += m.switch_prob(x.i, j, y1).min(m.switch_prob(y.i, j, y2));
                if target < acc {
                    return (j, j, true);
                }
            }
            let last = (0..n)
                .rev()
                .find(|&j| m.switch_prob(x.i, j, y1).min(m.switch_prob(y.i, j, y2)) > 0.0)
                .unwrap_or(n - 1);
            return (last, last, true);
        }
        let leftover = |i: usize, yy: f64, other_i: usize, other_y: f64, v: f64| {
            let rest =
                |j: usize| (m.switch_prob(i, j, yy) - m.switch_prob(other_i, j, other_y)).max(0.0);
            let total: f64 = (0..n).map(rest).sum();
            let mut acc = 0.0;
            for j in 0..n {
                acc += rest(j) / total;
                if v < acc {
                    return j;
                }
            }
            (0..n).rev().find(|&j| rest(j) > 0.0).unwrap_or(n - 1)
        };
        // The leftover parts live on disjoint index sets, so these never agree.
        let j1 = leftover(x.i, y1, y.i, y2, rng.random());
        let j2 = leftover(y.i, y2, x.i, y1, rng.random());
        (j1, j2, false)
    }
}

impl Coupling for GeneCoupling {
    type Base = GeneModel;

    fn base(&self) -> &GeneModel {
        &self.model
    }

    fn step(&self, x: &ModelState, y: &ModelState, rng: &mut SimRng) -> CoupledStep<ModelState> {
        let m = &self.model;
        let dt = rng.sample::<f64, _>(Exp1) / m.cfg.lambda;
        let h = m.cfg.epsilon * rng.random::<f64>();
        let m1 = m.semiflow(x.i, dt, x.y);
        let m2 = m.semiflow(y.i, dt, y.y);
        let (t1, t2, same_burst) = coupled_bursts(m.burst_rate(m1), m.burst_rate(m2), rng);
        let (y1, y2) = (m1 + t1 + h, m2 + t2 + h);
        let (j1, j2, same_switch) = self.coupled_switch(x, y1, y, y2, rng);
        let fired = same_burst && same_switch;
        CoupledStep {
            first: ModelState { y: y1, i: j1 },
            second: ModelState { y: y2, i: j2 },
            fired,
        }
    }
}

/// Closed-form constants of the model conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConstants {
    pub l: f64,
    pub alpha: f64,
    pub lw_prime: f64,
    pub lw: f64,
    pub l_pi: f64,
    pub l_p: f64,
    pub d_pi: f64,
    pub d_p: f64,
    /// `sup_y λ ∫ e^{-λt} E|w_θ(S_i(t, ȳ)) - ȳ|² dt`, maximised over `i`,
    /// bounded by taking the burst rate at its worst value in `[β₀, β₀ + β₁]`.
    pub a1_sup: f64,
    /// Same integral maximised over the drift grid only, with the actual rates.
    pub a1_grid_sup: f64,
    /// `√(λ L_w' L² / (λ - 2α))`; infinite when `λ ≤ 2α`.
    pub a: f64,
    pub b: f64,
    /// `L L_w λ / (λ - α)`: contraction of the coupling on `F`; infinite when `α ≥ λ`.
    pub delta: f64,
    pub beta: f64,
    pub c_beta: f64,
    /// `L L_w + α / λ`.
    pub balance: f64,
    /// `L² L_w' + 2α / λ`.
    pub clt: f64,
}

impl ModelConstants {
    pub fn balance_pass(&self) -> bool {
        self.balance < 1.0
    }

    pub fn clt_pass(&self) -> bool {
        self.clt < 1.0
    }
}

const QUAD_NODES: usize = 100_000;

/// `λ ∫ e^{-λt} f(t) dt` by the midpoint rule after `s = 1 - e^{-λt}`.
fn exp_weighted_integral(lambda: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = 1.0 / QUAD_NODES as f64;
    let mut acc = crate::stats::StableAccumulator::default();
    for k in 0..QUAD_NODES {
        let s = (k as f64 + 0.5) * h;
        let t = -(1.0 - s).ln() / lambda;
        acc.add(f(t) * h);
    }
    acc.value()
}

impl GeneModel {
    pub fn constants(&self) -> ModelConstants {
        let c = &self.cfg;
        let n = self.num_flows();
        let lambda = c.lambda;
        let l = 1.0;
        let alpha = -c.decay_rates.iter().cloned().fold(f64::INFINITY, f64::min);
        // w_θ(y₁) - w_θ(y₂) = y₁ - y₂ for additive bursts
        let lw_prime: f64 = 1.0;
        let lw = lw_prime.sqrt();
        let l_pi = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (c.switch_high[i][j] - c.switch_low[i][j]).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        // d/db of the L¹ distance between exponential densities is 2/(e b);
        // |β'(y)| / β(y) is largest at y = 0.
        let l_p = 2.0 * c.beta1 / (std::f64::consts::E * (c.beta0 + c.beta1));
        let vertices = [&c.switch_low, &c.switch_high];
        let mut d_pi = f64::INFINITY;
        for m1 in vertices {
            for m2 in vertices {
                for i1 in 0..n {
                    for i2 in 0..n {
                        let o: f64 = (0..n).map(|j| m1[i1][j].min(m2[i2][j])).sum();
                        d_pi = d_pi.min(o);
                    }
                }
            }
        }
        let d_p = exp_overlap(c.beta0, c.beta0 + c.beta1);

        // E(k + θ)² = k² + 2k/β + 2/β² is convex in 1/β, so its maximum over
        // the rate range sits at an endpoint.
        let second_moment = |k: f64, beta: f64| k * k + 2.0 * k / beta + 2.0 / (beta * beta);
        let shift = |i: usize, t: f64| self.semiflow(i, t, c.y_ref) - c.y_ref;
        let (b_lo, b_hi) = (c.beta0, c.beta0 + c.beta1);
        let finite = c.y_ref == 0.0 || 2.0 * alpha < lambda;
        let a1_sup = if finite {
            (0..n)
                .map(|i| {
                    exp_weighted_integral(lambda, |t| {
                        let k = shift(i, t);
                        second_moment(k, b_lo).max(second_moment(k, b_hi))
                    })
                })
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        let a1_grid_sup = if finite {
            let grid = self.drift_grid();
            (0..n)
                .flat_map(|i| grid.iter().map(move |g| (i, g.y)))
                .map(|(i, y)| {
                    exp_weighted_integral(lambda, |t| {
                        second_moment(shift(i, t), self.burst_rate(self.semiflow(i, t, y)))
                    })
                })
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        let a = if lambda > 2.0 * alpha {
            (lambda * lw_prime * l * l / (lambda - 2.0 * alpha)).sqrt()
        } else {
            f64::INFINITY
        };
        let b = a1_sup.sqrt() + c.epsilon_max;
        let ratio = if alpha < lambda {
            lambda / (lambda - alpha)
        } else {
            f64::INFINITY
        };
        let delta = l * lw * ratio;
        let c_beta = (0.5 * (l_p + l_pi) * ratio).max(1e-12);
        ModelConstants {
            l,
            alpha,
            lw_prime,
            lw,
            l_pi,
            l_p,
            d_pi,
            d_p,
            a1_sup,
            a1_grid_sup,
            a,
            b,
            delta,
            beta: 1.0,
            c_beta,
            balance: l * lw + alpha / lambda,
            clt: l * l * lw_prime + 2.0 * alpha / lambda,
        }
    }

    /// Parameters for the coupling-condition report with `Γ = 4b / (1 - a)`
    /// and `γ = 0.9`; `None` when `a` or `δ` is out of range.
    pub fn b_condition_params(&self, replicas: usize, horizon: usize) -> Option<BConditionParams> {
        let k = self.constants();
        if !(k.a < 1.0 && k.delta < 1.0) {
            return None;
        }
        Some(BConditionParams {
            delta: k.delta,
            beta: k.beta,
            c_beta: k.c_beta,
            level: 4.0 * k.b / (1.0 - k.a),
            gamma: 0.9,
            a: k.a,
            b: k.b,
            replicas,
            horizon,
        })
    }
}

/// One line of the model-condition report.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AConditionReport {
    pub constants: ModelConstants,
    pub checks: Vec<ConditionCheck>,
}

impl AConditionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Closed-form constants plus randomised spot checks of every inequality
/// (`samples` random configurations each).
pub fn check_a_conditions(model: &GeneModel, samples: usize, seed: u64) -> AConditionReport {
    let k = model.constants();
    let c = model.config();
    let n = model.num_flows();
    let mut rng = stream_rng(derive_seed(seed, 0xA), crate::rng::domain::GRID, 0);
    let draw_y = |rng: &mut SimRng| 20.0 * rng.random::<f64>().powi(2);
    let tol = |scale: f64| 1e-9 * (1.0 + scale);

    let mut a2_violation = 0.0f64;
    let mut a4_pi = 0.0f64;
    let mut a4_p = 0.0f64;
    let mut a5_pi = f64::INFINITY;
    let mut a5_p = f64::INFINITY;
    for _ in 0..samples {
        let (y1, y2) = (draw_y(&mut rng), draw_y(&mut rng));
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let t = 5.0 * rng.random::<f64>();
        let lhs = (model.semiflow(i, t, y1) - model.semiflow(j, t, y2)).abs();
        let cross = if i != j {
            let spread = c
                .decay_rates
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                + k.alpha;
            t * y2 * spread
        } else {
            0.0
        };
        let rhs = k.l * (k.alpha * t).exp() * (y1 - y2).abs() + cross;
        a2_violation = a2_violation.max(lhs - rhs - tol(rhs));
        if y1 != y2 {
            let dy = (y1 - y2).abs();
            let sum: f64 = (0..n)
                .map(|jj| (model.switch_prob(i, jj, y1) - model.switch_prob(i, jj, y2)).abs())
                .sum();
            a4_pi = a4_pi.max(sum / dy);
            let l1 = 2.0 * (1.0 - exp_overlap(model.burst_rate(y1), model.burst_rate(y2)));
            a4_p = a4_p.max(l1 / dy);
        }
        let o: f64 = (0..n)
            .map(|jj| {
                model
                    .switch_prob(i, jj, y1)
                    .min(model.switch_prob(j, jj, y2))
            })
            .sum();
        a5_pi = a5_pi.min(o);
        a5_p = a5_p.min(exp_overlap(model.burst_rate(y1), model.burst_rate(y2)));
    }

    let checks = vec![
        ConditionCheck {
            name: "A1'",
            value: k.a1_sup,
            threshold: f64::INFINITY,
            pass: k.a1_sup.is_finite(),
            detail: format!(
                "rate-envelope bound {:.6}, sup over drift grid {:.6}",
                k.a1_sup, k.a1_grid_sup
            ),
        },
        ConditionCheck {
            name: "A2",
            value: a2_violation.max(0.0),
            threshold: 0.0,
            pass: k.alpha < c.lambda && a2_violation <= 0.0,
            detail: format!(
                "L={} alpha={} (alpha < lambda: {}), max spot-check excess {:.3e}",
                k.l,
                k.alpha,
                k.alpha < c.lambda,
                a2_violation.max(0.0)
            ),
        },
        ConditionCheck {
            name: "A3'",
            value: k.lw_prime,
            threshold: f64::INFINITY,
            pass: true,
            detail: "additive bursts: |w(y1) - w(y2)| = |y1 - y2|, L_w'=1".to_string(),
        },
        ConditionCheck {
            name: "A4",
            value: a4_pi.max(a4_p),
            threshold: k.l_pi.max(k.l_p),
            pass: a4_pi <= k.l_pi + 1e-9 && a4_p <= k.l_p + 1e-9,
            detail: format!(
                "L_pi={:.6} (sampled {:.6}), L_p={:.6} (sampled {:.6})",
                k.l_pi, a4_pi, k.l_p, a4_p
            ),
        },
        ConditionCheck {
            name: "A5",
            value: k.d_pi.min(k.d_p),
            threshold: 0.0,
            pass: k.d_pi > 0.0 && k.d_p > 0.0 && a5_pi >= k.d_pi - 1e-12 && a5_p >= k.d_p - 1e-12,
            detail: format!(
                "d_pi={:.6} (sampled min {:.6}), d_p={:.6} (sampled min {:.6})",
                k.d_pi, a5_pi, k.d_p, a5_p
            ),
        },
        ConditionCheck {
            name: "balance",
            value: k.balance,
            threshold: 1.0,
            pass: k.balance_pass(),
            detail: format!(
                "L*L_w + alpha/lambda = {:.6}, margin {:.6}",
                k.balance,
                1.0 - k.balance
            ),
        },
        ConditionCheck {
            name: "clt",
            value: k.clt,
            threshold: 1.0,
            pass: k.clt_pass(),
            detail: format!(
                "L^2*L_w' + 2*alpha/lambda = {:.6}, margin {:.6}",
                k.clt,
                1.0 - k.clt
            ),
        },
    ];
    AConditionReport {
        constants: k,
        checks,
    }
}
