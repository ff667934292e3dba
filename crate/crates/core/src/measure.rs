//! Finitely supported probability measures and the exact Fortet-Mourier
//! (bounded-Lipschitz) distance between them.
//!
//! For probability measures `μ1, μ2` the distance
//! `sup { |<f, μ1 - μ2>| : |f(x)| ≤ 1, |f(x) - f(y)| ≤ ϱ(x, y) }`
//! only depends on the values of `f` on the union support `x_1..x_k`: any
//! feasible vector of values extends to the whole space with the same
//! constraints (McShane extension `inf_i (f_i + ϱ(x_i, ·))`, then clipped to
//! `[-1, 1]`). The supremum is therefore the finite linear program
//!
//! ```text
//! maximize  Σ f_i (w1_i - w2_i)   s.t.  |f_i| ≤ 1,  f_i - f_j ≤ ϱ(x_i, x_j)
//! ```
//!
//! We solve its dual, a balanced transport problem with the truncated cost
//! `min(ϱ, 2)` (the box constraints become an auxiliary hub node reachable at
//! cost 1 from every point). The transport is solved exactly by successive
//! shortest paths with node potentials; the potentials give an optimal `f`,
//! which is returned as a certificate and re-verified.

use crate::error::{Error, Result};
use crate::kernel::MetricSpace;
use serde::Serialize;

/// Default cap on the merged support size accepted by [`fortet_mourier`].
pub const DEFAULT_SUPPORT_CAP: usize = 2000;

/// Weighted point cloud standing in for a probability measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure<P> {
    atoms: Vec<(P, f64)>,
}

impl<P: Clone + PartialEq> EmpiricalMeasure<P> {
    /// Weights must be nonnegative and sum to one within `1e-12`.
    pub fn new(atoms: Vec<(P, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidWeights("measure has no atoms".into()));
        }
        if atoms.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::InvalidWeights("negative or NaN weight".into()));
        }
        let total = crate::stats::stable_sum(atoms.iter().map(|a| a.1));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(EmpiricalMeasure { atoms })
    }

    pub(crate) fn from_trusted(atoms: Vec<(P, f64)>) -> Self {
        EmpiricalMeasure { atoms }
    }

    pub fn dirac(x: P) -> Self {
        EmpiricalMeasure {
            atoms: vec![(x, 1.0)],
        }
    }

    /// Equal weights on the given points (repeats allowed).
    pub fn uniform(points: Vec<P>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidWeights("measure has no atoms".into()));
        }
        let w = 1.0 / points.len() as f64;
        Ok(EmpiricalMeasure {
            atoms: points.into_iter().map(|p| (p, w)).collect(),
        })
    }

    pub fn atoms(&self) -> &[(P, f64)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn expect(&self, f: impl Fn(&P) -> f64) -> f64 {
        crate::stats::stable_sum(self.atoms.iter().map(|(x, w)| w * f(x)))
    }

    /// Image measure under `f`.
    pub fn map_points<Q>(&self, f: impl Fn(&P) -> Q) -> EmpiricalMeasure<Q> {
        EmpiricalMeasure {
            atoms: self.atoms.iter().map(|(x, w)| (f(x), *w)).collect(),
        }
    }

    /// Same measure with repeated points merged, in first-appearance order.
    pub fn merged(&self) -> Self {
        let mut out: Vec<(P, f64)> = Vec::new();
        for (x, w) in &self.atoms {
            match out.iter_mut().find(|(y, _)| y == x) {
                Some(slot) => slot.1 += w,
                None => out.push((x.clone(), *w)),
            }
        }
        EmpiricalMeasure { atoms: out }
    }
}

/// Values of an optimal test function on the merged union support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BLFunctionValues<P> {
    pub points: Vec<P>,
    pub values: Vec<f64>,
}

impl<P> BLFunctionValues<P> {
    /// Largest violation of `|f_i| ≤ 1` and `|f_i - f_j| ≤ ϱ(x_i, x_j)`.
    pub fn max_violation<M: MetricSpace<Point = P>>(&self, space: &M) -> f64 {
        let mut worst = 0.0f64;
        for (i, fi) in self.values.iter().enumerate() {
            worst = worst.max(fi.abs() - 1.0);
            for j in 0..i {
                let d = space.dist(&self.points[i], &self.points[j]);
                worst = worst.max((fi - self.values[j]).abs() - d);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FortetMourier<P> {
    pub distance: f64,
    pub certificate: BLFunctionValues<P>,
}

pub fn fortet_mourier<M: MetricSpace>(
    space: &M,
    mu1: &EmpiricalMeasure<M::Point>,
    mu2: &EmpiricalMeasure<M::Point>,
) -> Result<FortetMourier<M::Point>> {
    fortet_mourier_capped(space, mu1, mu2, DEFAULT_SUPPORT_CAP)
}

pub fn fortet_mourier_capped<M: MetricSpace>(
    space: &M,
    mu1: &EmpiricalMeasure<M::Point>,
    mu2: &EmpiricalMeasure<M::Point>,
    cap: usize,
) -> Result<FortetMourier<M::Point>> {
    // Merge both measures onto one support, net weight w1 - w2 per point.
    let mut points: Vec<M::Point> = Vec::new();
    let mut w1: Vec<f64> = Vec::new();
    let mut w2: Vec<f64> = Vec::new();
    for (which, mu) in [mu1, mu2].into_iter().enumerate() {
        for (x, w) in mu.atoms() {
            let slot = match points.iter().position(|p| p == x) {
                Some(k) => k,
                None => {
                    if points.len() == cap {
                        return Err(Error::SupportTooLarge { size: cap + 1, cap });
                    }
                    points.push(x.clone());
                    w1.push(0.0);
                    w2.push(0.0);
                    points.len() - 1
                }
            };
            if which == 0 {
                w1[slot] += w;
            } else {
                w2[slot] += w;
            }
        }
    }
    let net: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a - b).collect();
    let sources: Vec<usize> = (0..points.len()).filter(|&i| net[i] > 0.0).collect();
    let sinks: Vec<usize> = (0..points.len()).filter(|&i| net[i] < 0.0).collect();

    let k = points.len();
    let mut dist = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..i {
            let d = space.dist(&points[i], &points[j]).min(2.0);
            dist[i * k + j] = d;
            dist[j * k + i] = d;
        }
    }
    let cost = |i: usize, j: usize| dist[i * k + j];

    let supply: Vec<f64> = sources.iter().map(|&i| net[i]).collect();
    let demand: Vec<f64> = sinks.iter().map(|&j| -net[j]).collect();
    let plan = solve_transport(&supply, &demand, |a, b| cost(sources[a], sinks[b]));

    // f = -potential on the transport nodes, then the c-transform
    // min_j (f_j + c(·, y_j)) over sinks, shifted into [-1, 1].
    let mut values = vec![0.0; k];
    if !sinks.is_empty() {
        let sink_f: Vec<f64> = plan.sink_potential.iter().map(|p| -p).collect();
        for (z, value) in values.iter_mut().enumerate() {
            *value = sinks
                .iter()
                .zip(&sink_f)
                .map(|(&j, fj)| fj + cost(z, j))
                .fold(f64::INFINITY, f64::min);
        }
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mid = 0.5 * (hi + lo);
        for v in values.iter_mut() {
            *v = (*v - mid).clamp(-1.0, 1.0);
        }
    }
    let dual = crate::stats::stable_sum(values.iter().zip(&net).map(|(f, c)| f * c));
    let distance = plan.cost.max(0.0);
    debug_assert!(
        (dual - distance).abs() <= 1e-9 * (1.0 + distance),
        "primal {distance} vs dual {dual}"
    );
    Ok(FortetMourier {
        distance,
        certificate: BLFunctionValues { points, values },
    })
}

struct TransportPlan {
    cost: f64,
    sink_potential: Vec<f64>,
}

/// Balanced transport by successive shortest paths on the dense bipartite
/// graph. Dijkstra runs on reduced costs `c_ij + p_i - p_j ≥ 0`; at the end
/// the potentials satisfy `p_j - p_i ≤ c_ij` with equality on used arcs.
fn solve_transport(
    supply: &[f64],
    demand: &[f64],
    cost: impl Fn(usize, usize) -> f64,
) -> TransportPlan {
    let ns = supply.len();
    let nt = demand.len();
    if ns == 0 || nt == 0 {
        return TransportPlan {
            cost: 0.0,
            sink_potential: vec![0.0; nt],
        };
    }
    let c: Vec<f64> = (0..ns)
        .flat_map(|i| (0..nt).map(move |j| (i, j)))
        .map(|(i, j)| cost(i, j))
        .collect();
    let mut flow = vec![0.0f64; ns * nt];
    let mut rem_s = supply.to_vec();
    let mut rem_t = demand.to_vec();
    let mut pot_s = vec![0.0f64; ns];
    let mut pot_t = vec![0.0f64; nt];
    // Potential of the super source (arcs source -> i have cost 0).
    let mut pot_root = 0.0f64;

    // Node numbering for the search: 0..ns sources, ns..ns+nt sinks.
    let nn = ns + nt;
    let mut dist = vec![f64::INFINITY; nn];
    let mut done = vec![false; nn];
    let mut parent = vec![usize::MAX; nn];

    let total_supply: f64 = supply.iter().sum();
    let tol = 1e-15 * total_supply.max(1e-300);

    loop {
        let supply_left = rem_s.iter().any(|&s| s > tol);
        let demand_left = rem_t.iter().any(|&d| d > tol);
        if !supply_left || !demand_left {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        for i in 0..ns {
            if rem_s[i] > tol {
                dist[i] = (pot_root - pot_s[i]).max(0.0);
            }
        }
        let mut target = usize::MAX;
        let mut target_dist = f64::INFINITY;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nn {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX || best >= target_dist {
                break;
            }
            done[u] = true;
            if u < ns {
                let i = u;
                for j in 0..nt {
                    let v = ns + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (c[i * nt + j] + pot_s[i] - pot_t[j]).max(0.0);
                    let nd = best + rc;
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                    }
                }
            } else {
                let j = u - ns;
                if rem_t[j] > tol && best < target_dist {
                    target_dist = best;
                    target = u;
                }
                for i in 0..ns {
                    if done[i] || flow[i * nt + j] <= 0.0 {
                        continue;
                    }
                    let rc = (-c[i * nt + j] - pot_s[i] + pot_t[j]).max(0.0);
                    let nd = best + rc;
                    if nd < dist[i] {
                        dist[i] = nd;
                        parent[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            break;
        }
        for i in 0..ns {
            pot_s[i] += dist[i].min(target_dist);
        }
        for j in 0..nt {
            pot_t[j] += dist[ns + j].min(target_dist);
        }
        pot_root += 0.0f64.min(target_dist);

        // Bottleneck along the path.
        let mut amount = rem_t[target - ns];
        let mut v = target;
        loop {
            let u = parent[v];
            if u == usize::MAX {
                amount = amount.min(rem_s[v]);
                break;
            }
            if u >= ns {
                // backward arc sink u -> source v cancels flow on (v, u)
                amount = amount.min(flow[v * nt + (u - ns)]);
            }
            v = u;
        }
        let mut v = target;
        loop {
            let u = parent[v];
            if u == usize::MAX {
                rem_s[v] -= amount;
                break;
            }
            if u < ns {
                flow[u * nt + (v - ns)] += amount;
            } else {
                let f = &mut flow[v * nt + (u - ns)];
                *f -= amount;
                if *f < 0.0 {
                    *f = 0.0;
                }
            }
            v = u;
        }
        rem_t[target - ns] -= amount;
    }

    let cost = crate::stats::stable_sum(flow.iter().zip(&c).map(|(f, c)| f * c));
    TransportPlan {
        cost,
        sink_potential: pot_t,
    }
}
