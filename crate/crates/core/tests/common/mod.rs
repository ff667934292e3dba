//! Oracles shared by the integration tests. They are written independently
//! of the library code they check.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Dense tableau simplex with Bland's rule for
/// `max c·u  s.t.  A u ≤ b, u ≥ 0` with `b ≥ 0` (origin feasible).
pub fn simplex_max(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), c.len());
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    loop {
        let Some(enter) = (0..n + m).find(|&j| t[m][j] < -1e-12) else {
            return t[m][width - 1];
        };
        let mut leave: Option<usize> = None;
        for i in 0..m {
            if t[i][enter] > 1e-12 {
                let ratio = t[i][width - 1] / t[i][enter];
                leave = match leave {
                    None => Some(i),
                    Some(l) => {
                        let best = t[l][width - 1] / t[l][enter];
                        if ratio < best - 1e-12 || (ratio <= best + 1e-12 && basis[i] < basis[l]) {
                            Some(i)
                        } else {
                            Some(l)
                        }
                    }
                };
            }
        }
        let r = leave.expect("bounded program");
        let p = t[r][enter];
        for v in t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = t[r].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != r && row[enter] != 0.0 {
                let f = row[enter];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        basis[r] = enter;
    }
}

/// Fortet-Mourier distance by brute-force LP over the values of `f` on the
/// merged support, with `u = f + 1 ∈ [0, 2]`.
pub fn fm_by_lp(dist: &[Vec<f64>], net: &[f64]) -> f64 {
    let k = net.len();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..k {
        let mut row = vec![0.0; k];
        row[i] = 1.0;
        a.push(row);
        b.push(2.0);
    }
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let mut row = vec![0.0; k];
                row[i] = 1.0;
                row[j] = -1.0;
                a.push(row);
                b.push(dist[i][j]);
            }
        }
    }
    let shift: f64 = net.iter().sum();
    simplex_max(net, &a, &b) - shift
}

/// Maximum of standard Brownian motion on `[0, 1]`, sampled exactly: normal
/// increments on a coarse grid, then the bridge maximum on each interval.
pub fn brownian_max(rng: &mut StdRng, intervals: usize) -> f64 {
    let h = 1.0 / intervals as f64;
    let mut w = 0.0f64;
    let mut best = 0.0f64;
    for _ in 0..intervals {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let next = w + h.sqrt() * z;
        let u: f64 = 1.0 - rng.random::<f64>();
        let m = 0.5 * (w + next + ((next - w).powi(2) - 2.0 * h * u.ln()).sqrt());
        best = best.max(m);
        w = next;
    }
    best
}

pub fn std_rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Plain matrix product for the exact oracles.
pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            if a[i][k] != 0.0 {
                for j in 0..m {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
    }
    out
}

pub fn vec_mat(v: &[f64], a: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; a[0].len()];
    for (i, vi) in v.iter().enumerate() {
        for (j, aij) in a[i].iter().enumerate() {
            out[j] += vi * aij;
        }
    }
    out
}
