//! Partial sums V_n g = Σ_{k≤n} U^k (g - <g, μ*>) stay bounded in L²(μ*) for
//! an ergodic chain and grow linearly for the identity kernel.
//!
//!     cargo run --release --example maxwell_woodroofe

use coupling_clt::clt::{mw_diagnostic, Observable};
use coupling_clt::kernel::{IdentityKernel, MatrixKernel, RealLine};
use coupling_clt::measure::EmpiricalMeasure;
use coupling_clt::stats::Estimate;

fn main() -> coupling_clt::Result<()> {
    let (p01, p10) = (0.3, 0.6);
    let chain = MatrixKernel::two_state(p01, p10)?;
    let pi1 = p01 / (p01 + p10);
    let g = Observable::new(|s: &usize| *s as f64, 1.0, 1.0);
    let grid = EmpiricalMeasure::new(vec![(0, 1.0 - pi1), (1, pi1)])?;
    let r = mw_diagnostic(
        &chain,
        &g,
        &Estimate::exact(pi1),
        &[50, 100, 200],
        &grid,
        100_000,
        1,
    )?;
    // U^k ḡ(x) = λ^k ḡ(x), so the limit is λ/(1-λ) · ||ḡ||.
    let lambda: f64 = 1.0 - p01 - p10;
    let exact = lambda / (1.0 - lambda) * (pi1 * (1.0 - pi1)).sqrt();
    for (n, norm, se) in r.norms() {
        println!("two-state n={n:>3}: {norm:.5} ± {se:.5}   limit {exact:.5}");
    }

    let id = IdentityKernel(RealLine);
    let g = Observable::new(|x: &f64| x.clamp(-10.0, 10.0), 1.0, 10.0);
    let grid = EmpiricalMeasure::uniform(vec![0.0, 1.0])?;
    let r = mw_diagnostic(&id, &g, &Estimate::exact(0.5), &[10, 20, 40], &grid, 100, 2)?;
    for (n, norm, _) in r.norms() {
        println!("identity n={n:>3}: {norm:.2}");
    }
    Ok(())
}
