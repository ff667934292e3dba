//! E|g(X_n) - g(Y_n)| along a coupling decays geometrically; fit the rate
//! on a finite chain (against the exact pair-chain value) and on the gene
//! model.
//!
//!     cargo run --release --example coupling_decay

use coupling_clt::coupling::{decay_curve, finite_coupling, FiniteSubKernel};
use coupling_clt::gene::{GeneCoupling, GeneModel, GeneModelConfig, ModelState};
use coupling_clt::kernel::MatrixKernel;

fn main() -> coupling_clt::Result<()> {
    let kernel = MatrixKernel::two_state(0.3, 0.6)?;
    let coupling = finite_coupling(
        kernel.clone(),
        FiniteSubKernel::diagonal_overlap(&kernel, 1.0)?,
    )?;
    let g = |s: &usize| *s as f64;
    let curve = decay_curve(&coupling, &g, &0, &1, 4, 20_000, 1)?;
    // Here E|g(X_n) - g(Y_n)| = P(X_n ≠ Y_n) = 0.1^n exactly.
    for (n, e) in curve.means.iter().enumerate() {
        println!(
            "n={n}  {:.5} ± {:.5}   exact {:.5}",
            e.mean,
            e.stderr,
            0.1f64.powi(n as i32)
        );
    }

    let model = GeneModel::new(GeneModelConfig::default())?;
    let g = model.squashed_observable(0.0);
    let coupling = GeneCoupling::new(model);
    let curve = decay_curve(
        &coupling,
        &g,
        &ModelState::new(0.5, 0),
        &ModelState::new(8.0, 1),
        15,
        20_000,
        2,
    )?;
    let fit = curve.fit.expect("enough signal");
    println!(
        "gene model: q̂ = {:.4}, R² = {:.4} over {} steps",
        fit.rate,
        fit.r_squared,
        fit.steps.len()
    );
    Ok(())
}
