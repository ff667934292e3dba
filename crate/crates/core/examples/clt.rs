//! Central limit theorem for the gene model: standardized partial sums from
//! the stationary regime and from a fixed point, tested against N(0, 1).
//! Also compares the batch-means variance of a two-state chain with its
//! closed form.
//!
//!     cargo run --release --example clt

use coupling_clt::clt::{clt_test, long_run, Observable, ReplicaPlan};
use coupling_clt::gene::{GeneModel, GeneModelConfig, ModelState};
use coupling_clt::kernel::{MatrixKernel, Start};

fn main() -> coupling_clt::Result<()> {
    let model = GeneModel::new(GeneModelConfig::default())?;
    let g = Observable::new(model.squashed_observable(0.0), 1.0, 10f64.atan());
    let x0 = Start::At(ModelState::new(1.5, 0));
    let reference = long_run(&model, &g, &x0, 200, 5_000_000, 1)?;
    println!(
        "σ̂² = {:.4} ± {:.4}, <g, μ*> ≈ {:.4}",
        reference.sigma2, reference.stderr, reference.mean
    );
    let plan = ReplicaPlan {
        n: 2000,
        replicas: 4000,
        burn_in: 200,
    };
    let stationary = clt_test(&model, &g, &x0, &plan, &reference, 2)?;
    let fixed = clt_test(
        &model,
        &g,
        &x0,
        &ReplicaPlan { burn_in: 0, ..plan },
        &reference,
        3,
    )?;
    println!(
        "KS stationary {:.4}, fixed start {:.4}, threshold {:.4}",
        stationary.ks, fixed.ks, stationary.threshold
    );

    let (p01, p10) = (0.3, 0.6);
    let chain = MatrixKernel::two_state(p01, p10)?;
    let g = Observable::new(|s: &usize| *s as f64, 1.0, 1.0);
    let bm = long_run(&chain, &g, &Start::At(0), 100, 4_000_000, 4)?;
    let pi1 = p01 / (p01 + p10);
    let lambda: f64 = 1.0 - p01 - p10;
    let exact = pi1 * (1.0 - pi1) * (1.0 + lambda) / (1.0 - lambda);
    println!(
        "two-state σ̂² = {:.5} ± {:.5}, exact {exact:.5}",
        bm.sigma2, bm.stderr
    );
    Ok(())
}
