//! Distance from P^n δ_x to the invariant measure in the Fortet-Mourier
//! metric, on a two-state chain and on the gene model.
//!
//!     cargo run --release --example ergodicity

use coupling_clt::ergodicity::{ergodicity_curve, stationary_sample, ErgodicityPlan};
use coupling_clt::gene::{GeneModel, GeneModelConfig, ModelState};
use coupling_clt::kernel::{MatrixKernel, Start};
use coupling_clt::measure::{EmpiricalMeasure, DEFAULT_SUPPORT_CAP};

fn main() -> coupling_clt::Result<()> {
    let atoms = 200_000;
    let plan = ErgodicityPlan {
        n_max: 10,
        support_cap: DEFAULT_SUPPORT_CAP,
    };

    let chain = MatrixKernel::two_state(0.1, 0.2)?;
    let stat = stationary_sample(&chain, &Start::At(0), 60, atoms, 1, 0)?;
    let other = stationary_sample(&chain, &Start::At(0), 60, atoms, 1, 1)?;
    let init = EmpiricalMeasure::uniform(vec![0usize; atoms])?;
    let r = ergodicity_curve(&chain, &init, &stat, &other, &|s| *s, &plan, 2)?;
    for (n, d) in &r.distances {
        println!(
            "n={n:>2}  d = {d:.5}   exact {:.5}",
            0.7f64.powi(*n as i32) / 3.0
        );
    }
    let fit = r.fit.expect("enough signal");
    println!(
        "two-state: rate {:.4} (second eigenvalue 0.7), noise {:.5}",
        fit.rate, r.noise
    );

    // Continuous states are binned on a 0.05 grid before comparing.
    let model = GeneModel::new(GeneModelConfig::default())?;
    let bin = |s: &ModelState| ModelState::new(((s.y / 0.05).floor() + 0.5) * 0.05, s.i);
    let from = Start::At(ModelState::new(1.5, 0));
    let stat = stationary_sample(&model, &from, 60, atoms, 3, 0)?;
    let other = stationary_sample(&model, &from, 60, atoms, 3, 1)?;
    let init = EmpiricalMeasure::uniform(vec![ModelState::new(8.0, 1); atoms])?;
    let r = ergodicity_curve(&model, &init, &stat, &other, &bin, &plan, 4)?;
    for (n, d) in &r.distances {
        println!("n={n:>2}  d = {d:.5}");
    }
    if let Some(fit) = r.fit {
        println!(
            "gene model: rate {:.4}, R² {:.4}, decreasing {}, noise {:.5}",
            fit.rate, fit.r_squared, r.decreasing, r.noise
        );
    }
    Ok(())
}
