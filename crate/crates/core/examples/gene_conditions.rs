//! Structural constants of the gene expression model, the (A) condition
//! report for the shipped parameters and for a growing semiflow, and the
//! drift and coupling (B) checks.
//!
//!     cargo run --release --example gene_conditions

use coupling_clt::coupling::check_b_conditions;
use coupling_clt::gene::{
    check_a_conditions, GeneCoupling, GeneModel, GeneModelConfig, ModelState,
};
use coupling_clt::kernel::check_drift;

fn report(label: &str, model: &GeneModel) {
    let r = check_a_conditions(model, 2000, 1);
    println!("{label}: all pass = {}", r.all_pass());
    for c in &r.checks {
        println!(
            "  {:<8} value {:>10.6}  threshold {:>10.6}  {}",
            c.name,
            c.value,
            c.threshold,
            if c.pass { "ok" } else { "FAIL" }
        );
    }
}

fn main() -> coupling_clt::Result<()> {
    let model = GeneModel::new(GeneModelConfig::default())?;
    let k = model.constants();
    println!(
        "L = {}, alpha = {}, L_w' = {}, a = {:.6}, b = {:.6}, delta = {}",
        k.l, k.alpha, k.lw_prime, k.a, k.b, k.delta
    );
    report("shipped config", &model);

    let broken = GeneModel::new(GeneModelConfig {
        decay_rates: vec![-0.3, 1.0],
        ..GeneModelConfig::default()
    })?;
    report("growing first semiflow", &broken);

    // Drift of V² on the 20-point grid.
    let v = |s: &ModelState| model.lyapunov_v(s);
    let drift = check_drift(&model, &v, &model.drift_grid(), k.a, k.b, true, 20_000, 3)?;
    println!(
        "drift: {} of {} grid points pass",
        drift.points.len() - drift.failures(),
        drift.points.len()
    );

    // Contraction, near-diagonal mass and return times of the coupling.
    let params = model
        .b_condition_params(1000, 200)
        .expect("a < 1 and delta < 1");
    let pairs: Vec<_> = (0..10)
        .map(|k| {
            (
                ModelState::new(0.3 * k as f64, k % 2),
                ModelState::new(0.3 * k as f64 + 0.4, k % 2),
            )
        })
        .collect();
    let starts = vec![(ModelState::new(0.2, 0), ModelState::new(2.0, 1))];
    let coupling = GeneCoupling::new(model.clone());
    let b = check_b_conditions(
        &coupling,
        &GeneCoupling::in_f,
        &v,
        &params,
        &pairs,
        &starts,
        5,
    )?;
    println!(
        "contraction {}  near-mass {} (min {:.3})  mass bound {}  return times {}",
        b.contraction_pass(),
        b.near_mass_pass(),
        b.near_mass_min,
        b.mass_bound_pass(),
        b.returns_pass()
    );
    Ok(())
}
