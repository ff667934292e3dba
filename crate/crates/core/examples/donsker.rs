//! Functional CLT: the running maximum of the rescaled partial-sum path
//! against the law of the maximum of Brownian motion on [0, 1].
//!
//!     cargo run --release --example donsker

use coupling_clt::clt::{donsker_test, long_run, Observable, ReplicaPlan};
use coupling_clt::gene::{GeneModel, GeneModelConfig, ModelState};
use coupling_clt::kernel::{IidNormalKernel, Start};

fn main() -> coupling_clt::Result<()> {
    let plan = ReplicaPlan {
        n: 2000,
        replicas: 4000,
        burn_in: 200,
    };

    let iid = IidNormalKernel::default();
    let g = Observable::new(|x: &f64| *x, 1.0, f64::INFINITY);
    let reference = long_run(&iid, &g, &Start::At(0.0), 0, 1_000_000, 1)?;
    let r = donsker_test(&iid, &g, &Start::At(0.0), &plan, &reference, 2)?;
    println!(
        "i.i.d. normal: KS max {:.4}, KS endpoint {:.4}, threshold {:.4}",
        r.ks_max, r.ks_endpoint, r.threshold
    );

    let model = GeneModel::new(GeneModelConfig::default())?;
    let g = Observable::new(model.squashed_observable(0.0), 1.0, 10f64.atan());
    let x0 = Start::At(ModelState::new(1.5, 0));
    let reference = long_run(&model, &g, &x0, 200, 5_000_000, 3)?;
    let r = donsker_test(&model, &g, &x0, &plan, &reference, 4)?;
    let sigma = r.sigma2.sqrt();
    let mean_max = r
        .features
        .iter()
        .map(|f| f.running_max / sigma)
        .sum::<f64>()
        / r.features.len() as f64;
    println!(
        "gene model: KS max {:.4}, KS endpoint {:.4}, mean of sup B_n/σ̂ {:.4} (Brownian motion {:.4})",
        r.ks_max,
        r.ks_endpoint,
        mean_max,
        (2.0 / std::f64::consts::PI).sqrt()
    );
    Ok(())
}
