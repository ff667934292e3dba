//! Fortet-Mourier distances between empirical measures, with the
//! bounded-Lipschitz function that attains them.
//!
//!     cargo run --release --example fortet_mourier

use coupling_clt::kernel::RealLine;
use coupling_clt::measure::{fortet_mourier, EmpiricalMeasure};

fn main() -> coupling_clt::Result<()> {
    // Two Dirac masses: the distance is min(|x - y|, 2).
    for y in [0.5, 1.7, 5.0] {
        let d = fortet_mourier(
            &RealLine,
            &EmpiricalMeasure::dirac(0.0),
            &EmpiricalMeasure::dirac(y),
        )?;
        println!("d(δ0, δ{y}) = {}", d.distance);
    }

    let mu = EmpiricalMeasure::new(vec![(0.0, 0.25), (1.0, 0.5), (3.0, 0.25)])?;
    let nu = EmpiricalMeasure::uniform(vec![0.5, 2.0, 2.5, 4.0])?;
    let fm = fortet_mourier(&RealLine, &mu, &nu)?;
    println!("d(μ, ν) = {:.6}", fm.distance);
    println!("optimal f on the merged support:");
    for (x, f) in fm.certificate.points.iter().zip(&fm.certificate.values) {
        println!("  f({x}) = {f:+.4}");
    }
    println!(
        "certificate violation: {:e}",
        fm.certificate.max_violation(&RealLine)
    );
    let c = &fm.certificate;
    let f = |x: &f64| c.values[c.points.iter().position(|p| p == x).unwrap()];
    println!("check: <f, μ - ν> = {:.6}", mu.expect(f) - nu.expect(f));
    Ok(())
}
