mod common;

use common::{brownian_max, std_rng};
use coupling_clt::clt::{donsker_test, long_run, Observable, ReplicaPlan};
use coupling_clt::kernel::{IidNormalKernel, Start};
use coupling_clt::stats::{
    brownian_max_cdf, kolmogorov_critical_1pct, ks_statistic, ks_two_sample,
    ks_two_sample_critical_1pct, BatchMeans,
};

fn oracle_sample(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = std_rng(seed);
    (0..count).map(|_| brownian_max(&mut rng, 16)).collect()
}

fn exact_reference(sigma2: f64) -> BatchMeans {
    BatchMeans {
        sigma2,
        stderr: 0.0,
        mean: 0.0,
        mean_stderr: 0.0,
        batches: 100,
        batch_len: 10,
    }
}

#[test]
fn estimated_centering_still_passes_with_a_long_reference_run() {
    let kernel = IidNormalKernel::default();
    let g = Observable::new(|x: &f64| *x, 1.0, f64::INFINITY);
    // The centering error enters s_n scaled by sqrt(n / aux_steps).
    let reference = long_run(&kernel, &g, &Start::At(0.0), 0, 20_000_000, 3).unwrap();
    let plan = ReplicaPlan {
        n: 2000,
        replicas: 4000,
        burn_in: 0,
    };
    let report = donsker_test(&kernel, &g, &Start::At(0.0), &plan, &reference, 7).unwrap();
    assert!(
        report.ks_endpoint < report.threshold,
        "endpoint KS {}",
        report.ks_endpoint
    );
}

#[test]
fn bridge_oracle_agrees_with_reflection_law() {
    let sample = oracle_sample(200_000, 1);
    let ks = ks_statistic(&sample, brownian_max_cdf).unwrap();
    assert!(ks < kolmogorov_critical_1pct(sample.len()), "KS {ks}");
    let mean = sample.iter().sum::<f64>() / sample.len() as f64;
    assert!((mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.005);
}

#[test]
fn iid_normal_running_max_matches_brownian_oracle() {
    let kernel = IidNormalKernel::default();
    let g = Observable::new(|x: &f64| *x, 1.0, f64::INFINITY);
    // Exact centering and scale: the sum of n standard normals is N(0, n).
    let reference = exact_reference(1.0);
    let plan = ReplicaPlan {
        n: 2000,
        replicas: 4000,
        burn_in: 0,
    };
    let report = donsker_test(&kernel, &g, &Start::At(0.0), &plan, &reference, 4).unwrap();
    let sigma = reference.sigma2.sqrt();
    let maxima: Vec<f64> = report
        .features
        .iter()
        .map(|f| f.running_max / sigma)
        .collect();
    let oracle = oracle_sample(100_000, 5);
    let ks = ks_two_sample(&maxima, &oracle);
    assert!(
        ks < ks_two_sample_critical_1pct(maxima.len(), oracle.len()),
        "two-sample KS {ks}"
    );
    assert!(report.ks_endpoint < report.threshold);
}

#[test]
fn zero_observable_gives_flat_paths() {
    let kernel = IidNormalKernel::default();
    let g = Observable::new(|_: &f64| 0.0, 0.0, 0.0);
    let reference = exact_reference(1.0);
    let plan = ReplicaPlan {
        n: 50,
        replicas: 1000,
        burn_in: 0,
    };
    let report = donsker_test(&kernel, &g, &Start::At(0.0), &plan, &reference, 6).unwrap();
    assert!(report
        .features
        .iter()
        .all(|f| f.endpoint == 0.0 && f.running_max == 0.0 && f.bridge_deviation == 0.0));
}
