//! Summary statistics shared by the estimators: compensated reductions,
//! Monte-Carlo estimates with standard errors, Kolmogorov-Smirnov distances,
//! batch-means asymptotic variance and log-linear rate fits.

use crate::error::{invalid, Error, Result};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

/// A Monte-Carlo estimate together with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            stderr: 0.0,
            count: 1,
        }
    }

    /// Sample mean and standard error of the mean.
    ///
    /// Both passes use compensated summation, so the result depends only on
    /// the order of `values`, which callers keep fixed (replica order).
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                count: 0,
            };
        }
        let mean = stable_sum(values.iter().copied()) / n as f64;
        let stderr = if n > 1 {
            let ss = stable_sum(values.iter().map(|v| (v - mean) * (v - mean)));
            (ss / (n as f64 - 1.0) / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr,
            count: n,
        }
    }

    /// `|mean - target| <= k * stderr`, with a tiny absolute slack for exact cases.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr + 1e-12 * (1.0 + target.abs())
    }
}

/// Neumaier-compensated sum.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Running compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct StableAccumulator {
    sum: f64,
    comp: f64,
}

impl StableAccumulator {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Distribution function of the running maximum of standard Brownian motion
/// on `[0, 1]`, `max(0, 2Φ(x) - 1)` (reflection principle).
pub fn brownian_max_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (2.0 * normal_cdf(x) - 1.0).max(0.0)
    }
}

/// Asymptotic Kolmogorov critical value `c / sqrt(n)`, `c = 1.63` at the 1% level.
pub fn kolmogorov_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    xs
}

/// One-sample Kolmogorov-Smirnov distance `sup_x |F_n(x) - F(x)|`.
///
/// Evaluated at the jump points of the empirical CDF, using both the left and
/// right limits so that ties are handled exactly. `cdf` must be continuous.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: 10,
        });
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(invalid("NaN sample in KS statistic"));
    }
    let xs = sorted(samples);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < xs.len() {
        let mut j = i + 1;
        while j < xs.len() && xs[j] == xs[i] {
            j += 1;
        }
        let f = cdf(xs[i]);
        d = d
            .max((i as f64 / n - f).abs())
            .max((j as f64 / n - f).abs());
        i = j;
    }
    Ok(d.min(1.0))
}

/// Two-sample Kolmogorov-Smirnov distance between empirical CDFs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let xa = sorted(a);
    let xb = sorted(b);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// 1% critical value of the two-sample KS distance.
pub fn ks_two_sample_critical_1pct(na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    1.63 * ((na + nb) / (na * nb)).sqrt()
}

/// Batch-means estimate of the asymptotic variance of a stationary series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchMeans {
    /// `batch_len * Var(batch means)`.
    pub sigma2: f64,
    /// Normal-theory standard error `sigma2 * sqrt(2 / (batches - 1))`.
    pub stderr: f64,
    /// Overall mean of the series (over complete batches).
    pub mean: f64,
    /// Standard error of `mean`, `sqrt(sigma2 / len)`.
    pub mean_stderr: f64,
    pub batches: usize,
    pub batch_len: usize,
}

/// Default batch length `ceil(n^(1/3))`.
pub fn default_batch_len(n: usize) -> usize {
    ((n as f64).cbrt().ceil() as usize).max(1)
}

pub fn batch_mean_variance(series: &[f64], batch_len: usize) -> Result<BatchMeans> {
    let mut acc = BatchAccumulator::new(batch_len)?;
    for &x in series {
        acc.push(x);
    }
    acc.finish()
}

/// Streaming form of [`batch_mean_variance`] for series too long to store.
#[derive(Debug, Clone)]
pub struct BatchAccumulator {
    batch_len: usize,
    // Values are accumulated relative to the first one, so constant series
    // give exact means and exactly zero variance.
    origin: Option<f64>,
    current: StableAccumulator,
    filled: usize,
    means: Vec<f64>,
    len: usize,
}

impl BatchAccumulator {
    pub fn new(batch_len: usize) -> Result<Self> {
        if batch_len == 0 {
            return Err(invalid("batch length must be positive"));
        }
        Ok(BatchAccumulator {
            batch_len,
            origin: None,
            current: StableAccumulator::default(),
            filled: 0,
            means: Vec::new(),
            len: 0,
        })
    }

    pub fn push(&mut self, x: f64) {
        self.len += 1;
        let origin = *self.origin.get_or_insert(x);
        self.current.add(x - origin);
        self.filled += 1;
        if self.filled == self.batch_len {
            self.means
                .push(self.current.value() / self.batch_len as f64);
            self.current = StableAccumulator::default();
            self.filled = 0;
        }
    }

    pub fn finish(&self) -> Result<BatchMeans> {
        let needed = 10 * self.batch_len;
        if self.len < needed {
            return Err(Error::SeriesTooShort {
                len: self.len,
                needed,
            });
        }
        let est = Estimate::from_samples(&self.means);
        let k = self.means.len() as f64;
        let var = est.stderr * est.stderr * k;
        let sigma2 = var * self.batch_len as f64;
        let used = self.means.len() * self.batch_len;
        Ok(BatchMeans {
            sigma2,
            stderr: sigma2 * (2.0 / (k - 1.0)).sqrt(),
            mean: self.origin.unwrap_or(0.0) + est.mean,
            mean_stderr: (sigma2 / used as f64).sqrt(),
            batches: self.means.len(),
            batch_len: self.batch_len,
        })
    }
}

/// Ordinary least squares of `y` on `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
    /// Two-sided p-value of the t-test for zero slope (NaN with < 3 points).
    pub slope_p_value: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = stable_sum(x.iter().copied()) / nf;
    let my = stable_sum(y.iter().copied()) / nf;
    let sxx = stable_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    if sxx == 0.0 {
        return None;
    }
    let sxy = stable_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let syy = stable_sum(y.iter().map(|b| (b - my) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = stable_sum(
        x.iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2)),
    )
    .max(0.0);
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let (slope_stderr, slope_p_value) = if n > 2 {
        let se = (sse / (nf - 2.0) / sxx).sqrt();
        let p = if se == 0.0 {
            if slope == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            let t = (slope / se).abs();
            let dist = StudentsT::new(0.0, 1.0, nf - 2.0).expect("positive dof");
            2.0 * (1.0 - dist.cdf(t))
        };
        (se, p)
    } else {
        (f64::NAN, f64::NAN)
    };
    Some(LinearFit {
        intercept,
        slope,
        slope_stderr,
        r_squared,
        slope_p_value,
    })
}

/// Geometric model `value_n ≈ prefactor * rate^n` fitted on log values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometricFit {
    pub rate: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    /// Steps that entered the fit.
    pub steps: Vec<usize>,
}

/// Least-squares fit of `ln value` against step. Needs at least 3 positive points.
pub fn fit_geometric(points: &[(usize, f64)]) -> Option<GeometricFit> {
    let used: Vec<(usize, f64)> = points.iter().copied().filter(|p| p.1 > 0.0).collect();
    if used.len() < 3 {
        return None;
    }
    let x: Vec<f64> = used.iter().map(|p| p.0 as f64).collect();
    let y: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let fit = linear_fit(&x, &y)?;
    Some(GeometricFit {
        rate: fit.slope.exp(),
        prefactor: fit.intercept.exp(),
        r_squared: fit.r_squared,
        steps: used.iter().map(|p| p.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream_rng};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn estimate_of_constant_has_zero_stderr() {
        let e = Estimate::from_samples(&[1.0; 50]);
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn stable_sum_recovers_cancellation() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(stable_sum(v), 2.0);
    }

    #[test]
    fn ks_quantile_samples_are_close() {
        let n = 400;
        let xs: Vec<f64> = (1..=n).map(|i| i as f64 / (n as f64 + 1.0)).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(d < 2.0 / (n as f64).sqrt(), "d = {d}");
        assert!(d <= 1.0 / (n as f64 + 1.0) + 1e-12);
    }

    #[test]
    fn ks_constant_samples() {
        let xs = vec![0.0; 20];
        let d = ks_statistic(&xs, normal_cdf).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        let ys = vec![0.7; 20];
        assert!(ks_statistic(&ys, normal_cdf).unwrap() >= 0.5);
    }

    #[test]
    fn ks_requires_ten_samples() {
        assert!(matches!(
            ks_statistic(&[0.0; 9], normal_cdf),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn batch_means_of_constant_is_zero() {
        let bm = batch_mean_variance(&[3.0; 1000], 10).unwrap();
        assert_eq!(bm.sigma2, 0.0);
        assert_eq!(bm.mean, 3.0);
    }

    #[test]
    fn batch_means_too_short() {
        assert!(matches!(
            batch_mean_variance(&[0.0; 99], 10),
            Err(Error::SeriesTooShort {
                len: 99,
                needed: 100
            })
        ));
    }

    #[test]
    fn batch_means_iid_normal_has_unit_variance() {
        let mut rng = stream_rng(5, domain::AUXILIARY, 0);
        let series: Vec<f64> = (0..400_000).map(|_| rng.sample(StandardNormal)).collect();
        let bm = batch_mean_variance(&series, default_batch_len(series.len())).unwrap();
        assert!(
            (bm.sigma2 - 1.0).abs() <= 3.0 * bm.stderr,
            "sigma2 = {} ± {}",
            bm.sigma2,
            bm.stderr
        );
    }

    #[test]
    fn geometric_fit_recovers_rate() {
        let pts: Vec<(usize, f64)> = (0..8).map(|n| (n, 3.0 * 0.4f64.powi(n as i32))).collect();
        let fit = fit_geometric(&pts).unwrap();
        assert!((fit.rate - 0.4).abs() < 1e-12);
        assert!((fit.prefactor - 3.0).abs() < 1e-10);
        assert!(fit.r_squared > 1.0 - 1e-12);
        assert!(fit_geometric(&pts[..2]).is_none());
    }

    #[test]
    fn two_sample_ks_identical_is_zero() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        let b: Vec<f64> = (0..100).map(|i| i as f64 + 1000.0).collect();
        assert_eq!(ks_two_sample(&a, &b), 1.0);
    }

    #[test]
    fn brownian_max_cdf_limits() {
        assert_eq!(brownian_max_cdf(-1.0), 0.0);
        assert_eq!(brownian_max_cdf(0.0), 0.0);
        assert!((brownian_max_cdf(10.0) - 1.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn ks_in_unit_interval(xs in proptest::collection::vec(-5.0f64..5.0, 10..60)) {
            let d = ks_statistic(&xs, normal_cdf).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
