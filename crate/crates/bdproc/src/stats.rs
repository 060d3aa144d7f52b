//! Statistics helpers for the validation suite: running moments, a normal
//! CDF good to ~1e-7, Welch's two-sample test, the one-sample
//! Kolmogorov-Smirnov test and the Wilson score interval.

/// Welford running mean/variance accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

pub fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| < 1.5e-7
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Welch's two-sample z-test, two-sided p-value (normal approximation; the
/// suite only uses it with n in the hundreds or more).
pub fn welch_p(xs: &[f64], ys: &[f64]) -> f64 {
    let mut a = Running::default();
    let mut b = Running::default();
    xs.iter().for_each(|&x| a.push(x));
    ys.iter().for_each(|&y| b.push(y));
    let se = (a.variance() / a.n() as f64 + b.variance() / b.n() as f64).sqrt();
    if se == 0.0 {
        return if a.mean() == b.mean() { 1.0 } else { 0.0 };
    }
    let z = (a.mean() - b.mean()) / se;
    2.0 * (1.0 - normal_cdf(z.abs()))
}

/// Kolmogorov distribution tail Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 l^2).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against a CDF; returns (statistic, asymptotic p).
pub fn ks_test<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> (f64, f64) {
    let n = samples.len();
    assert!(n > 0, "KS test needs samples");
    samples.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_q(lambda))
}

/// Lower end of the Wilson score interval for a binomial proportion.
pub fn wilson_lower(successes: u64, n: u64, z: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = p + z2 / (2.0 * nf);
    let margin = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - margin) / denom).max(0.0)
}
