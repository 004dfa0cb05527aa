//! Sample means with standard errors and Kolmogorov-Smirnov distances.

use serde::Serialize;

/// Default number of standard errors a Monte Carlo comparison may be off.
pub const DEFAULT_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub n: usize,
    /// Confidence multiplier used by [`Estimate::agrees_with`].
    pub multiplier: f64,
}

impl Estimate {
    /// Mean and standard error of `samples`, summed in index order.
    pub fn from_samples(samples: &[f64]) -> Estimate {
        let n = samples.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, se: f64::NAN, n, multiplier: DEFAULT_MULTIPLIER };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Estimate { mean, se, n, multiplier: DEFAULT_MULTIPLIER }
    }

    pub fn from_values(samples: impl IntoIterator<Item = f64>) -> Estimate {
        Estimate::from_samples(&samples.into_iter().collect::<Vec<_>>())
    }

    /// A known constant, with zero error.
    pub fn exact(value: f64) -> Estimate {
        Estimate { mean: value, se: 0.0, n: 0, multiplier: DEFAULT_MULTIPLIER }
    }

    /// Proportion estimate with the binomial standard error.
    pub fn proportion(hits: usize, n: usize) -> Estimate {
        let p = hits as f64 / n as f64;
        Estimate { mean: p, se: (p * (1.0 - p) / n as f64).sqrt(), n, multiplier: DEFAULT_MULTIPLIER }
    }

    pub fn with_multiplier(mut self, multiplier: f64) -> Estimate {
        self.multiplier = multiplier;
        self
    }

    /// `(mean - target) / se`; zero when both the gap and the error vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = self.mean - target;
        if gap == 0.0 {
            0.0
        } else {
            gap / self.se
        }
    }

    /// `|mean - target| <= multiplier * se + allowance`.
    pub fn agrees_with(&self, target: f64, allowance: f64) -> bool {
        (self.mean - target).abs() <= self.multiplier * self.se + allowance
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.se > 0.0)
    }
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and
/// the continuous CDF `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// 95% asymptotic critical value of the one-sample KS statistic.
pub fn ks_critical(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_and_se() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert_relative_eq!(e.se, (5.0f64 / 3.0 / 4.0).sqrt(), max_relative = 1e-14);
        assert!(e.agrees_with(2.5 + 3.0 * e.se - 1e-12, 0.0));
        assert!(!e.agrees_with(2.5 + 3.0 * e.se + 1e-9, 0.0));
    }

    #[test]
    fn degenerate_samples() {
        let e = Estimate::from_samples(&[0.0; 10]);
        assert!(e.is_degenerate());
        assert_eq!(e.z_score(0.0), 0.0);
        assert!(e.agrees_with(0.0, 0.0));
        assert!(Estimate::from_samples(&[]).mean.is_nan());
    }

    #[test]
    fn proportion_se() {
        let e = Estimate::proportion(25, 100);
        assert_eq!(e.mean, 0.25);
        assert_relative_eq!(e.se, (0.25f64 * 0.75 / 100.0).sqrt());
    }

    #[test]
    fn ks_of_uniform_grid() {
        let n = 1000;
        let samples: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_distance(&samples, |x| x);
        assert_relative_eq!(d, 0.5 / n as f64, max_relative = 1e-9);
        let shifted: Vec<f64> = samples.iter().map(|x| x * 0.5).collect();
        assert!(ks_distance(&shifted, |x| x) > 0.49);
    }
}
