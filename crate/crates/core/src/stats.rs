//! Small statistical helpers for acceptance checks.

/// One-sample Kolmogorov-Smirnov test against the uniform distribution on
/// [lo, hi]. Returns (statistic, asymptotic p-value).
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let n = samples.len();
    assert!(n > 0 && hi > lo);
    let mut xs: Vec<f64> = samples.iter().map(|&x| (x - lo) / (hi - lo)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        let hi_step = (i + 1) as f64 / n as f64;
        let lo_step = i as f64 / n as f64;
        d = d.max((hi_step - cdf).abs()).max((cdf - lo_step).abs());
    }
    (d, ks_pvalue(n, d))
}

/// Asymptotic Kolmogorov distribution tail, with the small-n correction
/// lambda = (sqrt(n) + 0.12 + 0.11/sqrt(n)) * d.
fn ks_pvalue(n: usize, d: f64) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn uniform_samples_pass() {
        let mut rng = murmur_nn::rng::rng_from(7);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..5.0)).collect();
        let (_, p) = ks_uniform(&xs, 0.0, 5.0);
        assert!(p > 0.01, "p = {}", p);
    }

    #[test]
    fn skewed_samples_fail() {
        let mut rng = murmur_nn::rng::rng_from(7);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| {
                let u: f64 = rng.gen_range(0.0f64..1.0);
                u * u * 5.0
            })
            .collect();
        let (_, p) = ks_uniform(&xs, 0.0, 5.0);
        assert!(p < 0.01, "p = {}", p);
    }
}
