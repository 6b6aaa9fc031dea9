//! Summary statistics used by the Monte Carlo checks.

/// Pairwise (cascade) summation; the result does not depend on how the input
/// was produced, only on its order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// Mean and its standard error under independence.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

/// Means of `n_batches` contiguous blocks of equal length; a trailing
/// remainder shorter than one block is dropped.
pub fn batch_means(series: &[f64], n_batches: usize) -> Vec<f64> {
    let len = series.len() / n_batches.max(1);
    if len == 0 {
        return Vec::new();
    }
    series.chunks_exact(len).take(n_batches).map(mean).collect()
}

/// z-score of `estimate` against `reference`; zero when both agree exactly.
pub fn z_score(estimate: f64, reference: f64, stderr: f64) -> f64 {
    let diff = estimate - reference;
    if diff == 0.0 {
        0.0
    } else {
        diff / stderr
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(median(&xs), 2.5);
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn batches_drop_remainder() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(batch_means(&xs, 3), vec![1.0, 4.0, 7.0]);
    }
}
