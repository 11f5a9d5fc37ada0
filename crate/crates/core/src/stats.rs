//! Posterior summaries with fixed, documented conventions: mean, median by
//! nearest rank, and 5%/95% quantiles by linear interpolation between order
//! statistics.

use crate::math;
use crate::sampler::SampleSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Summarize one sample column.
pub fn summarize_column(name: &str, values: &[f64]) -> SummaryRow {
    let sorted = math::sorted(values);
    SummaryRow {
        name: name.to_string(),
        mean: math::mean(values),
        median: math::median_nearest_rank(&sorted),
        q05: math::quantile_linear(&sorted, 0.05),
        q95: math::quantile_linear(&sorted, 0.95),
    }
}

/// Rows for theta components, then tau2 and sigma2 = 1/tau2.
pub fn summarize_samples(samples: &SampleSet) -> Vec<SummaryRow> {
    let q = samples.draws[0].0.len();
    let mut rows = Vec::with_capacity(q + 2);
    for j in 0..q {
        rows.push(summarize_column(&format!("theta{}", j + 1), &samples.column(j)));
    }
    rows.push(summarize_column("tau2", &samples.column(q)));
    rows.push(summarize_column("sigma2", &samples.column(q + 1)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn column_summary_conventions() {
        let values = vec![5.0, 1.0, 3.0, 2.0, 4.0];
        let row = summarize_column("x", &values);
        assert_relative_eq!(row.mean, 3.0);
        assert_eq!(row.median, 3.0); // ceil(5*0.5) = 3rd of sorted
        // p (n-1) = 0.05 * 4 = 0.2 -> between 1 and 2
        assert_relative_eq!(row.q05, 1.2, epsilon = 1e-12);
        assert_relative_eq!(row.q95, 4.8, epsilon = 1e-12);
    }
}
