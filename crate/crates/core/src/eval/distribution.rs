//! Error-distribution report data: empirical CDF of absolute errors and a
//! Gaussian KDE of signed percentage errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PredictionSet;

/// Points on the KDE evaluation grid.
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub abs_error_ml: f64,
    pub cumulative_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdePoint {
    pub percent_error: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSeries {
    /// Exact empirical CDF over the distinct absolute errors, ascending.
    pub cdf: Vec<CdfPoint>,
    /// Gaussian-kernel density of 100 * (est - gt) / gt on a uniform grid
    /// spanning the data plus four bandwidths on each side.
    pub kde: Vec<KdePoint>,
    /// Silverman bandwidth used for the KDE.
    pub bandwidth: f64,
}

/// Type-7 (linear interpolation) quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Silverman's rule: 0.9 * min(sample std, IQR / 1.34) * n^(-1/5), skipping
/// whichever spread estimate is zero. Degenerate samples (all values equal)
/// fall back to a kernel much narrower than the value scale.
fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = match (std > 0.0, iqr > 0.0) {
        (true, true) => std.min(iqr / 1.34),
        (true, false) => std,
        _ => return 1e-3 * (1.0 + mean.abs()),
    };
    0.9 * spread * n.powf(-0.2)
}

/// Builds both series. Needs at least 2 predictions so the bandwidth is
/// defined.
pub fn error_distribution_series(preds: &PredictionSet) -> Result<DistributionSeries> {
    let rows = preds.rows();
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(
            "distribution series need at least 2 predictions".into(),
        ));
    }
    let n = rows.len();
    let nf = n as f64;

    let mut abs_errors: Vec<f64> =
        rows.iter().map(|r| (r.volume_est_ml - r.volume_gt_ml).abs()).collect();
    abs_errors.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut cdf = Vec::new();
    for (i, &v) in abs_errors.iter().enumerate() {
        let fraction = (i + 1) as f64 / nf;
        match cdf.last_mut() {
            // Equal errors collapse into one step at the larger fraction.
            Some(CdfPoint { abs_error_ml, cumulative_fraction }) if *abs_error_ml == v => {
                *cumulative_fraction = fraction;
            }
            _ => cdf.push(CdfPoint { abs_error_ml: v, cumulative_fraction: fraction }),
        }
    }

    let mut pct_errors: Vec<f64> = rows
        .iter()
        .map(|r| 100.0 * (r.volume_est_ml - r.volume_gt_ml) / r.volume_gt_ml)
        .collect();
    pct_errors.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let bandwidth = silverman_bandwidth(&pct_errors);
    let lo = pct_errors[0] - 4.0 * bandwidth;
    let hi = pct_errors[n - 1] + 4.0 * bandwidth;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / (nf * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let kde = (0..KDE_GRID_POINTS)
        .map(|i| {
            let x = lo + i as f64 * step;
            let density = norm
                * pct_errors
                    .iter()
                    .map(|&e| {
                        let z = (x - e) / bandwidth;
                        (-0.5 * z * z).exp()
                    })
                    .sum::<f64>();
            KdePoint { percent_error: x, density }
        })
        .collect();

    Ok(DistributionSeries { cdf, kde, bandwidth })
}

/// Trapezoid mass of the KDE series over its grid.
pub fn kde_grid_mass(series: &DistributionSeries) -> f64 {
    series
        .kde
        .windows(2)
        .map(|w| 0.5 * (w[0].density + w[1].density) * (w[1].percent_error - w[0].percent_error))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::PredictionRow;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn preds_with_errors(gt_and_est: &[(f64, f64)]) -> PredictionSet {
        let rows = gt_and_est
            .iter()
            .enumerate()
            .map(|(i, &(gt, est))| PredictionRow {
                item_id: format!("i{i}"),
                class_label: "c".into(),
                volume_est_ml: est,
                volume_gt_ml: gt,
                predicted_class: None,
                prompt: None,
                clipped: false,
            })
            .collect();
        PredictionSet::new(rows).unwrap()
    }

    #[test]
    fn cdf_matches_hand_case() {
        // Absolute errors 1, 2, 3.
        let preds = preds_with_errors(&[(10.0, 11.0), (10.0, 8.0), (10.0, 13.0)]);
        let series = error_distribution_series(&preds).unwrap();
        let expected = [(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)];
        assert_eq!(series.cdf.len(), 3);
        for (point, (v, f)) in series.cdf.iter().zip(expected) {
            assert_eq!(point.abs_error_ml, v);
            assert_eq!(point.cumulative_fraction, f);
        }
    }

    #[test]
    fn equal_errors_collapse_to_one_step() {
        let preds = preds_with_errors(&[(10.0, 12.0), (20.0, 22.0), (30.0, 28.0)]);
        let series = error_distribution_series(&preds).unwrap();
        assert_eq!(series.cdf, vec![CdfPoint { abs_error_ml: 2.0, cumulative_fraction: 1.0 }]);
    }

    #[test]
    fn kde_mass_is_one_on_random_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.random_range(2..200);
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(10.0..500.0), rng.random_range(1.0..600.0)))
                .collect();
            let series = error_distribution_series(&preds_with_errors(&pairs)).unwrap();
            let mass = kde_grid_mass(&series);
            assert!((mass - 1.0).abs() <= 1e-3, "mass {mass} off unit");
        }
    }

    #[test]
    fn kde_recovers_standard_normal_peak() {
        // Percent errors that are standard-normal draws: gt = 100 everywhere,
        // est = 100 + z so that 100 * (est - gt) / gt = z.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let pairs: Vec<(f64, f64)> = (0..10_000)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (100.0, 100.0 + z)
            })
            .collect();
        let series = error_distribution_series(&preds_with_errors(&pairs)).unwrap();
        let peak = series.kde.iter().map(|p| p.density).fold(0.0, f64::max);
        let target = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!(
            (peak - target).abs() <= 0.1 * target,
            "peak {peak} vs normal density {target}"
        );
        assert!((kde_grid_mass(&series) - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn degenerate_spread_still_integrates() {
        // Every percent error identical: bandwidth falls back, mass stays 1.
        let preds = preds_with_errors(&[(100.0, 110.0), (200.0, 220.0), (300.0, 330.0)]);
        let series = error_distribution_series(&preds).unwrap();
        assert!(series.bandwidth > 0.0);
        assert!((kde_grid_mass(&series) - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&sorted, 0.0), 1.0);
        assert_eq!(quantile_sorted(&sorted, 1.0), 4.0);
        assert_eq!(quantile_sorted(&sorted, 0.5), 2.5);
        assert_eq!(quantile_sorted(&sorted, 0.25), 1.75);
    }

    #[test]
    fn series_round_trip_through_json() {
        let preds = preds_with_errors(&[(10.0, 11.0), (10.0, 8.0), (10.0, 13.0)]);
        let series = error_distribution_series(&preds).unwrap();
        let text = serde_json::to_string(&series).unwrap();
        let back: DistributionSeries = serde_json::from_str(&text).unwrap();
        assert_eq!(series, back);
    }
}
