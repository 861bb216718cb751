//! Depth accuracy metrics, uncertainty masking sweeps and error/uncertainty
//! rank correlation.
//!
//! All reductions run sequentially in pixel order, so results are
//! reproducible bit for bit.

use std::fmt::{self, Write as _};

use crate::{Error, Result};

/// Ratio thresholds of the δ-accuracy columns.
pub const DELTA_THRESHOLDS: [f64; 5] = [1.05, 1.10, 1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
/// σ̂ thresholds of the default masking sweep, meters.
pub const SWEEP_THRESHOLDS: [f64; 4] = [0.5, 0.16, 0.10, 0.08];
/// Minimum sample count for a rank correlation.
pub const MIN_CORRELATION_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub log_rmse: f64,
    pub irmse: f64,
    pub rmse: f64,
    /// `(δ, percentage of pixels with max(d/d*, d*/d) < δ)`.
    pub delta_acc: Vec<(f64, f64)>,
    pub n_evaluated: usize,
}

impl MetricReport {
    /// `(key, value)` pairs in a stable order.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("abs_rel".to_string(), self.abs_rel),
            ("sq_rel".to_string(), self.sq_rel),
            ("log_rmse".to_string(), self.log_rmse),
            ("irmse".to_string(), self.irmse),
            ("rmse".to_string(), self.rmse),
        ];
        for (d, p) in &self.delta_acc {
            out.push((format!("delta_{}", delta_label(*d)), *p));
        }
        out.push(("n".to_string(), self.n_evaluated as f64));
        out
    }

    /// `prefix.key=value` lines.
    pub fn to_key_value(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{prefix}.{k}={v}");
        }
        s
    }

    pub fn delta(&self, threshold: f64) -> Option<f64> {
        self.delta_acc
            .iter()
            .find(|(d, _)| (d - threshold).abs() < 1e-12)
            .map(|(_, p)| *p)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pixels    {}", self.n_evaluated)?;
        writeln!(f, "abs_rel   {:.6}", self.abs_rel)?;
        writeln!(f, "sq_rel    {:.6}", self.sq_rel)?;
        writeln!(f, "log_rmse  {:.6}", self.log_rmse)?;
        writeln!(f, "irmse     {:.6}", self.irmse)?;
        writeln!(f, "rmse      {:.6}", self.rmse)?;
        for (d, p) in &self.delta_acc {
            writeln!(f, "delta<{:<8} {:.2}%", delta_label(*d), p)?;
        }
        Ok(())
    }
}

fn delta_label(d: f64) -> String {
    // 1.25^2 and 1.25^3 print exactly as 1.5625 and 1.953125.
    format!("{d}")
}

fn check_lengths(a: usize, b: usize, mask: Option<&[bool]>) -> Result<()> {
    if a != b || mask.is_some_and(|m| m.len() != a) {
        return Err(Error::input("prediction, ground truth and mask differ in size"));
    }
    Ok(())
}

/// Pixels that are masked in (or no mask given) and finite in both maps.
fn evaluable<'a>(pred: &'a [f64], gt: &'a [f64], mask: Option<&[bool]>) -> impl Iterator<Item = usize> + 'a {
    let mask = mask.map(|m| m.to_vec());
    (0..pred.len()).filter(move |&i| {
        mask.as_ref().is_none_or(|m| m[i]) && pred[i].is_finite() && gt[i].is_finite()
    })
}

fn report_over(pred: &[f64], gt: &[f64], idx: &[usize]) -> Result<MetricReport> {
    if idx.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let (mut abs_rel, mut sq_rel, mut log_sq, mut inv_sq, mut sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; DELTA_THRESHOLDS.len()];
    for &i in idx {
        let (p, g) = (pred[i], gt[i]);
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::input(format!(
                "non-positive depth at pixel {i} (pred {p}, gt {g})"
            )));
        }
        let e = p - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        let le = p.ln() - g.ln();
        log_sq += le * le;
        let ie = 1.0 / p - 1.0 / g;
        inv_sq += ie * ie;
        sq += e * e;
        let ratio = (p / g).max(g / p);
        for (h, t) in hits.iter_mut().zip(DELTA_THRESHOLDS) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    let n = idx.len() as f64;
    Ok(MetricReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        log_rmse: (log_sq / n).sqrt(),
        irmse: (inv_sq / n).sqrt(),
        rmse: (sq / n).sqrt(),
        delta_acc: DELTA_THRESHOLDS
            .iter()
            .zip(hits)
            .map(|(&t, h)| (t, 100.0 * h as f64 / n))
            .collect(),
        n_evaluated: idx.len(),
    })
}

/// Every metric over pixels inside `mask` where both maps are finite.
pub fn evaluate(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<MetricReport> {
    check_lengths(pred.len(), gt.len(), mask)?;
    let idx: Vec<usize> = evaluable(pred, gt, mask).collect();
    report_over(pred, gt, &idx)
}

/// One threshold of an uncertainty masking sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma_threshold: f64,
    /// Share of evaluable pixels retained, percent.
    pub coverage_percent: f64,
    /// `None` when nothing is retained.
    pub report: Option<MetricReport>,
}

/// For every threshold `t`, metrics over the evaluable pixels with `σ < t`.
pub fn uncertainty_sweep(pred: &[f64], sigma: &[f64], gt: &[f64], thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    check_lengths(pred.len(), gt.len(), None)?;
    check_lengths(pred.len(), sigma.len(), None)?;
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::input(format!("sweep thresholds must be positive, got {t}")));
    }
    let base: Vec<usize> = evaluable(pred, gt, None).collect();
    thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<usize> = base.iter().copied().filter(|&i| sigma[i] < t).collect();
            let coverage_percent = if base.is_empty() {
                0.0
            } else {
                100.0 * kept.len() as f64 / base.len() as f64
            };
            let report = if kept.is_empty() {
                None
            } else {
                Some(report_over(pred, gt, &kept)?)
            };
            Ok(SweepRow {
                sigma_threshold: t,
                coverage_percent,
                report,
            })
        })
        .collect()
}

/// Metrics over the `fraction` of evaluable pixels with the lowest σ (ties
/// broken by pixel order).
pub fn retain_lowest_sigma(pred: &[f64], sigma: &[f64], gt: &[f64], fraction: f64) -> Result<SweepRow> {
    check_lengths(pred.len(), gt.len(), None)?;
    check_lengths(pred.len(), sigma.len(), None)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let mut base: Vec<usize> = evaluable(pred, gt, None).filter(|&i| !sigma[i].is_nan()).collect();
    if base.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let total = base.len();
    base.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]).then(a.cmp(&b)));
    let keep = ((fraction * total as f64).round() as usize).min(total);
    let threshold = if keep == 0 { 0.0 } else { sigma[base[keep - 1]] };
    base.truncate(keep);
    base.sort_unstable();
    Ok(SweepRow {
        sigma_threshold: threshold,
        coverage_percent: 100.0 * keep as f64 / total as f64,
        report: if keep == 0 {
            None
        } else {
            Some(report_over(pred, gt, &base)?)
        },
    })
}

/// CSV with one line per sweep row; empty rows leave the metric columns
/// blank.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("sigma_threshold,coverage_percent,abs_rel,sq_rel,log_rmse,irmse,rmse");
    for d in DELTA_THRESHOLDS {
        let _ = write!(s, ",delta_{}", delta_label(d));
    }
    s.push_str(",n\n");
    for row in rows {
        let _ = write!(s, "{},{}", row.sigma_threshold, row.coverage_percent);
        match &row.report {
            Some(r) => {
                for (_, v) in r.fields() {
                    let _ = write!(s, ",{v}");
                }
            }
            None => {
                s.push_str(&",".repeat(6 + DELTA_THRESHOLDS.len()));
            }
        }
        s.push('\n');
    }
    s
}

/// Spearman rank correlation between absolute error and σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    /// False when either ranking is constant; `rho` is then 0.
    pub defined: bool,
    pub samples: usize,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn error_uncertainty_correlation(
    pred: &[f64],
    sigma: &[f64],
    gt: &[f64],
    mask: Option<&[bool]>,
) -> Result<Correlation> {
    check_lengths(pred.len(), gt.len(), mask)?;
    check_lengths(pred.len(), sigma.len(), None)?;
    let idx: Vec<usize> = evaluable(pred, gt, mask).filter(|&i| sigma[i].is_finite()).collect();
    if idx.len() < MIN_CORRELATION_SAMPLES {
        return Err(Error::input(format!(
            "rank correlation needs at least {MIN_CORRELATION_SAMPLES} pixels, got {}",
            idx.len()
        )));
    }
    let err: Vec<f64> = idx.iter().map(|&i| (pred[i] - gt[i]).abs()).collect();
    let sig: Vec<f64> = idx.iter().map(|&i| sigma[i]).collect();
    let rho = pearson(&average_ranks(&err), &average_ranks(&sig));
    Ok(Correlation {
        rho: rho.unwrap_or(0.0),
        defined: rho.is_some(),
        samples: idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction() {
        let gt = [1.0, 2.0, 3.5, 0.7];
        let r = evaluate(&gt, &gt, None).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.log_rmse, r.irmse, r.rmse), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(r.delta_acc.iter().all(|(_, p)| *p == 100.0));
        assert_eq!(r.n_evaluated, 4);
    }

    #[test]
    fn delta_grid() {
        assert_eq!(DELTA_THRESHOLDS, [1.05, 1.10, 1.25, 1.5625, 1.953125]);
    }

    #[test]
    fn three_pixel_hand_case() {
        let gt = [1.0, 2.0, 4.0];
        let pred = [1.08, 2.0, 3.0];
        let r = evaluate(&pred, &gt, None).unwrap();
        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        close(r.abs_rel, (0.08f64 / 1.0 + 0.0 + 1.0 / 4.0) / 3.0);
        close(r.sq_rel, ((1.08f64 - 1.0).powi(2) / 1.0 + 0.0 + 1.0 / 4.0) / 3.0);
        close(r.rmse, (((1.08f64 - 1.0).powi(2) + 0.0 + 1.0) / 3.0).sqrt());
        close(r.log_rmse, (((1.08f64).ln().powi(2) + 0.0 + (3.0f64.ln() - 4.0f64.ln()).powi(2)) / 3.0).sqrt());
        close(r.irmse, (((1.0 / 1.08 - 1.0f64).powi(2) + 0.0 + (1.0 / 3.0 - 0.25f64).powi(2)) / 3.0).sqrt());
        // Ratios 1.08, 1.0, 1.333...
        let expected = [100.0 / 3.0, 200.0 / 3.0, 200.0 / 3.0, 100.0, 100.0];
        for ((_, p), e) in r.delta_acc.iter().zip(expected) {
            close(*p, e);
        }
    }

    #[test]
    fn mask_and_invalid_pixels_are_excluded() {
        let gt = [1.0, f64::NAN, 2.0, 3.0];
        let pred = [1.0, 5.0, f64::NAN, 6.0];
        let r = evaluate(&pred, &gt, Some(&[true, true, true, false])).unwrap();
        assert_eq!(r.n_evaluated, 1);
        assert!(matches!(
            evaluate(&pred, &gt, Some(&[false; 4])),
            Err(Error::EmptyEvaluation)
        ));
        assert!(matches!(evaluate(&[0.0], &[1.0], None), Err(Error::Input(_))));
        assert!(matches!(evaluate(&[1.0], &[1.0, 2.0], None), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn delta_accuracy_monotone(vals in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..200)) {
            let (pred, gt): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
            let r = evaluate(&pred, &gt, None).unwrap();
            for w in r.delta_acc.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert!(r.delta_acc.iter().all(|(_, p)| (0.0..=100.0).contains(p)));
        }

        #[test]
        fn scale_equivariance(vals in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..100), s in 0.1f64..10.0) {
            let (pred, gt): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
            let a = evaluate(&pred, &gt, None).unwrap();
            let sp: Vec<f64> = pred.iter().map(|v| v * s).collect();
            let sg: Vec<f64> = gt.iter().map(|v| v * s).collect();
            let b = evaluate(&sp, &sg, None).unwrap();
            prop_assert!((b.rmse - s * a.rmse).abs() <= 1e-9 * (1.0 + s * a.rmse));
            prop_assert!((b.irmse - a.irmse / s).abs() <= 1e-9 * (1.0 + a.irmse / s));
            prop_assert!((b.abs_rel - a.abs_rel).abs() <= 1e-9);
            prop_assert!((b.log_rmse - a.log_rmse).abs() <= 1e-9);
        }

        #[test]
        fn permutation_invariance(vals in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0, any::<bool>()), 2..100), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..vals.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pred: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let gt: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let mut mask: Vec<bool> = vals.iter().map(|v| v.2).collect();
            mask[0] = true;
            let a = evaluate(&pred, &gt, Some(&mask)).unwrap();
            let pp: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
            let pg: Vec<f64> = perm.iter().map(|&i| gt[i]).collect();
            let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
            let b = evaluate(&pp, &pg, Some(&pm)).unwrap();
            prop_assert_eq!(a.n_evaluated, b.n_evaluated);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
            prop_assert_eq!(a.delta_acc, b.delta_acc);
        }
    }

    #[test]
    fn infinite_threshold_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<f64> = (0..500).map(|_| rng.random_range(0.5..5.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-0.2..0.2)).collect();
        let sigma: Vec<f64> = (0..500).map(|_| rng.random_range(0.01..1.0)).collect();
        let rows = uncertainty_sweep(&pred, &sigma, &gt, &[f64::INFINITY]).unwrap();
        assert_eq!(rows[0].coverage_percent, 100.0);
        assert_eq!(rows[0].report.as_ref().unwrap(), &evaluate(&pred, &gt, None).unwrap());
    }

    #[test]
    fn sweep_with_error_proportional_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<f64> = (0..2000).map(|_| rng.random_range(0.5..5.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-0.3..0.3)).collect();
        let sigma: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| 2.0 * (p - g).abs()).collect();
        let thresholds = [0.5, 0.4, 0.3, 0.2, 0.1];
        let rows = uncertainty_sweep(&pred, &sigma, &gt, &thresholds).unwrap();
        for (row, &t) in rows.iter().zip(&thresholds) {
            // Brute-force filter oracle.
            let kept: Vec<usize> = (0..2000).filter(|&i| sigma[i] < t).collect();
            let mse = kept.iter().map(|&i| (pred[i] - gt[i]).powi(2)).sum::<f64>() / kept.len() as f64;
            let rep = row.report.as_ref().unwrap();
            assert!((rep.rmse - mse.sqrt()).abs() < 1e-12);
            assert!((row.coverage_percent - 100.0 * kept.len() as f64 / 2000.0).abs() < 1e-12);
        }
        for w in rows.windows(2) {
            assert!(w[1].coverage_percent <= w[0].coverage_percent);
            assert!(w[1].report.as_ref().unwrap().rmse < w[0].report.as_ref().unwrap().rmse);
        }
    }

    #[test]
    fn empty_sweep_row_has_no_metrics() {
        let rows = uncertainty_sweep(&[1.0, 2.0], &[0.5, 0.6], &[1.0, 2.0], &[0.1]).unwrap();
        assert_eq!(rows[0].coverage_percent, 0.0);
        assert!(rows[0].report.is_none());
        let csv = sweep_csv(&rows);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line.split(',').count(), csv.lines().next().unwrap().split(',').count());
        assert!(uncertainty_sweep(&[1.0], &[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn retain_fraction_keeps_lowest_sigma() {
        let pred = [1.0, 2.0, 3.0, 4.0];
        let gt = [1.0, 2.5, 3.0, 1.0];
        let sigma = [0.1, 0.9, 0.2, 0.3];
        let row = retain_lowest_sigma(&pred, &sigma, &gt, 0.75).unwrap();
        assert_eq!(row.coverage_percent, 75.0);
        assert_eq!(row.sigma_threshold, 0.3);
        let rep = row.report.unwrap();
        assert_eq!(rep.n_evaluated, 3);
        assert!((rep.rmse - (9.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_correlation_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<f64> = (0..300).map(|_| rng.random_range(0.5..5.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-0.5..0.5)).collect();
        let err: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).collect();
        let c = error_uncertainty_correlation(&pred, &err, &gt, None).unwrap();
        assert!(c.defined);
        assert!((c.rho - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = err.iter().map(|e| 10.0 - e).collect();
        let c = error_uncertainty_correlation(&pred, &rev, &gt, None).unwrap();
        assert!((c.rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_sigma_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-0.5..0.5)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let c = error_uncertainty_correlation(&pred, &sigma, &gt, None).unwrap();
        assert!(c.rho.abs() < 0.05, "{}", c.rho);
    }

    #[test]
    fn constant_sigma_is_flagged() {
        let gt: Vec<f64> = (1..=20).map(f64::from).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * 1.1).collect();
        let c = error_uncertainty_correlation(&pred, &[0.3; 20], &gt, None).unwrap();
        assert!(!c.defined);
        assert_eq!(c.rho, 0.0);
        assert!(error_uncertainty_correlation(&pred[..5], &[0.3; 5], &gt[..5], None).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn key_value_lines() {
        let r = evaluate(&[1.0, 2.0], &[1.0, 2.0], None).unwrap();
        let kv = r.to_key_value("refined");
        assert!(kv.contains("refined.rmse=0\n"));
        assert!(kv.contains("refined.delta_1.5625=100\n"));
        assert!(kv.contains("refined.n=2\n"));
    }
}
