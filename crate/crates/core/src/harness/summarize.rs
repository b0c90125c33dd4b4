//! Reductions over one or more metric series.

use std::fmt::Write as _;

use serde::Serialize;

use crate::sim::Sample;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub name: String,
    /// First instant at which the final completed count was reached.
    pub end_to_end: f64,
    pub final_completed: u64,
    pub peak_connected: usize,
    pub peak_warm: usize,
    pub first_warm_at: Option<f64>,
}

impl SeriesSummary {
    pub fn from_samples(name: &str, samples: &[Sample]) -> Self {
        let final_completed = samples.iter().map(|s| s.completed_items).max().unwrap_or(0);
        let end_to_end = samples
            .iter()
            .find(|s| s.completed_items == final_completed)
            .map_or(0.0, |s| s.t_emulated);
        SeriesSummary {
            name: name.to_string(),
            end_to_end,
            final_completed,
            peak_connected: samples.iter().map(|s| s.connected_workers).max().unwrap_or(0),
            peak_warm: samples.iter().map(|s| s.warm_workers).max().unwrap_or(0),
            first_warm_at: samples.iter().find(|s| s.warm_workers > 0).map(|s| s.t_emulated),
        }
    }
}

/// Percent by which `b` improves on `a`.
pub fn reduction_pct(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        (a - b) / a * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub spread: f64,
    /// Spread as a percentage of the best (smallest) value.
    pub spread_pct_of_best: f64,
    pub max_over_min: f64,
}

pub fn batch_range(values: &[f64]) -> Option<Range> {
    let min = values.iter().copied().reduce(f64::min)?;
    let max = values.iter().copied().reduce(f64::max)?;
    let spread = max - min;
    Some(Range {
        min,
        max,
        spread,
        spread_pct_of_best: if min > 0.0 { spread / min * 100.0 } else { 0.0 },
        max_over_min: if min > 0.0 { max / min } else { f64::INFINITY },
    })
}

/// Completed items at `t`, holding the last sample.
pub fn completed_at(samples: &[Sample], t: f64) -> u64 {
    let idx = samples.partition_point(|s| s.t_emulated <= t);
    if idx == 0 {
        0
    } else {
        samples[idx - 1].completed_items
    }
}

fn warm_at(samples: &[Sample], t: f64) -> f64 {
    let idx = samples.partition_point(|s| s.t_emulated <= t);
    if idx == 0 {
        0.0
    } else {
        samples[idx - 1].warm_workers as f64
    }
}

/// Grid instants from `from` (inclusive) to `to`, `step` apart.
pub fn grid(from: f64, to: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = from + step * k as f64;
        if t > to {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

/// Grid instants at which `a` has completed fewer items than `b`.
pub fn dominance_violations(a: &[Sample], b: &[Sample], from: f64, step: f64) -> Vec<f64> {
    let end = |s: &[Sample]| s.last().map_or(0.0, |x| x.t_emulated);
    let to = end(a).min(end(b));
    grid(from, to, step)
        .into_iter()
        .filter(|t| completed_at(a, *t) < completed_at(b, *t))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn linear_fit(points: &[(f64, f64)]) -> Option<Regression> {
    let n = points.len() as f64;
    if points.len() < 3 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
    Some(Regression {
        slope,
        intercept,
        r_squared: 1.0 - ss_res / syy,
        points: points.len(),
    })
}

/// (time-averaged warm workers, items/s) per bin of `bin` seconds, for bins
/// that end before the run has completed `cutoff` of its final item count.
/// The tail is left out: once the queue runs dry warm workers sit idle.
pub fn throughput_points(samples: &[Sample], bin: f64, cutoff: f64) -> Vec<(f64, f64)> {
    let Some(last) = samples.last() else { return Vec::new() };
    let final_items = samples.iter().map(|s| s.completed_items).max().unwrap_or(0) as f64;
    let mut out = Vec::new();
    let mut t0 = 0.0;
    while t0 + bin <= last.t_emulated {
        let t1 = t0 + bin;
        let done = completed_at(samples, t1) as f64;
        if done > cutoff * final_items {
            break;
        }
        let rate = (done - completed_at(samples, t0) as f64) / bin;
        // integrate the warm-count step function over [t0, t1)
        let mut area = 0.0;
        let mut t = t0;
        for s in samples.iter().filter(|s| s.t_emulated > t0 && s.t_emulated < t1) {
            area += warm_at(samples, t) * (s.t_emulated - t);
            t = s.t_emulated;
        }
        area += warm_at(samples, t) * (t1 - t);
        out.push((area / bin, rate));
        t0 = t1;
    }
    out
}

pub fn throughput_regression(samples: &[Sample], bin: f64, cutoff: f64) -> Option<Regression> {
    linear_fit(&throughput_points(samples, bin, cutoff))
}

/// Plain-text comparison of several runs; reductions are relative to the first.
pub fn comparison_table(rows: &[SeriesSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>12} {:>8} {:>8} {:>11}",
        "series", "end_to_end_s", "completed", "peak_w", "warm_w", "reduction_%"
    );
    let base = rows.first().map_or(0.0, |r| r.end_to_end);
    for r in rows {
        let _ = writeln!(
            out,
            "{:<28} {:>12.1} {:>12} {:>8} {:>8} {:>11.1}",
            r.name,
            r.end_to_end,
            r.final_completed,
            r.peak_connected,
            r.peak_warm,
            reduction_pct(base, r.end_to_end)
        );
    }
    if rows.len() >= 2 {
        let _ = writeln!(out);
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                let _ = writeln!(
                    out,
                    "{} -> {}: {:.1}% reduction",
                    a.name,
                    b.name,
                    reduction_pct(a.end_to_end, b.end_to_end)
                );
            }
        }
        let ends: Vec<f64> = rows.iter().map(|r| r.end_to_end).collect();
        if let Some(r) = batch_range(&ends) {
            let _ = writeln!(
                out,
                "range: {:.1} s ({:.1}% of best), max/min {:.3}",
                r.spread, r.spread_pct_of_best, r.max_over_min
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: f64, c: u64, w: usize) -> Sample {
        Sample {
            t_emulated: t,
            completed_items: c,
            connected_workers: w,
            warm_workers: w,
        }
    }

    #[test]
    fn reductions_match_hand_arithmetic() {
        // (10.4k - 5.3k) / 10.4k and (10.4k - 2.9k) / 10.4k
        assert!((reduction_pct(10_400.0, 5_300.0) - 49.038).abs() < 0.01);
        assert!((reduction_pct(10_400.0, 2_900.0) - 72.115).abs() < 0.01);
        assert_eq!(reduction_pct(5.0, 5.0), 0.0);
    }

    #[test]
    fn range_of_full_sweep() {
        let r = batch_range(&[3_300.0, 2_900.0, 3_300.0]).unwrap();
        assert_eq!(r.spread, 400.0);
        assert!((r.spread_pct_of_best - 13.79).abs() < 0.01);
        assert!(batch_range(&[]).is_none());
    }

    #[test]
    fn step_lookup_and_dominance() {
        let a = vec![s(0.0, 0, 1), s(10.0, 100, 1), s(30.0, 300, 1)];
        let b = vec![s(0.0, 0, 1), s(20.0, 90, 1), s(30.0, 200, 1)];
        assert_eq!(completed_at(&a, 5.0), 0);
        assert_eq!(completed_at(&a, 10.0), 100);
        assert_eq!(completed_at(&a, 29.0), 100);
        assert!(dominance_violations(&a, &b, 0.0, 10.0).is_empty());
        assert_eq!(dominance_violations(&b, &a, 0.0, 10.0), vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn perfect_line_has_unit_r_squared() {
        let pts: Vec<(f64, f64)> = (0..10).map(|x| (x as f64, 3.0 * x as f64 + 2.0)).collect();
        let r = linear_fit(&pts).unwrap();
        assert!((r.slope - 3.0).abs() < 1e-12);
        assert!((r.intercept - 2.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn throughput_bins_average_warm_workers() {
        // warm count 2 for the first half of the bin, 4 for the second
        let samples = vec![
            s(0.0, 0, 2),
            s(5.0, 10, 4),
            s(10.0, 30, 4),
            s(20.0, 60, 4),
            s(100.0, 1000, 4),
        ];
        let pts = throughput_points(&samples, 10.0, 1.0);
        assert_eq!(pts[0], (3.0, 3.0));
        assert_eq!(pts[1], (4.0, 3.0));
    }

    #[test]
    fn summary_end_is_first_time_at_final_count() {
        let samples = vec![s(0.0, 0, 1), s(50.0, 10, 1), s(60.0, 10, 0)];
        let sum = SeriesSummary::from_samples("x", &samples);
        assert_eq!(sum.end_to_end, 50.0);
        assert_eq!(sum.final_completed, 10);
        assert!(comparison_table(&[sum.clone(), sum]).contains("0.0% reduction"));
    }
}
