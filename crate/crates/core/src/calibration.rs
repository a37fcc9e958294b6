//! Decision-threshold calibration from genuine and fake distance populations.
//!
//! A frame is accepted as genuine when its distance is at most the threshold
//! and flagged as fake when the distance lies strictly above it.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{ser_f64, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub format_version: u32,
    #[serde(serialize_with = "ser_f64")]
    pub threshold: f64,
    #[serde(serialize_with = "ser_f64")]
    pub acc_genuine: f64,
    #[serde(serialize_with = "ser_f64")]
    pub acc_fake: f64,
    #[serde(serialize_with = "ser_f64")]
    pub acc_overall: f64,
    pub n_genuine: usize,
    pub n_fake: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub acc_genuine: f64,
    pub acc_fake: f64,
    pub acc_overall: f64,
}

fn check_population(values: &[f64], name: &'static str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Empty(name));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "{name} must be finite and nonnegative, found {bad}"
        )));
    }
    Ok(())
}

fn accuracy(accepted_genuine: usize, rejected_fake: usize, n_g: usize, n_f: usize) -> Accuracy {
    Accuracy {
        acc_genuine: accepted_genuine as f64 / n_g as f64,
        acc_fake: rejected_fake as f64 / n_f as f64,
        acc_overall: (accepted_genuine + rejected_fake) as f64 / (n_g + n_f) as f64,
    }
}

/// Accuracies at a fixed threshold.
pub fn evaluate(threshold: f64, genuine: &[f64], fake: &[f64]) -> Result<Accuracy> {
    if genuine.is_empty() {
        return Err(Error::Empty("genuine distances"));
    }
    if fake.is_empty() {
        return Err(Error::Empty("fake distances"));
    }
    let accepted = genuine.iter().filter(|&&d| d <= threshold).count();
    let rejected = fake.iter().filter(|&&d| d > threshold).count();
    Ok(accuracy(accepted, rejected, genuine.len(), fake.len()))
}

/// Candidate thresholds: midpoints between consecutive distinct distances,
/// one value below the smallest distance (when that distance is positive)
/// and one above the largest.
pub fn candidate_thresholds(genuine: &[f64], fake: &[f64]) -> Vec<f64> {
    let mut values: Vec<f64> = genuine.iter().chain(fake).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut out = Vec::with_capacity(values.len() + 1);
    let (Some(&lo), Some(&hi)) = (values.first(), values.last()) else {
        return out;
    };
    if lo > 0.0 {
        out.push(lo / 2.0);
    }
    out.extend(values.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(hi + 1.0);
    out
}

/// Orders two candidates by the selection rule: smaller accuracy gap, then
/// higher overall accuracy, then smaller threshold. Counts are compared as
/// integers so ties are exact.
fn better(a: (usize, usize, f64), b: (usize, usize, f64), n_g: usize, n_f: usize) -> Ordering {
    let gap = |(g, f, _): (usize, usize, f64)| (g * n_f).abs_diff(f * n_g);
    gap(a)
        .cmp(&gap(b))
        .then_with(|| (b.0 + b.1).cmp(&(a.0 + a.1)))
        .then_with(|| a.2.total_cmp(&b.2))
}

/// Picks the threshold that best balances genuine and fake accuracy.
pub fn calibrate_threshold(genuine: &[f64], fake: &[f64]) -> Result<CalibrationResult> {
    check_population(genuine, "genuine distances")?;
    check_population(fake, "fake distances")?;
    let (n_g, n_f) = (genuine.len(), fake.len());

    let mut g = genuine.to_vec();
    let mut f = fake.to_vec();
    g.sort_by(f64::total_cmp);
    f.sort_by(f64::total_cmp);

    // Candidates ascend, so both counts advance monotonically.
    let (mut gi, mut fi) = (0usize, 0usize);
    let mut best: Option<(usize, usize, f64)> = None;
    for tau in candidate_thresholds(genuine, fake) {
        while gi < n_g && g[gi] <= tau {
            gi += 1;
        }
        while fi < n_f && f[fi] <= tau {
            fi += 1;
        }
        let cand = (gi, n_f - fi, tau);
        if best.is_none_or(|b| better(cand, b, n_g, n_f) == Ordering::Less) {
            best = Some(cand);
        }
    }
    let (accepted, rejected, threshold) = best.expect("at least one candidate");
    let acc = accuracy(accepted, rejected, n_g, n_f);
    Ok(CalibrationResult {
        format_version: FORMAT_VERSION,
        threshold,
        acc_genuine: acc.acc_genuine,
        acc_fake: acc.acc_fake,
        acc_overall: acc.acc_overall,
        n_genuine: n_g,
        n_fake: n_f,
    })
}

/// Probability that a fake distance exceeds a genuine one, ties counted half.
pub fn auc(genuine: &[f64], fake: &[f64]) -> Result<f64> {
    check_population(genuine, "genuine distances")?;
    check_population(fake, "fake distances")?;
    let mut g = genuine.to_vec();
    g.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &d in fake {
        let below = g.partition_point(|&x| x < d);
        let ties = g[below..].partition_point(|&x| x <= d);
        wins += below as f64 + 0.5 * ties as f64;
    }
    Ok(wins / (genuine.len() as f64 * fake.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Evaluates every candidate with [`evaluate`] and keeps the best.
    fn exhaustive(genuine: &[f64], fake: &[f64]) -> (f64, Accuracy) {
        let mut best: Option<(f64, Accuracy)> = None;
        for tau in candidate_thresholds(genuine, fake) {
            let acc = evaluate(tau, genuine, fake).unwrap();
            let replace = match best {
                None => true,
                Some((bt, ba)) => {
                    let gap = (acc.acc_genuine - acc.acc_fake).abs();
                    let bgap = (ba.acc_genuine - ba.acc_fake).abs();
                    if (gap - bgap).abs() > 1e-12 {
                        gap < bgap
                    } else if (acc.acc_overall - ba.acc_overall).abs() > 1e-12 {
                        acc.acc_overall > ba.acc_overall
                    } else {
                        tau < bt
                    }
                }
            };
            if replace {
                best = Some((tau, acc));
            }
        }
        best.unwrap()
    }

    #[test]
    fn separable_populations() {
        let r = calibrate_threshold(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
        assert!(r.threshold > 3.0 && r.threshold < 10.0);
        assert_eq!((r.acc_genuine, r.acc_fake, r.acc_overall), (1.0, 1.0, 1.0));
        let acc = evaluate(r.threshold, &[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(acc.acc_overall, 1.0);
    }

    #[test]
    fn indistinguishable_populations() {
        let r = calibrate_threshold(&[5.0; 3], &[5.0; 3]).unwrap();
        assert_eq!(r.acc_genuine + r.acc_fake, 1.0);
        assert_eq!(r.acc_overall, 0.5);
    }

    #[test]
    fn extreme_thresholds() {
        let g = [1.0, 2.0];
        let f = [3.0, 4.0];
        let low = evaluate(0.5, &g, &f).unwrap();
        assert_eq!((low.acc_genuine, low.acc_fake), (0.0, 1.0));
        let high = evaluate(10.0, &g, &f).unwrap();
        assert_eq!((high.acc_genuine, high.acc_fake), (1.0, 0.0));
    }

    #[test]
    fn boundary_counts_as_genuine() {
        let acc = evaluate(2.0, &[2.0], &[2.0]).unwrap();
        assert_eq!((acc.acc_genuine, acc.acc_fake), (1.0, 0.0));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let g: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..10.0)).collect();
            let shift = 3.0 + trial as f64;
            let f: Vec<f64> = (0..1000).map(|_| rng.random_range(shift..shift + 10.0)).collect();
            let r = calibrate_threshold(&g, &f).unwrap();
            let (tau, acc) = exhaustive(&g, &f);
            assert_eq!(r.threshold, tau);
            assert_eq!((r.acc_genuine, r.acc_fake, r.acc_overall), (acc.acc_genuine, acc.acc_fake, acc.acc_overall));
        }
    }

    #[test]
    fn overall_is_weighted_mean() {
        let r = calibrate_threshold(&[1.0, 4.0, 6.0, 7.0], &[3.0, 5.0, 8.0]).unwrap();
        let weighted = (4.0 * r.acc_genuine + 3.0 * r.acc_fake) / 7.0;
        assert!((r.acc_overall - weighted).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut f: Vec<f64> = (0..150).map(|_| rng.random_range(2.0..9.0)).collect();
        let a = calibrate_threshold(&g, &f).unwrap();
        g.shuffle(&mut rng);
        f.shuffle(&mut rng);
        assert_eq!(a, calibrate_threshold(&g, &f).unwrap());
    }

    #[test]
    fn rejects_bad_populations() {
        assert!(matches!(calibrate_threshold(&[], &[1.0]), Err(Error::Empty(_))));
        assert!(matches!(calibrate_threshold(&[1.0], &[]), Err(Error::Empty(_))));
        assert!(calibrate_threshold(&[-1.0], &[1.0]).is_err());
        assert!(calibrate_threshold(&[f64::NAN], &[1.0]).is_err());
        assert!(evaluate(1.0, &[], &[1.0]).is_err());
    }

    #[test]
    fn zero_distances_still_calibrate() {
        let r = calibrate_threshold(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.acc_overall, 1.0);
        assert!(r.threshold >= 0.0);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g: Vec<f64> = (0..60).map(|_| (rng.random_range(0.0..10.0) as f64).round()).collect();
        let f: Vec<f64> = (0..40).map(|_| (rng.random_range(3.0..12.0) as f64).round()).collect();
        let mut wins = 0.0;
        for a in &g {
            for b in &f {
                wins += if b > a { 1.0 } else if b == a { 0.5 } else { 0.0 };
            }
        }
        assert!((auc(&g, &f).unwrap() - wins / 2400.0).abs() < 1e-12);
    }
}
