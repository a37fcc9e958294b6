//! End-to-end experiments over synthetic worlds.
//!
//! A world is fitted once; distances for any feature dimension and metric
//! are then computed from the stored identity coefficients. Genuine scores
//! come from each subject's held-out frames against their own template;
//! fake scores from swap frames claiming that subject.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{auc, calibrate_threshold, evaluate, Accuracy};
use crate::error::{Error, Result};
use crate::fitting::{fit, FitOptions};
use crate::format::ser_f64;
use crate::shape_model::{Coefficients, ShapeBasis};
use crate::synthetic::{make_swap, render_frame, sample_subjects, swap_frame_index, swap_source, LabeledFrame, WorldConfig};
use crate::template::{enroll, select_features, EnrollOptions, Metric, ShapeFeature, Template};

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub fit: FitOptions,
    pub enroll: EnrollOptions,
    /// Calibrate a separate threshold for every subject instead of one global threshold.
    pub per_subject: bool,
    pub ladder_threshold: LadderThreshold,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            enroll: EnrollOptions::default(),
            per_subject: false,
            ladder_threshold: LadderThreshold::default(),
        }
    }
}

/// Where the laundering ladder takes its decision thresholds from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderThreshold {
    /// Recalibrated on every rung, so accuracy tracks how separable the
    /// laundered scores still are.
    #[default]
    PerRung,
    /// Calibrated on the first rung and reused unchanged on the others.
    Fixed,
}

/// Fitted identity coefficients for every frame of a world.
#[derive(Debug, Clone)]
pub struct WorldFits {
    pub basis_id: String,
    pub config: WorldConfig,
    pub enroll: Vec<Vec<DVector<f64>>>,
    pub held_out: Vec<Vec<DVector<f64>>>,
    pub swaps: Vec<Vec<DVector<f64>>>,
    pub skipped: usize,
}

enum Slot {
    Enroll,
    HeldOut,
    Swap,
}

/// Renders and fits every frame of the world described by `config`.
pub fn fit_world(basis: &ShapeBasis, config: &WorldConfig, opts: &FitOptions) -> Result<WorldFits> {
    config.validate()?;
    let subjects = sample_subjects(basis, config);
    let n = subjects.len();

    let mut jobs = Vec::with_capacity(n * (config.frames_per_subject + config.held_out_frames()));
    for s in 0..n {
        for i in 0..config.frames_per_subject {
            let slot = if i < config.enroll_frames { Slot::Enroll } else { Slot::HeldOut };
            jobs.push((s, i, slot));
        }
        for j in 0..config.held_out_frames() {
            jobs.push((s, j, Slot::Swap));
        }
    }

    let render = |&(s, i, ref slot): &(usize, usize, Slot)| -> Result<LabeledFrame> {
        match slot {
            Slot::Enroll | Slot::HeldOut => render_frame(&subjects[s], basis, config, i),
            Slot::Swap => {
                let src = &subjects[swap_source(s, i, n)];
                let idx = swap_frame_index(config, i);
                Ok(make_swap(&subjects[s], src, basis, config, idx..idx + 1)?.remove(0))
            }
        }
    };
    let fitted: Vec<Result<Option<Coefficients>>> = jobs
        .par_iter()
        .map(|job| {
            let frame = render(job)?;
            Ok(fit(&frame.landmarks, basis, opts).ok().map(|r| r.coeffs))
        })
        .collect();

    let mut out = WorldFits {
        basis_id: basis.basis_id().to_string(),
        config: config.clone(),
        enroll: vec![Vec::new(); n],
        held_out: vec![Vec::new(); n],
        swaps: vec![Vec::new(); n],
        skipped: 0,
    };
    for ((s, _, slot), r) in jobs.iter().zip(fitted) {
        let Some(coeffs) = r? else {
            out.skipped += 1;
            continue;
        };
        let dest = match slot {
            Slot::Enroll => &mut out.enroll[*s],
            Slot::HeldOut => &mut out.held_out[*s],
            Slot::Swap => &mut out.swaps[*s],
        };
        dest.push(coeffs.alpha_id);
    }
    Ok(out)
}

fn features(alphas: &[DVector<f64>], k: usize) -> Result<Vec<ShapeFeature>> {
    alphas
        .iter()
        .map(|a| {
            select_features(
                &Coefficients {
                    alpha_id: a.clone(),
                    alpha_exp: DVector::zeros(0),
                },
                k,
            )
        })
        .collect()
}

/// Genuine and fake distances, with the claimed subject of each score.
#[derive(Debug, Clone, Default)]
pub struct Scores {
    pub genuine: Vec<f64>,
    pub fake: Vec<f64>,
    pub genuine_subject: Vec<usize>,
    pub fake_subject: Vec<usize>,
}

impl WorldFits {
    pub fn templates(&self, k: usize, opts: &EnrollOptions) -> Result<Vec<Template>> {
        self.enroll
            .iter()
            .enumerate()
            .map(|(s, alphas)| enroll(&features(alphas, k)?, crate::synthetic::subject_label(s), &self.basis_id, opts))
            .collect()
    }

    pub fn scores(&self, templates: &[Template], metric: Metric) -> Result<Scores> {
        let mut out = Scores::default();
        for (s, t) in templates.iter().enumerate() {
            for f in features(&self.held_out[s], t.k())? {
                out.genuine.push(metric.distance(t, &f)?);
                out.genuine_subject.push(s);
            }
            for f in features(&self.swaps[s], t.k())? {
                out.fake.push(metric.distance(t, &f)?);
                out.fake_subject.push(s);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub metric: Metric,
    pub k: usize,
    #[serde(serialize_with = "ser_f64")]
    pub landmark_noise_px: f64,
    #[serde(serialize_with = "ser_f64")]
    pub auc: f64,
    /// Global threshold; absent under per-subject calibration.
    pub threshold: Option<f64>,
    #[serde(serialize_with = "ser_f64")]
    pub acc_genuine: f64,
    #[serde(serialize_with = "ser_f64")]
    pub acc_fake: f64,
    #[serde(serialize_with = "ser_f64")]
    pub acc: f64,
    pub n_genuine: usize,
    pub n_fake: usize,
    pub skipped_frames: usize,
}

/// A threshold rule fixed on calibration data and applied elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    Global(f64),
    PerSubject(Vec<f64>),
}

impl Thresholds {
    pub fn calibrate(scores: &Scores, n_subjects: usize, per_subject: bool) -> Result<Self> {
        if !per_subject {
            return Ok(Thresholds::Global(calibrate_threshold(&scores.genuine, &scores.fake)?.threshold));
        }
        (0..n_subjects)
            .map(|s| {
                let (g, f) = subject_scores(scores, s);
                Ok(calibrate_threshold(&g, &f)?.threshold)
            })
            .collect::<Result<Vec<_>>>()
            .map(Thresholds::PerSubject)
    }

    pub fn evaluate(&self, scores: &Scores) -> Result<Accuracy> {
        match self {
            Thresholds::Global(t) => evaluate(*t, &scores.genuine, &scores.fake),
            Thresholds::PerSubject(ts) => {
                if scores.genuine.is_empty() || scores.fake.is_empty() {
                    return Err(Error::Empty("scores"));
                }
                let accepted = scores
                    .genuine
                    .iter()
                    .zip(&scores.genuine_subject)
                    .filter(|(d, s)| **d <= ts[**s])
                    .count();
                let rejected = scores.fake.iter().zip(&scores.fake_subject).filter(|(d, s)| **d > ts[**s]).count();
                let (ng, nf) = (scores.genuine.len(), scores.fake.len());
                Ok(Accuracy {
                    acc_genuine: accepted as f64 / ng as f64,
                    acc_fake: rejected as f64 / nf as f64,
                    acc_overall: (accepted + rejected) as f64 / (ng + nf) as f64,
                })
            }
        }
    }

    pub fn global(&self) -> Option<f64> {
        match self {
            Thresholds::Global(t) => Some(*t),
            Thresholds::PerSubject(_) => None,
        }
    }
}

fn subject_scores(scores: &Scores, s: usize) -> (Vec<f64>, Vec<f64>) {
    let pick = |d: &[f64], subj: &[usize]| d.iter().zip(subj).filter(|(_, x)| **x == s).map(|(d, _)| *d).collect();
    (pick(&scores.genuine, &scores.genuine_subject), pick(&scores.fake, &scores.fake_subject))
}

fn condition(fits: &WorldFits, scores: &Scores, metric: Metric, k: usize, thresholds: &Thresholds) -> Result<ConditionMetrics> {
    let acc = thresholds.evaluate(scores)?;
    Ok(ConditionMetrics {
        metric,
        k,
        landmark_noise_px: fits.config.landmark_noise_px,
        auc: auc(&scores.genuine, &scores.fake)?,
        threshold: thresholds.global(),
        acc_genuine: acc.acc_genuine,
        acc_fake: acc.acc_fake,
        acc: acc.acc_overall,
        n_genuine: scores.genuine.len(),
        n_fake: scores.fake.len(),
        skipped_frames: fits.skipped,
    })
}

/// Calibrates on a world's own scores and reports the resulting accuracy.
pub fn evaluate_world(fits: &WorldFits, metric: Metric, k: usize, opts: &ExperimentOptions) -> Result<ConditionMetrics> {
    let templates = fits.templates(k, &opts.enroll)?;
    let scores = fits.scores(&templates, metric)?;
    let thresholds = Thresholds::calibrate(&scores, templates.len(), opts.per_subject)?;
    condition(fits, &scores, metric, k, &thresholds)
}

/// One calibrated condition per feature dimension, all from the same fits.
pub fn ablate_k(fits: &WorldFits, ks: &[usize], metric: Metric, opts: &ExperimentOptions) -> Result<Vec<ConditionMetrics>> {
    ks.iter().map(|&k| evaluate_world(fits, metric, k, opts)).collect()
}

/// One row per (rung, metric). Templates are always enrolled from the rung's
/// own frames, as laundering affects the whole video; thresholds follow
/// `opts.ladder_threshold`. `base` may hold the fits of any rung and is reused
/// for the matching config instead of refitting.
pub fn run_ladder(
    basis: &ShapeBasis,
    base: &WorldFits,
    rungs: &[WorldConfig],
    metrics: &[Metric],
    k: usize,
    opts: &ExperimentOptions,
) -> Result<Vec<ConditionMetrics>> {
    let mut fixed: Vec<Option<Thresholds>> = vec![None; metrics.len()];
    let mut rows = Vec::new();
    for rung in rungs {
        let owned;
        let fits = if rung == &base.config {
            base
        } else {
            owned = fit_world(basis, rung, &opts.fit)?;
            &owned
        };
        let templates = fits.templates(k, &opts.enroll)?;
        for (&metric, slot) in metrics.iter().zip(fixed.iter_mut()) {
            let scores = fits.scores(&templates, metric)?;
            let fresh = || Thresholds::calibrate(&scores, templates.len(), opts.per_subject);
            let thresholds = match opts.ladder_threshold {
                LadderThreshold::PerRung => fresh()?,
                LadderThreshold::Fixed => match slot {
                    Some(t) => t.clone(),
                    None => slot.insert(fresh()?).clone(),
                },
            };
            rows.push(condition(fits, &scores, metric, k, &thresholds)?);
        }
    }
    Ok(rows)
}

/// Ratio of largest to smallest eigenvalue of each template covariance.
pub fn covariance_condition_numbers(templates: &[Template]) -> Vec<f64> {
    templates
        .iter()
        .map(|t| {
            let eig = t.covariance().clone().symmetric_eigen().eigenvalues;
            let (lo, hi) = eig.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi / lo
        })
        .collect()
}

/// Median of `values`; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
