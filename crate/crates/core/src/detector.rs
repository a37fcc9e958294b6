//! Verification pipeline: landmarks, fit, feature, distance, verdict.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit, FitOptions};
use crate::format::{self, ser_f64, FORMAT_VERSION};
use crate::projection::Landmarks2D;
use crate::shape_model::ShapeBasis;
use crate::template::{select_features, Metric, Template};

/// Display cap for distances in reports and histograms.
pub const DISPLAY_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Fake,
}

impl Label {
    pub fn from_distance(distance: f64, threshold: f64) -> Self {
        if distance > threshold {
            Label::Fake
        } else {
            Label::Genuine
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Fake when more than half of the usable frames are fake.
    #[default]
    Majority,
    /// Fake when the mean frame distance exceeds the threshold.
    MeanDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub distance: f64,
    pub threshold: f64,
    pub label: Label,
    pub frame_index: usize,
    pub fit_residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub frame_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoVerdict {
    pub subject_id: String,
    pub frame_verdicts: Vec<Verdict>,
    pub skipped: Vec<SkippedFrame>,
    pub fake_fraction: f64,
    pub mean_distance: f64,
    pub threshold: f64,
    pub label: Label,
    pub aggregation: Aggregation,
}

/// Verifies frames against one subject's template.
#[derive(Debug, Clone)]
pub struct Verifier<'a> {
    pub basis: &'a ShapeBasis,
    pub template: &'a Template,
    pub threshold: f64,
    pub opts: FitOptions,
    pub metric: Metric,
}

impl<'a> Verifier<'a> {
    pub fn new(basis: &'a ShapeBasis, template: &'a Template, threshold: f64, opts: FitOptions) -> Result<Self> {
        if template.basis_id() != basis.basis_id() {
            return Err(Error::BasisMismatch {
                template: template.basis_id().to_string(),
                basis: basis.basis_id().to_string(),
            });
        }
        if template.k() > basis.id_components() {
            return Err(Error::InvalidParameter(format!(
                "template uses {} features but the basis has {} identity components",
                template.k(),
                basis.id_components()
            )));
        }
        if threshold.is_nan() {
            return Err(Error::InvalidParameter("threshold is NaN".into()));
        }
        opts.validate()?;
        Ok(Self {
            basis,
            template,
            threshold,
            opts,
            metric: Metric::Mahalanobis,
        })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn frame_distance(&self, landmarks: &Landmarks2D) -> Result<(f64, f64)> {
        let fitted = fit(landmarks, self.basis, &self.opts)?;
        let feature = select_features(&fitted.coeffs, self.template.k())?;
        Ok((self.metric.distance(self.template, &feature)?, fitted.residual_rms))
    }

    pub fn verify_frame(&self, frame_index: usize, landmarks: &Landmarks2D) -> Result<Verdict> {
        let (distance, residual) = self.frame_distance(landmarks)?;
        Ok(Verdict {
            distance,
            threshold: self.threshold,
            label: Label::from_distance(distance, self.threshold),
            frame_index,
            fit_residual_rms: residual,
        })
    }

    /// Verifies every frame, recording frames that cannot be fitted as skipped.
    pub fn verify_video(&self, frames: &[(usize, Landmarks2D)], aggregation: Aggregation) -> Result<VideoVerdict> {
        let results: Vec<_> = frames
            .par_iter()
            .map(|(index, lm)| (*index, self.verify_frame(*index, lm)))
            .collect();
        let mut verdicts = Vec::new();
        let mut skipped = Vec::new();
        for (frame_index, r) in results {
            match r {
                Ok(v) => verdicts.push(v),
                Err(e) => skipped.push(SkippedFrame {
                    frame_index,
                    reason: e.to_string(),
                }),
            }
        }
        verdicts.sort_by_key(|v| v.frame_index);
        aggregate(self.template.subject_id(), verdicts, skipped, self.threshold, aggregation)
    }
}

/// Reduces per-frame verdicts to a video decision.
pub fn aggregate(
    subject_id: &str,
    frame_verdicts: Vec<Verdict>,
    skipped: Vec<SkippedFrame>,
    threshold: f64,
    aggregation: Aggregation,
) -> Result<VideoVerdict> {
    if frame_verdicts.is_empty() {
        return Err(Error::Empty("usable frames"));
    }
    let n = frame_verdicts.len() as f64;
    let fakes = frame_verdicts.iter().filter(|v| v.label == Label::Fake).count();
    let fake_fraction = fakes as f64 / n;
    let mean_distance = frame_verdicts.iter().map(|v| v.distance).sum::<f64>() / n;
    let label = match aggregation {
        Aggregation::Majority if fake_fraction > 0.5 => Label::Fake,
        Aggregation::Majority => Label::Genuine,
        Aggregation::MeanDistance => Label::from_distance(mean_distance, threshold),
    };
    Ok(VideoVerdict {
        subject_id: subject_id.to_string(),
        frame_verdicts,
        skipped,
        fake_fraction,
        mean_distance,
        threshold,
        label,
        aggregation,
    })
}

pub fn verify_frame(
    landmarks: &Landmarks2D,
    template: &Template,
    basis: &ShapeBasis,
    threshold: f64,
    opts: &FitOptions,
) -> Result<Verdict> {
    Verifier::new(basis, template, threshold, opts.clone())?.verify_frame(0, landmarks)
}

pub fn verify_video(
    frames: &[(usize, Landmarks2D)],
    template: &Template,
    basis: &ShapeBasis,
    threshold: f64,
    aggregation: Aggregation,
    opts: &FitOptions,
) -> Result<VideoVerdict> {
    Verifier::new(basis, template, threshold, opts.clone())?.verify_video(frames, aggregation)
}

/// Caps distances for display. Never used for decisions.
pub fn distance_histogram_clip(distances: &[f64], cap: f64) -> Vec<f64> {
    distances.iter().map(|&d| d.min(cap)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    #[serde(serialize_with = "ser_f64")]
    pub distance: f64,
    /// Distance capped at [`DISPLAY_CAP`].
    #[serde(serialize_with = "ser_f64")]
    pub display_distance: f64,
    pub label: Label,
    #[serde(serialize_with = "ser_f64")]
    pub residual: f64,
}

/// Per-video verification report as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub format_version: u32,
    pub subject_id: String,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub frames: Vec<FrameRecord>,
    pub skipped: Vec<SkippedFrame>,
    pub fake_fraction: f64,
    pub mean_distance: f64,
    pub label: Label,
}

impl From<&VideoVerdict> for VerificationReport {
    fn from(v: &VideoVerdict) -> Self {
        let distances: Vec<f64> = v.frame_verdicts.iter().map(|f| f.distance).collect();
        let display = distance_histogram_clip(&distances, DISPLAY_CAP);
        Self {
            format_version: FORMAT_VERSION,
            subject_id: v.subject_id.clone(),
            threshold: v.threshold,
            aggregation: v.aggregation,
            frames: v
                .frame_verdicts
                .iter()
                .zip(display)
                .map(|(f, display_distance)| FrameRecord {
                    frame_index: f.frame_index,
                    distance: f.distance,
                    display_distance,
                    label: f.label,
                    residual: f.fit_residual_rms,
                })
                .collect(),
            skipped: v.skipped.clone(),
            fake_fraction: v.fake_fraction,
            mean_distance: v.mean_distance,
            label: v.label,
        }
    }
}

impl VerificationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_json(path, self)
    }
}
