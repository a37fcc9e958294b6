//! Synthetic experiment world.
//!
//! Subjects are identity coefficient vectors drawn from the basis prior.
//! Frames are rendered by posing the subject's shape (plus a random
//! expression) with a weak-perspective camera and adding pixel noise to the
//! landmarks. A face swap is modeled geometrically: the frames carry the
//! shape of one subject while claiming to show another.
//!
//! Every random draw is keyed by `(seed, subject, frame, stream)`, so frames
//! can be generated independently and in any order.

use std::path::Path;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, ser_f64, ser_vec, FORMAT_VERSION};
use crate::projection::{project, LandmarkFrame, Landmarks2D, Pose};
use crate::shape_model::{Coefficients, ShapeBasis};

/// Laundering strengths as landmark noise standard deviations, in pixels.
pub const LADDER_NOISE_PX: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// Identity jitter of the anisotropy scenario, relative to the identity
/// component scales.
pub const DEFAULT_ANISOTROPY: f64 = 2.0;

const IMAGE_CENTER: [f64; 2] = [320.0, 240.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            yaw_deg: 30.0,
            pitch_deg: 15.0,
            roll_deg: 10.0,
        }
    }
}

/// Frame-to-frame perturbation of the rendered identity coefficients,
/// standing in for estimation noise that is not landmark noise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityJitter {
    #[default]
    None,
    /// Independent per-component draws with the given standard deviations.
    PerComponent {
        #[serde(serialize_with = "ser_vec")]
        std: Vec<f64>,
    },
    /// One shared draw per frame along a fixed per-subject direction, so the
    /// components move together. Component `j` still has standard deviation
    /// `std[j]`.
    Correlated {
        #[serde(serialize_with = "ser_vec")]
        std: Vec<f64>,
    },
}

impl IdentityJitter {
    fn std(&self) -> Option<&[f64]> {
        match self {
            IdentityJitter::None => None,
            IdentityJitter::PerComponent { std } | IdentityJitter::Correlated { std } => Some(std),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    /// Leading frames of each subject used for enrollment; the rest are held out.
    pub enroll_frames: usize,
    pub pose_ranges: PoseRanges,
    /// Expression spread in units of the expression component scales.
    #[serde(serialize_with = "ser_f64")]
    pub expression_sigma: f64,
    #[serde(serialize_with = "ser_f64")]
    pub landmark_noise_px: f64,
    /// Approximate rendered face height in pixels.
    #[serde(serialize_with = "ser_f64")]
    pub face_span_px: f64,
    pub identity_jitter: IdentityJitter,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_subjects: 50,
            frames_per_subject: 150,
            enroll_frames: 100,
            pose_ranges: PoseRanges::default(),
            expression_sigma: 1.0,
            landmark_noise_px: 0.5,
            face_span_px: 200.0,
            identity_jitter: IdentityJitter::None,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::InvalidParameter("a world needs at least two subjects".into()));
        }
        if self.enroll_frames == 0 || self.enroll_frames >= self.frames_per_subject {
            return Err(Error::InvalidParameter(format!(
                "enroll_frames ({}) must be positive and below frames_per_subject ({})",
                self.enroll_frames, self.frames_per_subject
            )));
        }
        let r = &self.pose_ranges;
        for (name, v) in [("yaw", r.yaw_deg), ("pitch", r.pitch_deg), ("roll", r.roll_deg)] {
            if !(v.is_finite() && v > 0.0 && v < 90.0) {
                return Err(Error::InvalidParameter(format!("{name} range must lie in (0, 90) degrees, got {v}")));
            }
        }
        for (name, v) in [("expression_sigma", self.expression_sigma), ("landmark_noise_px", self.landmark_noise_px)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.face_span_px.is_finite() && self.face_span_px > 0.0) {
            return Err(Error::InvalidParameter("face_span_px must be positive".into()));
        }
        if let Some(std) = self.identity_jitter.std() {
            if std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::InvalidParameter("identity jitter must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn held_out_frames(&self) -> usize {
        self.frames_per_subject - self.enroll_frames
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub index: usize,
    pub label: String,
    pub identity: Coefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub landmarks: Landmarks2D,
    pub claimed_subject: String,
    pub true_shape_subject: String,
    pub noise_level: f64,
    pub frame_index: usize,
}

impl LabeledFrame {
    pub fn is_swap(&self) -> bool {
        self.claimed_subject != self.true_shape_subject
    }

    pub fn to_file_frame(&self) -> LandmarkFrame {
        let source = if self.is_swap() {
            format!("synthetic-swap:{}", self.true_shape_subject)
        } else {
            "synthetic".to_string()
        };
        LandmarkFrame::new(&self.claimed_subject, self.frame_index, &self.landmarks, source)
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Identity = 1,
    Pose = 2,
    Expression = 3,
    Noise = 4,
    Jitter = 5,
}

/// Independent generator for one `(seed, subject, frame, stream)` key.
fn keyed_rng(seed: u64, subject: u64, frame: u64, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&subject.to_le_bytes());
    key[16..24].copy_from_slice(&frame.to_le_bytes());
    key[24..].copy_from_slice(&(stream as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn subject_label(index: usize) -> String {
    format!("subject_{index:03}")
}

/// Identity coefficients with component `j` drawn from `N(0, id_scale_j^2)`;
/// expression is zero.
pub fn sample_identity(basis: &ShapeBasis, seed: u64) -> Coefficients {
    let mut rng = keyed_rng(seed, u64::MAX, 0, Stream::Identity);
    sample_identity_with(basis, &mut rng)
}

fn sample_identity_with(basis: &ShapeBasis, rng: &mut impl Rng) -> Coefficients {
    let alpha_id = basis.id_scales().map(|s| s * rng.sample::<f64, _>(StandardNormal));
    Coefficients {
        alpha_id,
        alpha_exp: DVector::zeros(basis.exp_components()),
    }
}

/// The subjects of a world, deterministic in `config.seed`.
pub fn sample_subjects(basis: &ShapeBasis, config: &WorldConfig) -> Vec<Subject> {
    (0..config.n_subjects)
        .map(|i| {
            let mut rng = keyed_rng(config.seed, i as u64, 0, Stream::Identity);
            Subject {
                index: i,
                label: subject_label(i),
                identity: sample_identity_with(basis, &mut rng),
            }
        })
        .collect()
}

fn render_scale(basis: &ShapeBasis, config: &WorldConfig) -> f64 {
    let mean = basis.mean_shape();
    let n = basis.landmark_count();
    let extent = |axis: usize| {
        let vals = (0..n).map(|i| mean[3 * i + axis]);
        let (lo, hi) = vals.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    config.face_span_px / extent(0).max(extent(1))
}

/// Renders one frame of `shape_subject`'s face, labeled as `claimed`.
fn render_one(
    shape_subject: &Subject,
    claimed: &str,
    frame_index: usize,
    basis: &ShapeBasis,
    config: &WorldConfig,
) -> Result<LabeledFrame> {
    let key = |stream| keyed_rng(config.seed, shape_subject.index as u64, frame_index as u64, stream);

    let mut pose_rng = key(Stream::Pose);
    let r = &config.pose_ranges;
    let mut angle = |deg: f64| pose_rng.random_range(-deg..=deg).to_radians();
    let (yaw, pitch, roll) = (angle(r.yaw_deg), angle(r.pitch_deg), angle(r.roll_deg));
    let pose = Pose::from_angles(
        render_scale(basis, config),
        yaw,
        pitch,
        roll,
        Vector2::new(IMAGE_CENTER[0], IMAGE_CENTER[1]),
    )?;

    let mut exp_rng = key(Stream::Expression);
    let alpha_exp = basis
        .exp_scales()
        .map(|s| config.expression_sigma * s * exp_rng.sample::<f64, _>(StandardNormal));

    let mut alpha_id = shape_subject.identity.alpha_id.clone();
    match &config.identity_jitter {
        IdentityJitter::None => {}
        IdentityJitter::PerComponent { std } => {
            let mut jitter_rng = key(Stream::Jitter);
            for (a, s) in alpha_id.iter_mut().zip(std) {
                *a += s * jitter_rng.sample::<f64, _>(StandardNormal);
            }
        }
        IdentityJitter::Correlated { std } => {
            // Direction signs are keyed to the subject only, not the frame.
            let mut sign_rng = keyed_rng(config.seed, shape_subject.index as u64, u64::MAX, Stream::Jitter);
            let z: f64 = key(Stream::Jitter).sample(StandardNormal);
            for (a, s) in alpha_id.iter_mut().zip(std) {
                let sign = if sign_rng.random::<bool>() { 1.0 } else { -1.0 };
                *a += sign * s * z;
            }
        }
    }

    let shape = basis.reconstruct(&Coefficients { alpha_id, alpha_exp })?;
    let mut landmarks = project(&pose, &shape);
    if config.landmark_noise_px > 0.0 {
        let noise = Normal::new(0.0, config.landmark_noise_px).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut noise_rng = key(Stream::Noise);
        for v in landmarks.points.iter_mut() {
            *v += noise.sample(&mut noise_rng);
        }
    }
    Ok(LabeledFrame {
        landmarks,
        claimed_subject: claimed.to_string(),
        true_shape_subject: shape_subject.label.clone(),
        noise_level: config.landmark_noise_px,
        frame_index,
    })
}

/// Genuine frames of `subject` for the given frame indices.
pub fn render_frames(
    subject: &Subject,
    basis: &ShapeBasis,
    config: &WorldConfig,
    frames: std::ops::Range<usize>,
) -> Result<Vec<LabeledFrame>> {
    frames
        .map(|i| render_one(subject, &subject.label, i, basis, config))
        .collect()
}

/// Single genuine frame; see [`render_frames`].
pub fn render_frame(subject: &Subject, basis: &ShapeBasis, config: &WorldConfig, frame_index: usize) -> Result<LabeledFrame> {
    render_one(subject, &subject.label, frame_index, basis, config)
}

/// Frames carrying `shape_source`'s face geometry but claiming to be `claimed`.
///
/// Each frame equals the corresponding genuine frame of `shape_source`,
/// relabeled.
pub fn make_swap(
    claimed: &Subject,
    shape_source: &Subject,
    basis: &ShapeBasis,
    config: &WorldConfig,
    frames: std::ops::Range<usize>,
) -> Result<Vec<LabeledFrame>> {
    if claimed.label == shape_source.label {
        return Err(Error::InvalidParameter(format!(
            "a swap needs two different subjects, got '{}' twice",
            claimed.label
        )));
    }
    frames
        .map(|i| render_one(shape_source, &claimed.label, i, basis, config))
        .collect()
}

/// Copies of `base` at each laundering strength in [`LADDER_NOISE_PX`].
pub fn laundering_ladder(base: &WorldConfig) -> Vec<WorldConfig> {
    LADDER_NOISE_PX
        .iter()
        .map(|&noise| WorldConfig {
            landmark_noise_px: noise,
            ..base.clone()
        })
        .collect()
}

/// World whose per-frame identity jitter is proportional to each identity
/// component's scale and shared across components, so within-subject scatter
/// is strongly anisotropic and correlated.
pub fn anisotropy_scenario(basis: &ShapeBasis, config: &WorldConfig, relative: f64) -> WorldConfig {
    WorldConfig {
        identity_jitter: IdentityJitter::Correlated {
            std: basis.id_scales().iter().map(|s| relative * s).collect(),
        },
        ..config.clone()
    }
}

/// Control for [`anisotropy_scenario`]: the same total jitter variance,
/// spread equally and independently over the identity components.
pub fn isotropic_control(basis: &ShapeBasis, config: &WorldConfig, relative: f64) -> WorldConfig {
    let scales = basis.id_scales();
    let rms = (scales.norm_squared() / scales.len() as f64).sqrt();
    WorldConfig {
        identity_jitter: IdentityJitter::PerComponent {
            std: vec![relative * rms; scales.len()],
        },
        ..config.clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub label: String,
    #[serde(serialize_with = "ser_vec")]
    pub alpha_id: Vec<f64>,
    /// Frame files, relative to the manifest; absent when frames were not written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<SubjectFiles>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectFiles {
    pub enroll: String,
    pub held_out: String,
    pub swap: String,
}

/// On-disk description of a generated world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldManifest {
    pub format_version: u32,
    pub basis_id: String,
    pub config: WorldConfig,
    pub subjects: Vec<ManifestSubject>,
}

impl WorldManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = format::read_json(path)?;
        format::check_version(path, m.format_version)?;
        Ok(m)
    }
}

/// Swap source for the `j`-th swap frame claimed as subject `claimed`:
/// cycles through every other subject.
pub fn swap_source(claimed: usize, j: usize, n_subjects: usize) -> usize {
    (claimed + 1 + j % (n_subjects - 1)) % n_subjects
}

/// Frame indices reserved for swap renders, disjoint from genuine frames.
pub fn swap_frame_index(config: &WorldConfig, j: usize) -> usize {
    config.frames_per_subject + j
}

/// Writes every subject's enrollment, held-out and swap frames under `dir`
/// plus a `manifest.json` describing the world.
pub fn write_world(dir: &Path, basis: &ShapeBasis, config: &WorldConfig) -> Result<WorldManifest> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let subjects = sample_subjects(basis, config);
    let mut entries = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let enroll = render_frames(s, basis, config, 0..config.enroll_frames)?;
        let held = render_frames(s, basis, config, config.enroll_frames..config.frames_per_subject)?;
        let swaps = (0..config.held_out_frames())
            .map(|j| {
                let src = &subjects[swap_source(s.index, j, subjects.len())];
                make_swap(s, src, basis, config, swap_frame_index(config, j)..swap_frame_index(config, j) + 1)
                    .map(|mut v| v.remove(0))
            })
            .collect::<Result<Vec<_>>>()?;
        let files = [
            (format!("{}_enroll.json", s.label), enroll),
            (format!("{}_held_out.json", s.label), held),
            (format!("{}_swap.json", s.label), swaps),
        ];
        for (name, frames) in &files {
            let docs: Vec<LandmarkFrame> = frames.iter().map(LabeledFrame::to_file_frame).collect();
            crate::projection::save_frames(&dir.join(name), &docs)?;
        }
        let [(enroll, _), (held_out, _), (swap, _)] = files;
        entries.push(ManifestSubject {
            label: s.label.clone(),
            alpha_id: s.identity.alpha_id.as_slice().to_vec(),
            files: Some(SubjectFiles { enroll, held_out, swap }),
        });
    }
    let manifest = WorldManifest {
        subjects: entries,
        ..describe_world(basis, config)?
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Manifest of a world without rendering any frames.
pub fn describe_world(basis: &ShapeBasis, config: &WorldConfig) -> Result<WorldManifest> {
    config.validate()?;
    Ok(WorldManifest {
        format_version: FORMAT_VERSION,
        basis_id: basis.basis_id().to_string(),
        config: config.clone(),
        subjects: sample_subjects(basis, config)
            .into_iter()
            .map(|s| ManifestSubject {
                label: s.label,
                alpha_id: s.identity.alpha_id.as_slice().to_vec(),
                files: None,
            })
            .collect(),
    })
}
