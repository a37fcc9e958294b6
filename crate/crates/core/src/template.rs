//! Feature selection, subject enrollment, and distances to a template.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, ser_f64, ser_vec, FORMAT_VERSION};
use crate::shape_model::Coefficients;

pub const DEFAULT_FEATURE_DIM: usize = 20;
/// Minimum enrollment length in frames.
pub const DEFAULT_MIN_FRAMES: usize = 100;

const SHRINK_ABS: f64 = 1e-9;
const SHRINK_REL: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-10;

/// Leading identity coefficients used as the shape signature of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFeature {
    values: DVector<f64>,
}

impl ShapeFeature {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("feature must have at least one dimension".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape feature"));
        }
        Ok(Self { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(values))
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
}

/// Takes the first `k` identity coefficients; components are variance-ordered.
pub fn select_features(coeffs: &Coefficients, k: usize) -> Result<ShapeFeature> {
    let available = coeffs.alpha_id.len();
    if k == 0 || k > available {
        return Err(Error::InvalidParameter(format!(
            "feature dimension k = {k} must lie in 1..={available}"
        )));
    }
    ShapeFeature::new(coeffs.alpha_id.rows(0, k).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shrinkage {
    /// `max(1e-9, 1e-6 * trace / k)`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnrollOptions {
    pub shrinkage: Shrinkage,
    /// Enrollment floor in frames; the `n >= k` floor applies regardless.
    pub min_frames: usize,
}

impl Default for EnrollOptions {
    fn default() -> Self {
        Self {
            shrinkage: Shrinkage::Auto,
            min_frames: DEFAULT_MIN_FRAMES,
        }
    }
}

/// Per-subject mean and covariance of shape features.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    subject_id: String,
    basis_id: String,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    inv_covariance: DMatrix<f64>,
    frame_count: usize,
    shrinkage: f64,
}

impl Template {
    /// Builds a template from stored statistics, checking every invariant.
    pub fn from_parts(
        subject_id: impl Into<String>,
        basis_id: impl Into<String>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        frame_count: usize,
        shrinkage: f64,
    ) -> Result<Self> {
        let k = mean.len();
        if k == 0 {
            return Err(Error::InvalidTemplate("empty mean vector".into()));
        }
        if covariance.shape() != (k, k) {
            return Err(Error::InvalidTemplate(format!(
                "covariance is {}x{}, expected {k}x{k}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if frame_count < k {
            return Err(Error::TooFewFrames { frames: frame_count, k });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("template"));
        }
        if !(shrinkage.is_finite() && shrinkage >= 0.0) {
            return Err(Error::InvalidTemplate(format!("shrinkage must be nonnegative, got {shrinkage}")));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidTemplate(format!("covariance is not symmetric (max |S - S^T| = {asym:e})")));
        }
        let mut regularized = covariance.clone();
        for d in 0..k {
            regularized[(d, d)] += shrinkage;
        }
        let inv_covariance = regularized
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidTemplate("covariance plus shrinkage is not positive definite".into()))?
            .inverse();
        let inv_covariance = (&inv_covariance + inv_covariance.transpose()) * 0.5;
        let check = (&inv_covariance * &regularized - DMatrix::identity(k, k)).abs().max();
        if !(check <= 1e-6) {
            return Err(Error::InvalidTemplate(format!(
                "regularized covariance is too ill-conditioned to invert (residual {check:e})"
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            basis_id: basis_id.into(),
            mean,
            covariance,
            inv_covariance,
            frame_count,
            shrinkage,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn basis_id(&self) -> &str {
        &self.basis_id
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn inv_covariance(&self) -> &DMatrix<f64> {
        &self.inv_covariance
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn mahalanobis(&self, x: &ShapeFeature) -> Result<f64> {
        mahalanobis(self, x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_json(path, &TemplateDocument::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: TemplateDocument = format::read_json(path)?;
        format::check_version(path, doc.format_version)?;
        if doc.mean.len() != doc.k {
            return Err(Error::schema(path, format!("mean has {} values, expected k = {}", doc.mean.len(), doc.k)));
        }
        if doc.covariance.len() != doc.k * doc.k {
            return Err(Error::schema(
                path,
                format!("covariance has {} values, expected k^2 = {}", doc.covariance.len(), doc.k * doc.k),
            ));
        }
        Template::from_parts(
            doc.subject_id,
            doc.basis_id,
            DVector::from_vec(doc.mean),
            DMatrix::from_row_slice(doc.k, doc.k, &doc.covariance),
            doc.n,
            doc.shrinkage,
        )
    }
}

/// Default additive shrinkage for a covariance matrix.
pub fn auto_shrinkage(covariance: &DMatrix<f64>) -> f64 {
    let k = covariance.nrows().max(1) as f64;
    SHRINK_ABS.max(SHRINK_REL * covariance.trace() / k)
}

/// Enrolls a subject from per-frame features using the sample mean and
/// unbiased sample covariance.
pub fn enroll(
    features: &[ShapeFeature],
    subject_id: impl Into<String>,
    basis_id: impl Into<String>,
    opts: &EnrollOptions,
) -> Result<Template> {
    let first = features.first().ok_or(Error::Empty("enrollment features"))?;
    let k = first.k();
    if let Some(bad) = features.iter().find(|f| f.k() != k) {
        return Err(Error::Dimension {
            context: "enrollment feature",
            expected: k,
            actual: bad.k(),
        });
    }
    let n = features.len();
    if n < k {
        return Err(Error::TooFewFrames { frames: n, k });
    }
    if n < opts.min_frames {
        return Err(Error::InvalidParameter(format!(
            "enrollment needs at least {} frames, got {n}",
            opts.min_frames
        )));
    }
    if features.iter().any(|f| f.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("enrollment features"));
    }

    let mean = features.iter().fold(DVector::zeros(k), |acc, f| acc + &f.values) / n as f64;
    let mut covariance = DMatrix::zeros(k, k);
    for f in features {
        let d = &f.values - &mean;
        covariance.ger(1.0, &d, &d, 1.0);
    }
    // n == k == 1 leaves no degrees of freedom; the spread is then zero.
    if n > 1 {
        covariance /= (n - 1) as f64;
    }
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let shrinkage = match opts.shrinkage {
        Shrinkage::Auto => auto_shrinkage(&covariance),
        Shrinkage::Fixed(v) => v,
    };
    Template::from_parts(subject_id, basis_id, mean, covariance, n, shrinkage)
}

fn check_dim(template: &Template, x: &ShapeFeature) -> Result<()> {
    if x.k() != template.k() {
        return Err(Error::Dimension {
            context: "query feature",
            expected: template.k(),
            actual: x.k(),
        });
    }
    Ok(())
}

/// Mahalanobis distance from `x` to the template distribution, using the
/// cached regularized inverse covariance.
pub fn mahalanobis(template: &Template, x: &ShapeFeature) -> Result<f64> {
    check_dim(template, x)?;
    let d = &x.values - &template.mean;
    let q = d.dot(&(&template.inv_covariance * &d));
    Ok(q.max(0.0).sqrt())
}

/// Cosine distance `1 - cos` between `x` and the template mean.
pub fn cosine_distance(template: &Template, x: &ShapeFeature) -> Result<f64> {
    check_dim(template, x)?;
    let (nx, nm) = (x.values.norm(), template.mean.norm());
    if nx == 0.0 || nm == 0.0 {
        return Err(Error::InvalidParameter("cosine distance is undefined for a zero vector".into()));
    }
    let cos = (x.values.dot(&template.mean) / (nx * nm)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Mahalanobis,
    Cosine,
}

impl Metric {
    pub fn distance(self, template: &Template, x: &ShapeFeature) -> Result<f64> {
        match self {
            Metric::Mahalanobis => mahalanobis(template, x),
            Metric::Cosine => cosine_distance(template, x),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateDocument {
    format_version: u32,
    subject_id: String,
    k: usize,
    n: usize,
    #[serde(serialize_with = "ser_f64")]
    shrinkage: f64,
    #[serde(serialize_with = "ser_vec")]
    mean: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    covariance: Vec<f64>,
    basis_id: String,
}

impl From<&Template> for TemplateDocument {
    fn from(t: &Template) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            subject_id: t.subject_id.clone(),
            k: t.k(),
            n: t.frame_count,
            shrinkage: t.shrinkage,
            mean: t.mean.as_slice().to_vec(),
            covariance: t.covariance.transpose().as_slice().to_vec(),
            basis_id: t.basis_id.clone(),
        }
    }
}
