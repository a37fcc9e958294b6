//! Python bindings for `faceshape`.
//!
//! Vectors cross the boundary as plain lists of floats and matrices as lists
//! of rows.

use std::path::PathBuf;

use faceshape::calibration;
use faceshape::detector::{self, Aggregation, Label};
use faceshape::template::{self, EnrollOptions, Metric, ShapeFeature, Shrinkage, DEFAULT_MIN_FRAMES};
use faceshape::{Coefficients, Error, FitOptions, Landmarks2D, Landmarks3D};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_input_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_metric(name: &str) -> PyResult<Metric> {
    match name {
        "mahalanobis" => Ok(Metric::Mahalanobis),
        "cosine" => Ok(Metric::Cosine),
        other => Err(PyValueError::new_err(format!("unknown metric '{other}'"))),
    }
}

fn parse_aggregation(name: &str) -> PyResult<Aggregation> {
    match name {
        "majority" => Ok(Aggregation::Majority),
        "mean" | "mean_distance" => Ok(Aggregation::MeanDistance),
        other => Err(PyValueError::new_err(format!("unknown aggregation '{other}'"))),
    }
}

fn label_str(l: Label) -> &'static str {
    match l {
        Label::Genuine => "genuine",
        Label::Fake => "fake",
    }
}

/// Linear 3D morphable shape model.
#[pyclass(module = "pyfaceshape", frozen)]
struct ShapeBasis {
    inner: faceshape::ShapeBasis,
}

#[pymethods]
impl ShapeBasis {
    #[staticmethod]
    #[pyo3(signature = (landmarks = 68, k_id = 40, k_exp = 10, seed = 0))]
    fn synthesize(landmarks: usize, k_id: usize, k_exp: usize, seed: u64) -> PyResult<Self> {
        let inner = faceshape::synthesize_basis(landmarks, k_id, k_exp, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: faceshape::ShapeBasis::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn basis_id(&self) -> String {
        self.inner.basis_id().to_string()
    }

    #[getter]
    fn landmark_count(&self) -> usize {
        self.inner.landmark_count()
    }

    #[getter]
    fn id_components(&self) -> usize {
        self.inner.id_components()
    }

    #[getter]
    fn exp_components(&self) -> usize {
        self.inner.exp_components()
    }

    #[getter]
    fn id_scales(&self) -> Vec<f64> {
        self.inner.id_scales().iter().copied().collect()
    }

    #[getter]
    fn exp_scales(&self) -> Vec<f64> {
        self.inner.exp_scales().iter().copied().collect()
    }

    /// 3D landmarks (interleaved x, y, z) for the given coefficients.
    fn reconstruct(&self, alpha_id: Vec<f64>, alpha_exp: Vec<f64>) -> PyResult<Vec<f64>> {
        let c = Coefficients::new(DVector::from_vec(alpha_id), DVector::from_vec(alpha_exp)).map_err(to_py)?;
        let shape = self.inner.reconstruct(&c).map_err(to_py)?;
        Ok(shape.points.iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "ShapeBasis(basis_id={:?}, landmarks={}, k_id={}, k_exp={})",
            self.inner.basis_id(),
            self.inner.landmark_count(),
            self.inner.id_components(),
            self.inner.exp_components()
        )
    }
}

/// Weak-perspective pose: scale, rotation and image-plane translation.
#[pyclass(module = "pyfaceshape", frozen)]
struct Pose {
    inner: faceshape::Pose,
}

#[pymethods]
impl Pose {
    #[new]
    fn new(scale: f64, rotation: [[f64; 3]; 3], translation: [f64; 2]) -> PyResult<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let inner = faceshape::Pose::new(scale, r, Vector2::new(translation[0], translation[1])).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Angles in radians.
    #[staticmethod]
    #[pyo3(signature = (scale, yaw, pitch, roll, translation = [0.0, 0.0]))]
    fn from_angles(scale: f64, yaw: f64, pitch: f64, roll: f64, translation: [f64; 2]) -> PyResult<Self> {
        let t = Vector2::new(translation[0], translation[1]);
        let inner = faceshape::Pose::from_angles(scale, yaw, pitch, roll, t).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    #[getter]
    fn rotation(&self) -> Vec<Vec<f64>> {
        let r = self.inner.rotation();
        (0..3).map(|i| (0..3).map(|j| r[(i, j)]).collect()).collect()
    }

    #[getter]
    fn translation(&self) -> [f64; 2] {
        let t = self.inner.translation();
        [t.x, t.y]
    }

    /// Projects 3D landmarks (interleaved x, y, z) to 2D (interleaved u, v).
    fn project(&self, points: Vec<f64>) -> PyResult<Vec<f64>> {
        let shape = Landmarks3D::from_vec(points).map_err(to_py)?;
        Ok(faceshape::project(&self.inner, &shape).points.iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!("Pose(scale={}, translation=[{}, {}])", self.inner.scale(), t.x, t.y)
    }
}

#[pyclass(module = "pyfaceshape", frozen, get_all)]
struct FitResult {
    pose: Py<Pose>,
    alpha_id: Vec<f64>,
    alpha_exp: Vec<f64>,
    residual_rms: f64,
    iterations: usize,
    converged: bool,
    residual_history: Vec<f64>,
}

#[pymethods]
impl FitResult {
    /// The leading `k` identity coefficients.
    fn features(&self, k: usize) -> PyResult<Vec<f64>> {
        if k == 0 || k > self.alpha_id.len() {
            return Err(PyValueError::new_err(format!(
                "k must be in 1..={}, got {k}",
                self.alpha_id.len()
            )));
        }
        Ok(self.alpha_id[..k].to_vec())
    }
}

/// Fits pose and shape coefficients to one frame of 2D landmarks.
#[pyfunction]
#[pyo3(signature = (basis, landmarks, max_iters = 20, tol = 1e-6, lambda_id = 1e-3, lambda_exp = 1e-3))]
fn fit(
    py: Python<'_>,
    basis: &ShapeBasis,
    landmarks: Vec<f64>,
    max_iters: usize,
    tol: f64,
    lambda_id: f64,
    lambda_exp: f64,
) -> PyResult<FitResult> {
    let obs = Landmarks2D::from_vec(landmarks).map_err(to_py)?;
    let opts = FitOptions {
        max_iters,
        tol,
        lambda_id,
        lambda_exp,
    };
    let r = py.detach(|| faceshape::fit(&obs, &basis.inner, &opts)).map_err(to_py)?;
    Ok(FitResult {
        pose: Py::new(py, Pose { inner: r.pose })?,
        alpha_id: r.coeffs.alpha_id.iter().copied().collect(),
        alpha_exp: r.coeffs.alpha_exp.iter().copied().collect(),
        residual_rms: r.residual_rms,
        iterations: r.iterations,
        converged: r.converged,
        residual_history: r.residual_history,
    })
}

fn feature(values: Vec<f64>) -> PyResult<ShapeFeature> {
    ShapeFeature::from_vec(values).map_err(to_py)
}

/// Enrolled identity: mean and covariance of shape features.
#[pyclass(module = "pyfaceshape", frozen)]
struct Template {
    inner: template::Template,
}

#[pymethods]
impl Template {
    /// `shrinkage=None` picks the automatic trace-scaled value.
    #[staticmethod]
    #[pyo3(signature = (features, subject_id, basis_id, shrinkage = None, min_frames = DEFAULT_MIN_FRAMES))]
    fn enroll(
        features: Vec<Vec<f64>>,
        subject_id: &str,
        basis_id: &str,
        shrinkage: Option<f64>,
        min_frames: usize,
    ) -> PyResult<Self> {
        let feats = features.into_iter().map(feature).collect::<PyResult<Vec<_>>>()?;
        let opts = EnrollOptions {
            shrinkage: shrinkage.map_or(Shrinkage::Auto, Shrinkage::Fixed),
            min_frames,
        };
        let inner = template::enroll(&feats, subject_id, basis_id, &opts).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: template::Template::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id().to_string()
    }

    #[getter]
    fn basis_id(&self) -> String {
        self.inner.basis_id().to_string()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    #[getter]
    fn shrinkage(&self) -> f64 {
        self.inner.shrinkage()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().iter().copied().collect()
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(self.inner.covariance())
    }

    fn mahalanobis(&self, feature_values: Vec<f64>) -> PyResult<f64> {
        template::mahalanobis(&self.inner, &feature(feature_values)?).map_err(to_py)
    }

    fn cosine_distance(&self, feature_values: Vec<f64>) -> PyResult<f64> {
        template::cosine_distance(&self.inner, &feature(feature_values)?).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Template(subject_id={:?}, k={}, n={})",
            self.inner.subject_id(),
            self.inner.k(),
            self.inner.frame_count()
        )
    }
}

#[pyclass(module = "pyfaceshape", frozen, get_all)]
struct Calibration {
    threshold: f64,
    acc_genuine: f64,
    acc_fake: f64,
    acc_overall: f64,
    n_genuine: usize,
    n_fake: usize,
}

#[pymethods]
impl Calibration {
    fn __repr__(&self) -> String {
        format!(
            "Calibration(threshold={}, acc_genuine={}, acc_fake={}, acc_overall={})",
            self.threshold, self.acc_genuine, self.acc_fake, self.acc_overall
        )
    }
}

/// Picks the threshold that balances genuine and fake accuracy.
#[pyfunction]
fn calibrate_threshold(genuine: Vec<f64>, fake: Vec<f64>) -> PyResult<Calibration> {
    let c = calibration::calibrate_threshold(&genuine, &fake).map_err(to_py)?;
    Ok(Calibration {
        threshold: c.threshold,
        acc_genuine: c.acc_genuine,
        acc_fake: c.acc_fake,
        acc_overall: c.acc_overall,
        n_genuine: c.n_genuine,
        n_fake: c.n_fake,
    })
}

/// Probability that a fake distance exceeds a genuine one, ties counted half.
#[pyfunction]
fn auc(genuine: Vec<f64>, fake: Vec<f64>) -> PyResult<f64> {
    calibration::auc(&genuine, &fake).map_err(to_py)
}

#[pyclass(module = "pyfaceshape", frozen, get_all)]
struct VideoVerdict {
    subject_id: String,
    label: &'static str,
    fake_fraction: f64,
    mean_distance: f64,
    threshold: f64,
    /// (frame_index, distance, label) for every usable frame.
    frames: Vec<(usize, f64, &'static str)>,
    /// (frame_index, reason) for frames that could not be fitted.
    skipped: Vec<(usize, String)>,
}

#[pymethods]
impl VideoVerdict {
    fn __repr__(&self) -> String {
        format!(
            "VideoVerdict(label={:?}, fake_fraction={}, frames={}, skipped={})",
            self.label,
            self.fake_fraction,
            self.frames.len(),
            self.skipped.len()
        )
    }
}

/// Verifies a clip of landmark frames against a claimed subject's template.
#[pyfunction]
#[pyo3(signature = (basis, template, frames, threshold, aggregation = "majority", metric = "mahalanobis"))]
fn verify(
    py: Python<'_>,
    basis: &ShapeBasis,
    template: &Template,
    frames: Vec<Vec<f64>>,
    threshold: f64,
    aggregation: &str,
    metric: &str,
) -> PyResult<VideoVerdict> {
    let aggregation = parse_aggregation(aggregation)?;
    let metric = parse_metric(metric)?;
    let frames = frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| Ok((i, Landmarks2D::from_vec(f).map_err(to_py)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let v = py
        .detach(|| {
            detector::Verifier::new(&basis.inner, &template.inner, threshold, FitOptions::default())
                .map(|v| v.with_metric(metric))
                .and_then(|v| v.verify_video(&frames, aggregation))
        })
        .map_err(to_py)?;
    Ok(VideoVerdict {
        subject_id: v.subject_id,
        label: label_str(v.label),
        fake_fraction: v.fake_fraction,
        mean_distance: v.mean_distance,
        threshold: v.threshold,
        frames: v
            .frame_verdicts
            .iter()
            .map(|f| (f.frame_index, f.distance, label_str(f.label)))
            .collect(),
        skipped: v.skipped.into_iter().map(|s| (s.frame_index, s.reason)).collect(),
    })
}

#[pymodule]
fn pyfaceshape(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ShapeBasis>()?;
    m.add_class::<Pose>()?;
    m.add_class::<FitResult>()?;
    m.add_class::<Template>()?;
    m.add_class::<Calibration>()?;
    m.add_class::<VideoVerdict>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("DEFAULT_FEATURE_DIM", template::DEFAULT_FEATURE_DIM)?;
    m.add("DISPLAY_CAP", detector::DISPLAY_CAP)?;
    Ok(())
}
