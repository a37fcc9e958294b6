//! Linear 3D morphable shape model over a sparse landmark set.
//!
//! A shape is a flat vector of `3L` coordinates interleaved as
//! `(x1, y1, z1, x2, y2, z2, ...)`. A face with expression is the mean shape
//! plus a linear combination of identity and expression components.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, ser_vec, FORMAT_VERSION};

/// Smallest identity basis accepted; feature selection uses up to 20 leading components.
pub const MIN_ID_COMPONENTS: usize = 20;

/// Number of similarity-motion directions (translation, rotation, scale) kept
/// out of synthetic bases.
const RIGID_MODES: usize = 7;

const SCALE_DECAY: f64 = 0.7;
const LEADING_ID_SCALE: f64 = 10.0;
const LEADING_EXP_SCALE: f64 = 5.0;

/// 3D landmark positions, `3L` interleaved coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks3D {
    pub points: DVector<f64>,
}

impl Landmarks3D {
    pub fn new(points: DVector<f64>) -> Result<Self> {
        if points.len() % 3 != 0 {
            return Err(Error::InvalidParameter(format!(
                "3D landmark vector length {} is not divisible by 3",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("3D landmarks"));
        }
        Ok(Self { points })
    }

    pub fn from_vec(points: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(points))
    }

    pub fn landmark_count(&self) -> usize {
        self.points.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [self.points[3 * i], self.points[3 * i + 1], self.points[3 * i + 2]]
    }
}

/// Identity and expression weights for a [`ShapeBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub alpha_id: DVector<f64>,
    pub alpha_exp: DVector<f64>,
}

impl Coefficients {
    pub fn new(alpha_id: DVector<f64>, alpha_exp: DVector<f64>) -> Result<Self> {
        if alpha_id.iter().chain(alpha_exp.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficients"));
        }
        Ok(Self {
            alpha_id,
            alpha_exp,
        })
    }

    pub fn zeros(basis: &ShapeBasis) -> Self {
        Self {
            alpha_id: DVector::zeros(basis.id_components()),
            alpha_exp: DVector::zeros(basis.exp_components()),
        }
    }
}

/// Per-axis second moments of the augmented basis `[mean | id | exp]`, used
/// to form projected normal equations without touching every landmark.
///
/// `raw[3a + b] = sum_i A_i[a]^T A_i[b]` over landmarks `i`, where `A_i[a]` is
/// row `a` (x, y or z) of landmark `i`'s block. `centered` is the same over
/// the basis with its per-axis landmark average removed.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BasisMoments {
    pub augmented: DMatrix<f64>,
    pub centered_basis: DMatrix<f64>,
    pub centroid: DMatrix<f64>,
    pub raw: Vec<DMatrix<f64>>,
    pub centered: Vec<DMatrix<f64>>,
}

impl BasisMoments {
    fn new(mean: &DVector<f64>, id: &DMatrix<f64>, exp: &DMatrix<f64>) -> Self {
        let rows = mean.len();
        let n = rows / 3;
        let cols = 1 + id.ncols() + exp.ncols();
        let mut augmented = DMatrix::zeros(rows, cols);
        augmented.set_column(0, mean);
        augmented.view_mut((0, 1), (rows, id.ncols())).copy_from(id);
        augmented.view_mut((0, 1 + id.ncols()), (rows, exp.ncols())).copy_from(exp);

        let mut centroid = DMatrix::zeros(3, cols);
        for i in 0..n {
            centroid += augmented.fixed_rows::<3>(3 * i);
        }
        centroid /= n as f64;
        let mut centered_basis = augmented.clone();
        for i in 0..n {
            let mut block = centered_basis.fixed_rows_mut::<3>(3 * i);
            block -= &centroid;
        }

        let axis_moments = |m: &DMatrix<f64>| {
            let axis: Vec<DMatrix<f64>> = (0..3)
                .map(|a| DMatrix::from_fn(n, cols, |i, c| m[(3 * i + a, c)]))
                .collect();
            let mut out = Vec::with_capacity(9);
            for a in 0..3 {
                for b in 0..3 {
                    out.push(axis[a].tr_mul(&axis[b]));
                }
            }
            out
        };
        Self {
            raw: axis_moments(&augmented),
            centered: axis_moments(&centered_basis),
            augmented,
            centered_basis,
            centroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBasis {
    landmark_count: usize,
    mean_shape: DVector<f64>,
    id_basis: DMatrix<f64>,
    exp_basis: DMatrix<f64>,
    id_scales: DVector<f64>,
    exp_scales: DVector<f64>,
    basis_id: String,
    moments: BasisMoments,
}

impl ShapeBasis {
    pub fn new(
        basis_id: impl Into<String>,
        mean_shape: DVector<f64>,
        id_basis: DMatrix<f64>,
        exp_basis: DMatrix<f64>,
        id_scales: DVector<f64>,
        exp_scales: DVector<f64>,
    ) -> Result<Self> {
        let rows = mean_shape.len();
        if rows == 0 || rows % 3 != 0 {
            return Err(Error::InvalidParameter(format!(
                "mean shape length {rows} is not a positive multiple of 3"
            )));
        }
        for (context, actual) in [("id_basis rows", id_basis.nrows()), ("exp_basis rows", exp_basis.nrows())] {
            if actual != rows {
                return Err(Error::Dimension {
                    context,
                    expected: rows,
                    actual,
                });
            }
        }
        if id_scales.len() != id_basis.ncols() {
            return Err(Error::Dimension {
                context: "id_scales",
                expected: id_basis.ncols(),
                actual: id_scales.len(),
            });
        }
        if exp_scales.len() != exp_basis.ncols() {
            return Err(Error::Dimension {
                context: "exp_scales",
                expected: exp_basis.ncols(),
                actual: exp_scales.len(),
            });
        }
        if id_basis.ncols() < MIN_ID_COMPONENTS {
            return Err(Error::InvalidParameter(format!(
                "identity basis has {} components, at least {MIN_ID_COMPONENTS} are required",
                id_basis.ncols()
            )));
        }
        let all = mean_shape
            .iter()
            .chain(id_basis.iter())
            .chain(exp_basis.iter())
            .chain(id_scales.iter())
            .chain(exp_scales.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape basis"));
        }
        for (name, scales) in [("id_scales", &id_scales), ("exp_scales", &exp_scales)] {
            if scales.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
            if scales.as_slice().windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly decreasing"
                )));
            }
        }
        let moments = BasisMoments::new(&mean_shape, &id_basis, &exp_basis);
        Ok(Self {
            moments,
            landmark_count: rows / 3,
            mean_shape,
            id_basis,
            exp_basis,
            id_scales,
            exp_scales,
            basis_id: basis_id.into(),
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_count
    }

    pub fn id_components(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn exp_components(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn id_basis(&self) -> &DMatrix<f64> {
        &self.id_basis
    }

    pub fn exp_basis(&self) -> &DMatrix<f64> {
        &self.exp_basis
    }

    pub fn id_scales(&self) -> &DVector<f64> {
        &self.id_scales
    }

    pub fn exp_scales(&self) -> &DVector<f64> {
        &self.exp_scales
    }

    pub fn basis_id(&self) -> &str {
        &self.basis_id
    }

    pub(crate) fn moments(&self) -> &BasisMoments {
        &self.moments
    }

    pub fn check_coefficients(&self, coeffs: &Coefficients) -> Result<()> {
        if coeffs.alpha_id.len() != self.id_components() {
            return Err(Error::Dimension {
                context: "alpha_id",
                expected: self.id_components(),
                actual: coeffs.alpha_id.len(),
            });
        }
        if coeffs.alpha_exp.len() != self.exp_components() {
            return Err(Error::Dimension {
                context: "alpha_exp",
                expected: self.exp_components(),
                actual: coeffs.alpha_exp.len(),
            });
        }
        Ok(())
    }

    /// Mean shape plus identity and expression offsets.
    pub fn reconstruct(&self, coeffs: &Coefficients) -> Result<Landmarks3D> {
        self.check_coefficients(coeffs)?;
        let points = &self.mean_shape + &self.id_basis * &coeffs.alpha_id + &self.exp_basis * &coeffs.alpha_exp;
        Landmarks3D::new(points)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_json(path, &BasisDocument::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: BasisDocument = format::read_json(path)?;
        doc.into_basis(path)
    }
}

/// Free-function form of [`ShapeBasis::reconstruct`].
pub fn reconstruct_shape(basis: &ShapeBasis, coeffs: &Coefficients) -> Result<Landmarks3D> {
    basis.reconstruct(coeffs)
}

/// Procedural face-like point cloud roughly 200 units across, centered at the origin.
fn synthetic_mean_face(landmarks: usize) -> DVector<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut points = DVector::zeros(3 * landmarks);
    for i in 0..landmarks {
        // Fibonacci lattice over the front hemisphere of an ellipsoid.
        let t = (i as f64 + 0.5) / landmarks as f64;
        let z = t;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        points[3 * i] = 80.0 * r * phi.cos();
        points[3 * i + 1] = 100.0 * r * phi.sin();
        points[3 * i + 2] = 60.0 * z;
    }
    let centroid = centroid3(&points);
    for i in 0..landmarks {
        for c in 0..3 {
            points[3 * i + c] -= centroid[c];
        }
    }
    points
}

fn centroid3(points: &DVector<f64>) -> [f64; 3] {
    let n = points.len() / 3;
    let mut c = [0.0; 3];
    for i in 0..n {
        for (axis, acc) in c.iter_mut().enumerate() {
            *acc += points[3 * i + axis];
        }
    }
    c.map(|v| v / n as f64)
}

/// Translation, infinitesimal rotation and scale directions of `mean`.
fn similarity_modes(mean: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = mean.len() / 3;
    let mut modes = Vec::with_capacity(RIGID_MODES);
    for axis in 0..3 {
        let mut m = DVector::zeros(mean.len());
        for i in 0..n {
            m[3 * i + axis] = 1.0;
        }
        modes.push(m);
    }
    for axis in 0..3 {
        let mut m = DVector::zeros(mean.len());
        let omega = nalgebra::Vector3::ith(axis, 1.0);
        for i in 0..n {
            let p = nalgebra::Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]);
            let d = omega.cross(&p);
            m.fixed_rows_mut::<3>(3 * i).copy_from(&d);
        }
        modes.push(m);
    }
    modes.push(mean.clone());
    modes
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Returns `None`
/// if a vector collapses against the ones before it.
fn orthonormalize(vectors: &mut [DVector<f64>]) -> Option<()> {
    for i in 0..vectors.len() {
        let (done, rest) = vectors.split_at_mut(i);
        let v = &mut rest[0];
        let original = v.norm();
        for _ in 0..2 {
            for q in done.iter() {
                let proj = q.dot(v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-8 * original.max(1.0) {
            return None;
        }
        *v /= norm;
    }
    Some(())
}

fn power_law_scales(count: usize, leading: f64) -> DVector<f64> {
    DVector::from_fn(count, |j, _| leading * ((j + 1) as f64).powf(-SCALE_DECAY))
}

/// Builds a reproducible synthetic basis.
///
/// Identity and expression columns are drawn from a seeded Gaussian, then
/// orthonormalized together after the seven similarity-motion directions of
/// the mean face, so that no component can be absorbed by the camera pose.
pub fn synthesize_basis(landmarks: usize, k_id: usize, k_exp: usize, seed: u64) -> Result<ShapeBasis> {
    if k_id < MIN_ID_COMPONENTS {
        return Err(Error::InvalidParameter(format!(
            "K_id = {k_id} is below the minimum of {MIN_ID_COMPONENTS}"
        )));
    }
    if k_exp == 0 {
        return Err(Error::InvalidParameter("K_exp must be at least 1".into()));
    }
    if landmarks < 22 || 2 * landmarks < k_id + k_exp + RIGID_MODES {
        return Err(Error::InvalidParameter(format!(
            "{landmarks} landmarks cannot identify {k_id} + {k_exp} components \
             (need L >= 22 and 2L >= K_id + K_exp + {RIGID_MODES})"
        )));
    }

    let mean = synthetic_mean_face(landmarks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 3 * landmarks;

    let mut vectors = similarity_modes(&mean);
    for _ in 0..(k_id + k_exp) {
        vectors.push(DVector::from_fn(rows, |_, _| StandardNormal.sample(&mut rng)));
    }
    orthonormalize(&mut vectors)
        .ok_or_else(|| Error::Degenerate("synthetic basis lost rank during orthogonalization".into()))?;

    let components = &vectors[RIGID_MODES..];
    let id_basis = DMatrix::from_columns(&components[..k_id]);
    let exp_basis = DMatrix::from_columns(&components[k_id..]);

    ShapeBasis::new(
        format!("synthetic-L{landmarks}-id{k_id}-exp{k_exp}-seed{seed}"),
        mean,
        id_basis,
        exp_basis,
        power_law_scales(k_id, LEADING_ID_SCALE),
        power_law_scales(k_exp, LEADING_EXP_SCALE),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisDocument {
    format_version: u32,
    basis_id: String,
    #[serde(rename = "L")]
    landmarks: usize,
    #[serde(rename = "K_id")]
    k_id: usize,
    #[serde(rename = "K_exp")]
    k_exp: usize,
    #[serde(serialize_with = "ser_vec")]
    mean_shape: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    id_basis: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    exp_basis: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    id_scales: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    exp_scales: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&ShapeBasis> for BasisDocument {
    fn from(b: &ShapeBasis) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            basis_id: b.basis_id.clone(),
            landmarks: b.landmark_count,
            k_id: b.id_components(),
            k_exp: b.exp_components(),
            mean_shape: b.mean_shape.as_slice().to_vec(),
            id_basis: row_major(&b.id_basis),
            exp_basis: row_major(&b.exp_basis),
            id_scales: b.id_scales.as_slice().to_vec(),
            exp_scales: b.exp_scales.as_slice().to_vec(),
        }
    }
}

impl BasisDocument {
    fn into_basis(self, path: &Path) -> Result<ShapeBasis> {
        format::check_version(path, self.format_version)?;
        let rows = 3 * self.landmarks;
        let expect = |name: &str, actual: usize, expected: usize| {
            if actual == expected {
                Ok(())
            } else {
                Err(Error::schema(
                    path,
                    format!("{name} has {actual} values, expected {expected}"),
                ))
            }
        };
        expect("mean_shape", self.mean_shape.len(), rows)?;
        expect("id_basis", self.id_basis.len(), rows * self.k_id)?;
        expect("exp_basis", self.exp_basis.len(), rows * self.k_exp)?;
        expect("id_scales", self.id_scales.len(), self.k_id)?;
        expect("exp_scales", self.exp_scales.len(), self.k_exp)?;
        ShapeBasis::new(
            self.basis_id,
            DVector::from_vec(self.mean_shape),
            DMatrix::from_row_slice(rows, self.k_id, &self.id_basis),
            DMatrix::from_row_slice(rows, self.k_exp, &self.exp_basis),
            DVector::from_vec(self.id_scales),
            DVector::from_vec(self.exp_scales),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_basis() -> ShapeBasis {
        let rows = 3 * 22;
        let mean = DVector::from_fn(rows, |i, _| i as f64);
        let id = DMatrix::from_fn(rows, MIN_ID_COMPONENTS, |r, c| if r == c { 1.0 } else { 0.0 });
        let exp = DMatrix::from_fn(rows, 2, |r, c| if r == 30 + c { 1.0 } else { 0.0 });
        ShapeBasis::new(
            "unit",
            mean,
            id,
            exp,
            power_law_scales(MIN_ID_COMPONENTS, 10.0),
            power_law_scales(2, 5.0),
        )
        .unwrap()
    }

    #[test]
    fn zero_coefficients_give_mean_shape() {
        let basis = synthesize_basis(68, 40, 10, 3).unwrap();
        let shape = basis.reconstruct(&Coefficients::zeros(&basis)).unwrap();
        assert_eq!(&shape.points, basis.mean_shape());
    }

    #[test]
    fn single_column_is_linear() {
        let basis = unit_basis();
        let mut coeffs = Coefficients::zeros(&basis);
        coeffs.alpha_id[0] = 2.0;
        let shape = basis.reconstruct(&coeffs).unwrap();
        let mut expected = basis.mean_shape().clone();
        expected[0] += 2.0;
        assert_eq!(shape.points, expected);
    }

    #[test]
    fn reconstruction_matches_elementwise_accumulation() {
        let basis = synthesize_basis(68, 40, 10, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coeffs = Coefficients::new(
            DVector::from_fn(40, |_, _| rng.random_range(-10.0..10.0)),
            DVector::from_fn(10, |_, _| rng.random_range(-5.0..5.0)),
        )
        .unwrap();
        let shape = basis.reconstruct(&coeffs).unwrap();

        // Row-by-row accumulation, independent of the matrix-vector product.
        for row in 0..basis.mean_shape().len() {
            let mut acc = basis.mean_shape()[row];
            for j in 0..40 {
                acc += basis.id_basis()[(row, j)] * coeffs.alpha_id[j];
            }
            for j in 0..10 {
                acc += basis.exp_basis()[(row, j)] * coeffs.alpha_exp[j];
            }
            assert!((acc - shape.points[row]).abs() <= 1e-10 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let basis = synthesize_basis(68, 40, 10, 1).unwrap();
        let bad = Coefficients::new(DVector::zeros(39), DVector::zeros(10)).unwrap();
        assert!(matches!(basis.reconstruct(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_basis(68, 40, 10, 1).unwrap();
        let b = synthesize_basis(68, 40, 10, 1).unwrap();
        assert_eq!(a, b);
        let c = synthesize_basis(68, 40, 10, 2).unwrap();
        assert_ne!(a.id_basis(), c.id_basis());
    }

    #[test]
    fn synthetic_columns_are_orthonormal() {
        let basis = synthesize_basis(68, 40, 10, 5).unwrap();
        let all = DMatrix::from_columns(
            &basis
                .id_basis()
                .column_iter()
                .chain(basis.exp_basis().column_iter())
                .map(|c| c.into_owned())
                .collect::<Vec<_>>(),
        );
        let gram = all.transpose() * &all;
        let err = (gram - DMatrix::identity(50, 50)).abs().max();
        assert!(err < 1e-10, "{err}");
        // No component moves the face rigidly.
        for mode in similarity_modes(basis.mean_shape()) {
            let m = mode.normalize();
            assert!((basis.id_basis().transpose() * &m).abs().max() < 1e-10);
        }
    }

    #[test]
    fn scales_follow_power_law() {
        let basis = synthesize_basis(68, 40, 10, 5).unwrap();
        assert_eq!(basis.id_scales()[0], 10.0);
        assert_eq!(basis.exp_scales()[0], 5.0);
        assert!((basis.id_scales()[3] - 10.0 * 4f64.powf(-0.7)).abs() < 1e-12);
    }

    #[test]
    fn unit_coefficient_reconstruction_is_bounded() {
        let basis = synthesize_basis(68, 40, 10, 7).unwrap();
        let coeffs = Coefficients::new(DVector::from_element(40, 1.0), DVector::from_element(10, 1.0)).unwrap();
        let shape = basis.reconstruct(&coeffs).unwrap();
        let norm = shape.points.norm();
        assert!(norm.is_finite());
        assert!(norm <= 10.0 * basis.mean_shape().norm());
    }

    #[test]
    fn mean_face_spans_about_two_hundred_units() {
        let mean = synthetic_mean_face(68);
        let ys: Vec<f64> = (0..68).map(|i| mean[3 * i + 1]).collect();
        let span = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!((150.0..=210.0).contains(&span), "{span}");
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(synthesize_basis(68, 19, 10, 1).is_err());
        assert!(synthesize_basis(21, 20, 1, 1).is_err());
        assert!(synthesize_basis(25, 40, 10, 1).is_err());
        assert!(synthesize_basis(68, 40, 0, 1).is_err());
    }

    #[test]
    fn persistence_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.json");
        let basis = synthesize_basis(68, 40, 10, 11).unwrap();
        basis.save(&path).unwrap();
        assert_eq!(ShapeBasis::load(&path).unwrap(), basis);
    }

    #[test]
    fn small_identity_basis_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.json");
        let basis = synthesize_basis(68, 40, 10, 11).unwrap();
        let mut doc = BasisDocument::from(&basis);
        doc.k_id = 10;
        doc.id_basis.truncate(3 * 68 * 10);
        doc.id_scales.truncate(10);
        format::write_json(&path, &doc).unwrap();
        let err = ShapeBasis::load(&path).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.json");
        synthesize_basis(68, 40, 10, 11).unwrap().save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(ShapeBasis::load(&path), Err(Error::Schema { .. })));
    }
}
