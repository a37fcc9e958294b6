//! Face-swap detection from 3D facial shape consistency.
//!
//! A claimed identity is enrolled as a statistical template over the leading
//! identity coefficients of a 3D morphable shape model, fitted from 2D facial
//! landmarks. A face swap keeps the underlying face geometry of the person in
//! the footage while presenting someone else's appearance, so frames whose
//! fitted shape lies far (in Mahalanobis distance) from the claimed subject's
//! template are flagged as fake.

pub mod error;
pub mod fitting;
pub mod format;
pub mod projection;
pub mod shape_model;

pub use error::{Error, Result};
pub use fitting::{fit, fit_coefficients, fit_pose, FitOptions, FitResult};
pub use projection::{project, LandmarkFrame, Landmarks2D, Pose};
pub use shape_model::{reconstruct_shape, synthesize_basis, Coefficients, Landmarks3D, ShapeBasis};
pub mod calibration;
pub mod template;
pub mod synthetic;
pub mod detector;
pub mod experiment;
