//! Detection post-processing toolkit.
//!
//! Given ranked bounding boxes from a preliminary object detector, this crate
//! computes the rectilinear *supporting region* of each box by exact set
//! algebra, scores those regions with a bag-of-words texture classifier
//! (LBP descriptors, locality-constrained coding, spatial-pyramid max
//! pooling, linear SVM), fuses classification and detection scores (additive
//! or RBF-SVM rescoring), and evaluates the result with the interpolated
//! average-precision protocol.
//!
//! The numeric kernels are generic over the scalar type via [`Scalar`];
//! the file formats, model store, and CLI pipeline run on [`Real`] (`f64`).
//! Geometry is exact integer pixel algebra and is not scalar-generic.

pub mod bow;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod raster;
pub mod rescore;
pub mod scalar;
pub mod support;
pub mod svm;

pub use scalar::Scalar;

/// Scalar used by the pipeline, file formats, and model store.
pub type Real = f64;

/// Codebook instantiated at the pipeline scalar.
pub type Codebook = bow::Codebook<Real>;
/// Region classifier instantiated at the pipeline scalar.
pub type RegionClassifier = bow::RegionClassifier<Real>;
/// SVM model instantiated at the pipeline scalar.
pub type SvmModel = svm::SvmModel<Real>;
