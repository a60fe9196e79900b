//! Orchestration: file formats, configuration, dataset construction, model
//! persistence, scene simulation, training, and the runnable cascade.

pub mod cascade;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod model_store;
pub mod simulate;
pub mod train;

use thiserror::Error;

pub use cascade::{
    dump_regions, evaluate_only, run_cascade, worker_threads, CascadeInputs, CascadeOutput,
    DiskImages, ImageProvider, MemoryImages, ModelScorer, OracleScorer, RegionScorer,
    write_run_outputs,
};
pub use config::{ConfigFile, FusionMode, RunConfig};
pub use dataset::{build_region_dataset, DatasetPolicy, RegionDataset, RegionSample};
pub use formats::{Annotations, CategoryDict, Detections, FormatError, GtObject, ImageInfo};
pub use model_store::{load_model, save_model, CategoryModel, ModelBundle, RescorerState};
pub use simulate::{simulate, write_scenes, SceneParams, SimulatedScenes};
pub use train::{train_bundle, train_classifiers, train_codebooks, train_rescorers};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {message}")]
    InvalidConfig { message: String },
    #[error(transparent)]
    Format(#[from] formats::FormatError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Support(#[from] crate::support::SupportError),
    #[error(transparent)]
    Bow(#[from] crate::bow::BowError),
    #[error(transparent)]
    Svm(#[from] crate::svm::SvmError),
    #[error(transparent)]
    Rescore(#[from] crate::rescore::RescoreError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("model file {path}: {message}")]
    ModelStore { path: String, message: String },
    #[error("category {category} has no positive examples")]
    NoPositives { category: u32 },
    #[error("category {category} has no usable false-alarm negatives")]
    NoNegatives { category: u32 },
    #[error("no trained model for category {category}")]
    MissingModel { category: u32 },
    #[error("image {image} not found")]
    MissingImage { image: String },
}
