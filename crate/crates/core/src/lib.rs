//! Blind fusion of a low-resolution hyperspectral image with a
//! high-resolution multispectral image of the same scene.
//!
//! A three-stage fusion network estimates the high-resolution hyperspectral
//! cube, while two small observation networks learn the point-spread function
//! and the spectral response. Everything is trained per scene by asking the
//! estimate to reproduce both observations.

pub mod cube;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod observation;
pub mod optim;
pub mod selfreg;
pub mod tensor;

pub use cube::HyperCube;
pub use error::{Error, Result};
pub use fusion::{FusionNet, SpectralNorm, StageInput, TailInit};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{Graph, SigmaGradient, Var};
pub use metrics::MetricsReport;
pub use observation::{
    degrade_spatial, degrade_spectral, gaussian_psf, ObservationNet, PsfKernel, ScaleFactor, SrfMatrix,
};
pub use optim::{Adam, Param, ParamStore};
pub use selfreg::{
    train, train_with, FusionConfig, LossRecord, Model, ObservationModel, Precision, SelfRegState, StageTrace,
    TrainOutput, UpdateSchedule, Variant,
};
pub use tensor::Tensor;
