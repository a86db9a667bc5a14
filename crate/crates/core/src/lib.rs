//! Conditional inference for extended and multivariate generalised linear
//! mixed models.

pub mod asymptotics;
pub mod covariance;
pub mod data;
pub mod error;
pub mod estimator;
pub mod family;
pub mod laplace;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod sim;

pub use data::Dataset;
pub use error::{Error, Result};
pub use family::{Family, Link, LinkMode};
pub use model::{
    build_matrices, validate, ClusterComponent, ClusterSpec, ClusterStructure, Design, MarginalDesign, MarginalSpec,
    ModelSpec, RandomDist, ValidationReport,
};
pub use asymptotics::{godambe_blocks, unconditional_av, GodambeBlocks, Mode};
pub use covariance::CovarianceEstimate;
pub use estimator::{fit, fit_design, FitOptions, FitResult, Method};
pub use laplace::{fit_laplace, fit_laplace_design, LaplaceFit, LaplaceOptions};
pub use sim::{SimConfig, StudyKind, StudyMethod, StudyOutput};
