//! LiDAR sensor-model simulation core.
//!
//! Converts ideal, densely sampled laser ray profiles into realistic scans
//! carrying echo pulse width (EPW) values. The pipeline is:
//!
//! 1. [`scene`] — synthetic scenes, diverging-beam ray casting, and the
//!    parametric EPW oracle used to produce ground truth.
//! 2. [`pgm`] — polar grid map encoding of full scans (rows = laser layers,
//!    columns = azimuth bins) plus the binary/CSV trace formats.
//! 3. [`lut`] — per-(class, echo) EPW statistics binned over distance and
//!    yaw, the non-neural EPW predictor.
//! 4. [`net`] — fully-convolutional EPW regression networks with hand-derived
//!    gradients and plain-SGD training.
//! 5. [`select`] — second-stage histogram classifier reducing a dense ray
//!    profile to at most three realistic scan points per ray.
//! 6. [`eval`] — statistical KPIs comparing two scan traces.
//!
//! All math is generic over the scalar type via [`Real`]; the aliases below
//! fix the default double-precision pipeline used by the CLI and the file
//! formats.

pub mod eval;
pub mod geom;
pub mod lut;
pub mod net;
pub mod pgm;
pub mod real;
pub mod scene;
pub mod seed;
pub mod select;

mod bin;

pub use real::Real;

/// Errors shared across the simulation core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Default scalar for the CLI and on-disk artifacts.
pub type Scalar = f64;

pub type SensorSpec = pgm::SensorSpec<Scalar>;
pub type Pgm = pgm::PolarGridMap<Scalar>;
pub type ScanPoint = pgm::ScanPoint<Scalar>;
pub type ScanFrame = pgm::ScanFrame<Scalar>;
pub type Scene = scene::Scene<Scalar>;
pub type DenseFrame = scene::DenseFrame<Scalar>;
pub type EpwLut = lut::EpwLut<Scalar>;
pub type EpwNetwork = net::EpwNetwork<Scalar>;
pub type EchoHist = select::EchoOccurrenceHist<Scalar>;

