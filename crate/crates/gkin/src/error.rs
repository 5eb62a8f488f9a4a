use thiserror::Error;

#[derive(Debug, Error)]
pub enum GkinError {
    /// Ray leaves the domain tangentially: the incidence factor N(z,v) is
    /// below the resolvable threshold, so footpoint quantities (normal,
    /// gradient of the exit time) are numerically meaningless.
    #[error("grazing ray: incidence factor {n} below tolerance at z = {z:?}")]
    GrazingRay { n: f64, z: [f64; 3] },

    #[error("point {x:?} is not inside the domain")]
    OutsideDomain { x: [f64; 3] },

    #[error("invalid domain parameters: {0}")]
    InvalidDomain(String),

    #[error("kernel is singular at v = v*")]
    CoincidentVelocities,

    #[error("kernel model '{0}' does not provide pointwise kernel values")]
    NotEvaluable(String),

    #[error("velocity weight e^{{p a |v|^2}} is non-integrable against the data decay (a = {alpha})")]
    NonIntegrableWeight { alpha: f64 },

    #[error("norm spec rejected: {0}")]
    InvalidNormSpec(String),

    #[error("iteration is not contracting: ratios {ratios:?} stayed >= 1 for three consecutive steps")]
    NonContractive { ratios: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, GkinError>;
