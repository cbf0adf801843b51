use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate body: {0}")]
    DegenerateBody(String),

    #[error("geometry overlap: body bounding radius {body_radius} must be below R/2 = {half_radius}")]
    GeometryOverlap { body_radius: f64, half_radius: f64 },

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("basis rank deficient: achieved rank {achieved} of requested {requested}")]
    BasisRankDeficient { achieved: usize, requested: usize },

    #[error("rigid fit degenerate: {0}")]
    RigidFitDegenerate(String),

    #[error("density negative at node {node}: {value}")]
    DensityNegative { node: usize, value: f64 },

    #[error("characteristic escape from node {node}: penetration {penetration:.3e} exceeds {limit:.3e}")]
    CharacteristicEscape { node: usize, penetration: f64, limit: f64 },

    #[error("assembly NaN in {0}")]
    AssemblyNan(&'static str),

    #[error("viscosity bounds violated: nu = {value} outside [{lower}, {upper}]")]
    ViscosityBounds { value: f64, lower: f64, upper: f64 },

    #[error("flux not tangential at surface node {node}: |w.n| = {normal_component:.3e}")]
    FluxNotTangential { node: usize, normal_component: f64 },

    #[error("mass matrix singular at t = {time}")]
    MassMatrixSingular { time: f64 },

    #[error("picard stalled at step {step}: increment {increment:.3e} after {iterations} iterations (reduce dt)")]
    PicardStalled { step: usize, iterations: usize, increment: f64 },

    #[error("invariant breach at step {step}: {what} (value {value:.6e}, bound {bound:.6e})")]
    InvariantBreach { step: usize, what: String, value: f64, bound: f64 },

    #[error("out of sampled domain: point ({x:.4}, {y:.4}, {z:.4})")]
    OutOfSampledDomain { x: f64, y: f64, z: f64 },

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("basis cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
