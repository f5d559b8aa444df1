//! Failure modes of the numerical pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GhdError>;

/// Errors surfaced by the solvers.
///
/// Programmer errors (mismatched grids, mixed-parity arithmetic) panic
/// instead; these variants are for states and inputs that are valid to
/// attempt but fail numerically or violate a physical precondition.
#[derive(Debug, Clone, Error)]
pub enum GhdError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dressing singular: {0}")]
    DressingSingular(String),

    #[error("TBA divergence: pseudo-energy iteration did not converge after {iterations} sweeps (residual {residual:.3e})")]
    TbaDivergence { iterations: usize, residual: f64 },

    #[error("bose condensation regime unsupported: pseudo-energy reached {min_epsilon:.3e} <= 0")]
    BoseCondensation { min_epsilon: f64 },

    #[error("acceleration singular: occupation gradient without particle weight at x index {x_index}, node {node}")]
    AccelerationSingular { x_index: usize, node: usize },

    #[error("characteristics iteration did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    EvolveNonConvergence { sweeps: usize, residual: f64 },

    #[error("spatial grid too small: {0}")]
    GridTooSmall(String),

    #[error("left boundary not asymptotically stationary: occupation moved by {deviation:.3e}")]
    BoundaryNotStationary { deviation: f64 },

    #[error("characteristic function not invertible: d(u)/dx = {value:.3e} <= 0 at x index {x_index}, node {node}")]
    NotInvertible { x_index: usize, node: usize, value: f64 },

    #[error("degenerate characteristic: |du/dtheta| = {slope:.3e} at rapidity {rapidity:.6} (correlator singular)")]
    DegenerateCharacteristic { rapidity: f64, slope: f64 },

    #[error("degenerate ray: effective-velocity derivative vanishes at rapidity {rapidity:.6}")]
    DegenerateRay { rapidity: f64 },

    #[error("ray non-convergence: occupation assignment cycles at ray {xi:.6}")]
    RayNonConvergence { xi: f64 },

    #[error("equipartition unsolvable: no crossing of the equipartition value on the profile at node {node}")]
    EquipartitionUnsolvable { node: usize },

    #[error("truncation order {requested} exceeds supported maximum {max}")]
    TruncationUnsupported { requested: usize, max: usize },

    #[error("free-energy argument outside domain: {0}")]
    FreeEnergyDomain(String),

    #[error("singular linear solve in {0}")]
    SingularSolve(String),
}
