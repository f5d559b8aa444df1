//! Discretized spectral space: particle types, quadrature grids, spectral
//! functions with scalar/vector-field parity, and integral-operator kernels.
//!
//! The spectral space is a disjoint union of rapidity intervals, one per
//! particle type. A grid stores quadrature nodes and weights per type and
//! a flat indexing of all nodes; every field in the pipeline is a vector
//! over flat node indices.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{GhdError, Result};
use crate::interp;

/// Statistics of a quasi-particle mode; fixes the free-energy function,
/// the occupation map and the statistical factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistics {
    Fermion,
    Boson,
    ClassicalParticle,
    Radiative,
}

impl Statistics {
    /// Free-energy function F(eps).
    pub fn free_energy(self, eps: f64) -> Result<f64> {
        match self {
            Statistics::Fermion => Ok(-(-eps).exp().ln_1p()),
            Statistics::Boson => {
                if eps <= 0.0 {
                    return Err(GhdError::FreeEnergyDomain(format!(
                        "boson pseudo-energy {eps} <= 0"
                    )));
                }
                Ok((-(-eps).exp()).ln_1p())
            }
            Statistics::ClassicalParticle => Ok(-(-eps).exp()),
            Statistics::Radiative => {
                if eps <= 0.0 {
                    return Err(GhdError::FreeEnergyDomain(format!(
                        "radiative pseudo-energy {eps} <= 0"
                    )));
                }
                Ok(eps.ln())
            }
        }
    }

    /// Occupation n(eps) = dF/deps.
    pub fn occupation(self, eps: f64) -> f64 {
        match self {
            Statistics::Fermion => 1.0 / (eps.exp() + 1.0),
            Statistics::Boson => 1.0 / (eps.exp() - 1.0),
            Statistics::ClassicalParticle => (-eps).exp(),
            Statistics::Radiative => 1.0 / eps,
        }
    }

    /// Pseudo-energy from occupation (inverse of [`Statistics::occupation`]).
    pub fn pseudo_energy(self, n: f64) -> f64 {
        match self {
            Statistics::Fermion => (1.0 / n - 1.0).ln(),
            Statistics::Boson => (1.0 / n + 1.0).ln(),
            Statistics::ClassicalParticle => -n.ln(),
            Statistics::Radiative => 1.0 / n,
        }
    }

    /// Statistical factor f(n): 1-n, 1+n, 1, n for fermion, boson,
    /// classical particle and radiative mode respectively.
    pub fn stat_factor(self, n: f64) -> f64 {
        match self {
            Statistics::Fermion => 1.0 - n,
            Statistics::Boson => 1.0 + n,
            Statistics::ClassicalParticle => 1.0,
            Statistics::Radiative => n,
        }
    }
}

/// One quasi-particle type with its truncated rapidity interval.
#[derive(Debug, Clone)]
pub struct ParticleType {
    pub id: String,
    pub statistics: Statistics,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl ParticleType {
    pub fn new(id: impl Into<String>, statistics: Statistics, theta_min: f64, theta_max: f64) -> Result<Self> {
        if !theta_min.is_finite() || !theta_max.is_finite() {
            return Err(GhdError::InvalidParameter(
                "rapidity domain must be finite".into(),
            ));
        }
        if theta_min >= theta_max {
            return Err(GhdError::InvalidParameter(format!(
                "rapidity domain [{theta_min}, {theta_max}] is empty"
            )));
        }
        Ok(ParticleType {
            id: id.into(),
            statistics,
            theta_min,
            theta_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureScheme {
    GaussLegendre,
    UniformTrapezoid,
}

/// Minimum nodes per type for production grids; the quadrature rules
/// themselves are valid from 2 nodes and are unit-tested there.
pub const MIN_POINTS_PER_TYPE: usize = 8;

/// Quadrature discretization of the spectral space.
///
/// Nodes are strictly increasing within each type; `flat` indices run
/// over all types in order. Barycentric data (Gauss-Legendre grids) or
/// node spacing (uniform grids) back interpolation and differentiation
/// of smooth fields in rapidity.
#[derive(Debug)]
pub struct SpectralGrid {
    pub types: Vec<ParticleType>,
    pub scheme: QuadratureScheme,
    nodes: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    bary: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    total: usize,
}

impl SpectralGrid {
    /// Build the named quadrature with `points_per_type` nodes on each
    /// type's interval.
    pub fn build(
        types: Vec<ParticleType>,
        points_per_type: usize,
        scheme: QuadratureScheme,
    ) -> Result<Arc<Self>> {
        if types.is_empty() {
            return Err(GhdError::InvalidParameter("no particle types".into()));
        }
        if points_per_type < MIN_POINTS_PER_TYPE {
            return Err(GhdError::InvalidParameter(format!(
                "{points_per_type} points per type below minimum {MIN_POINTS_PER_TYPE}"
            )));
        }
        Self::build_unchecked(types, points_per_type, scheme)
    }

    /// As [`SpectralGrid::build`] without the production minimum on the
    /// node count (used by tests of the rules themselves).
    pub fn build_unchecked(
        types: Vec<ParticleType>,
        points_per_type: usize,
        scheme: QuadratureScheme,
    ) -> Result<Arc<Self>> {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut bary = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0;
        for t in &types {
            offsets.push(total);
            let (n, w) = match scheme {
                QuadratureScheme::GaussLegendre => {
                    let (n0, w0) = interp::gauss_legendre_rule(points_per_type);
                    let mid = 0.5 * (t.theta_min + t.theta_max);
                    let half = 0.5 * (t.theta_max - t.theta_min);
                    (
                        n0.iter().map(|x| mid + half * x).collect::<Vec<_>>(),
                        w0.iter().map(|x| half * x).collect::<Vec<_>>(),
                    )
                }
                QuadratureScheme::UniformTrapezoid => {
                    interp::trapezoid_rule(points_per_type, t.theta_min, t.theta_max)
                }
            };
            bary.push(interp::barycentric_weights(&n));
            total += n.len();
            nodes.push(n);
            weights.push(w);
        }
        Ok(Arc::new(SpectralGrid {
            types,
            scheme,
            nodes,
            weights,
            bary,
            offsets,
            total,
        }))
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn type_offset(&self, ty: usize) -> usize {
        self.offsets[ty]
    }

    pub fn type_len(&self, ty: usize) -> usize {
        self.nodes[ty].len()
    }

    pub fn nodes_of(&self, ty: usize) -> &[f64] {
        &self.nodes[ty]
    }

    pub fn weights_of(&self, ty: usize) -> &[f64] {
        &self.weights[ty]
    }

    /// (type, local index) of a flat index.
    pub fn split_flat(&self, flat: usize) -> (usize, usize) {
        let ty = match self.offsets.partition_point(|&o| o <= flat) {
            0 => 0,
            k => k - 1,
        };
        (ty, flat - self.offsets[ty])
    }

    pub fn rapidity(&self, flat: usize) -> f64 {
        let (ty, k) = self.split_flat(flat);
        self.nodes[ty][k]
    }

    pub fn weight(&self, flat: usize) -> f64 {
        let (ty, k) = self.split_flat(flat);
        self.weights[ty][k]
    }

    pub fn type_of(&self, flat: usize) -> usize {
        self.split_flat(flat).0
    }

    /// Iterate (type, local, flat, rapidity, weight).
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64, f64)> + '_ {
        (0..self.n_types()).flat_map(move |ty| {
            (0..self.type_len(ty)).map(move |k| {
                (
                    ty,
                    k,
                    self.offsets[ty] + k,
                    self.nodes[ty][k],
                    self.weights[ty][k],
                )
            })
        })
    }

    /// Interpolate the per-type slice of a flat field at rapidity `theta`.
    ///
    /// Gauss-Legendre grids use the barycentric form (spectrally accurate
    /// for smooth fields); uniform grids a shape-preserving cubic.
    pub fn interpolate(&self, values: &[f64], ty: usize, theta: f64) -> f64 {
        debug_assert_eq!(values.len(), self.total);
        let o = self.offsets[ty];
        let slice = &values[o..o + self.type_len(ty)];
        match self.scheme {
            QuadratureScheme::GaussLegendre => {
                interp::barycentric_eval(&self.nodes[ty], &self.bary[ty], slice, theta)
            }
            QuadratureScheme::UniformTrapezoid => {
                interp::Pchip::new(&self.nodes[ty], slice, interp::Extend::Linear).eval(theta)
            }
        }
    }

    /// Rapidity derivative of a flat field, per type.
    pub fn differentiate(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.total);
        let mut out = vec![0.0; self.total];
        for ty in 0..self.n_types() {
            let o = self.offsets[ty];
            let len = self.type_len(ty);
            let slice = &values[o..o + len];
            match self.scheme {
                QuadratureScheme::GaussLegendre => {
                    let d = interp::barycentric_diff_matrix(&self.nodes[ty], &self.bary[ty]);
                    for i in 0..len {
                        out[o + i] = d[i].iter().zip(slice).map(|(a, b)| a * b).sum();
                    }
                }
                QuadratureScheme::UniformTrapezoid => {
                    let d = interp::finite_diff_derivative(&self.nodes[ty], slice);
                    out[o..o + len].copy_from_slice(&d);
                }
            }
        }
        out
    }

    /// Descending scan of a flat field for roots of value(theta) = target
    /// within one type; sign-change brackets refined by bisection on the
    /// interpolant. Returns rapidities.
    pub fn roots_in_type(&self, values: &[f64], ty: usize, target: f64, tol: f64) -> Vec<f64> {
        let o = self.offsets[ty];
        let len = self.type_len(ty);
        let slice = &values[o..o + len];
        let mut roots = Vec::new();
        for k in 0..len - 1 {
            let fa = slice[k] - target;
            let fb = slice[k + 1] - target;
            if fa == 0.0 {
                roots.push(self.nodes[ty][k]);
                continue;
            }
            if k == len - 2 && fb == 0.0 {
                roots.push(self.nodes[ty][k + 1]);
                continue;
            }
            if fa * fb < 0.0 {
                let r = interp::bisect(
                    |x| self.interpolate(values, ty, x) - target,
                    self.nodes[ty][k],
                    self.nodes[ty][k + 1],
                    tol,
                )
                .expect("bracketed root");
                roots.push(r);
            }
        }
        roots
    }

    /// Check grids are the same object (fields only combine on one grid).
    pub fn same_as(&self, other: &SpectralGrid) -> bool {
        std::ptr::eq(self, other)
    }
}

/// Transformation behavior under rapidity reparametrization; dressing
/// dispatches on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    ScalarField,
    VectorField,
}

impl Parity {
    /// Parity of a product: scalar acts as identity, vector * vector
    /// gives a scalar (as in the effective velocity E'dr / p'dr).
    pub fn combine(self, other: Parity) -> Parity {
        if self == other {
            Parity::ScalarField
        } else {
            Parity::VectorField
        }
    }
}

/// A scalar- or vector-field function sampled on the grid nodes.
#[derive(Debug, Clone)]
pub struct SpectralFunction {
    pub grid: Arc<SpectralGrid>,
    pub values: Vec<f64>,
    pub parity: Parity,
}

impl SpectralFunction {
    pub fn new(grid: Arc<SpectralGrid>, values: Vec<f64>, parity: Parity) -> Result<Self> {
        if values.len() != grid.len() {
            panic!(
                "spectral function length {} does not match grid {}",
                values.len(),
                grid.len()
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GhdError::NonFinite("spectral function values".into()));
        }
        Ok(SpectralFunction { grid, values, parity })
    }

    pub fn from_fn(
        grid: &Arc<SpectralGrid>,
        parity: Parity,
        f: impl Fn(usize, f64) -> f64,
    ) -> Result<Self> {
        let values: Vec<f64> = grid.iter().map(|(ty, _, _, th, _)| f(ty, th)).collect();
        Self::new(grid.clone(), values, parity)
    }

    pub fn zeros(grid: &Arc<SpectralGrid>, parity: Parity) -> Self {
        SpectralFunction {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
            parity,
        }
    }

    fn check_same_grid(&self, other: &SpectralFunction) {
        assert!(
            self.grid.same_as(&other.grid),
            "spectral functions live on different grids"
        );
    }

    /// Pointwise sum; parities must match.
    pub fn add(&self, other: &SpectralFunction) -> SpectralFunction {
        self.check_same_grid(other);
        assert_eq!(
            self.parity, other.parity,
            "mixed-parity addition is rejected"
        );
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        SpectralFunction {
            grid: self.grid.clone(),
            values,
            parity: self.parity,
        }
    }

    /// Pointwise difference; parities must match.
    pub fn sub(&self, other: &SpectralFunction) -> SpectralFunction {
        self.check_same_grid(other);
        assert_eq!(
            self.parity, other.parity,
            "mixed-parity subtraction is rejected"
        );
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        SpectralFunction {
            grid: self.grid.clone(),
            values,
            parity: self.parity,
        }
    }

    /// Pointwise product; a vector times a scalar is a vector, a vector
    /// times a vector a scalar.
    pub fn mul(&self, other: &SpectralFunction) -> SpectralFunction {
        self.check_same_grid(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        SpectralFunction {
            grid: self.grid.clone(),
            values,
            parity: self.parity.combine(other.parity),
        }
    }

    /// Pointwise quotient with the same parity rule as [`Self::mul`].
    pub fn div(&self, other: &SpectralFunction) -> SpectralFunction {
        self.check_same_grid(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a / b)
            .collect();
        SpectralFunction {
            grid: self.grid.clone(),
            values,
            parity: self.parity.combine(other.parity),
        }
    }

    pub fn scale(&self, s: f64) -> SpectralFunction {
        SpectralFunction {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| s * v).collect(),
            parity: self.parity,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Quadrature integral over the whole spectral space.
pub fn integrate(f: &SpectralFunction) -> f64 {
    f.grid
        .iter()
        .map(|(_, _, flat, _, w)| w * f.values[flat])
        .sum()
}

/// Dense kernel operator T with entries phi(theta_j, alpha_k) / 2 pi.
///
/// The matrix holds bare kernel values; quadrature weights and occupation
/// factors are attached where the operator is applied.
#[derive(Debug, Clone)]
pub struct KernelOperator {
    pub grid: Arc<SpectralGrid>,
    pub matrix: DMatrix<f64>,
}

impl KernelOperator {
    /// Materialize phi / 2 pi on all node pairs.
    pub fn from_kernel(
        grid: &Arc<SpectralGrid>,
        phi: impl Fn(usize, f64, usize, f64) -> f64,
    ) -> Result<Self> {
        let n = grid.len();
        let mut m = DMatrix::zeros(n, n);
        let two_pi = 2.0 * std::f64::consts::PI;
        for (ty_j, _, j, th_j, _) in grid.iter() {
            for (ty_k, _, k, th_k, _) in grid.iter() {
                let v = phi(ty_j, th_j, ty_k, th_k) / two_pi;
                if !v.is_finite() {
                    return Err(GhdError::NonFinite(format!(
                        "kernel at ({th_j}, {th_k})"
                    )));
                }
                m[(j, k)] = v;
            }
        }
        Ok(KernelOperator {
            grid: grid.clone(),
            matrix: m,
        })
    }

    /// Exchange the kernel arguments exactly.
    pub fn transpose(&self) -> KernelOperator {
        KernelOperator {
            grid: self.grid.clone(),
            matrix: self.matrix.transpose(),
        }
    }
}
