//! Dressing transforms, GGE states, one-point averages and the
//! state-derivative identity.
//!
//! A GGE is held as an occupation function n on the grid together with
//! every derived quantity: pseudo-energy, state and particle densities,
//! effective velocity and statistical factor. Dressing solves the dense
//! Nystrom system (1 - T n) h_dr = h (vector fields) or its transpose
//! (scalar fields) by LU factorization, cached per state.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::characteristics::FluidState;
use crate::error::{GhdError, Result};
use crate::models::ModelSpec;
use crate::spectral::{KernelOperator, Parity, SpectralFunction, SpectralGrid};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Pseudo-energy iteration controls.
#[derive(Debug, Clone)]
pub struct TbaOptions {
    /// Sup-norm tolerance on the pseudo-energy update.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial damping factor; reduced automatically on oscillation.
    pub damping: f64,
}

impl Default for TbaOptions {
    fn default() -> Self {
        TbaOptions {
            tolerance: 1e-12,
            max_iterations: 10_000,
            damping: 0.5,
        }
    }
}

/// GGE driving term w(theta) = sum_i beta_i h_i(theta).
#[derive(Debug, Clone)]
pub struct DrivingTerm {
    pub w: SpectralFunction,
}

impl DrivingTerm {
    pub fn new(w: SpectralFunction) -> Result<Self> {
        if w.parity != Parity::ScalarField {
            return Err(GhdError::InvalidParameter(
                "driving term must be a scalar field".into(),
            ));
        }
        Ok(DrivingTerm { w })
    }

    /// Build from Lagrange-parameter pairs (charge index, beta).
    pub fn from_betas(
        model: &ModelSpec,
        grid: &Arc<SpectralGrid>,
        betas: &[(i64, f64)],
    ) -> Result<Self> {
        let w = SpectralFunction::from_fn(grid, Parity::ScalarField, |ty, th| {
            betas
                .iter()
                .map(|&(i, b)| b * model.charge_eigenvalue(i, ty, th))
                .sum()
        })?;
        Ok(DrivingTerm { w })
    }
}

struct DressingCache {
    /// I - T diag(n w) and its LU (vector fields), built eagerly.
    lu_vector: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    matrix_vector: DMatrix<f64>,
    /// Scalar-field system, built on first use.
    scalar: OnceLock<std::result::Result<ScalarSystem, GhdError>>,
}

struct ScalarSystem {
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    matrix: DMatrix<f64>,
}

/// A generalized Gibbs ensemble on a spectral grid with all derived
/// state quantities.
pub struct GgeState {
    pub grid: Arc<SpectralGrid>,
    pub model: Arc<ModelSpec>,
    pub kernel: Arc<KernelOperator>,
    occupation: Vec<f64>,
    pseudo_energy: Vec<f64>,
    state_density: Vec<f64>,
    particle_density: Vec<f64>,
    effective_velocity: Vec<f64>,
    stat_factor: Vec<f64>,
    p_prime: Vec<f64>,
    e_prime: Vec<f64>,
    driving: Option<Vec<f64>>,
    cache: DressingCache,
}

impl std::fmt::Debug for GgeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GgeState")
            .field("model", &self.model.name)
            .field("nodes", &self.grid.len())
            .finish()
    }
}

impl GgeState {
    /// Solve the TBA equations for the GGE fixed by `w`.
    ///
    /// Damped fixed-point iteration of
    /// eps = w + integral T^T F(eps), then n = dF/deps.
    pub fn solve(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
        driving: &DrivingTerm,
        opts: &TbaOptions,
    ) -> Result<GgeState> {
        Self::solve_seeded(model, grid, kernel, driving, opts, None)
    }

    /// As [`GgeState::solve`] with a warm-start pseudo-energy (used when
    /// sweeping smooth spatial profiles).
    pub fn solve_seeded(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
        driving: &DrivingTerm,
        opts: &TbaOptions,
        seed: Option<&[f64]>,
    ) -> Result<GgeState> {
        let n = grid.len();
        let w = &driving.w.values;
        let mut eps: Vec<f64> = match seed {
            Some(s) => s.to_vec(),
            None => w.clone(),
        };
        let mut damping = opts.damping;
        let mut prev_residual = f64::INFINITY;
        let mut free_energy = vec![0.0; n];
        let mut converged = false;
        let mut residual = f64::INFINITY;
        for _ in 0..opts.max_iterations {
            for (ty, _, flat, _, _) in grid.iter() {
                let stat = grid.types[ty].statistics;
                free_energy[flat] = stat.free_energy(eps[flat]).map_err(|_| {
                    GhdError::BoseCondensation {
                        min_epsilon: eps[flat],
                    }
                })?;
            }
            residual = 0.0;
            let mut next = vec![0.0; n];
            for j in 0..n {
                // scalar-type convolution: kernel arguments transposed
                let mut acc = 0.0;
                for (_, _, k, _, wk) in grid.iter() {
                    acc += wk * kernel.matrix[(k, j)] * free_energy[k];
                }
                next[j] = w[j] + acc;
                residual = residual.max((next[j] - eps[j]).abs());
            }
            if residual < opts.tolerance {
                eps = next;
                converged = true;
                break;
            }
            if residual > prev_residual {
                damping = (0.5 * damping).max(0.05);
            }
            prev_residual = residual;
            for j in 0..n {
                eps[j] += damping * (next[j] - eps[j]);
            }
        }
        if !converged {
            return Err(GhdError::TbaDivergence {
                iterations: opts.max_iterations,
                residual,
            });
        }
        let mut occupation = vec![0.0; n];
        for (ty, _, flat, _, _) in grid.iter() {
            let stat = grid.types[ty].statistics;
            occupation[flat] = stat.occupation(eps[flat]);
        }
        Self::finish(model, grid, kernel, occupation, eps, Some(w.clone()))
    }

    /// Build a state directly from an occupation function (used by the
    /// evolved fluid cells and the partitioning-protocol ray states).
    pub fn from_occupation(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
        occupation: Vec<f64>,
    ) -> Result<GgeState> {
        let mut eps = vec![0.0; grid.len()];
        for (ty, _, flat, _, _) in grid.iter() {
            let stat = grid.types[ty].statistics;
            eps[flat] = if occupation[flat] > 0.0 {
                stat.pseudo_energy(occupation[flat])
            } else {
                f64::INFINITY
            };
        }
        Self::finish(model, grid, kernel, occupation, eps, None)
    }

    /// The zero-occupation state.
    pub fn vacuum(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
    ) -> Result<GgeState> {
        Self::from_occupation(model, grid, kernel, vec![0.0; grid.len()])
    }

    fn finish(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
        occupation: Vec<f64>,
        pseudo_energy: Vec<f64>,
        driving: Option<Vec<f64>>,
    ) -> Result<GgeState> {
        let n = grid.len();
        if occupation.iter().any(|v| !v.is_finite()) {
            return Err(GhdError::NonFinite("occupation function".into()));
        }
        // fermionic occupations live in [0, 1]
        for (ty, _, flat, th, _) in grid.iter() {
            if grid.types[ty].statistics == crate::spectral::Statistics::Fermion
                && !(-1e-12..=1.0 + 1e-12).contains(&occupation[flat])
            {
                return Err(GhdError::InvalidParameter(format!(
                    "fermion occupation {} outside [0, 1] at rapidity {th}",
                    occupation[flat]
                )));
            }
        }
        let mut m_vec = DMatrix::identity(n, n);
        for j in 0..n {
            for (_, _, k, _, wk) in grid.iter() {
                m_vec[(j, k)] -= kernel.matrix[(j, k)] * occupation[k] * wk;
            }
        }
        let matrix_vector = m_vec.clone();
        let lu_vector = m_vec.lu();
        let cache = DressingCache {
            lu_vector,
            matrix_vector,
            scalar: OnceLock::new(),
        };
        let p_prime: Vec<f64> = grid
            .iter()
            .map(|(ty, _, _, th, _)| model.momentum_deriv(ty, th))
            .collect();
        let e_prime: Vec<f64> = grid
            .iter()
            .map(|(ty, _, _, th, _)| model.energy_deriv(ty, th))
            .collect();
        let mut state = GgeState {
            grid: grid.clone(),
            model: model.clone(),
            kernel: kernel.clone(),
            occupation,
            pseudo_energy,
            state_density: Vec::new(),
            particle_density: Vec::new(),
            effective_velocity: Vec::new(),
            stat_factor: Vec::new(),
            p_prime,
            e_prime,
            driving,
            cache,
        };
        let p_dr = state.dress_values(&state.p_prime, Parity::VectorField)?;
        let e_dr = state.dress_values(&state.e_prime, Parity::VectorField)?;
        state.state_density = p_dr.iter().map(|v| v / TWO_PI).collect();
        if state.state_density.iter().any(|&r| r <= 0.0) {
            return Err(GhdError::InvalidParameter(
                "state density not positive on the grid".into(),
            ));
        }
        state.particle_density = state
            .occupation
            .iter()
            .zip(&state.state_density)
            .map(|(n, r)| n * r)
            .collect();
        state.effective_velocity = e_dr.iter().zip(&p_dr).map(|(e, p)| e / p).collect();
        state.stat_factor = grid
            .iter()
            .map(|(ty, _, flat, _, _)| grid.types[ty].statistics.stat_factor(state.occupation[flat]))
            .collect();
        Ok(state)
    }

    pub fn occupation(&self) -> &[f64] {
        &self.occupation
    }

    pub fn pseudo_energy(&self) -> &[f64] {
        &self.pseudo_energy
    }

    pub fn state_density(&self) -> &[f64] {
        &self.state_density
    }

    pub fn particle_density(&self) -> &[f64] {
        &self.particle_density
    }

    pub fn effective_velocity(&self) -> &[f64] {
        &self.effective_velocity
    }

    pub fn stat_factor(&self) -> &[f64] {
        &self.stat_factor
    }

    pub fn momentum_deriv_values(&self) -> &[f64] {
        &self.p_prime
    }

    pub fn energy_deriv_values(&self) -> &[f64] {
        &self.e_prime
    }

    /// Driving-term values when the state was built from one.
    pub fn driving_values(&self) -> Option<&[f64]> {
        self.driving.as_deref()
    }

    /// Largest occupation on the first and last node of any type; a
    /// cutoff-adequacy diagnostic.
    pub fn boundary_occupation(&self) -> f64 {
        let mut worst = 0.0f64;
        for ty in 0..self.grid.n_types() {
            let o = self.grid.type_offset(ty);
            let len = self.grid.type_len(ty);
            worst = worst.max(self.occupation[o].abs());
            worst = worst.max(self.occupation[o + len - 1].abs());
        }
        worst
    }

    fn scalar_system(&self) -> Result<&ScalarSystem> {
        self.cache
            .scalar
            .get_or_init(|| {
                let n = self.grid.len();
                let mut m = DMatrix::identity(n, n);
                for j in 0..n {
                    for (_, _, k, _, wk) in self.grid.iter() {
                        m[(j, k)] -= self.kernel.matrix[(k, j)] * self.occupation[k] * wk;
                    }
                }
                let matrix = m.clone();
                Ok(ScalarSystem { lu: m.lu(), matrix })
            })
            .as_ref()
            .map_err(|e| e.clone())
    }

    /// Solve the dressing equation for raw values of the given parity.
    pub fn dress_values(&self, values: &[f64], parity: Parity) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(values);
        let (sol, matrix) = match parity {
            Parity::VectorField => (
                self.cache.lu_vector.solve(&rhs),
                &self.cache.matrix_vector,
            ),
            Parity::ScalarField => {
                let sys = self.scalar_system()?;
                (sys.lu.solve(&rhs), &sys.matrix)
            }
        };
        let sol = sol.ok_or_else(|| GhdError::DressingSingular("LU solve failed".into()))?;
        let scale = rhs.amax().max(1.0);
        let residual = (matrix * &sol - &rhs).amax();
        if !sol.iter().all(|v| v.is_finite()) || residual > 1e-8 * scale.max(sol.amax()) {
            return Err(GhdError::DressingSingular(format!(
                "resolvent ill-conditioned (residual {residual:.3e})"
            )));
        }
        Ok(sol.data.into())
    }

    /// Dressing h -> h_dr, dispatching on the field parity.
    pub fn dress(&self, h: &SpectralFunction) -> Result<SpectralFunction> {
        assert!(h.grid.same_as(&self.grid), "dressing across grids");
        let values = self.dress_values(&h.values, h.parity)?;
        SpectralFunction::new(self.grid.clone(), values, h.parity)
    }

    /// Star-dressing of a vector field: (T n g)_dr = g_dr - g.
    pub fn star_dress(&self, g: &SpectralFunction) -> Result<SpectralFunction> {
        assert_eq!(
            g.parity,
            Parity::VectorField,
            "star-dressing acts on vector fields"
        );
        let dressed = self.dress(g)?;
        Ok(dressed.sub(g))
    }

    pub fn star_dress_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let dressed = self.dress_values(values, Parity::VectorField)?;
        Ok(dressed.iter().zip(values).map(|(d, v)| d - v).collect())
    }

    /// Column of the dressed scattering operator (1 - T n)^-1 T at an
    /// off-grid spectral point `(ty, alpha)`.
    pub fn dressed_kernel_column(&self, ty: usize, alpha: f64) -> Result<Vec<f64>> {
        let col: Vec<f64> = self
            .grid
            .iter()
            .map(|(tj, _, _, th, _)| self.model.phi(tj, th, ty, alpha) / TWO_PI)
            .collect();
        let rhs = DVector::from_column_slice(&col);
        let sol = self
            .cache
            .lu_vector
            .solve(&rhs)
            .ok_or_else(|| GhdError::DressingSingular("dressed kernel column".into()))?;
        Ok(sol.data.into())
    }

    /// Explicit matrix of g -> (rho_s f g)_*dr in this state, including
    /// quadrature weights; used by the indirect-propagator march.
    pub fn star_dress_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.grid.len();
        let resolvent = self
            .cache
            .lu_vector
            .try_inverse()
            .ok_or_else(|| GhdError::DressingSingular("resolvent inverse".into()))?;
        let mut m = resolvent - DMatrix::identity(n, n);
        for j in 0..n {
            for k in 0..n {
                m[(j, k)] *= self.state_density[k] * self.stat_factor[k];
            }
        }
        Ok(m)
    }

    /// Dress with a perturbed occupation, leaving the state untouched
    /// (finite-difference checks).
    pub fn dress_values_with_occupation(
        &self,
        occupation: &[f64],
        values: &[f64],
        parity: Parity,
    ) -> Result<Vec<f64>> {
        let n = self.grid.len();
        let mut m = DMatrix::identity(n, n);
        for j in 0..n {
            for (_, _, k, _, wk) in self.grid.iter() {
                let t = match parity {
                    Parity::VectorField => self.kernel.matrix[(j, k)],
                    Parity::ScalarField => self.kernel.matrix[(k, j)],
                };
                m[(j, k)] -= t * occupation[k] * wk;
            }
        }
        let sol = m
            .lu()
            .solve(&DVector::from_column_slice(values))
            .ok_or_else(|| GhdError::DressingSingular("perturbed dressing".into()))?;
        Ok(sol.data.into())
    }
}

/// Average conserved density <q> = integral dp/2pi n h_dr.
pub fn average_density(state: &GgeState, h: &SpectralFunction) -> Result<f64> {
    let h_dr = state.dress(h)?;
    Ok(state
        .grid
        .iter()
        .map(|(_, _, k, _, w)| {
            w * state.p_prime[k] * state.occupation[k] * h_dr.values[k] / TWO_PI
        })
        .sum())
}

/// Average conserved current <j> = integral dE/2pi n h_dr.
pub fn average_current(state: &GgeState, h: &SpectralFunction) -> Result<f64> {
    let h_dr = state.dress(h)?;
    Ok(state
        .grid
        .iter()
        .map(|(_, _, k, _, w)| {
            w * state.e_prime[k] * state.occupation[k] * h_dr.values[k] / TWO_PI
        })
        .sum())
}

/// Effective acceleration of the initial fluid state at one spatial node:
/// a(x; theta) = d_x n / (2 pi rho_p f), spatial derivative by
/// second-order finite differences (one-sided at the ends).
pub fn effective_acceleration(fluid: &FluidState, x_index: usize) -> Result<SpectralFunction> {
    let row = fluid.acceleration_row(x_index)?;
    SpectralFunction::new(fluid.grid.clone(), row, Parity::ScalarField)
}

/// Both sides of the state-derivative identity
/// d_mu integral dtheta/2pi g n h_dr = integral dtheta/2pi g_dr (d_mu n) h_dr
/// for the perturbation n -> n + s delta_n: the left side by central
/// finite differences in s, the right side in closed form.
pub fn state_derivative_check(
    state: &GgeState,
    g: &SpectralFunction,
    h: &SpectralFunction,
    delta_n: &SpectralFunction,
    step: f64,
) -> Result<(f64, f64)> {
    assert_ne!(g.parity, h.parity, "g and h must have opposite parity");
    let eval = |s: f64| -> Result<f64> {
        let n_pert: Vec<f64> = state
            .occupation()
            .iter()
            .zip(&delta_n.values)
            .map(|(n, d)| n + s * d)
            .collect();
        let h_dr = state.dress_values_with_occupation(&n_pert, &h.values, h.parity)?;
        Ok(state
            .grid
            .iter()
            .map(|(_, _, k, _, w)| w * g.values[k] * n_pert[k] * h_dr[k] / TWO_PI)
            .sum())
    };
    let lhs = (eval(step)? - eval(-step)?) / (2.0 * step);
    let g_dr = state.dress(g)?;
    let h_dr = state.dress(h)?;
    let rhs = state
        .grid
        .iter()
        .map(|(_, _, k, _, w)| w * g_dr.values[k] * delta_n.values[k] * h_dr.values[k] / TWO_PI)
        .sum();
    Ok((lhs, rhs))
}

/// Static covariance of conserved densities,
/// C_ij = integral dtheta h_i_dr rho_p f h_j_dr.
pub fn static_covariance(state: &GgeState, h_i: &SpectralFunction, h_j: &SpectralFunction) -> Result<f64> {
    let hi_dr = state.dress(h_i)?;
    let hj_dr = state.dress(h_j)?;
    Ok(state
        .grid
        .iter()
        .map(|(_, _, k, _, w)| {
            w * hi_dr.values[k]
                * state.particle_density[k]
                * state.stat_factor[k]
                * hj_dr.values[k]
        })
        .sum())
}

/// Linearized Euler operator A = (1 - n T)^-1 v_eff (1 - n T) as a dense
/// matrix acting on vector fields (quadrature weights included).
pub fn linearized_euler_matrix(state: &GgeState) -> Result<DMatrix<f64>> {
    let n = state.grid.len();
    let mut nt = DMatrix::zeros(n, n);
    for j in 0..n {
        for (_, _, k, _, wk) in state.grid.iter() {
            nt[(j, k)] = state.occupation()[j] * state.kernel.matrix[(j, k)] * wk;
        }
    }
    let one_minus = DMatrix::identity(n, n) - &nt;
    let inv = one_minus
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| GhdError::SingularSolve("linearized Euler operator".into()))?;
    let mut v = DMatrix::zeros(n, n);
    for j in 0..n {
        v[(j, j)] = state.effective_velocity()[j];
    }
    Ok(inv * v * one_minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::spectral::{integrate, ParticleType, QuadratureScheme, Statistics};
    use approx::assert_abs_diff_eq;

    fn setup(
        model: ModelSpec,
        cutoff: f64,
        points: usize,
    ) -> (Arc<ModelSpec>, Arc<SpectralGrid>, Arc<KernelOperator>) {
        let model = Arc::new(model);
        let grid = model
            .build_grid(cutoff, points, QuadratureScheme::GaussLegendre)
            .unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        (model, grid, kernel)
    }

    fn thermal_ll(c: f64, mu: f64) -> (Arc<ModelSpec>, Arc<SpectralGrid>, Arc<KernelOperator>, GgeState) {
        let (model, grid, kernel) = setup(models::lieb_liniger(c).unwrap(), 10.0, 64);
        let w = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, p| p * p - mu).unwrap();
        let state = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(w).unwrap(),
            &TbaOptions::default(),
        )
        .unwrap();
        (model, grid, kernel, state)
    }

    #[test]
    fn free_fermion_gge_is_fermi_function() {
        let (model, grid, kernel) = setup(models::free_fermion_ising(1.0).unwrap(), 5.0, 32);
        let w = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, th| th * th).unwrap();
        let state = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(w).unwrap(),
            &TbaOptions::default(),
        )
        .unwrap();
        for (_, _, k, th, _) in grid.iter() {
            let expect = 1.0 / ((th * th).exp() + 1.0);
            assert_abs_diff_eq!(state.occupation()[k], expect, epsilon = 1e-13);
        }
    }

    #[test]
    fn free_classical_gge_is_boltzmann_weight() {
        let ty = vec![ParticleType::new("c", Statistics::ClassicalParticle, -3.0, 3.0).unwrap()];
        let grid = SpectralGrid::build(ty, 24, QuadratureScheme::GaussLegendre).unwrap();
        let model = Arc::new(models::ModelSpec::custom(
            "free_classical",
            vec![models::TypeFunctions {
                id: "c".into(),
                statistics: Statistics::ClassicalParticle,
                momentum: Arc::new(|v| v),
                energy: Arc::new(|v| 0.5 * v * v),
                momentum_deriv: Arc::new(|_| 1.0),
                energy_deriv: Arc::new(|v| v),
                momentum_deriv2: Arc::new(|_| 0.0),
                energy_deriv2: Arc::new(|_| 1.0),
            }],
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _| 1.0),
            true,
        ));
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let w = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, _| 2.0).unwrap();
        let state = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(w).unwrap(),
            &TbaOptions::default(),
        )
        .unwrap();
        for v in state.occupation() {
            assert_abs_diff_eq!(*v, (-2.0f64).exp(), epsilon = 1e-14);
        }
    }

    #[test]
    fn dress_is_identity_for_zero_kernel() {
        let (model, grid, kernel) = setup(models::free_fermion_ising(1.0).unwrap(), 4.0, 24);
        let state = GgeState::from_occupation(&model, &grid, &kernel, vec![0.4; grid.len()]).unwrap();
        let h = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, th| th.cos()).unwrap();
        let h_dr = state.dress(&h).unwrap();
        for (a, b) in h.values.iter().zip(&h_dr.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        // star-dressing vanishes without interaction
        let g = SpectralFunction::from_fn(&grid, Parity::VectorField, |_, th| 1.0 + th * th).unwrap();
        assert!(state.star_dress(&g).unwrap().sup_norm() < 1e-14);
    }

    #[test]
    fn constant_kernel_rank_one_closed_form() {
        // phi = 2 pi kappa on [-1, 1], n = 0.5: h_dr = 1 / (1 - 2 kappa n)
        let kappa = 0.1;
        let model = Arc::new(models::ModelSpec::custom(
            "rank_one",
            vec![models::TypeFunctions {
                id: "r".into(),
                statistics: Statistics::Fermion,
                momentum: Arc::new(|v| v),
                energy: Arc::new(|v| 0.5 * v * v),
                momentum_deriv: Arc::new(|_| 1.0),
                energy_deriv: Arc::new(|v| v),
                momentum_deriv2: Arc::new(|_| 0.0),
                energy_deriv2: Arc::new(|_| 1.0),
            }],
            Arc::new(move |_, _, _, _| TWO_PI * kappa),
            Arc::new(|_, _, _| 1.0),
            false,
        ));
        let ty = vec![ParticleType::new("r", Statistics::Fermion, -1.0, 1.0).unwrap()];
        let grid = SpectralGrid::build(ty, 16, QuadratureScheme::GaussLegendre).unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let state = GgeState::from_occupation(&model, &grid, &kernel, vec![0.5; grid.len()]).unwrap();
        let one = SpectralFunction::from_fn(&grid, Parity::VectorField, |_, _| 1.0).unwrap();
        let dressed = state.dress(&one).unwrap();
        for v in &dressed.values {
            assert_abs_diff_eq!(*v, 1.0 / 0.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn hard_rod_dressing_matches_rank_one_formula() {
        let d = 0.3;
        let (model, grid, kernel) = setup(models::hard_rods(d).unwrap(), 5.0, 48);
        let w = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, v| v * v).unwrap();
        let state = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(w).unwrap(),
            &TbaOptions::default(),
        )
        .unwrap();
        // constant kernel: h_dr = h - (d/pi) s with s = int n h / (1 + (d/pi) int n)
        let h = SpectralFunction::from_fn(&grid, Parity::VectorField, |_, v| 1.0 + 0.3 * v).unwrap();
        let n_f = SpectralFunction::new(grid.clone(), state.occupation().to_vec(), Parity::ScalarField)
            .unwrap();
        let int_nh = integrate(&n_f.mul(&h));
        let int_n = integrate(&n_f);
        let s = int_nh / (1.0 + (d / std::f64::consts::PI) * int_n);
        let dressed = state.dress(&h).unwrap();
        for (k, v) in dressed.values.iter().enumerate() {
            let expect = h.values[k] - (d / std::f64::consts::PI) * s;
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-11);
        }
    }

    #[test]
    fn dressed_momentum_deriv_equals_state_density() {
        let (_, grid, _, state) = thermal_ll(1.0, 2.0);
        let p_dr = state
            .dress_values(state.momentum_deriv_values(), Parity::VectorField)
            .unwrap();
        for (k, v) in p_dr.iter().enumerate() {
            assert_abs_diff_eq!(*v, TWO_PI * state.state_density()[k], epsilon = 1e-12);
        }
        // rho_p = n rho_s at machine precision
        for (_, _, k, _, _) in grid.iter() {
            assert_eq!(
                state.particle_density()[k],
                state.occupation()[k] * state.state_density()[k]
            );
        }
    }

    #[test]
    fn effective_velocity_recomputes() {
        let (_, _, _, state) = thermal_ll(1.0, 2.0);
        let p_dr = state
            .dress_values(state.momentum_deriv_values(), Parity::VectorField)
            .unwrap();
        let e_dr = state
            .dress_values(state.energy_deriv_values(), Parity::VectorField)
            .unwrap();
        for k in 0..p_dr.len() {
            assert_abs_diff_eq!(
                state.effective_velocity()[k],
                e_dr[k] / p_dr[k],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn lieb_liniger_occupation_against_independent_iteration() {
        // independent oracle: undamped fixed point on a uniform trapezoid
        // grid, different discretization and solver path
        let c = 1.0;
        let mu = 2.0;
        let n_osc = 1601;
        let cutoff = 10.0;
        let h = 2.0 * cutoff / (n_osc as f64 - 1.0);
        let ps: Vec<f64> = (0..n_osc).map(|i| -cutoff + h * i as f64).collect();
        let mut eps: Vec<f64> = ps.iter().map(|p| p * p - mu).collect();
        for _ in 0..10_000 {
            let mut next = vec![0.0; n_osc];
            for (j, pj) in ps.iter().enumerate() {
                let mut acc = 0.0;
                for (k, pk) in ps.iter().enumerate() {
                    let wk = if k == 0 || k == n_osc - 1 { 0.5 * h } else { h };
                    let phi = 2.0 * c / ((pk - pj).powi(2) + c * c);
                    acc += wk * phi * (-(-eps[k]).exp().ln_1p()) / TWO_PI;
                }
                next[j] = pj * pj - mu + acc;
            }
            let delta: f64 = next
                .iter()
                .zip(&eps)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            eps = next;
            if delta < 1e-14 {
                break;
            }
        }
        let oracle_n0 = 1.0 / (eps[n_osc / 2].exp() + 1.0); // p = 0 node
        // solver side on a uniform grid as well (different spacing and a
        // damped iteration): for this integrand the trapezoid rule is
        // superconvergent, so both sides reach the continuum value
        let model = Arc::new(models::lieb_liniger(c).unwrap());
        let grid = model
            .build_grid(cutoff, 401, QuadratureScheme::UniformTrapezoid)
            .unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let w = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, p| p * p - mu).unwrap();
        let state = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(w).unwrap(),
            &TbaOptions::default(),
        )
        .unwrap();
        let n0 = state.occupation()[200]; // p = 0 node
        assert_abs_diff_eq!(n0, oracle_n0, epsilon = 1e-10);
    }

    #[test]
    fn averages_vacuum_and_free_reduction() {
        let (model, grid, kernel) = setup(models::free_fermion_ising(1.0).unwrap(), 5.0, 48);
        let vac = GgeState::vacuum(&model, &grid, &kernel).unwrap();
        let h = model.charge_function(&grid, 0).unwrap();
        assert_eq!(average_density(&vac, &h).unwrap(), 0.0);
        assert_eq!(average_current(&vac, &h).unwrap(), 0.0);

        let w = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, th| th.cosh()).unwrap();
        let state = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(w).unwrap(),
            &TbaOptions::default(),
        )
        .unwrap();
        // free reduction: <q> = int dtheta/2pi p' n h
        let direct: f64 = grid
            .iter()
            .map(|(_, _, k, _, wq)| {
                wq * state.momentum_deriv_values()[k] * state.occupation()[k] * h.values[k] / TWO_PI
            })
            .sum();
        assert_abs_diff_eq!(average_density(&state, &h).unwrap(), direct, epsilon = 1e-13);
    }

    #[test]
    fn current_density_ratio_is_group_velocity_for_narrow_peak() {
        let (model, grid, kernel) = setup(models::free_fermion_ising(1.0).unwrap(), 5.0, 96);
        let theta0 = 0.8;
        let n: Vec<f64> = grid
            .iter()
            .map(|(_, _, _, th, _)| 0.3 * (-(th - theta0).powi(2) / (2.0 * 0.3f64.powi(2))).exp())
            .collect();
        let state = GgeState::from_occupation(&model, &grid, &kernel, n).unwrap();
        let h = model.charge_function(&grid, 0).unwrap();
        let ratio = average_current(&state, &h).unwrap() / average_density(&state, &h).unwrap();
        // independent quadrature of both one-point integrals
        let num: f64 = grid
            .iter()
            .map(|(ty, _, k, th, w)| {
                w * model.energy_deriv(ty, th) * state.occupation()[k] * h.values[k] / TWO_PI
            })
            .sum();
        let den: f64 = grid
            .iter()
            .map(|(ty, _, k, th, w)| {
                w * model.momentum_deriv(ty, th) * state.occupation()[k] * h.values[k] / TWO_PI
            })
            .sum();
        assert_abs_diff_eq!(ratio, num / den, epsilon = 1e-12);
        assert!((ratio - theta0.tanh()).abs() < 0.06);
    }

    #[test]
    fn state_derivative_identity() {
        let (_, grid, _, state) = thermal_ll(1.0, 2.0);
        let g = SpectralFunction::new(grid.clone(), state.momentum_deriv_values().to_vec(), Parity::VectorField)
            .unwrap();
        let h = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, p| p * p).unwrap();
        // zero perturbation gives (0, 0)
        let zero = SpectralFunction::zeros(&grid, Parity::ScalarField);
        let (l0, r0) = state_derivative_check(&state, &g, &h, &zero, 1e-5).unwrap();
        assert_eq!(r0, 0.0);
        assert!(l0.abs() < 1e-12);
        // smooth perturbation: finite difference matches the closed form
        let dn = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, p| {
            0.05 * (-(p - 0.5) * (p - 0.5)).exp()
        })
        .unwrap();
        let (lhs, rhs) = state_derivative_check(&state, &g, &h, &dn, 1e-5).unwrap();
        assert!(
            (lhs - rhs).abs() < 1e-6 * rhs.abs(),
            "dmu identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn free_model_derivative_identity_is_exact() {
        let (model, grid, kernel) = setup(models::free_fermion_ising(1.0).unwrap(), 4.0, 32);
        let state = GgeState::from_occupation(&model, &grid, &kernel, vec![0.3; grid.len()]).unwrap();
        let g = SpectralFunction::from_fn(&grid, Parity::VectorField, |_, th| th.cosh()).unwrap();
        let h = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, th| th.sinh()).unwrap();
        let dn = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, th| 0.1 * (-th * th).exp())
            .unwrap();
        let (lhs, rhs) = state_derivative_check(&state, &g, &h, &dn, 1e-5).unwrap();
        // no dressing: the integrand is linear in s, so only roundoff
        // amplified by 1/s separates the two sides
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn boson_condensation_rejected() {
        let model = Arc::new(models::ModelSpec::custom(
            "free_boson",
            vec![models::TypeFunctions {
                id: "b".into(),
                statistics: Statistics::Boson,
                momentum: Arc::new(|v| v),
                energy: Arc::new(|v| 0.5 * v * v),
                momentum_deriv: Arc::new(|_| 1.0),
                energy_deriv: Arc::new(|v| v),
                momentum_deriv2: Arc::new(|_| 0.0),
                energy_deriv2: Arc::new(|_| 1.0),
            }],
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _| 1.0),
            true,
        ));
        let ty = vec![ParticleType::new("b", Statistics::Boson, -2.0, 2.0).unwrap()];
        let grid = SpectralGrid::build(ty, 16, QuadratureScheme::GaussLegendre).unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let bad = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, v| v * v - 0.5).unwrap();
        let err = GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(bad).unwrap(),
            &TbaOptions::default(),
        );
        assert!(matches!(err, Err(GhdError::BoseCondensation { .. })));
        let good = SpectralFunction::from_fn(&grid, Parity::ScalarField, |_, v| v * v + 0.5).unwrap();
        assert!(GgeState::solve(
            &model,
            &grid,
            &kernel,
            &DrivingTerm::new(good).unwrap(),
            &TbaOptions::default()
        )
        .is_ok());
    }

    #[test]
    fn star_dress_consistency_interacting() {
        let (_, grid, _, state) = thermal_ll(1.0, 2.0);
        let g = SpectralFunction::from_fn(&grid, Parity::VectorField, |_, p| (0.3 * p).cos()).unwrap();
        let star = state.star_dress(&g).unwrap();
        let dressed = state.dress(&g).unwrap();
        for k in 0..grid.len() {
            assert!((star.values[k] + g.values[k] - dressed.values[k]).abs() < 1e-13);
        }
        let zero = SpectralFunction::zeros(&grid, Parity::VectorField);
        assert_eq!(state.star_dress(&zero).unwrap().sup_norm(), 0.0);
    }
}
