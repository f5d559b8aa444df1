//! Inhomogeneous fluid states and their evolution by characteristics.
//!
//! The GHD equation d_t n + v_eff d_x n = 0 is solved exactly through the
//! characteristic origin u(x, t; theta): n_t(x) = n_0(u) together with
//! the integrated state-density balance
//!
//!   int_{x0}^{x} rho_s(y, t) dy = int_{x0}^{u} rho_s(y, 0) dy
//!                                + v_eff(x0, 0) rho_s(x0, 0) t.
//!
//! The coupled system is iterated with under-relaxation: recompute n_t
//! from the first equation, rebuild state densities, update u by
//! inverting the cumulative-density balance. The left grid boundary acts
//! as the asymptotically stationary point x0; the state is extended
//! stationarily beyond both grid ends.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::{GhdError, Result};
use crate::interp::{cumulative_trapezoid, finite_diff_derivative, Extend, Pchip};
use crate::models::ModelSpec;
use crate::spectral::{KernelOperator, Parity, SpectralGrid};
use crate::tba::{DrivingTerm, GgeState, TbaOptions};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Spatial profile of the driving term w(x; theta).
#[derive(Debug, Clone)]
pub enum ProfileShape {
    Constant { value: f64 },
    /// left + (right - left) (1 + tanh((x - center)/width)) / 2
    TanhWall { left: f64, right: f64, center: f64, width: f64 },
    /// base + amplitude exp(-(x - center)^2 / (2 width^2))
    GaussianBump { base: f64, amplitude: f64, center: f64, width: f64 },
}

impl ProfileShape {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            ProfileShape::Constant { value } => value,
            ProfileShape::TanhWall { left, right, center, width } => {
                left + 0.5 * (right - left) * (1.0 + ((x - center) / width).tanh())
            }
            ProfileShape::GaussianBump { base, amplitude, center, width } => {
                base + amplitude * (-(x - center).powi(2) / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ProfileShape::Constant { .. } => 0.0,
            ProfileShape::TanhWall { left, right, center, width } => {
                let c = ((x - center) / width).cosh();
                0.5 * (right - left) / (width * c * c)
            }
            ProfileShape::GaussianBump { base: _, amplitude, center, width } => {
                amplitude
                    * (-(x - center).powi(2) / (2.0 * width * width)).exp()
                    * (-(x - center) / (width * width))
            }
        }
    }
}

/// Lagrange parameters beta_i(x) paired with charge indices; defines the
/// initial state's driving term w(x; theta) = sum_i beta_i(x) h_i(theta).
#[derive(Debug)]
pub enum DrivingProfile {
    Parametric {
        model: Arc<ModelSpec>,
        charges: Vec<(i64, ProfileShape)>,
    },
    /// Driving-term values given directly on the (x, node) lattice.
    Tabulated { xs: Vec<f64>, values: Vec<Vec<f64>> },
}

impl DrivingProfile {
    /// Driving-term values on the grid nodes at position x.
    pub fn w_row(&self, grid: &SpectralGrid, x: f64) -> Vec<f64> {
        match self {
            DrivingProfile::Parametric { model, charges } => grid
                .iter()
                .map(|(ty, _, _, th, _)| {
                    charges
                        .iter()
                        .map(|(i, shape)| shape.value(x) * model.charge_eigenvalue(*i, ty, th))
                        .sum()
                })
                .collect(),
            DrivingProfile::Tabulated { xs, values } => (0..grid.len())
                .map(|k| {
                    let col: Vec<f64> = values.iter().map(|row| row[k]).collect();
                    Pchip::new(xs, &col, Extend::Flat).eval(x)
                })
                .collect(),
        }
    }

    /// Spatial derivative of the driving term on the grid nodes.
    pub fn dw_row(&self, grid: &SpectralGrid, x: f64) -> Vec<f64> {
        match self {
            DrivingProfile::Parametric { model, charges } => grid
                .iter()
                .map(|(ty, _, _, th, _)| {
                    charges
                        .iter()
                        .map(|(i, shape)| shape.derivative(x) * model.charge_eigenvalue(*i, ty, th))
                        .sum()
                })
                .collect(),
            DrivingProfile::Tabulated { xs, values } => (0..grid.len())
                .map(|k| {
                    let col: Vec<f64> = values.iter().map(|row| row[k]).collect();
                    Pchip::new(xs, &col, Extend::Flat).derivative(x)
                })
                .collect(),
        }
    }
}

/// A fluid state on a time slice: a GGE per spatial cell.
pub struct FluidState {
    pub model: Arc<ModelSpec>,
    pub grid: Arc<SpectralGrid>,
    pub kernel: Arc<KernelOperator>,
    pub xs: Vec<f64>,
    pub cells: Vec<GgeState>,
    pub time: f64,
    pub profile: Option<Arc<DrivingProfile>>,
    acceleration: OnceLock<std::result::Result<Vec<Vec<f64>>, GhdError>>,
}

impl std::fmt::Debug for FluidState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FluidState")
            .field("cells", &self.xs.len())
            .field("time", &self.time)
            .finish()
    }
}

impl FluidState {
    /// Solve the GGE in every cell of a profile-defined initial state.
    pub fn from_profile(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
        xs: Vec<f64>,
        profile: Arc<DrivingProfile>,
        opts: &TbaOptions,
    ) -> Result<FluidState> {
        assert!(xs.windows(2).all(|w| w[1] > w[0]), "x grid must increase");
        let mut cells = Vec::with_capacity(xs.len());
        let mut seed: Option<Vec<f64>> = None;
        for &x in &xs {
            let w = profile.w_row(grid, x);
            let driving = DrivingTerm::new(crate::spectral::SpectralFunction::new(
                grid.clone(),
                w,
                Parity::ScalarField,
            )?)?;
            let state =
                GgeState::solve_seeded(model, grid, kernel, &driving, opts, seed.as_deref())?;
            seed = Some(state.pseudo_energy().to_vec());
            cells.push(state);
        }
        Ok(FluidState {
            model: model.clone(),
            grid: grid.clone(),
            kernel: kernel.clone(),
            xs,
            cells,
            time: 0.0,
            profile: Some(profile),
            acceleration: OnceLock::new(),
        })
    }

    /// Assemble a state from per-cell occupation rows.
    pub fn from_occupation_rows(
        model: &Arc<ModelSpec>,
        grid: &Arc<SpectralGrid>,
        kernel: &Arc<KernelOperator>,
        xs: Vec<f64>,
        rows: Vec<Vec<f64>>,
        time: f64,
    ) -> Result<FluidState> {
        let cells: Vec<GgeState> = rows
            .into_par_iter()
            .map(|row| GgeState::from_occupation(model, grid, kernel, row))
            .collect::<Result<_>>()?;
        Ok(FluidState {
            model: model.clone(),
            grid: grid.clone(),
            kernel: kernel.clone(),
            xs,
            cells,
            time,
            profile: None,
            acceleration: OnceLock::new(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.xs.len()
    }

    /// Index of the nearest grid node to x, with its distance.
    pub fn nearest_cell(&self, x: f64) -> (usize, f64) {
        let m = match self.xs.partition_point(|&v| v < x) {
            0 => 0,
            k if k >= self.xs.len() => self.xs.len() - 1,
            k => {
                if (self.xs[k] - x).abs() < (x - self.xs[k - 1]).abs() {
                    k
                } else {
                    k - 1
                }
            }
        };
        (m, (self.xs[m] - x).abs())
    }

    /// Occupation row interpolated at position x (stationary extension).
    pub fn occupation_at(&self, x: f64) -> Vec<f64> {
        let (m, d) = self.nearest_cell(x);
        if d == 0.0 {
            return self.cells[m].occupation().to_vec();
        }
        (0..self.grid.len())
            .map(|k| {
                let col: Vec<f64> = self.cells.iter().map(|c| c.occupation()[k]).collect();
                Pchip::new(&self.xs, &col, Extend::Flat).eval(x)
            })
            .collect()
    }

    /// Local GGE at an arbitrary position: the cell itself on a node,
    /// otherwise rebuilt from the interpolated occupation.
    pub fn state_at(&self, x: f64) -> Result<LocalState<'_>> {
        let (m, d) = self.nearest_cell(x);
        let span = self.xs[self.xs.len() - 1] - self.xs[0];
        if d <= 1e-12 * span.max(1.0) {
            return Ok(LocalState::Borrowed(&self.cells[m]));
        }
        let row = self.occupation_at(x);
        Ok(LocalState::Owned(GgeState::from_occupation(
            &self.model,
            &self.grid,
            &self.kernel,
            row,
        )?))
    }

    /// Effective acceleration d_x n / (2 pi rho_p f) on the whole lattice,
    /// spatial derivative by finite differences. Where both the gradient
    /// and the particle weight vanish the ratio is set to zero; a gradient
    /// without weight is an error.
    pub fn acceleration_field(&self) -> Result<&Vec<Vec<f64>>> {
        self.acceleration
            .get_or_init(|| {
                let mm = self.xs.len();
                let kk = self.grid.len();
                let mut field = vec![vec![0.0; kk]; mm];
                for k in 0..kk {
                    let col: Vec<f64> = self.cells.iter().map(|c| c.occupation()[k]).collect();
                    let dcol = finite_diff_derivative(&self.xs, &col);
                    for m in 0..mm {
                        let weight = TWO_PI
                            * self.cells[m].particle_density()[k]
                            * self.cells[m].stat_factor()[k];
                        if weight.abs() < 1e-14 {
                            if dcol[m].abs() > 1e-10 {
                                return Err(GhdError::AccelerationSingular { x_index: m, node: k });
                            }
                            field[m][k] = 0.0;
                        } else {
                            field[m][k] = dcol[m] / weight;
                        }
                    }
                }
                Ok(field)
            })
            .as_ref()
            .map_err(|e| e.clone())
    }

    pub fn acceleration_row(&self, x_index: usize) -> Result<Vec<f64>> {
        Ok(self.acceleration_field()?[x_index].clone())
    }

    /// Sup deviation of the occupation between the two outermost cells on
    /// each side; a diagnostic for the asymptotically-stationary ends.
    pub fn boundary_flatness(&self) -> (f64, f64) {
        let kk = self.grid.len();
        let m = self.xs.len();
        let mut left = 0.0f64;
        let mut right = 0.0f64;
        for k in 0..kk {
            left = left.max((self.cells[0].occupation()[k] - self.cells[1].occupation()[k]).abs());
            right = right
                .max((self.cells[m - 1].occupation()[k] - self.cells[m - 2].occupation()[k]).abs());
        }
        (left, right)
    }
}

/// A cell state either borrowed from the lattice or rebuilt off-grid.
pub enum LocalState<'a> {
    Borrowed(&'a GgeState),
    Owned(GgeState),
}

impl std::ops::Deref for LocalState<'_> {
    type Target = GgeState;

    fn deref(&self) -> &GgeState {
        match self {
            LocalState::Borrowed(s) => s,
            LocalState::Owned(s) => s,
        }
    }
}

/// Characteristics evolution controls.
#[derive(Debug, Clone)]
pub struct EvolveOptions {
    /// Sup-norm tolerance on the characteristic origin u.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Under-relaxation factor for the u update.
    pub relaxation: f64,
    /// Allowed occupation drift at the left boundary after evolution.
    pub boundary_tolerance: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            tolerance: 1e-10,
            max_sweeps: 600,
            relaxation: 0.5,
            boundary_tolerance: 1e-8,
        }
    }
}

/// The characteristic origin u(x, t; theta) and its derivatives on the
/// (x, node) lattice.
#[derive(Debug)]
pub struct Characteristics {
    pub xs: Vec<f64>,
    pub time: f64,
    pub grid: Arc<SpectralGrid>,
    /// u[m][k]: time-0 position feeding (x_m, t) at node k.
    pub origin: Vec<Vec<f64>>,
    /// d u / d x, from the density ratio rho_s(x,t)/rho_s(u,0).
    pub d_origin_dx: Vec<Vec<f64>>,
    /// d u / d theta, from the theta-differentiated balance; empty until
    /// [`u_derivatives`] runs.
    pub d_origin_dtheta: Vec<Vec<f64>>,
}

impl Characteristics {
    pub fn has_derivatives(&self) -> bool {
        !self.d_origin_dtheta.is_empty()
    }

    /// Interpolate a per-(x, node) field at an off-grid position x.
    pub fn row_at_x(field: &[Vec<f64>], xs: &[f64], x: f64) -> Vec<f64> {
        let kk = field[0].len();
        (0..kk)
            .map(|k| {
                let col: Vec<f64> = field.iter().map(|row| row[k]).collect();
                Pchip::new(xs, &col, Extend::Linear).eval(x)
            })
            .collect()
    }
}

struct InitialData {
    n0: Vec<Pchip>,
    rho0: Vec<Pchip>,
    /// cumulative state density per node, with linear extension slopes
    b0: Vec<CumulativeCurve>,
}

struct CumulativeCurve {
    xs: Vec<f64>,
    vals: Vec<f64>,
    slope_left: f64,
    slope_right: f64,
}

impl CumulativeCurve {
    fn invert(&self, target: f64) -> f64 {
        let n = self.vals.len();
        if target <= self.vals[0] {
            return self.xs[0] + (target - self.vals[0]) / self.slope_left;
        }
        if target >= self.vals[n - 1] {
            return self.xs[n - 1] + (target - self.vals[n - 1]) / self.slope_right;
        }
        let i = match self.vals.partition_point(|&v| v <= target) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let frac = (target - self.vals[i]) / (self.vals[i + 1] - self.vals[i]);
        self.xs[i] + frac * (self.xs[i + 1] - self.xs[i])
    }
}

fn initial_data(fluid0: &FluidState) -> InitialData {
    let kk = fluid0.grid.len();
    let mm = fluid0.xs.len();
    let mut n0 = Vec::with_capacity(kk);
    let mut rho0 = Vec::with_capacity(kk);
    let mut b0 = Vec::with_capacity(kk);
    for k in 0..kk {
        let ncol: Vec<f64> = (0..mm).map(|m| fluid0.cells[m].occupation()[k]).collect();
        let rcol: Vec<f64> = (0..mm).map(|m| fluid0.cells[m].state_density()[k]).collect();
        let cum = cumulative_trapezoid(&fluid0.xs, &rcol);
        b0.push(CumulativeCurve {
            xs: fluid0.xs.clone(),
            vals: cum,
            slope_left: rcol[0],
            slope_right: rcol[mm - 1],
        });
        n0.push(Pchip::new(&fluid0.xs, &ncol, Extend::Flat));
        rho0.push(Pchip::new(&fluid0.xs, &rcol, Extend::Flat));
    }
    InitialData { n0, rho0, b0 }
}

/// State density for one occupation row without building a full state.
fn state_density_row(
    grid: &SpectralGrid,
    kernel: &KernelOperator,
    p_prime: &[f64],
    occupation: &[f64],
) -> Result<Vec<f64>> {
    let n = grid.len();
    let mut m = nalgebra::DMatrix::identity(n, n);
    for j in 0..n {
        for (_, _, k, _, wk) in grid.iter() {
            m[(j, k)] -= kernel.matrix[(j, k)] * occupation[k] * wk;
        }
    }
    let sol = m
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(p_prime))
        .ok_or_else(|| GhdError::DressingSingular("state density".into()))?;
    if sol.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(GhdError::DressingSingular(
            "state density not positive".into(),
        ));
    }
    Ok(sol.iter().map(|v| v / TWO_PI).collect())
}

/// Evolve an initial fluid state to time t by characteristics.
///
/// Returns the evolved state and the characteristic origin with d u / d x
/// filled and checked positive. The theta derivative is computed by
/// [`u_derivatives`].
pub fn evolve(
    fluid0: &FluidState,
    t: f64,
    opts: &EvolveOptions,
) -> Result<(FluidState, Characteristics)> {
    if t < 0.0 {
        return Err(GhdError::InvalidParameter("evolution time < 0".into()));
    }
    let mm = fluid0.xs.len();
    let kk = fluid0.grid.len();
    if mm < 3 {
        return Err(GhdError::GridTooSmall("need at least 3 spatial nodes".into()));
    }
    let init = initial_data(fluid0);
    let p_prime = fluid0.cells[0].momentum_deriv_values().to_vec();

    if t == 0.0 {
        let rows: Vec<Vec<f64>> = fluid0.cells.iter().map(|c| c.occupation().to_vec()).collect();
        let fluid_t = FluidState::from_occupation_rows(
            &fluid0.model,
            &fluid0.grid,
            &fluid0.kernel,
            fluid0.xs.clone(),
            rows,
            0.0,
        )?;
        let origin: Vec<Vec<f64>> = fluid0.xs.iter().map(|&x| vec![x; kk]).collect();
        let ones = vec![vec![1.0; kk]; mm];
        return Ok((
            fluid_t,
            Characteristics {
                xs: fluid0.xs.clone(),
                time: 0.0,
                grid: fluid0.grid.clone(),
                origin,
                d_origin_dx: ones,
                d_origin_dtheta: Vec::new(),
            },
        ));
    }

    // left-boundary flux constant c0 = v_eff(x0, 0) rho_s(x0, 0)
    let c0: Vec<f64> = (0..kk)
        .map(|k| fluid0.cells[0].effective_velocity()[k] * fluid0.cells[0].state_density()[k])
        .collect();

    // initial guess: transport with the local initial effective velocity
    let mut origin: Vec<Vec<f64>> = (0..mm)
        .map(|m| {
            (0..kk)
                .map(|k| fluid0.xs[m] - fluid0.cells[m].effective_velocity()[k] * t)
                .collect()
        })
        .collect();

    let mut rho_t: Vec<Vec<f64>> = vec![vec![0.0; kk]; mm];
    let mut n_rows: Vec<Vec<f64>> = vec![vec![0.0; kk]; mm];
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    for sweep in 0..opts.max_sweeps {
        sweeps = sweep + 1;
        // (a) transport the occupation along current characteristics
        for m in 0..mm {
            for k in 0..kk {
                n_rows[m][k] = init.n0[k].eval(origin[m][k]);
            }
        }
        // (b) rebuild state densities on the new slice
        let rho_new: Vec<Result<Vec<f64>>> = n_rows
            .par_iter()
            .map(|row| state_density_row(&fluid0.grid, &fluid0.kernel, &p_prime, row))
            .collect();
        for (m, r) in rho_new.into_iter().enumerate() {
            rho_t[m] = r?;
        }
        // (c) update u from the cumulative balance
        let mut bt = vec![vec![0.0; mm]; kk];
        for k in 0..kk {
            let col: Vec<f64> = (0..mm).map(|m| rho_t[m][k]).collect();
            let cum = cumulative_trapezoid(&fluid0.xs, &col);
            bt[k].copy_from_slice(&cum);
        }
        residual = 0.0;
        for m in 0..mm {
            for k in 0..kk {
                let target = bt[k][m] - c0[k] * t;
                let u_new = init.b0[k].invert(target);
                let delta = u_new - origin[m][k];
                residual = residual.max(delta.abs());
                origin[m][k] += opts.relaxation * delta;
            }
        }
        if residual < opts.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GhdError::EvolveNonConvergence { sweeps, residual });
    }

    // final transported occupation and full cells
    for m in 0..mm {
        for k in 0..kk {
            n_rows[m][k] = init.n0[k].eval(origin[m][k]);
        }
    }
    let fluid_t = FluidState::from_occupation_rows(
        &fluid0.model,
        &fluid0.grid,
        &fluid0.kernel,
        fluid0.xs.clone(),
        n_rows.clone(),
        t,
    )?;

    // boundary stationarity at x0
    let mut drift = 0.0f64;
    for k in 0..kk {
        drift = drift.max((n_rows[0][k] - fluid0.cells[0].occupation()[k]).abs());
    }
    if drift > opts.boundary_tolerance {
        return Err(GhdError::BoundaryNotStationary { deviation: drift });
    }

    // d u / d x = rho_s(x, t) / rho_s(u, 0), positive by invertibility
    let mut d_dx = vec![vec![0.0; kk]; mm];
    for m in 0..mm {
        for k in 0..kk {
            let denom = init.rho0[k].eval(origin[m][k]);
            if denom <= 0.0 {
                return Err(GhdError::DressingSingular(
                    "initial state density vanished along a characteristic".into(),
                ));
            }
            let v = fluid_t.cells[m].state_density()[k] / denom;
            if v <= 0.0 {
                return Err(GhdError::NotInvertible {
                    x_index: m,
                    node: k,
                    value: v,
                });
            }
            d_dx[m][k] = v;
        }
    }

    Ok((
        fluid_t,
        Characteristics {
            xs: fluid0.xs.clone(),
            time: t,
            grid: fluid0.grid.clone(),
            origin,
            d_origin_dx: d_dx,
            d_origin_dtheta: Vec::new(),
        },
    ))
}

/// Fill the characteristic derivatives: d u / d x from the state-density
/// ratio and d u / d theta from the theta-differentiated balance,
///
///   u' = [ int_{x0}^{x} d_th rho_s(y, t) dy - int_{x0}^{u} d_th rho_s(y, 0) dy
///          - d_th(v_eff rho_s)(x0, 0) t ] / rho_s(u, 0),
///
/// with the rapidity derivatives taken per cell by the grid's
/// differentiation rule, not by finite differences of u itself.
pub fn u_derivatives(
    chars: &mut Characteristics,
    fluid0: &FluidState,
    fluid_t: &FluidState,
) -> Result<()> {
    let mm = chars.xs.len();
    let kk = chars.grid.len();
    let init = initial_data(fluid0);

    // rapidity-differentiated state densities on both slices
    let drho_t: Vec<Vec<f64>> = fluid_t
        .cells
        .iter()
        .map(|c| chars.grid.differentiate(c.state_density()))
        .collect();
    let drho_0: Vec<Vec<f64>> = fluid0
        .cells
        .iter()
        .map(|c| chars.grid.differentiate(c.state_density()))
        .collect();

    // cumulative integrals per node
    let mut at = vec![vec![0.0; mm]; kk];
    let mut a0_curves = Vec::with_capacity(kk);
    for k in 0..kk {
        let col_t: Vec<f64> = (0..mm).map(|m| drho_t[m][k]).collect();
        at[k].copy_from_slice(&cumulative_trapezoid(&chars.xs, &col_t));
        let col_0: Vec<f64> = (0..mm).map(|m| drho_0[m][k]).collect();
        let cum0 = cumulative_trapezoid(&chars.xs, &col_0);
        a0_curves.push(Pchip::new(&chars.xs, &cum0, Extend::Linear));
    }

    // boundary flux derivative d_th (v_eff rho_s)(x0, 0) = d_th (E')dr / 2pi
    let e_dr0 = fluid0.cells[0].dress_values(
        fluid0.cells[0].energy_deriv_values(),
        Parity::VectorField,
    )?;
    let flux0: Vec<f64> = e_dr0.iter().map(|v| v / TWO_PI).collect();
    let dflux0 = chars.grid.differentiate(&flux0);

    let t = chars.time;
    let mut d_dth = vec![vec![0.0; kk]; mm];
    let mut d_dx = vec![vec![0.0; kk]; mm];
    for m in 0..mm {
        for k in 0..kk {
            let u = chars.origin[m][k];
            let rho_u = init.rho0[k].eval(u);
            if rho_u <= 0.0 {
                return Err(GhdError::DressingSingular(
                    "initial state density vanished along a characteristic".into(),
                ));
            }
            d_dth[m][k] = (at[k][m] - a0_curves[k].eval(u) - dflux0[k] * t) / rho_u;
            let v = fluid_t.cells[m].state_density()[k] / rho_u;
            if v <= 0.0 {
                return Err(GhdError::NotInvertible {
                    x_index: m,
                    node: k,
                    value: v,
                });
            }
            d_dx[m][k] = v;
        }
    }
    chars.d_origin_dx = d_dx;
    chars.d_origin_dtheta = d_dth;
    Ok(())
}

/// [`evolve`] followed by [`u_derivatives`].
pub fn evolve_full(
    fluid0: &FluidState,
    t: f64,
    opts: &EvolveOptions,
) -> Result<(FluidState, Characteristics)> {
    let (fluid_t, mut chars) = evolve(fluid0, t, opts)?;
    if t > 0.0 {
        u_derivatives(&mut chars, fluid0, &fluid_t)?;
    } else {
        chars.d_origin_dtheta = vec![vec![0.0; fluid0.grid.len()]; fluid0.xs.len()];
    }
    Ok((fluid_t, chars))
}

/// One solution of u(x, t; theta) = y.
#[derive(Debug, Clone)]
pub struct CharRoot {
    pub type_index: usize,
    pub rapidity: f64,
    /// d u / d theta at the root.
    pub slope: f64,
}

/// Threshold below which a characteristic root counts as degenerate.
pub const DEGENERATE_SLOPE: f64 = 1e-10;

fn roots_from_rows(
    grid: &SpectralGrid,
    u_row: &[f64],
    slope_row: &[f64],
    y: f64,
) -> Result<Vec<CharRoot>> {
    let mut out = Vec::new();
    for ty in 0..grid.n_types() {
        for r in grid.roots_in_type(u_row, ty, y, 1e-10) {
            let slope = grid.interpolate(slope_row, ty, r);
            if slope.abs() < DEGENERATE_SLOPE {
                return Err(GhdError::DegenerateCharacteristic {
                    rapidity: r,
                    slope,
                });
            }
            out.push(CharRoot {
                type_index: ty,
                rapidity: r,
                slope,
            });
        }
    }
    Ok(out)
}

/// All rapidities reaching (x_index, t) from y, with their |u'| weights.
pub fn root_set(chars: &Characteristics, x_index: usize, y: f64) -> Result<Vec<CharRoot>> {
    assert!(chars.has_derivatives(), "compute u_derivatives first");
    roots_from_rows(
        &chars.grid,
        &chars.origin[x_index],
        &chars.d_origin_dtheta[x_index],
        y,
    )
}

/// As [`root_set`] at an arbitrary position x (fields interpolated in x).
pub fn root_set_at_x(chars: &Characteristics, x: f64, y: f64) -> Result<Vec<CharRoot>> {
    assert!(chars.has_derivatives(), "compute u_derivatives first");
    let u_row = Characteristics::row_at_x(&chars.origin, &chars.xs, x);
    let s_row = Characteristics::row_at_x(&chars.d_origin_dtheta, &chars.xs, x);
    roots_from_rows(&chars.grid, &u_row, &s_row, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::spectral::QuadratureScheme;
    use approx::assert_abs_diff_eq;

    fn uniform_xs(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| a + (b - a) * i as f64 / (n as f64 - 1.0))
            .collect()
    }

    fn ll_setup(
        profile: DrivingProfile,
        nx: usize,
        span: f64,
    ) -> (Arc<ModelSpec>, FluidState) {
        let model = Arc::new(models::lieb_liniger(1.0).unwrap());
        let grid = model.build_grid(8.0, 48, QuadratureScheme::GaussLegendre).unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let fluid = FluidState::from_profile(
            &model,
            &grid,
            &kernel,
            uniform_xs(-span, span, nx),
            Arc::new(profile),
            &TbaOptions::default(),
        )
        .unwrap();
        (model, fluid)
    }

    fn ll_constant() -> (Arc<ModelSpec>, FluidState) {
        let model = Arc::new(models::lieb_liniger(1.0).unwrap());
        let profile = DrivingProfile::Parametric {
            model: model.clone(),
            charges: vec![(3, ProfileShape::Constant { value: 1.0 }), (1, ProfileShape::Constant { value: -2.0 })],
        };
        ll_setup(profile, 61, 10.0)
    }

    fn ll_bump(nx: usize, span: f64) -> (Arc<ModelSpec>, FluidState) {
        let model = Arc::new(models::lieb_liniger(1.0).unwrap());
        let profile = DrivingProfile::Parametric {
            model: model.clone(),
            charges: vec![
                (3, ProfileShape::GaussianBump { base: 1.0, amplitude: 0.4, center: 0.0, width: 1.5 }),
                (1, ProfileShape::Constant { value: -2.0 }),
            ],
        };
        ll_setup(profile, nx, span)
    }

    #[test]
    fn zero_time_is_identity() {
        let (_, fluid) = ll_bump(41, 8.0);
        let (fluid_t, chars) = evolve_full(&fluid, 0.0, &EvolveOptions::default()).unwrap();
        for (m, &x) in chars.xs.iter().enumerate() {
            for k in 0..fluid.grid.len() {
                assert_eq!(chars.origin[m][k], x);
                assert_eq!(chars.d_origin_dx[m][k], 1.0);
                assert_eq!(chars.d_origin_dtheta[m][k], 0.0);
                assert_abs_diff_eq!(
                    fluid_t.cells[m].occupation()[k],
                    fluid.cells[m].occupation()[k],
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn homogeneous_state_translates_by_effective_velocity() {
        let (_, fluid) = ll_constant();
        let t = 0.7;
        let (fluid_t, mut chars) = evolve(&fluid, t, &EvolveOptions::default()).unwrap();
        let v = fluid.cells[30].effective_velocity();
        for m in [10usize, 30, 50] {
            for k in 0..fluid.grid.len() {
                let expect = fluid.xs[m] - v[k] * t;
                assert!(
                    (chars.origin[m][k] - expect).abs() < 5e-9,
                    "u mismatch at m={m} k={k}: {} vs {expect}",
                    chars.origin[m][k]
                );
                assert_abs_diff_eq!(chars.d_origin_dx[m][k], 1.0, epsilon = 1e-9);
                assert_abs_diff_eq!(
                    fluid_t.cells[m].occupation()[k],
                    fluid.cells[m].occupation()[k],
                    epsilon = 1e-10
                );
            }
        }
        // u' = -(v_eff)'(theta) t, with the velocity derivative taken in
        // the discretely consistent form (d(flux) - v d(rho)) / rho, since
        // the spectral differentiation does not obey the Leibniz rule
        u_derivatives(&mut chars, &fluid, &fluid_t).unwrap();
        let rho = fluid.cells[0].state_density();
        let flux: Vec<f64> = (0..fluid.grid.len()).map(|k| v[k] * rho[k]).collect();
        let dflux = fluid.grid.differentiate(&flux);
        let drho = fluid.grid.differentiate(rho);
        for k in 0..fluid.grid.len() {
            let dv = (dflux[k] - v[k] * drho[k]) / rho[k];
            assert!(
                (chars.d_origin_dtheta[30][k] + dv * t).abs() < 1e-7 * (1.0 + dv.abs() * t),
                "u' mismatch at k={k}: {} vs {}",
                chars.d_origin_dtheta[30][k],
                -dv * t
            );
        }
    }

    #[test]
    fn free_model_characteristics_are_exact() {
        let model = Arc::new(models::free_fermion_ising(1.0).unwrap());
        let grid = model.build_grid(5.0, 32, QuadratureScheme::GaussLegendre).unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let profile = DrivingProfile::Parametric {
            model: model.clone(),
            charges: vec![(0, ProfileShape::GaussianBump { base: 1.0, amplitude: 0.3, center: 0.0, width: 1.0 })],
        };
        let fluid = FluidState::from_profile(
            &model,
            &grid,
            &kernel,
            uniform_xs(-8.0, 8.0, 81),
            Arc::new(profile),
            &TbaOptions::default(),
        )
        .unwrap();
        let t = 1.3;
        let (fluid_t, chars) = evolve(&fluid, t, &EvolveOptions::default()).unwrap();
        for m in [5usize, 40, 70] {
            for (ty, _, k, th, _) in grid.iter() {
                let expect = fluid.xs[m] - th.tanh() * t;
                assert!(
                    (chars.origin[m][k] - expect).abs() < 1e-9,
                    "free u at m={m} th={th}"
                );
                let n_expect = grid.interpolate(
                    &fluid.occupation_at(expect),
                    ty,
                    th,
                );
                assert!((fluid_t.cells[m].occupation()[k] - n_expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bump_state_invertible_and_root_finding() {
        let (_, fluid) = ll_bump(161, 16.0);
        let t = 1.0;
        let (fluid_t, mut chars) = evolve(&fluid, t, &EvolveOptions::default()).unwrap();
        u_derivatives(&mut chars, &fluid, &fluid_t).unwrap();
        // d u / d x > 0 everywhere
        for m in 0..chars.xs.len() {
            for k in 0..fluid.grid.len() {
                assert!(chars.d_origin_dx[m][k] > 0.0);
            }
        }
        // monotone v_eff: u' < 0 at positive time
        for m in 0..chars.xs.len() {
            for k in 0..fluid.grid.len() {
                assert!(
                    chars.d_origin_dtheta[m][k] < 0.0,
                    "u' not negative at m={m} k={k}: {}",
                    chars.d_origin_dtheta[m][k]
                );
            }
        }
        // roots recover u: u(x, t; root) = y
        let m = 70;
        let y = chars.origin[m][24];
        let roots = root_set(&chars, m, y).unwrap();
        assert_eq!(roots.len(), 1);
        let r = &roots[0];
        let u_at_root = fluid.grid.interpolate(&chars.origin[m], r.type_index, r.rapidity);
        assert!((u_at_root - y).abs() < 1e-9);
        // far-away target has no roots
        assert!(root_set(&chars, m, 1e3).unwrap().is_empty());
    }

    #[test]
    fn homogeneous_root_inverts_linear_relation() {
        let (_, fluid) = ll_constant();
        let t = 0.9;
        let (fluid_t, mut chars) = evolve(&fluid, t, &EvolveOptions::default()).unwrap();
        u_derivatives(&mut chars, &fluid, &fluid_t).unwrap();
        let m = 40;
        let k_target = 18;
        let theta0 = fluid.grid.rapidity(k_target);
        let v = fluid.cells[0].effective_velocity()[k_target];
        let y = fluid.xs[m] - v * t;
        let roots = root_set(&chars, m, y).unwrap();
        assert_eq!(roots.len(), 1);
        assert!((roots[0].rapidity - theta0).abs() < 1e-7);
    }

    #[test]
    fn acceleration_vanishes_for_homogeneous_state() {
        let (_, fluid) = ll_constant();
        let field = fluid.acceleration_field().unwrap();
        for row in field {
            for v in row {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn acceleration_two_forms_agree() {
        let (_, fluid) = ll_bump(161, 10.0);
        // second form: -d_x eps / (2 pi rho_s) with eps differentiated
        // across cells by the same stencil; the two finite-difference
        // errors differ at O(dx^2), so compare on occupied nodes only
        let field = fluid.acceleration_field().unwrap();
        let kk = fluid.grid.len();
        let mid_cell = fluid.xs.len() / 2;
        for k in 0..kk {
            if fluid.cells[mid_cell].occupation()[k] < 1e-6 {
                continue;
            }
            let eps_col: Vec<f64> = fluid.cells.iter().map(|c| c.pseudo_energy()[k]).collect();
            let deps = finite_diff_derivative(&fluid.xs, &eps_col);
            for m in (10..fluid.xs.len() - 10).step_by(23) {
                let alt = -deps[m] / (TWO_PI * fluid.cells[m].state_density()[k]);
                let scale = field
                    .iter()
                    .map(|r| r[k].abs())
                    .fold(0.0f64, f64::max);
                let rel = (field[m][k] - alt).abs() / scale.max(1e-30);
                assert!(rel < 1e-2, "acceleration forms disagree: {} vs {alt}", field[m][k]);
            }
        }
        // sign: occupation increasing in x with positive weight gives a > 0
        let mid = fluid.xs.len() / 2;
        let k = kk / 2;
        let rising = fluid.cells[mid - 20].occupation()[k] < fluid.cells[mid].occupation()[k];
        let probe = field[mid - 10][k];
        if rising {
            assert!(probe > 0.0);
        }
    }

    #[test]
    fn boundary_drift_detected() {
        // bump close to the left edge: transported occupation reaches x0
        let model = Arc::new(models::lieb_liniger(1.0).unwrap());
        let profile = DrivingProfile::Parametric {
            model: model.clone(),
            charges: vec![
                (3, ProfileShape::GaussianBump { base: 1.0, amplitude: 0.5, center: -3.0, width: 1.2 }),
                (1, ProfileShape::Constant { value: -2.0 }),
            ],
        };
        let (_, fluid) = ll_setup(profile, 41, 4.0);
        let err = evolve(&fluid, 2.0, &EvolveOptions::default());
        assert!(
            matches!(err, Err(GhdError::BoundaryNotStationary { .. })),
            "expected boundary drift, got {err:?}"
        );
    }
}
