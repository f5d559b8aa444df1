//! The Euler-scale propagator bringing a spectral function from (y, 0)
//! to (x, t), split into a direct part supported on characteristic roots
//! and an indirect field obtained from a linear Volterra-type equation.
//!
//! The direct part is the delta contribution delta(y - u(x, t; theta)),
//! consumed analytically through root sums with 1/|u'| weights. The
//! indirect field D g(x; theta) solves
//!
//!   D g(x) / (2 pi a(u(x))) = W(x) + int_{x0}^{x} dz (rho_s f D g)(z)_*dr,
//!
//! marched in x with trapezoidal quadrature; the implicit diagonal node
//! is resolved by a dense solve over the rapidity grid at each step. A
//! global dense solve over the full (x, theta) lattice is kept as a test
//! oracle for the marching scheme.

use nalgebra::{DMatrix, DVector};

use crate::characteristics::{root_set, Characteristics, FluidState};
use crate::error::{GhdError, Result};
use crate::interp::{Extend, Pchip};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Everything the propagator needs about one evolution.
pub struct PropagatorContext<'a> {
    pub fluid0: &'a FluidState,
    pub fluid_t: &'a FluidState,
    pub chars: &'a Characteristics,
}

impl<'a> PropagatorContext<'a> {
    pub fn new(
        fluid0: &'a FluidState,
        fluid_t: &'a FluidState,
        chars: &'a Characteristics,
    ) -> Self {
        assert!(
            chars.has_derivatives() || chars.time == 0.0,
            "propagator needs characteristic derivatives"
        );
        PropagatorContext {
            fluid0,
            fluid_t,
            chars,
        }
    }

    fn check_source(&self, y: f64) -> Result<()> {
        if y <= self.fluid0.xs[0] {
            return Err(GhdError::InvalidParameter(format!(
                "source position {y} not right of the stationary boundary {}",
                self.fluid0.xs[0]
            )));
        }
        Ok(())
    }
}

fn heaviside(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Effective acceleration evaluated along the characteristics,
/// a(u(x_m, t; theta_k); theta_k).
fn acceleration_along(ctx: &PropagatorContext) -> Result<Vec<Vec<f64>>> {
    let field = ctx.fluid0.acceleration_field()?;
    let kk = ctx.fluid0.grid.len();
    let mm = ctx.fluid0.xs.len();
    let mut curves = Vec::with_capacity(kk);
    for k in 0..kk {
        let col: Vec<f64> = field.iter().map(|row| row[k]).collect();
        curves.push(Pchip::new(&ctx.fluid0.xs, &col, Extend::Flat));
    }
    let mut out = vec![vec![0.0; kk]; mm];
    for m in 0..mm {
        for k in 0..kk {
            out[m][k] = curves[k].eval(ctx.chars.origin[m][k]);
        }
    }
    Ok(out)
}

/// Source term W(x; theta) of the indirect-propagator equation: the
/// z-integrated root sum against the dressed scattering kernel, minus
/// the Heaviside-gated star-dressed initial term.
pub fn source_term(ctx: &PropagatorContext, y: f64, g: &[f64]) -> Result<Vec<Vec<f64>>> {
    ctx.check_source(y)?;
    let grid = &ctx.fluid0.grid;
    let kk = grid.len();
    let mm = ctx.fluid0.xs.len();

    // per-z root contributions R_m(theta)
    let mut r_rows = vec![vec![0.0; kk]; mm];
    for m in 0..mm {
        let cell = &ctx.fluid_t.cells[m];
        let roots = root_set(ctx.chars, m, y)?;
        for root in roots {
            let rho = grid.interpolate(cell.state_density(), root.type_index, root.rapidity);
            let occ = grid.interpolate(cell.occupation(), root.type_index, root.rapidity);
            let fac = grid.interpolate(cell.stat_factor(), root.type_index, root.rapidity);
            let g_at = grid.interpolate(g, root.type_index, root.rapidity);
            let weight = rho * occ * fac * g_at / root.slope.abs();
            let col = cell.dressed_kernel_column(root.type_index, root.rapidity)?;
            for k in 0..kk {
                r_rows[m][k] += weight * col[k];
            }
        }
    }

    // cumulative trapezoid in z
    let mut w_rows = vec![vec![0.0; kk]; mm];
    for m in 1..mm {
        let h = ctx.fluid0.xs[m] - ctx.fluid0.xs[m - 1];
        for k in 0..kk {
            w_rows[m][k] = w_rows[m - 1][k] + 0.5 * h * (r_rows[m - 1][k] + r_rows[m][k]);
        }
    }

    // star-dressed initial term at (y, 0)
    let state_y = ctx.fluid0.state_at(y)?;
    let weighted: Vec<f64> = (0..kk)
        .map(|k| state_y.state_density()[k] * state_y.stat_factor()[k] * g[k])
        .collect();
    let star = state_y.star_dress_values(&weighted)?;
    for m in 0..mm {
        for k in 0..kk {
            w_rows[m][k] -= heaviside(ctx.chars.origin[m][k] - y) * star[k];
        }
    }
    Ok(w_rows)
}

/// Solve the indirect-propagator equation by marching in x.
///
/// Returns the field D g on the (x, node) lattice. Homogeneous or free
/// initial data give an identically vanishing acceleration or source,
/// hence a zero field.
pub fn solve_indirect(ctx: &PropagatorContext, y: f64, g: &[f64]) -> Result<Vec<Vec<f64>>> {
    let kk = ctx.fluid0.grid.len();
    let mm = ctx.fluid0.xs.len();
    if ctx.chars.time == 0.0 {
        return Ok(vec![vec![0.0; kk]; mm]);
    }
    let w_rows = source_term(ctx, y, g)?;
    let accel = acceleration_along(ctx)?;
    let mut delta = vec![vec![0.0; kk]; mm];

    // step 0: empty integral
    for k in 0..kk {
        delta[0][k] = TWO_PI * accel[0][k] * w_rows[0][k];
    }
    let mut star_m = ctx.fluid_t.cells[0].star_dress_matrix()?;
    let mut s_prev: Vec<f64> = {
        let d = DVector::from_column_slice(&delta[0]);
        (&star_m * d).data.into()
    };
    let mut integral = vec![0.0; kk];

    for m in 1..mm {
        let h = ctx.fluid0.xs[m] - ctx.fluid0.xs[m - 1];
        // known part of the trapezoid up to the diagonal node
        let q: Vec<f64> = (0..kk)
            .map(|k| integral[k] + 0.5 * h * s_prev[k])
            .collect();
        star_m = ctx.fluid_t.cells[m].star_dress_matrix()?;
        // (I - (h/2) diag(2 pi a) Star) D = diag(2 pi a) (W + Q)
        let mut sys = DMatrix::identity(kk, kk);
        for j in 0..kk {
            let aj = TWO_PI * accel[m][j];
            for k in 0..kk {
                sys[(j, k)] -= 0.5 * h * aj * star_m[(j, k)];
            }
        }
        let rhs = DVector::from_iterator(
            kk,
            (0..kk).map(|k| TWO_PI * accel[m][k] * (w_rows[m][k] + q[k])),
        );
        let sol = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GhdError::SingularSolve(format!("indirect march at step {m}")))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(GhdError::SingularSolve(format!(
                "indirect march produced non-finite values at step {m}"
            )));
        }
        delta[m] = sol.data.into();
        let s_cur: Vec<f64> = {
            let d = DVector::from_column_slice(&delta[m]);
            (&star_m * d).data.into()
        };
        for k in 0..kk {
            integral[k] += 0.5 * h * (s_prev[k] + s_cur[k]);
        }
        s_prev = s_cur;
    }
    Ok(delta)
}

/// Reference solver: the same discretized equation assembled as one dense
/// linear system over the whole (x, node) lattice and solved directly.
/// Quadratic memory; test sizes only.
pub fn solve_indirect_dense(ctx: &PropagatorContext, y: f64, g: &[f64]) -> Result<Vec<Vec<f64>>> {
    let kk = ctx.fluid0.grid.len();
    let mm = ctx.fluid0.xs.len();
    if ctx.chars.time == 0.0 {
        return Ok(vec![vec![0.0; kk]; mm]);
    }
    let w_rows = source_term(ctx, y, g)?;
    let accel = acceleration_along(ctx)?;
    let stars: Vec<DMatrix<f64>> = ctx
        .fluid_t
        .cells
        .iter()
        .map(|c| c.star_dress_matrix())
        .collect::<Result<_>>()?;
    let xs = &ctx.fluid0.xs;
    // trapezoid weight of node j in the integral up to node m
    let trap = |m: usize, j: usize| -> f64 {
        if m == 0 || j > m {
            0.0
        } else if j == 0 {
            0.5 * (xs[1] - xs[0])
        } else if j == m {
            0.5 * (xs[m] - xs[m - 1])
        } else {
            0.5 * (xs[j + 1] - xs[j - 1])
        }
    };
    let size = mm * kk;
    let mut sys = DMatrix::identity(size, size);
    let mut rhs = DVector::zeros(size);
    for m in 0..mm {
        for k in 0..kk {
            let row = m * kk + k;
            let a = TWO_PI * accel[m][k];
            rhs[row] = a * w_rows[m][k];
            for j in 0..=m {
                let wt = trap(m, j);
                if wt == 0.0 {
                    continue;
                }
                for l in 0..kk {
                    sys[(row, j * kk + l)] -= a * wt * stars[j][(k, l)];
                }
            }
        }
    }
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| GhdError::SingularSolve("dense indirect system".into()))?;
    Ok((0..mm)
        .map(|m| (0..kk).map(|k| sol[m * kk + k]).collect())
        .collect())
}

/// One root contribution to the direct part at a given x.
#[derive(Debug, Clone)]
pub struct DirectRoot {
    pub type_index: usize,
    pub rapidity: f64,
    /// rho_s(x, t) n_0(y) f(y, 0) / |u'|
    pub weight: f64,
    /// the propagated function at the root
    pub g_value: f64,
}

/// The propagator applied to a spectral function g from (y, 0): direct
/// root data per x-node plus the indirect field.
pub struct PropagatorAction {
    pub y: f64,
    pub time: f64,
    pub g: Vec<f64>,
    pub direct: Vec<Vec<DirectRoot>>,
    pub indirect: Vec<Vec<f64>>,
}

/// Direct-part root data at one position.
pub fn direct_roots_at(
    ctx: &PropagatorContext,
    y: f64,
    g: &[f64],
    x: f64,
) -> Result<Vec<DirectRoot>> {
    let grid = &ctx.fluid0.grid;
    let state_y = ctx.fluid0.state_at(y)?;
    let roots = crate::characteristics::root_set_at_x(ctx.chars, x, y)?;
    let rho_field: Vec<Vec<f64>> = ctx
        .fluid_t
        .cells
        .iter()
        .map(|c| c.state_density().to_vec())
        .collect();
    let rho_row = Characteristics::row_at_x(&rho_field, &ctx.fluid_t.xs, x);
    roots
        .into_iter()
        .map(|r| {
            let rho = grid.interpolate(&rho_row, r.type_index, r.rapidity);
            let occ = grid.interpolate(state_y.occupation(), r.type_index, r.rapidity);
            let fac = grid.interpolate(state_y.stat_factor(), r.type_index, r.rapidity);
            let g_at = grid.interpolate(g, r.type_index, r.rapidity);
            Ok(DirectRoot {
                type_index: r.type_index,
                rapidity: r.rapidity,
                weight: rho * occ * fac / r.slope.abs(),
                g_value: g_at,
            })
        })
        .collect()
}

/// Assemble the full action of the propagator on g from (y, 0).
pub fn apply_propagator(ctx: &PropagatorContext, y: f64, g: &[f64]) -> Result<PropagatorAction> {
    ctx.check_source(y)?;
    let indirect = solve_indirect(ctx, y, g)?;
    let direct = ctx
        .fluid0
        .xs
        .iter()
        .map(|&x| direct_roots_at(ctx, y, g, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(PropagatorAction {
        y,
        time: ctx.chars.time,
        g: g.to_vec(),
        direct,
        indirect,
    })
}

/// Sup-norm mismatch between the marching and dense solutions of the
/// indirect equation, normalized by the larger field scale; the residual
/// check of the propagator equation.
pub fn indirect_residual_dense(ctx: &PropagatorContext, y: f64, g: &[f64]) -> Result<f64> {
    let march = solve_indirect(ctx, y, g)?;
    let dense = solve_indirect_dense(ctx, y, g)?;
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in march.iter().zip(&dense) {
        for (x, z) in a.iter().zip(b) {
            diff = diff.max((x - z).abs());
            scale = scale.max(x.abs()).max(z.abs());
        }
    }
    Ok(diff / scale.max(1e-300))
}
