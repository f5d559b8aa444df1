//! Domain-wall (partitioning protocol) solution: ray-dependent states,
//! the explicit characteristic u(x, t; theta) = t u~(xi; theta), the
//! slope factor V(theta) at the self-consistent ray, and ray correlators.
//!
//! The protocol state at ray xi = x/t selects the left or right
//! occupation by the sign of v_eff(xi; theta) - xi. The occupation jump
//! sits between grid nodes, so each ray state is solved on its own
//! panel-split grid with a panel boundary exactly at every crossing
//! rapidity; dressed quantities are then evaluated at arbitrary
//! rapidities through the resolvent representation
//! h_dr(theta) = h(theta) + int phi(theta, a) n(a) h_dr(a) da / 2pi.
//! This keeps v_eff(eta; theta) continuous in eta, which the
//! characteristic integral
//!
//!   u~(xi) = (xi - xi*) exp int_-inf^xi [1/(eta - v_eff(eta)) - 1/(eta - xi*)] deta
//!
//! requires: its integrand is finite at the self-consistent ray xi*
//! (the poles cancel) and is evaluated in the algebraically stable form
//! (v_eff - xi*) / ((eta - v_eff)(eta - xi*)).

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{GhdError, Result};
use crate::interp::{gauss_legendre_rule, Extend, Pchip};
use crate::models::{ModelSpec, TypeFunctions};
use crate::spectral::{KernelOperator, Parity, SpectralGrid, Statistics};
use crate::tba::GgeState;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// One solved ray: a GGE on a panel-split grid that resolves the
/// occupation jump, plus the crossing rapidities per original type.
pub struct RayState {
    pub xi: f64,
    pub state: GgeState,
    /// panel index -> original particle type
    map: Vec<usize>,
    /// crossing rapidities of v_eff(xi; theta) = xi, per original type
    pub crossings: Vec<Vec<f64>>,
    model: Arc<ModelSpec>,
    /// whether the low-rapidity end of each original type takes the left state
    low_end_left: Vec<bool>,
    /// nodal dressed E' on the panel grid
    e_dr_nodal: Vec<f64>,
}

impl RayState {
    /// Evaluate a vector-field dressed quantity at an arbitrary rapidity
    /// from its nodal values: h(theta) + sum_k w_k phi(theta, theta_k)
    /// n_k h_dr_k / 2 pi.
    pub fn eval_vector_dressed(
        &self,
        nodal: &[f64],
        bare: impl Fn(usize, f64) -> f64,
        ty: usize,
        theta: f64,
    ) -> f64 {
        let grid = &self.state.grid;
        let mut acc = bare(ty, theta);
        for (panel, _, k, th, w) in grid.iter() {
            acc += w
                * self.model.phi(ty, theta, self.map[panel], th)
                * self.state.occupation()[k]
                * nodal[k]
                / TWO_PI;
        }
        acc
    }

    /// Scalar-field analogue (transposed kernel arguments).
    pub fn eval_scalar_dressed(
        &self,
        nodal: &[f64],
        bare: impl Fn(usize, f64) -> f64,
        ty: usize,
        theta: f64,
    ) -> f64 {
        let grid = &self.state.grid;
        let mut acc = bare(ty, theta);
        for (panel, _, k, th, w) in grid.iter() {
            acc += w
                * self.model.phi(self.map[panel], th, ty, theta)
                * self.state.occupation()[k]
                * nodal[k]
                / TWO_PI;
        }
        acc
    }

    /// Dressed momentum derivative (2 pi rho_s) at an arbitrary rapidity.
    pub fn p_deriv_dressed_at(&self, ty: usize, theta: f64) -> f64 {
        let p_dr_nodal: Vec<f64> = self
            .state
            .state_density()
            .iter()
            .map(|r| TWO_PI * r)
            .collect();
        self.eval_vector_dressed(&p_dr_nodal, |t, th| self.model.momentum_deriv(t, th), ty, theta)
    }

    /// Effective velocity at an arbitrary rapidity of an original type.
    pub fn velocity_at(&self, ty: usize, theta: f64) -> f64 {
        let e = self.eval_vector_dressed(
            &self.e_dr_nodal,
            |t, th| self.model.energy_deriv(t, th),
            ty,
            theta,
        );
        e / self.p_deriv_dressed_at(ty, theta)
    }

    /// State density at an arbitrary rapidity.
    pub fn rho_s_at(&self, ty: usize, theta: f64) -> f64 {
        self.p_deriv_dressed_at(ty, theta) / TWO_PI
    }

    /// True if the point (ty, theta) carries the left-state occupation.
    pub fn takes_left(&self, ty: usize, theta: f64) -> bool {
        let below = self.crossings[ty].iter().filter(|&&c| c < theta).count();
        self.low_end_left[ty] ^ (below % 2 == 1)
    }

    /// Nodal scalar-dressed charge eigenvalue on the panel grid.
    pub fn charge_nodal(&self, i: i64) -> Result<Vec<f64>> {
        let h: Vec<f64> = self
            .state
            .grid
            .iter()
            .map(|(panel, _, _, th, _)| self.model.charge_eigenvalue(i, self.map[panel], th))
            .collect();
        self.state.dress_values(&h, Parity::ScalarField)
    }

    /// Dressed charge at an arbitrary rapidity, from [`RayState::charge_nodal`].
    pub fn charge_dressed_at(&self, nodal: &[f64], i: i64, ty: usize, theta: f64) -> f64 {
        self.eval_scalar_dressed(nodal, |t, th| self.model.charge_eigenvalue(i, t, th), ty, theta)
    }

    /// Dressed-kernel value T_dr(theta_out, gamma): the column at gamma
    /// solved on the panel grid, evaluated at the requested output point.
    pub fn dressed_kernel_at(
        &self,
        out_ty: usize,
        out_theta: f64,
        src_ty: usize,
        gamma: f64,
    ) -> Result<f64> {
        let col: Vec<f64> = self
            .state
            .grid
            .iter()
            .map(|(panel, _, _, th, _)| self.model.phi(self.map[panel], th, src_ty, gamma) / TWO_PI)
            .collect();
        let nodal = self.state.dress_values(&col, Parity::VectorField)?;
        Ok(self.eval_vector_dressed(
            &nodal,
            |t, th| self.model.phi(t, th, src_ty, gamma) / TWO_PI,
            out_ty,
            out_theta,
        ))
    }
}

/// The solved partitioning protocol on a ray grid.
pub struct RaySolution {
    pub model: Arc<ModelSpec>,
    pub grid: Arc<SpectralGrid>,
    pub kernel: Arc<KernelOperator>,
    pub left: GgeState,
    pub right: GgeState,
    pub xi: Vec<f64>,
    pub rays: Vec<RayState>,
    /// v_eff(xi_m; theta_k) on the (ray, reference-node) lattice
    pub velocity: Vec<Vec<f64>>,
    /// self-consistent ray xi*(theta_k) per reference node
    pub fixed_ray: Vec<f64>,
    /// slope factor V(theta_k)
    pub slope_factor: Vec<f64>,
    /// ray state at xi*(theta_k)
    star_rays: Vec<RayState>,
}

fn clamped_interp(
    grid: &SpectralGrid,
    values: &[f64],
    ty: usize,
    theta: f64,
    fermion: bool,
) -> f64 {
    let v = grid.interpolate(values, ty, theta);
    if fermion {
        v.clamp(0.0, 1.0)
    } else {
        v.max(0.0)
    }
}

fn points_per_panel(grid: &SpectralGrid) -> usize {
    (grid.type_len(0) / 2).max(24)
}

/// Bisection with the endpoint values already known; never re-evaluates
/// the endpoints, so a root lying within rounding of one of them is safe.
fn refine_root(
    f: impl Fn(f64) -> f64,
    mut a: f64,
    mut fa: f64,
    mut b: f64,
    mut fb: f64,
    tol: f64,
) -> f64 {
    for _ in 0..100 {
        if (b - a).abs() < tol {
            break;
        }
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
            fb = fm;
        } else {
            a = m;
            fa = fm;
        }
    }
    let _ = (fa, fb);
    0.5 * (a + b)
}

/// Solve one ray state with panel-split grids: iterate the crossing
/// rapidities of v_eff(theta) = xi until stable.
fn solve_ray_state(
    model: &Arc<ModelSpec>,
    ref_grid: &Arc<SpectralGrid>,
    left: &GgeState,
    right: &GgeState,
    xi: f64,
    points: usize,
) -> Result<RayState> {
    let n_types = ref_grid.n_types();
    // initial crossings from the boundary velocity curves
    let mut crossings: Vec<Vec<f64>> = (0..n_types)
        .map(|ty| {
            let mut c = ref_grid.roots_in_type(left.effective_velocity(), ty, xi, 1e-10);
            if c.is_empty() {
                c = ref_grid.roots_in_type(right.effective_velocity(), ty, xi, 1e-10);
            }
            c
        })
        .collect();
    let span: f64 = (0..n_types)
        .map(|ty| {
            let n = ref_grid.nodes_of(ty);
            n[n.len() - 1] - n[0]
        })
        .fold(0.0, f64::max);
    for _ in 0..80 {
        let ray = build_ray_state(model, ref_grid, left, right, xi, &crossings, points)?;
        // locate the new crossings on the smooth velocity curve
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(n_types);
        for ty in 0..n_types {
            let nodes = ref_grid.nodes_of(ty);
            let probes = 4 * nodes.len();
            let lo = nodes[0];
            let hi = nodes[nodes.len() - 1];
            let h = (hi - lo) / probes as f64;
            let mut roots = Vec::new();
            let mut prev_x = lo;
            let mut prev = ray.velocity_at(ty, lo) - xi;
            for i in 1..=probes {
                let th = lo + h * i as f64;
                let cur = ray.velocity_at(ty, th) - xi;
                if prev == 0.0 {
                    roots.push(prev_x);
                } else if prev * cur < 0.0 {
                    roots.push(refine_root(
                        |u| ray.velocity_at(ty, u) - xi,
                        prev_x,
                        prev,
                        th,
                        cur,
                        1e-13 * span,
                    ));
                }
                prev_x = th;
                prev = cur;
            }
            next.push(roots);
        }
        let moved = crossings
            .iter()
            .zip(&next)
            .map(|(a, b)| {
                if a.len() != b.len() {
                    f64::INFINITY
                } else {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max)
                }
            })
            .fold(0.0, f64::max);
        if moved < 1e-12 * span {
            return Ok(ray);
        }
        crossings = next;
    }
    Err(GhdError::RayNonConvergence { xi })
}

/// Assemble the panel grid and GGE for given crossing rapidities.
fn build_ray_state(
    model: &Arc<ModelSpec>,
    ref_grid: &Arc<SpectralGrid>,
    left: &GgeState,
    right: &GgeState,
    xi: f64,
    crossings: &[Vec<f64>],
    points: usize,
) -> Result<RayState> {
    let n_types = ref_grid.n_types();
    let mut panel_types = Vec::new();
    let mut map = Vec::new();
    let mut low_end_left = Vec::with_capacity(n_types);
    for ty in 0..n_types {
        let nodes = ref_grid.nodes_of(ty);
        let lo = nodes[0];
        let hi = nodes[nodes.len() - 1];
        // the Theta sign at the low end follows the boundary velocity
        let v_lo = left.effective_velocity()[ref_grid.type_offset(ty)];
        low_end_left.push(v_lo >= xi);
        let mut bounds = vec![lo];
        for &c in &crossings[ty] {
            if c > lo + 1e-12 && c < hi - 1e-12 {
                bounds.push(c);
            }
        }
        bounds.push(hi);
        for pair in bounds.windows(2) {
            panel_types.push(crate::spectral::ParticleType::new(
                format!("{}-panel{}", ref_grid.types[ty].id, map.len()),
                ref_grid.types[ty].statistics,
                pair[0],
                pair[1],
            )?);
            map.push(ty);
        }
    }
    let panel_grid = SpectralGrid::build_unchecked(
        panel_types,
        points,
        crate::spectral::QuadratureScheme::GaussLegendre,
    )?;
    // wrapper model whose type table is the panel list
    let map_arc = Arc::new(map.clone());
    let mut funcs = Vec::new();
    for &ty in map.iter() {
        let b = model.clone();
        funcs.push(TypeFunctions {
            id: format!("panel-{ty}"),
            statistics: ref_grid.types[ty].statistics,
            momentum: Arc::new({
                let b = b.clone();
                move |th| b.momentum(ty, th)
            }),
            energy: Arc::new({
                let b = b.clone();
                move |th| b.energy(ty, th)
            }),
            momentum_deriv: Arc::new({
                let b = b.clone();
                move |th| b.momentum_deriv(ty, th)
            }),
            energy_deriv: Arc::new({
                let b = b.clone();
                move |th| b.energy_deriv(ty, th)
            }),
            momentum_deriv2: Arc::new({
                let b = b.clone();
                move |th| b.momentum_deriv2(ty, th)
            }),
            energy_deriv2: Arc::new(move |th| b.energy_deriv2(ty, th)),
        });
    }
    let panel_model = Arc::new(ModelSpec::custom(
        format!("{}-panels", model.name),
        funcs,
        Arc::new({
            let b = model.clone();
            let map = map_arc.clone();
            move |a, th, c, al| b.phi(map[a], th, map[c], al)
        }),
        Arc::new({
            let b = model.clone();
            let map = map_arc.clone();
            move |i, a, th| b.charge_eigenvalue(i, map[a], th)
        }),
        model.is_free(),
    ));
    let panel_kernel = Arc::new(panel_model.kernel_operator(&panel_grid)?);
    // occupation: boundary-state values on the panel nodes, side chosen
    // by the crossing parity
    let mut occupation = Vec::with_capacity(panel_grid.len());
    for (panel, _, _, th, _) in panel_grid.iter() {
        let ty = map[panel];
        let below = crossings[ty].iter().filter(|&&c| c < th).count();
        let take_left = low_end_left[ty] ^ (below % 2 == 1);
        let fermion = ref_grid.types[ty].statistics == Statistics::Fermion;
        let v = if take_left {
            clamped_interp(ref_grid, left.occupation(), ty, th, fermion)
        } else {
            clamped_interp(ref_grid, right.occupation(), ty, th, fermion)
        };
        occupation.push(v);
    }
    let state = GgeState::from_occupation(&panel_model, &panel_grid, &panel_kernel, occupation)?;
    let e_dr_nodal = state.dress_values(state.energy_deriv_values(), Parity::VectorField)?;
    Ok(RayState {
        xi,
        state,
        map,
        crossings: crossings.to_vec(),
        model: model.clone(),
        low_end_left,
        e_dr_nodal,
    })
}

impl RaySolution {
    /// Solve the ray-dependent states on the given xi grid and locate
    /// the self-consistent ray and slope factor of every reference node.
    pub fn solve(left: GgeState, right: GgeState, xi: Vec<f64>) -> Result<RaySolution> {
        assert!(xi.windows(2).all(|w| w[1] > w[0]), "xi grid must increase");
        let model = left.model.clone();
        let grid = left.grid.clone();
        let kernel = left.kernel.clone();
        let kk = grid.len();
        let points = points_per_panel(&grid);
        let rays: Vec<RayState> = xi
            .par_iter()
            .map(|&x| solve_ray_state(&model, &grid, &left, &right, x, points))
            .collect::<Result<_>>()?;
        let velocity: Vec<Vec<f64>> = rays
            .par_iter()
            .map(|ray| {
                grid.iter()
                    .map(|(ty, _, _, th, _)| ray.velocity_at(ty, th))
                    .collect()
            })
            .collect();

        // self-consistent rays: v_eff(xi; theta_k) - xi changes sign
        // between the extreme rays (the effective velocity is bounded)
        let span = xi[xi.len() - 1] - xi[0];
        let star: Vec<(f64, RayState)> = (0..kk)
            .into_par_iter()
            .map(|k| {
                let (ty, _) = grid.split_flat(k);
                let th = grid.rapidity(k);
                let f_lo = velocity[0][k] - xi[0];
                let f_hi = velocity[xi.len() - 1][k] - xi[xi.len() - 1];
                if f_lo <= 0.0 || f_hi >= 0.0 {
                    return Err(GhdError::InvalidParameter(format!(
                        "xi grid does not bracket the self-consistent ray of node {k}"
                    )));
                }
                let mut lo = xi[0];
                let mut hi = xi[xi.len() - 1];
                let mut state_mid = None;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let st = solve_ray_state(&model, &grid, &left, &right, mid, points)?;
                    let f = st.velocity_at(ty, th) - mid;
                    if f > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    state_mid = Some(st);
                    if hi - lo < 1e-12 * span.max(1.0) {
                        break;
                    }
                }
                Ok((0.5 * (lo + hi), state_mid.expect("bisection ran")))
            })
            .collect::<Result<_>>()?;
        let mut fixed_ray = Vec::with_capacity(kk);
        let mut star_rays = Vec::with_capacity(kk);
        for (r, s) in star {
            fixed_ray.push(r);
            star_rays.push(s);
        }

        let mut solution = RaySolution {
            model,
            grid,
            kernel,
            left,
            right,
            xi,
            rays,
            velocity,
            fixed_ray,
            slope_factor: vec![1.0; kk],
            star_rays,
        };
        let slope: Vec<f64> = (0..kk)
            .map(|k| {
                solution
                    .characteristic_integral(k, solution.fixed_ray[k])
                    .map(f64::exp)
            })
            .collect::<Result<_>>()?;
        solution.slope_factor = slope;
        Ok(solution)
    }

    /// Both sides equal within tolerance (homogeneous protocol).
    pub fn is_homogeneous(&self, tol: f64) -> bool {
        self.left
            .occupation()
            .iter()
            .zip(self.right.occupation())
            .all(|(a, b)| (a - b).abs() < tol)
    }

    /// Solve the ray state at an arbitrary ray.
    pub fn state_at_ray(&self, xi: f64) -> Result<RayState> {
        solve_ray_state(
            &self.model,
            &self.grid,
            &self.left,
            &self.right,
            xi,
            points_per_panel(&self.grid),
        )
    }

    /// Ray state at the self-consistent ray of reference node k.
    pub fn star_state(&self, k: usize) -> &RayState {
        &self.star_rays[k]
    }

    /// Combined integrand of the characteristic integral at node k in
    /// the stable form (v_eff - xi*) / ((eta - v_eff)(eta - xi*)), with
    /// the analytic limit c2/2 patched in a small window around xi*.
    fn integrand(&self, k: usize, curve: &Pchip, eta: f64) -> f64 {
        let star = self.fixed_ray[k];
        let d2 = eta - star;
        let window = 1e-3 * (self.xi[self.xi.len() - 1] - self.xi[0]);
        if d2.abs() < window {
            let h = 10.0 * window;
            let c2 = (curve.eval(star + h) + curve.eval(star - h) - 2.0 * star) / (h * h);
            return 0.5 * c2 / (1.0 - 0.5 * c2 * d2);
        }
        let v = curve.eval(eta);
        (v - star) / ((eta - v) * d2)
    }

    /// int_-inf^upper of the combined integrand for node k: analytic
    /// log tail below the ray grid (where v_eff has saturated to its
    /// left-state value) plus panel quadrature on the grid.
    pub fn characteristic_integral(&self, k: usize, upper: f64) -> Result<f64> {
        let col: Vec<f64> = self.velocity.iter().map(|row| row[k]).collect();
        let curve = Pchip::new(&self.xi, &col, Extend::Flat);
        let v_left = col[0];
        let star = self.fixed_ray[k];
        // find where the velocity is still at its left asymptote
        let mut tail_end = self.xi[0];
        for (m, &x) in self.xi.iter().enumerate() {
            if (col[m] - v_left).abs() < 1e-10 && x < star && x < upper {
                tail_end = x;
            } else {
                break;
            }
        }
        if tail_end >= v_left.min(star) {
            return Err(GhdError::InvalidParameter(
                "xi grid does not extend left of the velocity range".into(),
            ));
        }
        let mut total = ((v_left - tail_end) / (star - tail_end)).ln();
        // panel quadrature from the tail end to the upper limit
        let (gn, gw) = gauss_legendre_rule(12);
        let mut panels: Vec<f64> = self
            .xi
            .iter()
            .copied()
            .filter(|&x| x > tail_end && x < upper)
            .collect();
        panels.insert(0, tail_end);
        panels.push(upper);
        for pair in panels.windows(2) {
            let mid = 0.5 * (pair[0] + pair[1]);
            let half = 0.5 * (pair[1] - pair[0]);
            if half <= 0.0 {
                continue;
            }
            for (x, w) in gn.iter().zip(&gw) {
                total += half * w * self.integrand(k, &curve, mid + half * x);
            }
        }
        Ok(total)
    }

    /// u~(xi; theta_k) for every reference node at one ray.
    pub fn u_tilde_row(&self, xi: f64) -> Result<Vec<f64>> {
        (0..self.grid.len())
            .map(|k| {
                let integral = self.characteristic_integral(k, xi)?;
                Ok((xi - self.fixed_ray[k]) * integral.exp())
            })
            .collect()
    }

    /// u~(xi; theta_k) on all ray-grid nodes for one spectral node, and
    /// the slope factor V(theta_k).
    pub fn u_tilde_and_slope(&self, k: usize) -> Result<(Vec<f64>, f64)> {
        let curve: Vec<f64> = self
            .xi
            .iter()
            .map(|&x| {
                let integral = self.characteristic_integral(k, x)?;
                Ok((x - self.fixed_ray[k]) * integral.exp())
            })
            .collect::<Result<_>>()?;
        Ok((curve, self.slope_factor[k]))
    }
}

/// Ray correlator for the wall connected at time 0: the finite root sum
/// over solutions of u~(xi; gamma) = y / t, with h_j dressed in the
/// asymptotic state on the side of y.
pub fn ray_correlator_wall_at_zero(
    ray: &RaySolution,
    i: i64,
    j: i64,
    xi: f64,
    t: f64,
    y: f64,
) -> Result<f64> {
    if t <= 0.0 || y == 0.0 {
        return Err(GhdError::InvalidParameter(
            "wall correlator needs t > 0 and y != 0".into(),
        ));
    }
    let grid = &ray.grid;
    let u_row = ray.u_tilde_row(xi)?;
    let du = grid.differentiate(&u_row);
    let state_xi = ray.state_at_ray(xi)?;
    let hi_nodal = state_xi.charge_nodal(i)?;
    let side = if y > 0.0 { &ray.right } else { &ray.left };
    let hj_dr = side.dress(&side.model.charge_function(grid, j)?)?;
    let target = y / t;
    let mut acc = 0.0;
    for ty in 0..grid.n_types() {
        for r in grid.roots_in_type(&u_row, ty, target, 1e-12) {
            let slope = grid.interpolate(&du, ty, r);
            if slope.abs() < 1e-10 {
                return Err(GhdError::DegenerateCharacteristic {
                    rapidity: r,
                    slope,
                });
            }
            let rho = state_xi.rho_s_at(ty, r);
            let stat = grid.types[ty].statistics;
            let occ = clamped_interp(grid, side.occupation(), ty, r, stat == Statistics::Fermion);
            let fac = stat.stat_factor(occ);
            let hi = state_xi.charge_dressed_at(&hi_nodal, i, ty, r);
            let hj = grid.interpolate(&hj_dr.values, ty, r);
            acc += rho * occ * fac * hi * hj / slope.abs();
        }
    }
    Ok(acc / t)
}

/// The y -> 0 limit of the wall correlator: the self-consistent-ray root
/// sum with the 1/V factor and h_j dressed at xi = sign * infinity.
pub fn ray_correlator_connection_limit(
    ray: &RaySolution,
    i: i64,
    j: i64,
    xi: f64,
    t: f64,
    sign: f64,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(GhdError::InvalidParameter("correlator needs t > 0".into()));
    }
    let grid = &ray.grid;
    let state_xi = ray.state_at_ray(xi)?;
    let v_row: Vec<f64> = grid
        .iter()
        .map(|(ty, _, _, th, _)| state_xi.velocity_at(ty, th))
        .collect();
    let dv = grid.differentiate(&v_row);
    let hi_nodal = state_xi.charge_nodal(i)?;
    let side = if sign > 0.0 { &ray.right } else { &ray.left };
    let hj_dr = side.dress(&side.model.charge_function(grid, j)?)?;
    let mut acc = 0.0;
    for ty in 0..grid.n_types() {
        for r in grid.roots_in_type(&v_row, ty, xi, 1e-12) {
            let slope = grid.interpolate(&dv, ty, r);
            if slope.abs() < 1e-10 {
                return Err(GhdError::DegenerateRay { rapidity: r });
            }
            let rho = state_xi.rho_s_at(ty, r);
            let stat = grid.types[ty].statistics;
            let occ = clamped_interp(grid, side.occupation(), ty, r, stat == Statistics::Fermion);
            let fac = stat.stat_factor(occ);
            let hi = state_xi.charge_dressed_at(&hi_nodal, i, ty, r);
            let hj = grid.interpolate(&hj_dr.values, ty, r);
            let vfac = grid.interpolate(&ray.slope_factor, ty, r);
            acc += rho * occ * fac * hi * hj / (vfac * slope.abs());
        }
    }
    Ok(acc / t)
}

/// Direct and indirect pieces of the correlator on a ray away from the
/// connection time (wall at -t0, both fields on the ray xi).
pub struct ShiftedWallCorrelator {
    /// closed-form direct contribution (homogeneous root sum / V)
    pub direct: f64,
    /// indirect contribution from the general pipeline on the
    /// tanh-regularized wall evolved to the observation frame
    pub indirect: f64,
}

/// Correlations on a ray emanating from a wall at time -t0: the direct
/// part in closed form, the indirect part delegated to the general
/// pipeline on a tanh-regularized wall of the given width.
#[allow(clippy::too_many_arguments)]
pub fn ray_correlator_shifted(
    ray: &RaySolution,
    i: i64,
    j: i64,
    xi: f64,
    t: f64,
    t0: f64,
    wall_width: f64,
    x_half_span: f64,
    x_points: usize,
) -> Result<ShiftedWallCorrelator> {
    if t <= 0.0 || t0 <= 0.0 {
        return Err(GhdError::InvalidParameter(
            "shifted-wall correlator needs t, t0 > 0".into(),
        ));
    }
    // direct piece: homogeneous root sum at the ray state, divided by V
    let grid = &ray.grid;
    let state_xi = ray.state_at_ray(xi)?;
    let v_row: Vec<f64> = grid
        .iter()
        .map(|(ty, _, _, th, _)| state_xi.velocity_at(ty, th))
        .collect();
    let dv = grid.differentiate(&v_row);
    let hi_nodal = state_xi.charge_nodal(i)?;
    let hj_nodal = state_xi.charge_nodal(j)?;
    let mut direct = 0.0;
    for ty in 0..grid.n_types() {
        for r in grid.roots_in_type(&v_row, ty, xi, 1e-12) {
            let slope = grid.interpolate(&dv, ty, r);
            if slope.abs() < 1e-10 {
                return Err(GhdError::DegenerateRay { rapidity: r });
            }
            let rho = state_xi.rho_s_at(ty, r);
            let stat = grid.types[ty].statistics;
            let side = if state_xi.takes_left(ty, r) {
                &ray.left
            } else {
                &ray.right
            };
            let occ = clamped_interp(grid, side.occupation(), ty, r, stat == Statistics::Fermion);
            let fac = stat.stat_factor(occ);
            let hi = state_xi.charge_dressed_at(&hi_nodal, i, ty, r);
            let hj = state_xi.charge_dressed_at(&hj_nodal, j, ty, r);
            let vfac = grid.interpolate(&ray.slope_factor, ty, r);
            direct += rho * occ * fac * hi * hj / (vfac * slope.abs());
        }
    }
    direct /= t;

    // indirect piece: regularize the wall in the driving term, evolve to
    // the frame where the early field sits at time zero, run the pipeline
    let (w_left, w_right) = match (ray.left.driving_values(), ray.right.driving_values()) {
        (Some(l), Some(r)) => (l.to_vec(), r.to_vec()),
        _ => {
            return Err(GhdError::InvalidParameter(
                "shifted-wall regularization needs boundary states built from driving terms"
                    .into(),
            ))
        }
    };
    let xs: Vec<f64> = (0..x_points)
        .map(|m| -x_half_span + 2.0 * x_half_span * m as f64 / (x_points as f64 - 1.0))
        .collect();
    let values: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| {
            let s = 0.5 * (1.0 + (x / wall_width).tanh());
            (0..grid.len())
                .map(|k| w_left[k] + s * (w_right[k] - w_left[k]))
                .collect()
        })
        .collect();
    let profile = crate::characteristics::DrivingProfile::Tabulated { xs: xs.clone(), values };
    let wall_fluid = crate::characteristics::FluidState::from_profile(
        &ray.model,
        grid,
        &ray.kernel,
        xs,
        Arc::new(profile),
        &crate::tba::TbaOptions::default(),
    )?;
    let opts = crate::characteristics::EvolveOptions::default();
    let (fluid0, _) = crate::characteristics::evolve_full(&wall_fluid, t0, &opts)?;
    let slice = crate::correlators::evolve_slice(&fluid0, t, &opts)?;
    let ctx = crate::propagator::PropagatorContext::new(&fluid0, &slice.fluid_t, &slice.chars);
    let y = xi * t0;
    let x = xi * (t + t0);
    let state_y = fluid0.state_at(y)?;
    let g = state_y.dress(&ray.model.charge_function(grid, j)?)?;
    let indirect_field = crate::propagator::solve_indirect(&ctx, y, &g.values)?;
    let state_x = slice.fluid_t.state_at(x)?;
    let va = state_x.dress(&ray.model.charge_function(grid, i)?)?;
    let row =
        crate::characteristics::Characteristics::row_at_x(&indirect_field, &slice.fluid_t.xs, x);
    let mut indirect = 0.0;
    for (_, _, k, _, w) in grid.iter() {
        indirect +=
            w * state_x.particle_density()[k] * state_x.stat_factor()[k] * va.values[k] * row[k];
    }
    Ok(ShiftedWallCorrelator { direct, indirect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlators::{homogeneous_two_point, Observable};
    use crate::models;
    use crate::spectral::QuadratureScheme;
    use crate::tba::{DrivingTerm, TbaOptions};

    fn ll_state(mu: f64) -> GgeState {
        let model = Arc::new(models::lieb_liniger(1.0).unwrap());
        let grid = model
            .build_grid(6.0, 48, QuadratureScheme::GaussLegendre)
            .unwrap();
        let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
        let w = DrivingTerm::from_betas(&model, &grid, &[(3, 1.0), (1, -mu)]).unwrap();
        GgeState::solve(&model, &grid, &kernel, &w, &TbaOptions::default()).unwrap()
    }

    fn xi_grid(span: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| -span + 2.0 * span * i as f64 / (n as f64 - 1.0))
            .collect()
    }

    fn wall_solution() -> &'static RaySolution {
        static CELL: std::sync::OnceLock<RaySolution> = std::sync::OnceLock::new();
        CELL.get_or_init(|| {
            RaySolution::solve(ll_state(1.0), ll_state(0.4), xi_grid(14.0, 141)).unwrap()
        })
    }

    #[test]
    fn equal_sides_collapse_to_homogeneous() {
        let ray = RaySolution::solve(ll_state(0.8), ll_state(0.8), xi_grid(14.0, 71)).unwrap();
        assert!(ray.is_homogeneous(1e-14));
        // V = 1 up to the fixed-ray and quadrature tolerance
        for v in &ray.slope_factor {
            assert!((v - 1.0).abs() < 1e-8, "V = {v}");
        }
        // xi* equals the (constant-in-xi) effective velocity
        for (k, &s) in ray.fixed_ray.iter().enumerate() {
            assert!((s - ray.left.effective_velocity()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn extreme_rays_saturate_to_boundary_states() {
        let ray = wall_solution();
        for k in (0..ray.grid.len()).step_by(5) {
            assert!(
                (ray.velocity[0][k] - ray.left.effective_velocity()[k]).abs() < 1e-7,
                "left saturation at node {k}"
            );
            let m = ray.xi.len() - 1;
            assert!(
                (ray.velocity[m][k] - ray.right.effective_velocity()[k]).abs() < 1e-7,
                "right saturation at node {k}"
            );
        }
    }

    #[test]
    fn ray_states_select_by_velocity_sign() {
        let ray = wall_solution();
        let mid = ray.rays.len() / 2 + 7;
        let xi = ray.xi[mid];
        let st = &ray.rays[mid];
        for &th in &[-3.0, -1.0, 0.5, 2.5] {
            let v = st.velocity_at(0, th);
            let left = st.takes_left(0, th);
            assert_eq!(left, v >= xi, "side selection at theta {th}");
        }
    }

    #[test]
    fn full_line_characteristic_integral_vanishes() {
        // u~ -> xi - v_side on both far sides forces the combined
        // integrand to integrate to zero over the whole line
        let ray = wall_solution();
        for k in [8usize, 24, 40] {
            let hi = ray.xi[ray.xi.len() - 1];
            let total = ray.characteristic_integral(k, hi).unwrap()
                - ((hi - ray.right.effective_velocity()[k]) / (hi - ray.fixed_ray[k])).ln();
            assert!(total.abs() < 2e-4, "full-line integral at node {k}: {total}");
        }
    }

    #[test]
    fn u_tilde_vanishes_at_fixed_ray_and_grows_linearly() {
        let ray = wall_solution();
        for k in [8usize, 24, 40] {
            let star = ray.fixed_ray[k];
            let at_star = ray.u_tilde_row(star).unwrap()[k];
            assert!(at_star.abs() < 1e-9, "u~(xi*) = {at_star}");
            // u~ approaches xi - v_side beyond the velocity range, the
            // sharp form of the linear growth u~ ~ xi
            let (curve, _) = ray.u_tilde_and_slope(k).unwrap();
            let m = ray.xi.len();
            let v_l = ray.left.effective_velocity()[k];
            let v_r = ray.right.effective_velocity()[k];
            let left_err = curve[1] - (ray.xi[1] - v_l);
            let right_err = curve[m - 2] - (ray.xi[m - 2] - v_r);
            assert!(left_err.abs() < 1e-6 * ray.xi[1].abs(), "left {left_err}");
            assert!(
                right_err.abs() < 1e-3 * ray.xi[m - 2].abs(),
                "right {right_err}"
            );
        }
    }

    #[test]
    fn velocity_is_stationary_at_fixed_ray() {
        // d v_eff / d eta = 0 at eta = xi*(theta), checked by finite
        // differences along the ray
        let ray = wall_solution();
        for k in [10usize, 30] {
            let (ty, _) = ray.grid.split_flat(k);
            let th = ray.grid.rapidity(k);
            let star = ray.fixed_ray[k];
            let h = 0.08;
            let vm = ray.state_at_ray(star - h).unwrap().velocity_at(ty, th);
            let vp = ray.state_at_ray(star + h).unwrap().velocity_at(ty, th);
            let deriv = (vp - vm) / (2.0 * h);
            assert!(
                deriv.abs() < 0.02,
                "v_eff not stationary at xi*: slope {deriv}"
            );
        }
    }

    #[test]
    fn fixed_ray_derivative_matches_velocity_theta_derivative() {
        let ray = wall_solution();
        let dstar = ray.grid.differentiate(&ray.fixed_ray);
        for k in [12usize, 28, 36] {
            let st = ray.star_state(k);
            let (ty, _) = ray.grid.split_flat(k);
            let th = ray.grid.rapidity(k);
            let h = 1e-4;
            let dv = (st.velocity_at(ty, th + h) - st.velocity_at(ty, th - h)) / (2.0 * h);
            assert!(
                (dstar[k] - dv).abs() < 1e-2 * (1.0 + dv.abs()),
                "d xi*/d theta {} vs d v/d theta {}",
                dstar[k],
                dv
            );
        }
    }

    #[test]
    fn slope_relations_at_fixed_ray() {
        // d u~/d xi = V and d u~/d theta = -V d v_eff/d theta at xi = xi*
        let ray = wall_solution();
        for k in [14usize, 30] {
            let star = ray.fixed_ray[k];
            let vfac = ray.slope_factor[k];
            let h = 0.05;
            let up = ray.u_tilde_row(star + h).unwrap()[k];
            let um = ray.u_tilde_row(star - h).unwrap()[k];
            let dxi = (up - um) / (2.0 * h);
            assert!(
                (dxi / vfac - 1.0).abs() < 1e-2,
                "d u~/d xi / V = {} at node {k}",
                dxi / vfac
            );
            let row = ray.u_tilde_row(star).unwrap();
            let dth = ray.grid.differentiate(&row)[k];
            let (ty, _) = ray.grid.split_flat(k);
            let th = ray.grid.rapidity(k);
            let hh = 1e-4;
            let st = ray.star_state(k);
            let dv = (st.velocity_at(ty, th + hh) - st.velocity_at(ty, th - hh)) / (2.0 * hh);
            assert!(
                (dth / vfac + dv).abs() < 1e-2 * (1.0 + dv.abs()),
                "d u~/d theta / V = {} vs -dv = {}",
                dth / vfac,
                -dv
            );
        }
    }

    #[test]
    fn homogeneous_wall_reproduces_ray_formula() {
        // n_L = n_R: the wall correlator at y != 0 is the homogeneous
        // root-sum correlator
        let ray = RaySolution::solve(ll_state(0.8), ll_state(0.8), xi_grid(14.0, 101)).unwrap();
        let t = 2.0;
        let y = 0.4;
        let xi = 0.9;
        let got = ray_correlator_wall_at_zero(&ray, 1, 1, xi, t, y).unwrap();
        let expect = homogeneous_two_point(
            &ray.left,
            &Observable::Density(1),
            &Observable::Density(1),
            xi * t - y,
            t,
        )
        .unwrap();
        assert!(
            ((got - expect) / expect).abs() < 2e-4,
            "wall {got} vs homogeneous {expect}"
        );
        // and the connection limit reduces to the homogeneous value at y = 0
        let limit = ray_correlator_connection_limit(&ray, 1, 1, xi, t, 1.0).unwrap();
        let expect0 = homogeneous_two_point(
            &ray.left,
            &Observable::Density(1),
            &Observable::Density(1),
            xi * t,
            t,
        )
        .unwrap();
        assert!(((limit - expect0) / expect0).abs() < 2e-4);
    }

    #[test]
    fn connection_limits_differ_by_side() {
        let ray = wall_solution();
        let plus = ray_correlator_connection_limit(&ray, 1, 1, 0.7, 2.0, 1.0).unwrap();
        let minus = ray_correlator_connection_limit(&ray, 1, 1, 0.7, 2.0, -1.0).unwrap();
        assert!(
            (plus - minus).abs() > 1e-4 * plus.abs(),
            "sides should differ: {plus} vs {minus}"
        );
    }

    #[test]
    fn ray_correlator_gap_against_homogeneous_ray_state() {
        // the two-point function on a ray is not the homogeneous
        // correlator of that ray's state
        let ray = wall_solution();
        let xi = 0.7;
        let t = 2.0;
        let limit = ray_correlator_connection_limit(&ray, 1, 1, xi, t, 1.0).unwrap();
        let st = ray.state_at_ray(xi).unwrap();
        let n_ref: Vec<f64> = ray
            .grid
            .iter()
            .map(|(ty, _, _, th, _)| {
                let side = if st.takes_left(ty, th) {
                    &ray.left
                } else {
                    &ray.right
                };
                clamped_interp(&ray.grid, side.occupation(), ty, th, true)
            })
            .collect();
        let hom_state =
            GgeState::from_occupation(&ray.model, &ray.grid, &ray.kernel, n_ref).unwrap();
        let homog = homogeneous_two_point(
            &hom_state,
            &Observable::Density(1),
            &Observable::Density(1),
            xi * t,
            t,
        )
        .unwrap();
        assert!(
            (limit - homog).abs() > 1e-7,
            "expected a finite gap: {limit} vs {homog}"
        );
    }
}
