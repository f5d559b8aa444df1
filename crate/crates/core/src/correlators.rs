//! Euler-scale two-point functions of conserved densities, currents and
//! generic local observables, and the hydrodynamic spectral functions
//! that feed them.
//!
//! A local observable enters only through its spectral overlap V(theta)
//! with the propagating conserved waves: h_dr for a density, v_eff h_dr
//! for a current, and a Leclair-Mussardo-type series (or a model-specific
//! closed form) for anything else. The correlator is then
//!
//!   <A(x, t) B(y, 0)> = int dtheta rho_p f V_A(x, t) (Gamma V_B(y, 0)),
//!
//! with the direct part of the propagator consumed as a finite root sum
//! and the indirect part integrated over the grid.

use std::sync::Arc;

use crate::characteristics::{evolve_full, Characteristics, EvolveOptions, FluidState};
use crate::error::{GhdError, Result};
use crate::propagator::{direct_roots_at, solve_indirect, PropagatorContext};
use crate::spectral::{Parity, SpectralFunction};
use crate::tba::GgeState;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// A local observable identified by how it overlaps with conserved waves.
#[derive(Clone)]
pub enum Observable {
    Density(i64),
    Current(i64),
    /// A hydrodynamic spectral function provider evaluated in the local
    /// GGE (for observables that are not conserved densities/currents).
    Generic(Arc<dyn Fn(&GgeState) -> Result<SpectralFunction> + Send + Sync>),
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observable::Density(i) => write!(f, "Density({i})"),
            Observable::Current(i) => write!(f, "Current({i})"),
            Observable::Generic(_) => write!(f, "Generic"),
        }
    }
}

/// The spectral overlap V(theta) of an observable in a given GGE:
/// h_dr for densities, v_eff h_dr for currents.
pub fn spectral_overlap(obs: &Observable, state: &GgeState) -> Result<SpectralFunction> {
    match obs {
        Observable::Density(i) => {
            let h = state.model.charge_function(&state.grid, *i)?;
            state.dress(&h)
        }
        Observable::Current(i) => {
            let h = state.model.charge_function(&state.grid, *i)?;
            let h_dr = state.dress(&h)?;
            let values = h_dr
                .values
                .iter()
                .zip(state.effective_velocity())
                .map(|(h, v)| h * v)
                .collect();
            SpectralFunction::new(state.grid.clone(), values, Parity::ScalarField)
        }
        Observable::Generic(provider) => provider(state),
    }
}

/// An evolved time slice bundled with its characteristics.
pub struct EvolvedSlice {
    pub fluid_t: FluidState,
    pub chars: Characteristics,
}

pub fn evolve_slice(fluid0: &FluidState, t: f64, opts: &EvolveOptions) -> Result<EvolvedSlice> {
    let (fluid_t, chars) = evolve_full(fluid0, t, opts)?;
    Ok(EvolvedSlice { fluid_t, chars })
}

/// Two-point function of observables A at (x, t) and B at (y, 0) for all
/// requested x on one evolved slice; the indirect field is solved once
/// and shared across the positions.
pub fn two_point_on_slice(
    a: &Observable,
    b: &Observable,
    fluid0: &FluidState,
    slice: &EvolvedSlice,
    xs: &[f64],
    y: f64,
) -> Result<Vec<f64>> {
    let t = slice.chars.time;
    if t == 0.0 {
        let span = fluid0.xs[fluid0.xs.len() - 1] - fluid0.xs[0];
        return xs
            .iter()
            .map(|&x| {
                if (x - y).abs() <= 1e-12 * span.max(1.0) {
                    Err(GhdError::InvalidParameter(
                        "equal-time correlator at coincident points is a delta function".into(),
                    ))
                } else {
                    Ok(0.0)
                }
            })
            .collect();
    }
    let ctx = PropagatorContext::new(fluid0, &slice.fluid_t, &slice.chars);
    let state_y = fluid0.state_at(y)?;
    let vb = spectral_overlap(b, &state_y)?;
    let indirect = solve_indirect(&ctx, y, &vb.values)?;
    let grid = &fluid0.grid;
    xs.iter()
        .map(|&x| {
            let state_x = slice.fluid_t.state_at(x)?;
            let va = spectral_overlap(a, &state_x)?;
            // direct root sum
            let mut value = 0.0;
            for root in direct_roots_at(&ctx, y, &vb.values, x)? {
                let va_at = grid.interpolate(&va.values, root.type_index, root.rapidity);
                value += root.weight * va_at * root.g_value;
            }
            // indirect contribution by quadrature
            let (m, d) = slice.fluid_t.nearest_cell(x);
            let row: Vec<f64> = if d <= 1e-12 {
                indirect[m].clone()
            } else {
                Characteristics::row_at_x(&indirect, &slice.fluid_t.xs, x)
            };
            for (_, _, k, _, w) in grid.iter() {
                value += w
                    * state_x.particle_density()[k]
                    * state_x.stat_factor()[k]
                    * va.values[k]
                    * row[k];
            }
            Ok(value)
        })
        .collect()
}

/// One-shot two-point function (evolves the state internally; use
/// [`two_point_on_slice`] for scans).
pub fn two_point(
    a: &Observable,
    b: &Observable,
    x: f64,
    t: f64,
    y: f64,
    fluid0: &FluidState,
    opts: &EvolveOptions,
) -> Result<f64> {
    let slice = evolve_slice(fluid0, t, opts)?;
    Ok(two_point_on_slice(a, b, fluid0, &slice, &[x], y)?[0])
}

pub fn density_density(
    i: i64,
    j: i64,
    x: f64,
    t: f64,
    y: f64,
    fluid0: &FluidState,
    opts: &EvolveOptions,
) -> Result<f64> {
    two_point(&Observable::Density(i), &Observable::Density(j), x, t, y, fluid0, opts)
}

pub fn current_density(
    i: i64,
    j: i64,
    x: f64,
    t: f64,
    y: f64,
    fluid0: &FluidState,
    opts: &EvolveOptions,
) -> Result<f64> {
    two_point(&Observable::Current(i), &Observable::Density(j), x, t, y, fluid0, opts)
}

pub fn density_current(
    i: i64,
    j: i64,
    x: f64,
    t: f64,
    y: f64,
    fluid0: &FluidState,
    opts: &EvolveOptions,
) -> Result<f64> {
    two_point(&Observable::Density(i), &Observable::Current(j), x, t, y, fluid0, opts)
}

pub fn current_current(
    i: i64,
    j: i64,
    x: f64,
    t: f64,
    y: f64,
    fluid0: &FluidState,
    opts: &EvolveOptions,
) -> Result<f64> {
    two_point(&Observable::Current(i), &Observable::Current(j), x, t, y, fluid0, opts)
}

/// Two-point function in a homogeneous state: the ray root sum
/// t^-1 sum rho_p f V_A V_B / |v_eff'| over solutions of
/// v_eff(theta) = (x - y)/t.
pub fn homogeneous_two_point(
    state: &GgeState,
    a: &Observable,
    b: &Observable,
    separation: f64,
    t: f64,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(GhdError::InvalidParameter(
            "homogeneous two-point function needs t > 0".into(),
        ));
    }
    let xi = separation / t;
    let grid = &state.grid;
    let va = spectral_overlap(a, state)?;
    let vb = spectral_overlap(b, state)?;
    let dv = grid.differentiate(state.effective_velocity());
    let mut acc = 0.0;
    for ty in 0..grid.n_types() {
        for r in grid.roots_in_type(state.effective_velocity(), ty, xi, 1e-12) {
            let slope = grid.interpolate(&dv, ty, r);
            if slope.abs() < 1e-10 {
                return Err(GhdError::DegenerateRay { rapidity: r });
            }
            let rho_p = grid.interpolate(state.particle_density(), ty, r);
            let f = grid.interpolate(state.stat_factor(), ty, r);
            let va_at = grid.interpolate(&va.values, ty, r);
            let vb_at = grid.interpolate(&vb.values, ty, r);
            acc += rho_p * f * va_at * vb_at / (t * slope.abs());
        }
    }
    Ok(acc)
}

/// Connected diagonal matrix elements F_k of a local observable,
/// truncated at `funcs.len()` particles; each F_k is symmetric in its
/// (type, rapidity) arguments.
pub struct FormFactorFamily {
    pub funcs: Vec<Arc<dyn Fn(&[(usize, f64)]) -> f64 + Send + Sync>>,
}

/// Largest supported truncation order of the Leclair-Mussardo series.
pub const LM_MAX_TRUNCATION: usize = 3;

/// A Leclair-Mussardo spectral function with its per-order magnitudes.
pub struct LmSpectral {
    pub overlap: SpectralFunction,
    /// sup-norm of each k-term's contribution to V (convergence report)
    pub term_magnitudes: Vec<f64>,
}

/// Hydrodynamic spectral function from a Leclair-Mussardo form-factor
/// family:
///
///   V(theta) = sum_k 1/k! int prod_j (dtheta_j n / 2 pi)
///              F_{k+1}(theta_1 .. theta_k, theta) / (2 pi rho_s(theta)),
///
/// truncated at `k_max` integration variables (tensor-product quadrature).
pub fn lm_spectral(ff: &FormFactorFamily, state: &GgeState, k_max: usize) -> Result<LmSpectral> {
    if k_max > LM_MAX_TRUNCATION {
        return Err(GhdError::TruncationUnsupported {
            requested: k_max,
            max: LM_MAX_TRUNCATION,
        });
    }
    if ff.funcs.len() < k_max + 1 {
        return Err(GhdError::InvalidParameter(format!(
            "form-factor family holds {} orders, truncation needs {}",
            ff.funcs.len(),
            k_max + 1
        )));
    }
    let grid = &state.grid;
    let kk = grid.len();
    // measure per node: w n / 2 pi
    let nodes: Vec<(usize, f64)> = grid.iter().map(|(ty, _, _, th, _)| (ty, th)).collect();
    let measure: Vec<f64> = grid
        .iter()
        .map(|(_, _, k, _, w)| w * state.occupation()[k] / TWO_PI)
        .collect();
    let mut values = vec![0.0; kk];
    let mut magnitudes = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let func = &ff.funcs[k];
        let factorial: f64 = (1..=k).map(|v| v as f64).product::<f64>().max(1.0);
        let mut term = vec![0.0; kk];
        match k {
            0 => {
                for (t, v) in term.iter_mut().enumerate() {
                    *v = func(&[nodes[t]]);
                }
            }
            1 => {
                for (t, v) in term.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for a in 0..kk {
                        acc += measure[a] * func(&[nodes[a], nodes[t]]);
                    }
                    *v = acc;
                }
            }
            2 => {
                for (t, v) in term.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for a in 0..kk {
                        for b in 0..kk {
                            acc += measure[a] * measure[b] * func(&[nodes[a], nodes[b], nodes[t]]);
                        }
                    }
                    *v = acc / factorial;
                }
            }
            3 => {
                for (t, v) in term.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for a in 0..kk {
                        for b in 0..kk {
                            for c in 0..kk {
                                acc += measure[a]
                                    * measure[b]
                                    * measure[c]
                                    * func(&[nodes[a], nodes[b], nodes[c], nodes[t]]);
                            }
                        }
                    }
                    *v = acc / factorial;
                }
            }
            _ => unreachable!(),
        }
        let mut sup = 0.0f64;
        for t in 0..kk {
            let contrib = term[t] / (TWO_PI * state.state_density()[t]);
            values[t] += contrib;
            sup = sup.max(contrib.abs());
        }
        magnitudes.push(sup);
    }
    Ok(LmSpectral {
        overlap: SpectralFunction::new(grid.clone(), values, Parity::ScalarField)?,
        term_magnitudes: magnitudes,
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    heap_permute(&mut idx, n, &mut out);
    out
}

fn heap_permute(idx: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(idx.clone());
        return;
    }
    for i in 0..k {
        heap_permute(idx, k - 1, out);
        if k % 2 == 0 {
            idx.swap(i, k - 1);
        } else {
            idx.swap(0, k - 1);
        }
    }
}

/// Connected diagonal form factors of a conserved density: kernel chains
/// phi(th_1, th_2) .. phi(th_{k-1}, th_k) h_i(th_1) p'(th_k), summed over
/// argument permutations. Resumming the series gives back h_dr.
pub fn conserved_density_form_factors(
    model: &Arc<crate::models::ModelSpec>,
    charge: i64,
    orders: usize,
) -> FormFactorFamily {
    conserved_form_factors(model, charge, orders, false)
}

/// As [`conserved_density_form_factors`] with the chain ending on E'
/// (the conserved current of the same charge).
pub fn conserved_current_form_factors(
    model: &Arc<crate::models::ModelSpec>,
    charge: i64,
    orders: usize,
) -> FormFactorFamily {
    conserved_form_factors(model, charge, orders, true)
}

fn conserved_form_factors(
    model: &Arc<crate::models::ModelSpec>,
    charge: i64,
    orders: usize,
    current: bool,
) -> FormFactorFamily {
    let mut funcs: Vec<Arc<dyn Fn(&[(usize, f64)]) -> f64 + Send + Sync>> = Vec::new();
    for k in 1..=orders {
        let model = model.clone();
        let perms = permutations(k);
        funcs.push(Arc::new(move |args: &[(usize, f64)]| {
            debug_assert_eq!(args.len(), k);
            let mut total = 0.0;
            for perm in &perms {
                let mut chain = 1.0;
                for w in perm.windows(2) {
                    let (ta, a) = args[w[0]];
                    let (tb, b) = args[w[1]];
                    chain *= model.phi(ta, a, tb, b);
                }
                let (t1, th1) = args[perm[0]];
                let (tk, thk) = args[perm[k - 1]];
                let tail = if current {
                    model.energy_deriv(tk, thk)
                } else {
                    model.momentum_deriv(tk, thk)
                };
                total += chain * model.charge_eigenvalue(charge, t1, th1) * tail;
            }
            total
        }));
    }
    FormFactorFamily { funcs }
}

/// Vertex-operator spectral function of the sinh-Gordon model for
/// exponent k (Z2-symmetric in k): builds the k-dependent kernels, the
/// two dressed exponentials and the H factors, then
///
///   V_k = (2 / pi rho_s) sum_j sin(pi a (2j+1)) e_j_dr [e^-1]_j_dr
///         prod_{l != j} H_l.
pub fn shg_vertex_spectral(k: i64, coupling_a: f64, state: &GgeState) -> Result<SpectralFunction> {
    let parts = shg_vertex_parts(k.unsigned_abs() as usize, coupling_a, state)?;
    let grid = &state.grid;
    let kk = grid.len();
    let mut values = vec![0.0; kk];
    let count = parts.len();
    for (j, part) in parts.iter().enumerate() {
        let pa = std::f64::consts::PI * coupling_a * (2.0 * j as f64 + 1.0);
        let others: f64 = (0..count).filter(|l| *l != j).map(|l| parts[l].h_factor).product();
        for t in 0..kk {
            values[t] += pa.sin() * part.e_plus_dr[t] * part.e_minus_dr[t] * others;
        }
    }
    for t in 0..kk {
        values[t] *= 2.0 / (std::f64::consts::PI * state.state_density()[t]);
    }
    SpectralFunction::new(grid.clone(), values, Parity::ScalarField)
}

/// The one-point function <e^{k g Phi}> = prod_{j<k} H_j.
pub fn shg_vertex_expectation(k: i64, coupling_a: f64, state: &GgeState) -> Result<f64> {
    let parts = shg_vertex_parts(k.unsigned_abs() as usize, coupling_a, state)?;
    Ok(parts.iter().map(|p| p.h_factor).product())
}

/// The H factors entering the vertex one-point recursion.
pub fn shg_vertex_h_factors(k: i64, coupling_a: f64, state: &GgeState) -> Result<Vec<f64>> {
    let parts = shg_vertex_parts(k.unsigned_abs() as usize, coupling_a, state)?;
    Ok(parts.iter().map(|p| p.h_factor).collect())
}

struct VertexPart {
    e_plus_dr: Vec<f64>,
    e_minus_dr: Vec<f64>,
    h_factor: f64,
}

fn shg_vertex_parts(k_abs: usize, coupling_a: f64, state: &GgeState) -> Result<Vec<VertexPart>> {
    let grid = &state.grid;
    let kk = grid.len();
    let rapidities: Vec<f64> = grid.iter().map(|(_, _, _, th, _)| th).collect();
    let weights: Vec<f64> = grid.iter().map(|(_, _, _, _, w)| w).collect();
    let pa = std::f64::consts::PI * coupling_a;
    let mut parts = Vec::with_capacity(k_abs);
    for j in 0..k_abs {
        // chi_j(theta, alpha) = 2 Im(e^{2 j i pi a} / sinh(theta - alpha - i pi a))
        let phase = 2.0 * j as f64 * pa;
        let chi = |th: f64, al: f64| -> f64 {
            let d = th - al;
            let re_d = d.sinh() * pa.cos();
            let im_d = -d.cosh() * pa.sin();
            let norm = re_d * re_d + im_d * im_d;
            2.0 * (phase.sin() * re_d - phase.cos() * im_d) / norm
        };
        let mut m_vec = nalgebra::DMatrix::identity(kk, kk);
        let mut m_scal = nalgebra::DMatrix::identity(kk, kk);
        for r in 0..kk {
            for c in 0..kk {
                let base = state.occupation()[c] * weights[c] / TWO_PI;
                m_vec[(r, c)] -= chi(rapidities[r], rapidities[c]) * base;
                m_scal[(r, c)] -= chi(rapidities[c], rapidities[r]) * base;
            }
        }
        let e_minus: Vec<f64> = rapidities.iter().map(|th| (-th).exp()).collect();
        let e_plus: Vec<f64> = rapidities.iter().map(|th| th.exp()).collect();
        let e_minus_dr = m_vec
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&e_minus))
            .ok_or_else(|| GhdError::DressingSingular("vertex kernel resolvent".into()))?;
        let e_plus_dr = m_scal
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&e_plus))
            .ok_or_else(|| GhdError::DressingSingular("vertex kernel resolvent".into()))?;
        let integral: f64 = (0..kk)
            .map(|t| weights[t] * e_plus[t] * state.occupation()[t] * e_minus_dr[t] / TWO_PI)
            .sum();
        let h_factor = 1.0 + 4.0 * (pa * (2.0 * j as f64 + 1.0)).sin() * integral;
        parts.push(VertexPart {
            e_plus_dr: e_plus_dr.data.into(),
            e_minus_dr: e_minus_dr.data.into(),
            h_factor,
        });
    }
    Ok(parts)
}

/// Largest supported power of the density field.
pub const LL_MAX_POWER: usize = 3;

/// Spectral function of the K-th power of the Lieb-Liniger density:
///
///   V(p) = sum_s int prod_{r != s} (dp_r / 2 pi n h_r_dr)
///          h_s_dr(p) g_s_dr(p) / 1_dr(p),
///
/// where g_s is the pairwise product over ordered pairs j > l of
/// (p_j - p_l) / ((p_j - p_l)^2 + c^2), seen as a vector field of p_s.
pub fn ll_density_power_spectral(
    power: usize,
    c: f64,
    state: &GgeState,
) -> Result<SpectralFunction> {
    if power == 0 || power > LL_MAX_POWER {
        return Err(GhdError::TruncationUnsupported {
            requested: power,
            max: LL_MAX_POWER,
        });
    }
    let grid = &state.grid;
    let kk = grid.len();
    let rapidities: Vec<f64> = grid.iter().map(|(_, _, _, th, _)| th).collect();
    // dressed charge eigenvalues h_r_dr, r = 1..K
    let mut h_dr = Vec::with_capacity(power);
    for r in 1..=power {
        let h = state.model.charge_function(grid, r as i64)?;
        h_dr.push(state.dress(&h)?.values);
    }
    let one_dr = state.dress_values(&vec![1.0; kk], Parity::ScalarField)?;
    let pair = |d: f64| d / (d * d + c * c);
    // measure per node and slot r: w n h_r_dr / 2 pi
    let measure = |slot: usize, node: usize| -> f64 {
        grid.weight(node) * state.occupation()[node] * h_dr[slot][node] / TWO_PI
    };
    let mut values = vec![0.0; kk];
    match power {
        1 => {
            // single slot: g_1 = 1 dressed as a vector field
            let g_dr = state.dress_values(&vec![1.0; kk], Parity::VectorField)?;
            for t in 0..kk {
                values[t] = h_dr[0][t] * g_dr[t];
            }
        }
        2 => {
            for s in 0..2 {
                let other = 1 - s;
                for a in 0..kk {
                    let pa = rapidities[a];
                    let w = measure(other, a);
                    if w == 0.0 {
                        continue;
                    }
                    // pair (2, 1): p_2 - p_1; sign depends on the free slot
                    let g: Vec<f64> = rapidities
                        .iter()
                        .map(|&p| if s == 0 { pair(pa - p) } else { pair(p - pa) })
                        .collect();
                    let g_dr = state.dress_values(&g, Parity::VectorField)?;
                    for t in 0..kk {
                        values[t] += w * h_dr[s][t] * g_dr[t];
                    }
                }
            }
        }
        3 => {
            for s in 0..3 {
                let others: Vec<usize> = (0..3).filter(|r| *r != s).collect();
                for a in 0..kk {
                    for b in 0..kk {
                        let w = measure(others[0], a) * measure(others[1], b);
                        if w == 0.0 {
                            continue;
                        }
                        let mut assigned = [0.0; 3];
                        assigned[others[0]] = rapidities[a];
                        assigned[others[1]] = rapidities[b];
                        // the pair not involving the free slot
                        let fixed = pair(
                            assigned[others[1].max(others[0])]
                                - assigned[others[1].min(others[0])],
                        );
                        let g: Vec<f64> = rapidities
                            .iter()
                            .map(|&p| {
                                let mut v = fixed;
                                for &r in &others {
                                    v *= if s > r {
                                        pair(p - assigned[r])
                                    } else {
                                        pair(assigned[r] - p)
                                    };
                                }
                                v
                            })
                            .collect();
                        let g_dr = state.dress_values(&g, Parity::VectorField)?;
                        for t in 0..kk {
                            values[t] += w * h_dr[s][t] * g_dr[t];
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    for t in 0..kk {
        values[t] /= one_dr[t];
    }
    SpectralFunction::new(grid.clone(), values, Parity::ScalarField)
}
