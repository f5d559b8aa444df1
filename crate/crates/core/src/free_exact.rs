//! Closed-form Euler-scale correlators for free models.
//!
//! Without interaction the dressing is trivial and characteristics are
//! straight lines, so N-point functions reduce to finite sums over the
//! rapidities whose group velocity connects the insertion points. The
//! N-th order weight g_N comes from the generating identity
//!
//!   F_a(w) - F_a(w - z) = sum_N z^N / N! g_N,
//!
//! evaluated here by truncated power-series (jet) arithmetic on the
//! free-energy function, uniformly over the four statistics.

use std::sync::Arc;

use crate::error::{GhdError, Result};
use crate::interp::{bisect, gauss_legendre_rule};
use crate::models::ModelSpec;
use crate::spectral::Statistics;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Truncated Taylor series in one formal variable.
#[derive(Debug, Clone)]
pub struct Jet {
    /// c[k] is the coefficient of z^k.
    pub c: Vec<f64>,
}

impl Jet {
    pub fn constant(order: usize, value: f64) -> Jet {
        let mut c = vec![0.0; order + 1];
        c[0] = value;
        Jet { c }
    }

    /// The series value + slope * z.
    pub fn linear(order: usize, value: f64, slope: f64) -> Jet {
        let mut c = vec![0.0; order + 1];
        c[0] = value;
        if order >= 1 {
            c[1] = slope;
        }
        Jet { c }
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn neg(&self) -> Jet {
        Jet {
            c: self.c.iter().map(|v| -v).collect(),
        }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut c = self.c.clone();
        c[0] += s;
        Jet { c }
    }

    /// exp of the series by the standard convolution recurrence.
    pub fn exp(&self) -> Jet {
        let n = self.c.len();
        let mut e = vec![0.0; n];
        e[0] = self.c[0].exp();
        for k in 1..n {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += j as f64 * self.c[j] * e[k - j];
            }
            e[k] = acc / k as f64;
        }
        Jet { c: e }
    }

    /// log of the series; requires a positive constant term.
    pub fn ln(&self) -> Result<Jet> {
        if self.c[0] <= 0.0 {
            return Err(GhdError::FreeEnergyDomain(format!(
                "log of series with constant term {}",
                self.c[0]
            )));
        }
        let n = self.c.len();
        let mut l = vec![0.0; n];
        l[0] = self.c[0].ln();
        for k in 1..n {
            let mut acc = 0.0;
            for j in 1..k {
                acc += j as f64 * l[j] * self.c[k - j];
            }
            l[k] = (self.c[k] - acc / k as f64) / self.c[0];
        }
        Ok(Jet { c: l })
    }
}

/// Free energy of a statistics applied to a pseudo-energy series.
pub fn free_energy_jet(stat: Statistics, eps: &Jet) -> Result<Jet> {
    match stat {
        Statistics::Fermion => {
            // -log(1 + e^-eps)
            Ok(eps.neg().exp().add_scalar(1.0).ln()?.neg())
        }
        Statistics::Boson => {
            if eps.c[0] <= 0.0 {
                return Err(GhdError::FreeEnergyDomain(format!(
                    "boson pseudo-energy {} <= 0",
                    eps.c[0]
                )));
            }
            // log(1 - e^-eps)
            eps.neg().exp().neg().add_scalar(1.0).ln()
        }
        Statistics::ClassicalParticle => Ok(eps.neg().exp().neg()),
        Statistics::Radiative => eps.ln(),
    }
}

/// Weights g_1 .. g_order at driving value w: the N-th coefficient of
/// F_a(w) - F_a(w - z), times N factorial.
pub fn free_weight(stat: Statistics, w: f64, order: usize) -> Result<Vec<f64>> {
    let eps = Jet::linear(order, w, -1.0);
    let f = free_energy_jet(stat, &eps)?;
    let mut fact = 1.0;
    let mut out = Vec::with_capacity(order);
    for n in 1..=order {
        fact *= n as f64;
        out.push(-fact * f.c[n]);
    }
    Ok(out)
}

/// An interaction-free model with an analytic driving-term profile
/// w(x; theta); everything downstream is evaluated in closed form.
pub struct FreeScenario {
    pub model: Arc<ModelSpec>,
    driving: Arc<dyn Fn(f64, usize, f64) -> f64 + Send + Sync>,
    /// per-type rapidity window scanned for group-velocity roots
    pub domains: Vec<(f64, f64)>,
}

impl FreeScenario {
    pub fn new(
        model: Arc<ModelSpec>,
        driving: Arc<dyn Fn(f64, usize, f64) -> f64 + Send + Sync>,
        domains: Vec<(f64, f64)>,
    ) -> Result<FreeScenario> {
        if !model.is_free() {
            return Err(GhdError::InvalidParameter(
                "free scenario requires a zero kernel".into(),
            ));
        }
        if domains.len() != model.n_types() {
            return Err(GhdError::InvalidParameter(
                "one rapidity window per particle type".into(),
            ));
        }
        Ok(FreeScenario {
            model,
            driving,
            domains,
        })
    }

    pub fn driving_term(&self, x: f64, ty: usize, theta: f64) -> f64 {
        (self.driving)(x, ty, theta)
    }

    pub fn occupation(&self, x: f64, ty: usize, theta: f64) -> f64 {
        self.model
            .statistics(ty)
            .occupation(self.driving_term(x, ty, theta))
    }

    /// rho_p(x, 0; theta) = n p' / 2 pi (no dressing).
    pub fn particle_density(&self, x: f64, ty: usize, theta: f64) -> f64 {
        self.occupation(x, ty, theta) * self.model.momentum_deriv(ty, theta) / TWO_PI
    }

    /// All rapidities with group velocity xi, per type.
    pub fn velocity_roots(&self, xi: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let scan = 512;
        for ty in 0..self.model.n_types() {
            let (a, b) = self.domains[ty];
            let h = (b - a) / scan as f64;
            let mut prev = self.model.group_velocity(ty, a) - xi;
            for i in 1..=scan {
                let th = a + h * i as f64;
                let cur = self.model.group_velocity(ty, th) - xi;
                if prev == 0.0 {
                    out.push((ty, th - h));
                } else if prev * cur < 0.0 {
                    let r = bisect(
                        |u| self.model.group_velocity(ty, u) - xi,
                        th - h,
                        th,
                        1e-14,
                    )
                    .expect("bracketed root");
                    out.push((ty, r));
                }
                prev = cur;
            }
        }
        out
    }
}

/// Two-point function of conserved densities i and j between (x, t) and
/// (y, 0): the ballistic root sum
/// sum rho_p(y, 0) f(y, 0) h_i h_j / (|v_gr'| t).
pub fn free_two_point(
    i: i64,
    j: i64,
    x: f64,
    t: f64,
    y: f64,
    scenario: &FreeScenario,
) -> Result<f64> {
    free_two_point_general(i, j, x, t, y, scenario, false, false)
}

/// As [`free_two_point`] with optional current insertions on either leg:
/// a current replaces h by v_gr h.
pub fn free_two_point_general(
    i: i64,
    j: i64,
    x: f64,
    t: f64,
    y: f64,
    scenario: &FreeScenario,
    current_left: bool,
    current_right: bool,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(GhdError::InvalidParameter(
            "free two-point function needs t > 0".into(),
        ));
    }
    let xi = (x - y) / t;
    let mut acc = 0.0;
    for (ty, th) in scenario.velocity_roots(xi) {
        let vp = scenario.model.group_velocity_deriv(ty, th);
        if vp.abs() < 1e-12 {
            return Err(GhdError::DegenerateRay { rapidity: th });
        }
        let rho = scenario.particle_density(y, ty, th);
        let f = scenario
            .model
            .statistics(ty)
            .stat_factor(scenario.occupation(y, ty, th));
        let mut hi = scenario.model.charge_eigenvalue(i, ty, th);
        let mut hj = scenario.model.charge_eigenvalue(j, ty, th);
        let v = scenario.model.group_velocity(ty, th);
        if current_left {
            hi *= v;
        }
        if current_right {
            hj *= v;
        }
        acc += rho * f * hi * hj / (vp.abs() * t);
    }
    Ok(acc)
}

/// N-point result: the coefficient of the colinearity delta product, and
/// whether the insertion points actually lie on a single ray.
#[derive(Debug, Clone, Copy)]
pub struct FreeNPoint {
    pub coefficient: f64,
    pub colinear: bool,
}

/// Euler-scale N-point function of conserved densities at insertion
/// points (x_k, t_k, i_k). For N >= 3 the result multiplies a product of
/// delta functions enforcing colinearity; the returned coefficient is
/// zero when the points are not on one ray.
pub fn free_n_point(points: &[(f64, f64, i64)], scenario: &FreeScenario) -> Result<FreeNPoint> {
    let n = points.len();
    if n < 2 {
        return Err(GhdError::InvalidParameter(
            "n-point function needs at least two insertions".into(),
        ));
    }
    // reference pair: the two earliest distinct times
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1));
    let k1 = order[0];
    let k2 = match order.iter().find(|&&k| points[k].1 > points[k1].1) {
        Some(&k) => k,
        None => {
            return Err(GhdError::InvalidParameter(
                "n-point function needs two distinct times".into(),
            ))
        }
    };
    let (x1, t1, _) = points[k1];
    let (x2, t2, _) = points[k2];
    let dt = t2 - t1;
    let xi = (x2 - x1) / dt;
    let scale = points
        .iter()
        .map(|p| p.0.abs().max(p.1.abs()))
        .fold(1.0f64, f64::max);
    let colinear = points.iter().all(|&(xk, tk, _)| {
        ((xk - x1) * dt - (x2 - x1) * (tk - t1)).abs() <= 1e-9 * scale * dt.abs()
    });
    if !colinear && n > 2 {
        return Ok(FreeNPoint {
            coefficient: 0.0,
            colinear,
        });
    }
    let y = (x1 * t2 - x2 * t1) / dt;
    let mut acc = 0.0;
    for (ty, th) in scenario.velocity_roots(xi) {
        let vp = scenario.model.group_velocity_deriv(ty, th);
        if vp.abs() < 1e-12 {
            return Err(GhdError::DegenerateRay { rapidity: th });
        }
        let w = scenario.driving_term(y, ty, th);
        let g = free_weight(scenario.model.statistics(ty), w, n)?[n - 1];
        let charges: f64 = points
            .iter()
            .map(|&(_, _, ik)| scenario.model.charge_eigenvalue(ik, ty, th))
            .product();
        acc += scenario.model.momentum_deriv(ty, th) / (TWO_PI * dt * vp.abs()) * g * charges;
    }
    Ok(FreeNPoint {
        coefficient: acc,
        colinear,
    })
}

/// One source term of the generating functional: a smooth profile
/// eps(x) coupled to charge i at time t.
pub struct SourceInsertion {
    pub profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub time: f64,
    pub charge: i64,
}

/// Generating functional of Euler-scale correlations in a free model:
///
///   int dtheta/2pi p' int du [ F_a(w(u)) - F_a(w(u) - sum_k eps_k(u + v_gr t_k) h_k) ]
///
/// by Gauss-Legendre quadrature in both variables.
pub fn free_generating_functional(
    scenario: &FreeScenario,
    insertions: &[SourceInsertion],
    theta_points: usize,
    u_window: (f64, f64),
    u_points: usize,
) -> Result<f64> {
    let (gn, gw) = gauss_legendre_rule(theta_points);
    let (un, uw) = gauss_legendre_rule(u_points);
    let (ua, ub) = u_window;
    let umid = 0.5 * (ua + ub);
    let uhalf = 0.5 * (ub - ua);
    let mut total = 0.0;
    for ty in 0..scenario.model.n_types() {
        let (a, b) = scenario.domains[ty];
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let stat = scenario.model.statistics(ty);
        for (gx, gwt) in gn.iter().zip(&gw) {
            let th = mid + half * gx;
            let p1 = scenario.model.momentum_deriv(ty, th);
            let v = scenario.model.group_velocity(ty, th);
            let mut inner = 0.0;
            for (ux, uwt) in un.iter().zip(&uw) {
                let u = umid + uhalf * ux;
                let w = scenario.driving_term(u, ty, th);
                let shift: f64 = insertions
                    .iter()
                    .map(|s| {
                        (s.profile)(u + v * s.time)
                            * scenario.model.charge_eigenvalue(s.charge, ty, th)
                    })
                    .sum();
                inner += uhalf * uwt * (stat.free_energy(w)? - stat.free_energy(w - shift)?);
            }
            total += half * gwt * p1 * inner / TWO_PI;
        }
    }
    Ok(total)
}
