//! Quadrature rules, interpolation and differentiation utilities.
//!
//! Rapidity grids are either Gauss-Legendre (smooth fields interpolated
//! with the barycentric form, spectrally accurate) or uniform
//! (shape-preserving cubic). Spatial profiles always use the
//! shape-preserving cubic so fermionic occupations stay in [0, 1].

use crate::error::{GhdError, Result};

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; nodes accurate to a few
/// ulp for n up to several hundred.
pub fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_deriv(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (p2, d2) = legendre_and_deriv(n, x);
                dp = d2;
                x -= p2 / d2;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        let (_, d) = legendre_and_deriv(n, 0.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Uniform trapezoid rule on [a, b] with n nodes (endpoints included).
pub fn trapezoid_rule(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "trapezoid rule needs at least two nodes");
    let h = (b - a) / (n as f64 - 1.0);
    let nodes: Vec<f64> = (0..n).map(|i| a + h * i as f64).collect();
    let mut weights = vec![h; n];
    weights[0] = 0.5 * h;
    weights[n - 1] = 0.5 * h;
    (nodes, weights)
}

/// Cumulative trapezoid integral of `ys` over `xs`; output[0] = 0.
pub fn cumulative_trapezoid(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    assert_eq!(xs.len(), ys.len());
    let mut out = Vec::with_capacity(xs.len());
    out.push(0.0);
    for i in 1..xs.len() {
        let dx = xs[i] - xs[i - 1];
        out.push(out[i - 1] + 0.5 * dx * (ys[i] + ys[i - 1]));
    }
    out
}

/// Trapezoid integral of `ys` over `xs`.
pub fn trapezoid_integral(xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]);
    }
    acc
}

/// Barycentric weights for polynomial interpolation on `nodes`.
///
/// Differences are rescaled by 4/(span) so products stay in range for a
/// few hundred nodes.
pub fn barycentric_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    assert!(n >= 1);
    let span = nodes[n - 1] - nodes[0];
    let scale = if span > 0.0 { 4.0 / span } else { 1.0 };
    let mut w = vec![1.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i] *= scale * (nodes[i] - nodes[j]);
            }
        }
        w[i] = 1.0 / w[i];
    }
    w
}

/// Barycentric interpolation of `values` at `x`. Exact at nodes.
pub fn barycentric_eval(nodes: &[f64], weights: &[f64], values: &[f64], x: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..nodes.len() {
        let dx = x - nodes[i];
        if dx == 0.0 {
            return values[i];
        }
        let t = weights[i] / dx;
        num += t * values[i];
        den += t;
    }
    num / den
}

/// Spectral differentiation matrix on `nodes` from barycentric weights.
///
/// Returned row-major: d[i][j] such that f'(x_i) = sum_j d[i][j] f(x_j).
pub fn barycentric_diff_matrix(nodes: &[f64], weights: &[f64]) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = (weights[j] / weights[i]) / (nodes[i] - nodes[j]);
                d[i][j] = v;
                diag -= v;
            }
        }
        d[i][i] = diag;
    }
    d
}

/// Second-order finite-difference derivative on a (possibly nonuniform)
/// grid; three-point one-sided stencils at the ends.
pub fn finite_diff_derivative(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    assert!(n >= 3, "derivative stencil needs at least three nodes");
    assert_eq!(n, ys.len());
    let mut out = vec![0.0; n];
    for i in 0..n {
        let (a, b, c) = if i == 0 {
            (0, 1, 2)
        } else if i == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (i - 1, i, i + 1)
        };
        let (xa, xb, xc) = (xs[a], xs[b], xs[c]);
        let x = xs[i];
        let wa = (2.0 * x - xb - xc) / ((xa - xb) * (xa - xc));
        let wb = (2.0 * x - xa - xc) / ((xb - xa) * (xb - xc));
        let wc = (2.0 * x - xa - xb) / ((xc - xa) * (xc - xb));
        out[i] = wa * ys[a] + wb * ys[b] + wc * ys[c];
    }
    out
}

/// How a [`Pchip`] extends beyond its node range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extend {
    /// Keep the boundary value (stationary tails).
    Flat,
    /// Continue with the boundary slope.
    Linear,
    /// Extension is a bug; panic.
    Forbid,
}

/// Shape-preserving (Fritsch-Carlson) cubic interpolant.
///
/// Monotone data produce a monotone interpolant and values never leave
/// the local data range, which keeps occupations in [0, 1].
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
    extend: Extend,
}

impl Pchip {
    pub fn new(xs: &[f64], ys: &[f64], extend: Extend) -> Self {
        let n = xs.len();
        assert!(n >= 2, "interpolant needs at least two nodes");
        assert_eq!(n, ys.len());
        let mut slopes = vec![0.0; n];
        if n == 2 {
            let d = (ys[1] - ys[0]) / (xs[1] - xs[0]);
            slopes[0] = d;
            slopes[1] = d;
        } else {
            let h: Vec<f64> = (0..n - 1).map(|i| xs[i + 1] - xs[i]).collect();
            let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] <= 0.0 {
                    slopes[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    slopes[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            slopes[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Pchip {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            slopes,
            extend,
        }
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] {
            return match self.extend {
                Extend::Flat => self.ys[0],
                Extend::Linear => self.ys[0] + self.slopes[0] * (x - self.xs[0]),
                Extend::Forbid => panic!("pchip evaluated left of its range: {x}"),
            };
        }
        if x > self.xs[n - 1] {
            return match self.extend {
                Extend::Flat => self.ys[n - 1],
                Extend::Linear => self.ys[n - 1] + self.slopes[n - 1] * (x - self.xs[n - 1]),
                Extend::Forbid => panic!("pchip evaluated right of its range: {x}"),
            };
        }
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (h00, h10, h01, h11) = hermite_basis(t);
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return match self.extend {
                Extend::Flat => 0.0,
                _ => self.slopes[0],
            };
        }
        if x >= self.xs[n - 1] {
            return match self.extend {
                Extend::Flat => 0.0,
                _ => self.slopes[n - 1],
            };
        }
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let d00 = (6.0 * t * t - 6.0 * t) / h;
        let d10 = 3.0 * t * t - 4.0 * t + 1.0;
        let d01 = -d00;
        let d11 = 3.0 * t * t - 2.0 * t;
        d00 * self.ys[i] + d10 * self.slopes[i] + d01 * self.ys[i + 1] + d11 * self.slopes[i + 1]
    }

    /// Integral over [a, b] (within the node range; Hermite pieces in
    /// closed form, partial end cells by Gauss-Legendre).
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        if a == b {
            return 0.0;
        }
        if b < a {
            return -self.integrate(b, a);
        }
        let n = self.xs.len();
        let lo = a.max(self.xs[0]);
        let hi = b.min(self.xs[n - 1]);
        let mut acc = 0.0;
        // possible extension pieces
        if a < self.xs[0] {
            acc += self.extension_integral(a, self.xs[0].min(b), true);
        }
        if b > self.xs[n - 1] {
            acc += self.extension_integral(self.xs[n - 1].max(a), b, false);
        }
        if lo >= hi {
            return acc;
        }
        let i0 = self.locate(lo);
        let i1 = self.locate(hi);
        for i in i0..=i1 {
            let xl = self.xs[i].max(lo);
            let xr = self.xs[i + 1].min(hi);
            if xr <= xl {
                continue;
            }
            if xl == self.xs[i] && xr == self.xs[i + 1] {
                let h = self.xs[i + 1] - self.xs[i];
                acc += 0.5 * h * (self.ys[i] + self.ys[i + 1])
                    + h * h * (self.slopes[i] - self.slopes[i + 1]) / 12.0;
            } else {
                // partial cell: 4-point Gauss on the sub-interval is exact for cubics
                let (gn, gw) = gauss_legendre_rule(4);
                let mid = 0.5 * (xl + xr);
                let half = 0.5 * (xr - xl);
                for (g, w) in gn.iter().zip(&gw) {
                    acc += half * w * self.eval(mid + half * g);
                }
            }
        }
        acc
    }

    fn extension_integral(&self, a: f64, b: f64, left: bool) -> f64 {
        if b <= a {
            return 0.0;
        }
        let (x0, y0, m) = if left {
            (self.xs[0], self.ys[0], self.slopes[0])
        } else {
            let n = self.xs.len();
            (self.xs[n - 1], self.ys[n - 1], self.slopes[n - 1])
        };
        match self.extend {
            Extend::Flat => (b - a) * y0,
            Extend::Linear => {
                let fa = y0 + m * (a - x0);
                let fb = y0 + m * (b - x0);
                0.5 * (b - a) * (fa + fb)
            }
            Extend::Forbid => panic!("pchip integrated outside its range"),
        }
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 < 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

fn hermite_basis(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    )
}

/// Bisection for a root of `f` in [a, b]; requires a sign change.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(GhdError::InvalidParameter(format!(
            "bisection bracket [{a}, {b}] has no sign change"
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (b - a).abs() < tol {
            return Ok(m);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_two_points() {
        let (n, w) = gauss_legendre_rule(2);
        let r = 1.0 / 3.0f64.sqrt();
        assert_abs_diff_eq!(n[0], -r, epsilon = 1e-15);
        assert_abs_diff_eq!(n[1], r, epsilon = 1e-15);
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gauss_legendre_polynomial_exactness() {
        // n nodes integrate degree <= 2n-1 exactly
        for n in [3usize, 8, 17, 64] {
            let (nodes, weights) = gauss_legendre_rule(n);
            for deg in 0..2 * n {
                let exact = if deg % 2 == 0 {
                    2.0 / (deg as f64 + 1.0)
                } else {
                    0.0
                };
                let q: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(x, w)| w * x.powi(deg as i32))
                    .sum();
                assert!(
                    (q - exact).abs() < 1e-13,
                    "n={n} deg={deg}: {q} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn trapezoid_two_points_unit_interval() {
        let (n, w) = trapezoid_rule(2, 0.0, 1.0);
        assert_eq!(n, vec![0.0, 1.0]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn barycentric_reproduces_smooth_function() {
        let (nodes, _) = gauss_legendre_rule(40);
        let nodes: Vec<f64> = nodes.iter().map(|x| 3.0 * x).collect();
        let w = barycentric_weights(&nodes);
        let vals: Vec<f64> = nodes.iter().map(|x| (x * 0.8).sin() * (-x * x / 4.0).exp()).collect();
        for &x in &[-2.7, -1.1, 0.3, 2.9] {
            let f = (x * 0.8f64).sin() * (-x * x / 4.0f64).exp();
            let p = barycentric_eval(&nodes, &w, &vals, x);
            assert!((p - f).abs() < 1e-12, "x={x}: {p} vs {f}");
        }
        // exact at nodes
        assert_eq!(barycentric_eval(&nodes, &w, &vals, nodes[7]), vals[7]);
    }

    #[test]
    fn diff_matrix_differentiates_polynomials() {
        let (nodes, _) = gauss_legendre_rule(12);
        let w = barycentric_weights(&nodes);
        let d = barycentric_diff_matrix(&nodes, &w);
        let vals: Vec<f64> = nodes.iter().map(|x| x.powi(5) - 2.0 * x).collect();
        for i in 0..nodes.len() {
            let expect = 5.0 * nodes[i].powi(4) - 2.0;
            let got: f64 = d[i].iter().zip(&vals).map(|(a, b)| a * b).sum();
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn pchip_preserves_monotone_range() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 29.0 * 10.0 - 5.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 / (1.0 + (2.0 * x).exp())).collect();
        let p = Pchip::new(&xs, &ys, Extend::Flat);
        let mut prev = f64::INFINITY;
        for i in 0..=500 {
            let x = -6.0 + 12.0 * i as f64 / 500.0;
            let v = p.eval(x);
            assert!((0.0..=1.0).contains(&v), "escaped [0,1]: {v}");
            assert!(v <= prev + 1e-14, "not monotone at {x}");
            prev = v;
        }
        assert_eq!(p.eval(-7.0), ys[0]);
        assert_eq!(p.eval(12.0), *ys.last().unwrap());
    }

    #[test]
    fn pchip_integral_matches_quadrature() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64 / 59.0 * 6.0 - 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (-x * x).exp()).collect();
        let p = Pchip::new(&xs, &ys, Extend::Flat);
        let full = p.integrate(-3.0, 3.0);
        // reference on the same interval (the Gaussian tail beyond +-3 is
        // itself ~4e-5, so compare against quadrature, not sqrt(pi))
        let (gn, gw) = gauss_legendre_rule(100);
        let reference: f64 = gn.iter().zip(&gw).map(|(x, w)| 3.0 * w * (-(3.0 * x) * (3.0 * x)).exp()).sum();
        assert!((full - reference).abs() < 3e-5, "{full} vs {reference}");
        // additivity with a partial cell
        let split = p.integrate(-3.0, 0.137) + p.integrate(0.137, 3.0);
        assert_abs_diff_eq!(full, split, epsilon = 1e-13);
    }

    #[test]
    fn finite_diff_second_order() {
        let xs: Vec<f64> = (0..21).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        let d = finite_diff_derivative(&xs, &ys);
        // exact for quadratics; cubic has O(h^2) error in the interior
        for i in 1..20 {
            assert!((d[i] - 3.0 * xs[i] * xs[i]).abs() < 0.011);
        }
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((r - 2.0f64.sqrt()).abs() < 1e-11);
    }
}
