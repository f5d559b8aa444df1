//! Built-in model data: momentum and energy functions, TBA kernels and
//! conserved-charge eigenvalue families.
//!
//! Charge indexing per model:
//!
//! * `sinh_gordon`, `free_fermion_ising`: index 0 is the energy
//!   eigenvalue m cosh(theta); a nonzero index s gives exp(s theta)
//!   (odd s are the local conserved charges).
//! * `lieb_liniger`: index r >= 1 gives p^(r-1); r = 1 is the particle
//!   density, r = 2 the momentum, r = 3 the energy.
//! * `hard_rods`, `free_nonrel_fermion`: index 1 is the particle number,
//!   2 the momentum, 3 the energy; higher r give p^(r-1).

use std::sync::Arc;

use crate::error::{GhdError, Result};
use crate::spectral::{
    KernelOperator, ParticleType, Parity, QuadratureScheme, SpectralFunction, SpectralGrid,
    Statistics,
};

type Func1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type KernelFn = Arc<dyn Fn(usize, f64, usize, f64) -> f64 + Send + Sync>;
type ChargeFn = Arc<dyn Fn(i64, usize, f64) -> f64 + Send + Sync>;

/// Dispersion data of one particle type.
pub struct TypeFunctions {
    pub id: String,
    pub statistics: Statistics,
    pub momentum: Func1,
    pub energy: Func1,
    pub momentum_deriv: Func1,
    pub energy_deriv: Func1,
    pub momentum_deriv2: Func1,
    pub energy_deriv2: Func1,
}

/// A model: particle content, dispersion, TBA kernel and charge family.
pub struct ModelSpec {
    pub name: String,
    types: Vec<TypeFunctions>,
    kernel: KernelFn,
    charge: ChargeFn,
    free: bool,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("types", &self.types.len())
            .field("free", &self.free)
            .finish()
    }
}

impl ModelSpec {
    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn statistics(&self, ty: usize) -> Statistics {
        self.types[ty].statistics
    }

    pub fn is_free(&self) -> bool {
        self.free
    }

    pub fn momentum(&self, ty: usize, theta: f64) -> f64 {
        (self.types[ty].momentum)(theta)
    }

    pub fn energy(&self, ty: usize, theta: f64) -> f64 {
        (self.types[ty].energy)(theta)
    }

    pub fn momentum_deriv(&self, ty: usize, theta: f64) -> f64 {
        (self.types[ty].momentum_deriv)(theta)
    }

    pub fn energy_deriv(&self, ty: usize, theta: f64) -> f64 {
        (self.types[ty].energy_deriv)(theta)
    }

    pub fn momentum_deriv2(&self, ty: usize, theta: f64) -> f64 {
        (self.types[ty].momentum_deriv2)(theta)
    }

    pub fn energy_deriv2(&self, ty: usize, theta: f64) -> f64 {
        (self.types[ty].energy_deriv2)(theta)
    }

    /// Bare group velocity E' / p'.
    pub fn group_velocity(&self, ty: usize, theta: f64) -> f64 {
        self.energy_deriv(ty, theta) / self.momentum_deriv(ty, theta)
    }

    /// Rapidity derivative of the group velocity.
    pub fn group_velocity_deriv(&self, ty: usize, theta: f64) -> f64 {
        let p1 = self.momentum_deriv(ty, theta);
        let e1 = self.energy_deriv(ty, theta);
        let p2 = (self.types[ty].momentum_deriv2)(theta);
        let e2 = (self.types[ty].energy_deriv2)(theta);
        (e2 * p1 - e1 * p2) / (p1 * p1)
    }

    /// TBA kernel phi(theta, alpha) between `(ty, theta)` and `(tz, alpha)`.
    pub fn phi(&self, ty: usize, theta: f64, tz: usize, alpha: f64) -> f64 {
        (self.kernel)(ty, theta, tz, alpha)
    }

    /// One-particle eigenvalue of charge `i` (model-specific table above).
    pub fn charge_eigenvalue(&self, i: i64, ty: usize, theta: f64) -> f64 {
        (self.charge)(i, ty, theta)
    }

    /// Particle types with symmetric rapidity truncation `[-cutoff, cutoff]`.
    pub fn truncated_types(&self, cutoff: f64) -> Result<Vec<ParticleType>> {
        self.types
            .iter()
            .map(|t| ParticleType::new(t.id.clone(), t.statistics, -cutoff, cutoff))
            .collect()
    }

    /// Grid with the default symmetric truncation.
    pub fn build_grid(
        &self,
        cutoff: f64,
        points_per_type: usize,
        scheme: QuadratureScheme,
    ) -> Result<Arc<SpectralGrid>> {
        SpectralGrid::build(self.truncated_types(cutoff)?, points_per_type, scheme)
    }

    pub fn kernel_operator(&self, grid: &Arc<SpectralGrid>) -> Result<KernelOperator> {
        KernelOperator::from_kernel(grid, |a, th, b, al| self.phi(a, th, b, al))
    }

    pub fn charge_function(&self, grid: &Arc<SpectralGrid>, i: i64) -> Result<SpectralFunction> {
        SpectralFunction::from_fn(grid, Parity::ScalarField, |ty, th| {
            self.charge_eigenvalue(i, ty, th)
        })
    }

    pub fn momentum_deriv_function(&self, grid: &Arc<SpectralGrid>) -> Result<SpectralFunction> {
        SpectralFunction::from_fn(grid, Parity::VectorField, |ty, th| self.momentum_deriv(ty, th))
    }

    pub fn energy_deriv_function(&self, grid: &Arc<SpectralGrid>) -> Result<SpectralFunction> {
        SpectralFunction::from_fn(grid, Parity::VectorField, |ty, th| self.energy_deriv(ty, th))
    }

    /// Faithful parametrization requires p' > 0 on every node.
    pub fn validate_on_grid(&self, grid: &SpectralGrid) -> Result<()> {
        for (ty, _, _, th, _) in grid.iter() {
            if self.momentum_deriv(ty, th) <= 0.0 {
                return Err(GhdError::InvalidParameter(format!(
                    "momentum derivative not positive at type {ty}, rapidity {th}"
                )));
            }
        }
        Ok(())
    }

    /// Fully user-specified model.
    pub fn custom(
        name: impl Into<String>,
        types: Vec<TypeFunctions>,
        kernel: KernelFn,
        charge: ChargeFn,
        free: bool,
    ) -> Self {
        ModelSpec {
            name: name.into(),
            types,
            kernel,
            charge,
            free,
        }
    }
}

fn relativistic_type(id: &str, m: f64) -> TypeFunctions {
    TypeFunctions {
        id: id.into(),
        statistics: Statistics::Fermion,
        momentum: Arc::new(move |th| m * th.sinh()),
        energy: Arc::new(move |th| m * th.cosh()),
        momentum_deriv: Arc::new(move |th| m * th.cosh()),
        energy_deriv: Arc::new(move |th| m * th.sinh()),
        momentum_deriv2: Arc::new(move |th| m * th.sinh()),
        energy_deriv2: Arc::new(move |th| m * th.cosh()),
    }
}

/// Relativistic charge table: 0 is the energy, s != 0 gives exp(s theta).
fn relativistic_charge(m: f64) -> ChargeFn {
    Arc::new(move |i, _, th| {
        if i == 0 {
            m * th.cosh()
        } else {
            (i as f64 * th).exp()
        }
    })
}

/// Sinh-Gordon model: single fermionic type, p = m sinh, E = m cosh,
/// kernel 2 sin(pi a) / (sinh^2(theta - alpha) + sin^2(pi a)).
pub fn sinh_gordon(a: f64, m: f64) -> Result<ModelSpec> {
    if !(0.0 < a && a < 1.0) {
        return Err(GhdError::InvalidParameter(format!(
            "sinh-Gordon coupling a = {a} outside (0, 1)"
        )));
    }
    if m <= 0.0 {
        return Err(GhdError::InvalidParameter(format!("mass {m} <= 0")));
    }
    let sin_pa = (std::f64::consts::PI * a).sin();
    Ok(ModelSpec {
        name: format!("sinh_gordon(a={a}, m={m})"),
        types: vec![relativistic_type("shg", m)],
        kernel: Arc::new(move |_, th, _, al| {
            2.0 * sin_pa / ((th - al).sinh().powi(2) + sin_pa * sin_pa)
        }),
        charge: relativistic_charge(m),
        free: false,
    })
}

/// Lieb-Liniger model in the momentum parametrization: theta = p, p' = 1,
/// E = p^2, fermionic TBA with kernel 2c / ((p - p')^2 + c^2).
pub fn lieb_liniger(c: f64) -> Result<ModelSpec> {
    if c <= 0.0 {
        return Err(GhdError::InvalidParameter(format!("coupling c = {c} <= 0")));
    }
    Ok(ModelSpec {
        name: format!("lieb_liniger(c={c})"),
        types: vec![TypeFunctions {
            id: "ll".into(),
            statistics: Statistics::Fermion,
            momentum: Arc::new(|p| p),
            energy: Arc::new(|p| p * p),
            momentum_deriv: Arc::new(|_| 1.0),
            energy_deriv: Arc::new(|p| 2.0 * p),
            momentum_deriv2: Arc::new(|_| 0.0),
            energy_deriv2: Arc::new(|_| 2.0),
        }],
        kernel: Arc::new(move |_, p, _, q| 2.0 * c / ((p - q).powi(2) + c * c)),
        charge: Arc::new(|i, _, p| {
            assert!(i >= 1, "Lieb-Liniger charge index starts at 1");
            p.powi(i as i32 - 1)
        }),
        free: false,
    })
}

/// Hard-rod gas: classical particles parametrized by velocity, p = theta,
/// E = theta^2 / 2, constant kernel phi = -2 d.
pub fn hard_rods(rod_length: f64) -> Result<ModelSpec> {
    if rod_length <= 0.0 {
        return Err(GhdError::InvalidParameter(format!(
            "rod length {rod_length} <= 0"
        )));
    }
    Ok(ModelSpec {
        name: format!("hard_rods(d={rod_length})"),
        types: vec![TypeFunctions {
            id: "rod".into(),
            statistics: Statistics::ClassicalParticle,
            momentum: Arc::new(|v| v),
            energy: Arc::new(|v| 0.5 * v * v),
            momentum_deriv: Arc::new(|_| 1.0),
            energy_deriv: Arc::new(|v| v),
            momentum_deriv2: Arc::new(|_| 0.0),
            energy_deriv2: Arc::new(|_| 1.0),
        }],
        kernel: Arc::new(move |_, _, _, _| -2.0 * rod_length),
        charge: Arc::new(|i, _, v| {
            assert!(i >= 1, "hard-rod charge index starts at 1");
            match i {
                1 => 1.0,
                2 => v,
                3 => 0.5 * v * v,
                _ => v.powi(i as i32 - 1),
            }
        }),
        free: false,
    })
}

/// Quantum Ising model (free Majorana fermion): relativistic dispersion
/// with zero kernel.
pub fn free_fermion_ising(m: f64) -> Result<ModelSpec> {
    if m <= 0.0 {
        return Err(GhdError::InvalidParameter(format!("mass {m} <= 0")));
    }
    Ok(ModelSpec {
        name: format!("free_fermion_ising(m={m})"),
        types: vec![relativistic_type("ising", m)],
        kernel: Arc::new(|_, _, _, _| 0.0),
        charge: relativistic_charge(m),
        free: true,
    })
}

/// Free nonrelativistic spinless fermion (Tonks-Girardeau limit of
/// Lieb-Liniger): theta = p, E = p^2 / (2 mass), zero kernel.
pub fn free_nonrel_fermion(mass: f64) -> Result<ModelSpec> {
    if mass <= 0.0 {
        return Err(GhdError::InvalidParameter(format!("mass {mass} <= 0")));
    }
    Ok(ModelSpec {
        name: format!("free_nonrel_fermion(mass={mass})"),
        types: vec![TypeFunctions {
            id: "nf".into(),
            statistics: Statistics::Fermion,
            momentum: Arc::new(|p| p),
            energy: Arc::new(move |p| 0.5 * p * p / mass),
            momentum_deriv: Arc::new(|_| 1.0),
            energy_deriv: Arc::new(move |p| p / mass),
            momentum_deriv2: Arc::new(|_| 0.0),
            energy_deriv2: Arc::new(move |_| 1.0 / mass),
        }],
        kernel: Arc::new(|_, _, _, _| 0.0),
        charge: Arc::new(move |i, _, p| {
            assert!(i >= 1, "free-fermion charge index starts at 1");
            match i {
                1 => 1.0,
                2 => p,
                3 => 0.5 * p * p / mass,
                _ => p.powi(i as i32 - 1),
            }
        }),
        free: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sinh_gordon_kernel_symmetric_and_diagonal() {
        let m = sinh_gordon(0.3, 1.0).unwrap();
        for (th, al) in [(0.2, -0.7), (1.1, 0.4)] {
            assert_abs_diff_eq!(m.phi(0, th, 0, al), m.phi(0, al, 0, th), epsilon = 1e-15);
        }
        let pa = std::f64::consts::PI * 0.3;
        assert_abs_diff_eq!(m.phi(0, 0.9, 0, 0.9), 2.0 / pa.sin(), epsilon = 1e-13);
        assert!(sinh_gordon(1.2, 1.0).is_err());
        assert!(sinh_gordon(0.3, 0.0).is_err());
    }

    #[test]
    fn relativistic_group_velocity_is_tanh() {
        for m in [sinh_gordon(0.3, 1.0).unwrap(), free_fermion_ising(2.0).unwrap()] {
            for th in [-1.5, 0.0, 0.8] {
                assert_abs_diff_eq!(m.group_velocity(0, th), th.tanh(), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn lieb_liniger_kernel_and_charges() {
        let m = lieb_liniger(1.0).unwrap();
        assert_abs_diff_eq!(m.phi(0, 0.3, 0, 0.3), 2.0, epsilon = 1e-15);
        assert_eq!(m.charge_eigenvalue(1, 0, 1.7), 1.0);
        assert_eq!(m.charge_eigenvalue(3, 0, 2.0), 4.0);
        // Tonks-Girardeau limit: kernel vanishes pointwise
        let big = lieb_liniger(1e9).unwrap();
        assert!(big.phi(0, 1.0, 0, -1.0).abs() < 1e-8);
        assert!(lieb_liniger(-1.0).is_err());
    }

    #[test]
    fn hard_rod_kernel_constant_and_classical() {
        let d = 0.4;
        let m = hard_rods(d).unwrap();
        for (a, b) in [(0.0, 0.0), (1.0, -2.0), (3.0, 0.5)] {
            assert_eq!(m.phi(0, a, 0, b), -2.0 * d);
        }
        assert_eq!(m.statistics(0), Statistics::ClassicalParticle);
        assert_eq!(m.statistics(0).stat_factor(0.7), 1.0);
    }

    #[test]
    fn nonrelativistic_group_velocity() {
        let mass = 1.5;
        let m = free_nonrel_fermion(mass).unwrap();
        for p in [-2.0, 0.3, 1.9] {
            assert_abs_diff_eq!(m.group_velocity(0, p), p / mass, epsilon = 1e-15);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        let models = [
            sinh_gordon(0.3, 1.3).unwrap(),
            lieb_liniger(2.0).unwrap(),
            hard_rods(0.2).unwrap(),
            free_nonrel_fermion(0.8).unwrap(),
        ];
        for m in &models {
            for th in [-1.2, 0.1, 2.3] {
                let pd = (m.momentum(0, th + h) - m.momentum(0, th - h)) / (2.0 * h);
                let ed = (m.energy(0, th + h) - m.energy(0, th - h)) / (2.0 * h);
                assert!(
                    (pd - m.momentum_deriv(0, th)).abs() <= 1e-8 * (1.0 + pd.abs()),
                    "{} p' at {th}",
                    m.name
                );
                assert!(
                    (ed - m.energy_deriv(0, th)).abs() <= 1e-8 * (1.0 + ed.abs()),
                    "{} E' at {th}",
                    m.name
                );
                let vd = (m.group_velocity(0, th + h) - m.group_velocity(0, th - h)) / (2.0 * h);
                assert!((vd - m.group_velocity_deriv(0, th)).abs() <= 1e-7 * (1.0 + vd.abs()));
            }
        }
    }

    #[test]
    fn momentum_deriv_positive_on_grid() {
        for m in [
            sinh_gordon(0.5, 1.0).unwrap(),
            lieb_liniger(1.0).unwrap(),
            hard_rods(0.3).unwrap(),
            free_fermion_ising(1.0).unwrap(),
        ] {
            let g = m.build_grid(6.0, 32, QuadratureScheme::GaussLegendre).unwrap();
            m.validate_on_grid(&g).unwrap();
        }
    }
}
