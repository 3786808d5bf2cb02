//! Simulated plants that play the role of the real system `f`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ilqr::Trajectory;
use crate::{ActionVector, StateVector};

/// Step used by [`Dynamics::jacobians`] when a plant has no analytic
/// derivatives.
pub const DEFAULT_FD_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what} has length {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} contains a non-finite entry")]
    NonFinite { what: &'static str },
    #[error("rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
}

/// A discrete-time plant `x(τ+1) = f(x(τ), u(τ))`.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Short identifier written into dataset headers.
    fn tag(&self) -> &str;

    fn step(&self, x: &StateVector, u: &ActionVector) -> Result<StateVector, DynamicsError>;

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`. Central differences unless overridden.
    fn jacobians(&self, x: &StateVector, u: &ActionVector) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        jacobians_fd(self, x, u, DEFAULT_FD_EPS)
    }
}

impl<D: Dynamics + ?Sized> Dynamics for &D {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn tag(&self) -> &str {
        (**self).tag()
    }
    fn step(&self, x: &StateVector, u: &ActionVector) -> Result<StateVector, DynamicsError> {
        (**self).step(x, u)
    }
    fn jacobians(&self, x: &StateVector, u: &ActionVector) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        (**self).jacobians(x, u)
    }
}

pub(crate) fn check_vector(what: &'static str, v: &DVector<f64>, expected: usize) -> Result<(), DynamicsError> {
    if v.len() != expected {
        return Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            actual: v.len(),
        });
    }
    if v.iter().any(|e| !e.is_finite()) {
        return Err(DynamicsError::NonFinite { what });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    ExplicitEuler,
    SemiImplicitEuler,
    Rk4,
}

/// Frictionless cart-pole. `θ` is measured from the upright position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length (distance from pivot to the pole's center of mass).
    pub pole_half_length: f64,
    pub gravity: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.81,
        }
    }
}

impl CartpoleParams {
    /// Time derivative of `[θ, ω, p, v]` under horizontal cart force `force`.
    fn derivative(&self, x: &[f64], force: f64) -> [f64; 4] {
        let (theta, omega, _, vel) = (x[0], x[1], x[2], x[3]);
        let total = self.cart_mass + self.pole_mass;
        let l = self.pole_half_length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + self.pole_mass * l * omega * omega * sin) / total;
        let theta_acc = (self.gravity * sin - cos * temp) / (l * (4.0 / 3.0 - self.pole_mass * cos * cos / total));
        let cart_acc = temp - self.pole_mass * l * theta_acc * cos / total;
        [omega, theta_acc, vel, cart_acc]
    }
}

/// Kinematic bicycle referenced at the rear axle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { wheelbase: 2.5 }
    }
}

impl VehicleParams {
    /// Time derivative of `[p_x, p_y, θ, v]` under `[steering, acceleration]`.
    fn derivative(&self, x: &[f64], u: &[f64]) -> [f64; 4] {
        let (heading, vel) = (x[2], x[3]);
        let (steer, acc) = (u[0], u[1]);
        [
            vel * heading.cos(),
            vel * heading.sin(),
            vel * steer.tan() / self.wheelbase,
            acc,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantModel {
    Cartpole(CartpoleParams),
    Vehicle(VehicleParams),
}

/// A simulated plant: continuous model, step size and integration scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    #[serde(flatten)]
    pub model: PlantModel,
    pub dt: f64,
    pub integrator: Integrator,
}

impl PlantParams {
    pub fn cartpole() -> Self {
        Self {
            model: PlantModel::Cartpole(CartpoleParams::default()),
            dt: 0.02,
            integrator: Integrator::Rk4,
        }
    }

    pub fn vehicle() -> Self {
        Self {
            model: PlantModel::Vehicle(VehicleParams::default()),
            dt: 0.02,
            integrator: Integrator::ExplicitEuler,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            PlantModel::Cartpole(_) => "cartpole",
            PlantModel::Vehicle(_) => "vehicle",
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("dt", self.dt)?;
        match &self.model {
            PlantModel::Cartpole(c) => {
                positive("cart_mass", c.cart_mass)?;
                positive("pole_mass", c.pole_mass)?;
                positive("pole_half_length", c.pole_half_length)?;
                positive("gravity", c.gravity)
            }
            PlantModel::Vehicle(v) => positive("wheelbase", v.wheelbase),
        }
    }

    fn derivative(&self, x: &[f64], u: &[f64]) -> [f64; 4] {
        match &self.model {
            PlantModel::Cartpole(c) => c.derivative(x, u[0]),
            PlantModel::Vehicle(v) => v.derivative(x, u),
        }
    }

    fn integrate(&self, x: &[f64], u: &[f64]) -> [f64; 4] {
        let h = self.dt;
        let x: [f64; 4] = [x[0], x[1], x[2], x[3]];
        let axpy = |a: &[f64; 4], s: f64, d: &[f64; 4]| -> [f64; 4] { std::array::from_fn(|i| a[i] + s * d[i]) };
        match self.integrator {
            Integrator::ExplicitEuler => axpy(&x, h, &self.derivative(&x, u)),
            Integrator::SemiImplicitEuler => {
                // Velocities (odd slots for the cartpole, speed for the
                // vehicle) are updated first and positions use the new values.
                let d = self.derivative(&x, u);
                match self.model {
                    PlantModel::Cartpole(_) => {
                        let omega = x[1] + h * d[1];
                        let vel = x[3] + h * d[3];
                        [x[0] + h * omega, omega, x[2] + h * vel, vel]
                    }
                    PlantModel::Vehicle(_) => {
                        let mut next = x;
                        next[3] = x[3] + h * d[3];
                        let d2 = self.derivative(&next, u);
                        next[0] = x[0] + h * d2[0];
                        next[1] = x[1] + h * d2[1];
                        next[2] = x[2] + h * d2[2];
                        next
                    }
                }
            }
            Integrator::Rk4 => {
                let k1 = self.derivative(&x, u);
                let k2 = self.derivative(&axpy(&x, 0.5 * h, &k1), u);
                let k3 = self.derivative(&axpy(&x, 0.5 * h, &k2), u);
                let k4 = self.derivative(&axpy(&x, h, &k3), u);
                std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            }
        }
    }

    /// Applies model inaccuracy: every affected parameter is scaled by
    /// `1 + fraction`.
    pub fn perturbed(&self, spec: &InaccuracySpec) -> Result<PlantParams, DynamicsError> {
        spec.validate()?;
        let scale = 1.0 + spec.fraction;
        let mut out = self.clone();
        for param in &spec.parameters {
            match (&mut out.model, param) {
                (PlantModel::Cartpole(c), PlantParameter::CartMass) => c.cart_mass *= scale,
                (PlantModel::Cartpole(c), PlantParameter::PoleMass) => c.pole_mass *= scale,
                (PlantModel::Cartpole(c), PlantParameter::PoleLength) => c.pole_half_length *= scale,
                (PlantModel::Cartpole(c), PlantParameter::Gravity) => c.gravity *= scale,
                (PlantModel::Vehicle(v), PlantParameter::Wheelbase) => v.wheelbase *= scale,
                (_, p) => {
                    return Err(DynamicsError::InvalidParams(format!(
                        "parameter {p:?} does not exist on a {} plant",
                        self.kind()
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl Dynamics for PlantParams {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        match self.model {
            PlantModel::Cartpole(_) => 1,
            PlantModel::Vehicle(_) => 2,
        }
    }

    fn tag(&self) -> &str {
        self.kind()
    }

    fn step(&self, x: &StateVector, u: &ActionVector) -> Result<StateVector, DynamicsError> {
        check_vector("state", x, self.state_dim())?;
        check_vector("action", u, self.action_dim())?;
        let next = self.integrate(x.as_slice(), u.as_slice());
        Ok(DVector::from_row_slice(&next))
    }
}

/// Free function form of [`PlantParams::perturbed`].
pub fn perturb_params(plant: &PlantParams, spec: &InaccuracySpec) -> Result<PlantParams, DynamicsError> {
    plant.perturbed(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantParameter {
    CartMass,
    PoleMass,
    /// The pole half-length.
    PoleLength,
    Gravity,
    Wheelbase,
}

/// Fractional mismatch applied to a subset of plant parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InaccuracySpec {
    pub fraction: f64,
    pub parameters: Vec<PlantParameter>,
}

impl Default for InaccuracySpec {
    fn default() -> Self {
        Self::none()
    }
}

impl InaccuracySpec {
    pub fn none() -> Self {
        Self {
            fraction: 0.0,
            parameters: vec![PlantParameter::PoleMass, PlantParameter::PoleLength],
        }
    }

    /// Pole mass and pole length scaled by `1 + fraction`.
    pub fn pole(fraction: f64) -> Self {
        Self {
            fraction,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(DynamicsError::InvalidParams(format!(
                "inaccuracy fraction must lie in [0, 1), got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Time-invariant linear plant `x⁺ = A x + B u`, mostly useful as an exactly
/// solvable test problem.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, DynamicsError> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(DynamicsError::InvalidParams(format!(
                "A is {}x{} and B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn tag(&self) -> &str {
        "linear"
    }

    fn step(&self, x: &StateVector, u: &ActionVector) -> Result<StateVector, DynamicsError> {
        check_vector("state", x, self.state_dim())?;
        check_vector("action", u, self.action_dim())?;
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobians(&self, x: &StateVector, u: &ActionVector) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        check_vector("state", x, self.state_dim())?;
        check_vector("action", u, self.action_dim())?;
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Central finite-difference Jacobians of `plant.step` at `(x, u)`.
pub fn jacobians_fd<D: Dynamics + ?Sized>(
    plant: &D,
    x: &StateVector,
    u: &ActionVector,
    eps: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(DynamicsError::InvalidEpsilon(eps));
    }
    let n = plant.state_dim();
    let m = plant.action_dim();
    let central = |plus: StateVector, minus: StateVector| -> Result<DVector<f64>, DynamicsError> {
        let d = (plus - minus) / (2.0 * eps);
        if d.iter().any(|e| !e.is_finite()) {
            return Err(DynamicsError::NonFinite {
                what: "dynamics evaluation",
            });
        }
        Ok(d)
    };

    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += eps;
        xm[j] -= eps;
        let col = central(plant.step(&xp, u)?, plant.step(&xm, u)?)?;
        a.set_column(j, &col);
    }
    let mut b = DMatrix::zeros(n, m);
    for j in 0..m {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += eps;
        um[j] -= eps;
        let col = central(plant.step(x, &up)?, plant.step(x, &um)?)?;
        b.set_column(j, &col);
    }
    Ok((a, b))
}

/// Open-loop rollout of `actions` from `x0`.
pub fn rollout<D: Dynamics + ?Sized>(
    plant: &D,
    x0: &StateVector,
    actions: &[ActionVector],
) -> Result<Trajectory, DynamicsError> {
    check_vector("initial state", x0, plant.state_dim())?;
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(x0.clone());
    for (tau, u) in actions.iter().enumerate() {
        let next = plant.step(&states[tau], u)?;
        if next.iter().any(|e| !e.is_finite()) {
            return Err(DynamicsError::NonFiniteState { step: tau + 1 });
        }
        states.push(next);
    }
    Ok(Trajectory {
        states,
        actions: actions.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(e: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(e)
    }

    #[test]
    fn cartpole_upright_is_fixed_point() {
        let plant = PlantParams::cartpole();
        let next = plant.step(&v(&[0.0; 4]), &v(&[0.0])).unwrap();
        assert_eq!(next, v(&[0.0; 4]));
    }

    #[test]
    fn vehicle_coasts_straight() {
        let plant = PlantParams::vehicle();
        let next = plant.step(&v(&[0.0, -10.0, 0.0, 8.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(next, v(&[8.0 * plant.dt, -10.0, 0.0, 8.0]));
    }

    /// Cart-pole accelerations solved from the Lagrangian mass matrix.
    fn lagrangian_rhs(c: &CartpoleParams, x: &[f64; 4], force: f64) -> [f64; 4] {
        let (m, big_m, l, g) = (c.pole_mass, c.cart_mass, c.pole_half_length, c.gravity);
        let (s, co) = (x[0].sin(), x[0].cos());
        // [[M+m, m l cos], [m l cos, 4/3 m l²]] [p̈, θ̈] = [F + m l ω² sin, m g l sin]
        let (a11, a12, a22) = (big_m + m, m * l * co, 4.0 / 3.0 * m * l * l);
        let (b1, b2) = (force + m * l * x[1] * x[1] * s, m * g * l * s);
        let det = a11 * a22 - a12 * a12;
        let p_acc = (b1 * a22 - a12 * b2) / det;
        let th_acc = (a11 * b2 - a12 * b1) / det;
        [x[1], th_acc, x[3], p_acc]
    }

    #[test]
    fn cartpole_step_matches_fine_midpoint_integration() {
        let plant = PlantParams::cartpole();
        let PlantModel::Cartpole(c) = &plant.model else {
            unreachable!()
        };
        let next = plant.step(&v(&[0.1, 0.0, 0.0, 0.0]), &v(&[1.0])).unwrap();

        let h = plant.dt / 100.0;
        let mut x = [0.1, 0.0, 0.0, 0.0];
        for _ in 0..100 {
            let k1 = lagrangian_rhs(c, &x, 1.0);
            let mid: [f64; 4] = std::array::from_fn(|i| x[i] + 0.5 * h * k1[i]);
            let k2 = lagrangian_rhs(c, &mid, 1.0);
            x = std::array::from_fn(|i| x[i] + h * k2[i]);
        }
        for i in 0..4 {
            assert!((next[i] - x[i]).abs() <= 1e-6, "{i}: {} vs {}", next[i], x[i]);
        }
    }

    fn cartpole_energy(c: &CartpoleParams, x: &DVector<f64>) -> f64 {
        let (m, big_m, l, g) = (c.pole_mass, c.cart_mass, c.pole_half_length, c.gravity);
        let (th, om, vel) = (x[0], x[1], x[3]);
        0.5 * (big_m + m) * vel * vel
            + m * l * vel * om * th.cos()
            + 2.0 / 3.0 * m * l * l * om * om
            + m * g * l * th.cos()
    }

    #[test]
    fn cartpole_energy_drift_is_small() {
        let plant = PlantParams::cartpole();
        let PlantModel::Cartpole(c) = &plant.model else {
            unreachable!()
        };
        let x0 = v(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0]);
        let traj = rollout(&plant, &x0, &vec![v(&[0.0]); 100]).unwrap();
        // Energy relative to the hanging rest configuration so the scale is
        // the swing energy rather than an arbitrary potential offset.
        let floor = -c.pole_mass * c.gravity * c.pole_half_length;
        let e0 = cartpole_energy(c, &x0) - floor;
        for x in &traj.states {
            let e = cartpole_energy(c, x) - floor;
            assert!(((e - e0) / e0).abs() <= 0.01);
        }
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let plant = PlantParams::cartpole();
        assert!(matches!(
            plant.step(&v(&[0.0; 3]), &v(&[0.0])),
            Err(DynamicsError::DimensionMismatch {
                expected: 4,
                actual: 3,
                ..
            })
        ));
        assert!(matches!(
            plant.step(&v(&[0.0; 4]), &v(&[f64::NAN])),
            Err(DynamicsError::NonFinite { .. })
        ));
    }

    #[test]
    fn vehicle_fd_position_velocity_entry_is_dt() {
        let plant = PlantParams::vehicle();
        let (a, _) = jacobians_fd(&plant, &v(&[1.0, -3.0, 0.0, 5.0]), &v(&[0.0, 0.0]), 1e-6).unwrap();
        assert_relative_eq!(a[(0, 3)], plant.dt, epsilon = 1e-9);
    }

    /// Σ_{k=0}^{4} (hA)^k / (k+1)! style polynomials: RK4 applied to a linear
    /// ODE is exactly the degree-4 Taylor polynomial of the matrix exponential.
    fn rk4_linear(ac: &DMatrix<f64>, bc: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = ac.nrows();
        let ha = ac * h;
        let mut a = DMatrix::identity(n, n);
        let mut bsum = DMatrix::identity(n, n);
        let mut pow = DMatrix::identity(n, n);
        let mut fact = 1.0;
        for k in 1..=4 {
            pow = &pow * &ha;
            fact *= k as f64;
            a += &pow / fact;
            bsum += &pow / (fact * (k as f64 + 1.0));
        }
        (a, bsum * bc * h)
    }

    #[test]
    fn cartpole_fd_matches_upright_linearization() {
        let plant = PlantParams::cartpole();
        let PlantModel::Cartpole(c) = &plant.model else {
            unreachable!()
        };
        let (m, big_m, l, g) = (c.pole_mass, c.cart_mass, c.pole_half_length, c.gravity);
        let total = m + big_m;
        let denom = l * (4.0 / 3.0 - m / total);
        // θ̈ = (gθ - F/(M+m)) / denom,  p̈ = F/(M+m) - m l θ̈ /(M+m)
        let mut ac = DMatrix::zeros(4, 4);
        ac[(0, 1)] = 1.0;
        ac[(1, 0)] = g / denom;
        ac[(2, 3)] = 1.0;
        ac[(3, 0)] = -m * l * g / (denom * total);
        let mut bc = DMatrix::zeros(4, 1);
        bc[(1, 0)] = -1.0 / (total * denom);
        bc[(3, 0)] = 1.0 / total + m * l / (total * total * denom);
        let (a_exp, b_exp) = rk4_linear(&ac, &bc, plant.dt);

        let (a, b) = jacobians_fd(&plant, &v(&[0.0; 4]), &v(&[0.0]), 1e-5).unwrap();
        assert!((a - a_exp).amax() <= 1e-4);
        assert!((b - b_exp).amax() <= 1e-4);
    }

    #[test]
    fn fd_converges_at_second_order() {
        let plant = PlantParams::cartpole();
        let x = v(&[2.0, -1.0, 0.3, 0.5]);
        let u = v(&[3.0]);
        let e = 1e-2;
        let (a1, b1) = jacobians_fd(&plant, &x, &u, e).unwrap();
        let (a2, b2) = jacobians_fd(&plant, &x, &u, e / 2.0).unwrap();
        let (a3, b3) = jacobians_fd(&plant, &x, &u, e / 4.0).unwrap();
        let pairs = a1.iter().zip(&a2).zip(&a3).chain(b1.iter().zip(&b2).zip(&b3));
        let mut checked = 0;
        for ((j1, j2), j3) in pairs {
            let (d1, d2) = (j1 - j2, j2 - j3);
            if d1.abs() > 1e-9 {
                let ratio = d1 / d2;
                assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
                checked += 1;
            }
            assert!(d1.abs() <= 10.0 * e * e);
        }
        assert!(checked > 0);
    }

    #[test]
    fn fd_rejects_bad_eps() {
        let plant = PlantParams::vehicle();
        let r = jacobians_fd(&plant, &v(&[0.0; 4]), &v(&[0.0; 2]), 0.0);
        assert_eq!(r, Err(DynamicsError::InvalidEpsilon(0.0)));
    }

    #[test]
    fn perturbation_examples() {
        let plant = PlantParams::cartpole();
        assert_eq!(plant.perturbed(&InaccuracySpec::pole(0.0)).unwrap(), plant);

        let spec = InaccuracySpec {
            fraction: 0.4,
            parameters: vec![PlantParameter::PoleMass],
        };
        let PlantModel::Cartpole(p) = plant.perturbed(&spec).unwrap().model else {
            unreachable!()
        };
        assert_relative_eq!(p.pole_mass, 0.14, epsilon = 1e-15);
        assert_eq!(p.pole_half_length, 0.5);

        let PlantModel::Cartpole(p) = plant.perturbed(&InaccuracySpec::pole(0.6)).unwrap().model else {
            unreachable!()
        };
        assert_relative_eq!(p.pole_mass, 0.16, epsilon = 1e-15);
        assert_relative_eq!(p.pole_half_length, 0.8, epsilon = 1e-15);

        assert!(plant.perturbed(&InaccuracySpec::pole(1.0)).is_err());
        let wrong = InaccuracySpec {
            fraction: 0.1,
            parameters: vec![PlantParameter::Wheelbase],
        };
        assert!(plant.perturbed(&wrong).is_err());
    }

    #[test]
    fn rollout_edge_cases() {
        let plant = PlantParams::cartpole();
        let x0 = v(&[0.3, 0.0, 0.0, 0.0]);
        let empty = rollout(&plant, &x0, &[]).unwrap();
        assert_eq!(empty.states, vec![x0.clone()]);
        assert!(empty.actions.is_empty());

        let rest = rollout(&plant, &v(&[0.0; 4]), &vec![v(&[0.0]); 20]).unwrap();
        assert!(rest.states.iter().all(|s| s.iter().all(|e| *e == 0.0)));

        let blowup = rollout(&plant, &x0, &[v(&[1e308]), v(&[1e308])]);
        assert!(matches!(blowup, Err(DynamicsError::NonFiniteState { .. })));
    }

    #[test]
    fn plant_params_round_trip_through_toml() {
        for plant in [PlantParams::cartpole(), PlantParams::vehicle()] {
            let text = toml::to_string(&plant).unwrap();
            let back: PlantParams = toml::from_str(&text).unwrap();
            assert_eq!(back, plant);
        }
    }

    proptest! {
        #[test]
        fn rollout_is_repeated_step(
            x0 in proptest::array::uniform4(-2.0f64..2.0),
            us in proptest::collection::vec(-5.0f64..5.0, 0..30),
        ) {
            let plant = PlantParams::cartpole();
            let x0 = v(&x0);
            let actions: Vec<_> = us.iter().map(|u| v(&[*u])).collect();
            let traj = rollout(&plant, &x0, &actions).unwrap();
            let mut x = x0;
            for (tau, u) in actions.iter().enumerate() {
                x = plant.step(&x, u).unwrap();
                prop_assert_eq!(&traj.states[tau + 1], &x);
            }
            let again = rollout(&plant, &traj.states[0], &actions).unwrap();
            prop_assert_eq!(again, traj);
        }

        #[test]
        fn perturbation_composes_multiplicatively(a in 0.0f64..0.9, b in 0.0f64..0.9) {
            let plant = PlantParams::cartpole();
            let twice = plant
                .perturbed(&InaccuracySpec::pole(a)).unwrap()
                .perturbed(&InaccuracySpec::pole(b)).unwrap();
            let PlantModel::Cartpole(p) = twice.model else { unreachable!() };
            prop_assert!((p.pole_mass - 0.1 * (1.0 + a) * (1.0 + b)).abs() < 1e-14);
            prop_assert!((p.pole_half_length - 0.5 * (1.0 + a) * (1.0 + b)).abs() < 1e-14);
        }
    }
}
