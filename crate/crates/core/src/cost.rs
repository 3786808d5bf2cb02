//! Quadratic stage and terminal costs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ilqr::Trajectory;
use crate::{ActionVector, StateVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("{what} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("{0} is not positive semidefinite")]
    NotPositiveSemidefinite(&'static str),
    #[error("{0}")]
    Malformed(String),
}

/// Which summation convention the objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// `Σ_{τ=0}^{T} (x-r)ᵀQ(x-r) + uᵀRu`; the last stage has no action.
    Tracking,
    /// `x(T)ᵀQ_T x(T) + Σ_{τ=0}^{T-1} xᵀQx + uᵀRu`; the reference is zero.
    TerminalRegulation,
}

/// Weights and reference of the quadratic objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostSpecRepr", into = "CostSpecRepr")]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub reference: StateVector,
    pub mode: CostMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSpecRepr {
    mode: CostMode,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    q_terminal: Vec<Vec<f64>>,
    reference: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CostError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CostError::Malformed(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl TryFrom<CostSpecRepr> for CostSpec {
    type Error = CostError;

    fn try_from(repr: CostSpecRepr) -> Result<Self, CostError> {
        let spec = CostSpec {
            q: matrix_from_rows("q", &repr.q)?,
            r: matrix_from_rows("r", &repr.r)?,
            q_terminal: matrix_from_rows("q_terminal", &repr.q_terminal)?,
            reference: DVector::from_vec(repr.reference),
            mode: repr.mode,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<CostSpec> for CostSpecRepr {
    fn from(spec: CostSpec) -> Self {
        CostSpecRepr {
            mode: spec.mode,
            q: rows_of(&spec.q),
            r: rows_of(&spec.r),
            q_terminal: rows_of(&spec.q_terminal),
            reference: spec.reference.iter().copied().collect(),
        }
    }
}

/// First- and second-order expansion of a stage (or terminal) cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostExpansion {
    pub jx: DVector<f64>,
    pub ju: DVector<f64>,
    pub jxx: DMatrix<f64>,
    pub juu: DMatrix<f64>,
    pub jux: DMatrix<f64>,
}

fn diag(entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(entries))
}

impl CostSpec {
    /// Swing-up weights: angle dominated, with a heavy terminal penalty.
    pub fn cartpole_default() -> Self {
        Self {
            q: diag(&[10.0, 1.0, 1.0, 1.0]),
            r: diag(&[0.1]),
            q_terminal: diag(&[100.0, 10.0, 10.0, 10.0]),
            reference: DVector::zeros(4),
            mode: CostMode::TerminalRegulation,
        }
    }

    /// Straight-line tracking at `r = [0, -10, 0, 8]`. Longitudinal position
    /// is unweighted: the task fixes the lane, heading and speed.
    pub fn vehicle_default() -> Self {
        Self {
            q: diag(&[0.0, 10.0, 10.0, 10.0]),
            r: diag(&[1.0, 1.0]),
            q_terminal: diag(&[0.0, 10.0, 10.0, 10.0]),
            reference: DVector::from_row_slice(&[0.0, -10.0, 0.0, 8.0]),
            mode: CostMode::Tracking,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let n = self.q.nrows();
        let m = self.r.nrows();
        let square = |what, mat: &DMatrix<f64>, dim| {
            if mat.nrows() != dim || mat.ncols() != dim {
                Err(CostError::DimensionMismatch {
                    what,
                    expected: dim,
                    actual: mat.ncols().max(mat.nrows()),
                })
            } else {
                Ok(())
            }
        };
        square("Q", &self.q, n)?;
        square("R", &self.r, m)?;
        square("Q_T", &self.q_terminal, n)?;
        if self.reference.len() != n {
            return Err(CostError::DimensionMismatch {
                what: "reference",
                expected: n,
                actual: self.reference.len(),
            });
        }
        for (name, mat) in [("Q", &self.q), ("R", &self.r), ("Q_T", &self.q_terminal)] {
            if (mat - mat.transpose()).amax() > 1e-12 {
                return Err(CostError::NotSymmetric(name));
            }
        }
        if self.r.clone().cholesky().is_none() {
            return Err(CostError::NotPositiveDefinite("R"));
        }
        for (name, mat) in [("Q", &self.q), ("Q_T", &self.q_terminal)] {
            let min_eig = mat.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-10 * mat.amax().max(1.0) {
                return Err(CostError::NotPositiveSemidefinite(name));
            }
        }
        Ok(())
    }

    /// Reference actually used by the objective (zero in regulation mode).
    pub fn effective_reference(&self) -> StateVector {
        match self.mode {
            CostMode::Tracking => self.reference.clone(),
            CostMode::TerminalRegulation => DVector::zeros(self.state_dim()),
        }
    }

    /// Weight applied to the final state.
    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        match self.mode {
            CostMode::Tracking => &self.q,
            CostMode::TerminalRegulation => &self.q_terminal,
        }
    }

    fn check(&self, x: &StateVector, u: Option<&ActionVector>) -> Result<(), CostError> {
        if x.len() != self.state_dim() {
            return Err(CostError::DimensionMismatch {
                what: "state",
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        if let Some(u) = u {
            if u.len() != self.action_dim() {
                return Err(CostError::DimensionMismatch {
                    what: "action",
                    expected: self.action_dim(),
                    actual: u.len(),
                });
            }
        }
        Ok(())
    }

    pub fn stage_cost(&self, x: &StateVector, u: &ActionVector) -> Result<f64, CostError> {
        self.check(x, Some(u))?;
        let e = x - self.effective_reference();
        Ok(e.dot(&(&self.q * &e)) + u.dot(&(&self.r * u)))
    }

    pub fn terminal_cost(&self, x: &StateVector) -> Result<f64, CostError> {
        self.check(x, None)?;
        let e = x - self.effective_reference();
        Ok(e.dot(&(self.terminal_weight() * &e)))
    }

    /// Objective of a whole trajectory under the mode's summation convention.
    pub fn total_cost(&self, traj: &Trajectory) -> Result<f64, CostError> {
        if traj.states.len() != traj.actions.len() + 1 {
            return Err(CostError::DimensionMismatch {
                what: "trajectory states",
                expected: traj.actions.len() + 1,
                actual: traj.states.len(),
            });
        }
        let mut total = 0.0;
        for (x, u) in traj.states.iter().zip(&traj.actions) {
            total += self.stage_cost(x, u)?;
        }
        Ok(total + self.terminal_cost(traj.states.last().expect("non-empty"))?)
    }

    /// Exact derivatives of the stage cost at `(x, u)`, or of the terminal
    /// cost at `x` when `terminal` is set (then `u` is ignored and the action
    /// terms are empty).
    pub fn cost_expansion(
        &self,
        x: &StateVector,
        u: &ActionVector,
        terminal: bool,
    ) -> Result<CostExpansion, CostError> {
        let e = x - self.effective_reference();
        if terminal {
            self.check(x, None)?;
            let w = self.terminal_weight();
            return Ok(CostExpansion {
                jx: 2.0 * w * e,
                ju: DVector::zeros(0),
                jxx: 2.0 * w,
                juu: DMatrix::zeros(0, 0),
                jux: DMatrix::zeros(0, self.state_dim()),
            });
        }
        self.check(x, Some(u))?;
        Ok(CostExpansion {
            jx: 2.0 * &self.q * e,
            ju: 2.0 * &self.r * u,
            jxx: 2.0 * &self.q,
            juu: 2.0 * &self.r,
            jux: DMatrix::zeros(self.action_dim(), self.state_dim()),
        })
    }
}

/// Free-function forms matching the operation names used across the crate.
pub fn stage_cost(x: &StateVector, u: &ActionVector, spec: &CostSpec) -> Result<f64, CostError> {
    spec.stage_cost(x, u)
}

pub fn terminal_cost(x: &StateVector, spec: &CostSpec) -> Result<f64, CostError> {
    spec.terminal_cost(x)
}

pub fn total_cost(traj: &Trajectory, spec: &CostSpec) -> Result<f64, CostError> {
    spec.total_cost(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(e: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(e)
    }

    fn unit_spec(mode: CostMode) -> CostSpec {
        CostSpec {
            q: DMatrix::identity(4, 4),
            r: DMatrix::identity(1, 1),
            q_terminal: DMatrix::identity(4, 4),
            reference: DVector::zeros(4),
            mode,
        }
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * shift
    }

    fn random_spec(rng: &mut ChaCha8Rng, mode: CostMode) -> CostSpec {
        CostSpec {
            q: random_psd(rng, 4, 0.0),
            r: random_psd(rng, 2, 0.1),
            q_terminal: random_psd(rng, 4, 0.0),
            reference: DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0)),
            mode,
        }
    }

    /// Σ_ij e_i W_ij e_j written out entry by entry.
    fn quad_elementwise(w: &DMatrix<f64>, e: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..e.len() {
            for j in 0..e.len() {
                s += e[i] * w[(i, j)] * e[j];
            }
        }
        s
    }

    #[test]
    fn stage_cost_examples() {
        let spec = unit_spec(CostMode::Tracking);
        assert_eq!(spec.stage_cost(&v(&[0.0; 4]), &v(&[0.0])).unwrap(), 0.0);
        assert_eq!(spec.stage_cost(&v(&[1.0, 0.0, 0.0, 0.0]), &v(&[2.0])).unwrap(), 5.0);
        assert!(matches!(
            spec.stage_cost(&v(&[0.0; 3]), &v(&[0.0])),
            Err(CostError::DimensionMismatch { .. })
        ));

        let vehicle = CostSpec::vehicle_default();
        let r = vehicle.reference.clone();
        assert_eq!(vehicle.stage_cost(&r, &v(&[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn terminal_cost_examples() {
        let mut spec = unit_spec(CostMode::TerminalRegulation);
        spec.q_terminal = diag(&[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(spec.terminal_cost(&v(&[3.0, 7.0, -1.0, 4.0])).unwrap(), 18.0);
        assert_eq!(spec.terminal_cost(&v(&[0.0; 4])).unwrap(), 0.0);
    }

    #[test]
    fn costs_match_elementwise_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [CostMode::Tracking, CostMode::TerminalRegulation] {
            for _ in 0..50 {
                let spec = random_spec(&mut rng, mode);
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
                let u: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
                let r = spec.effective_reference();
                let e: Vec<f64> = (0..4).map(|i| x[i] - r[i]).collect();
                let expect = quad_elementwise(&spec.q, &e) + quad_elementwise(&spec.r, &u);
                assert_relative_eq!(spec.stage_cost(&v(&x), &v(&u)).unwrap(), expect, max_relative = 1e-12);
                let wt = if mode == CostMode::Tracking {
                    &spec.q
                } else {
                    &spec.q_terminal
                };
                assert_relative_eq!(
                    spec.terminal_cost(&v(&x)).unwrap(),
                    quad_elementwise(wt, &e),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn total_cost_cases() {
        let spec = CostSpec::cartpole_default();
        let zero = Trajectory {
            states: vec![v(&[0.0; 4]); 6],
            actions: vec![v(&[0.0]); 5],
        };
        assert_eq!(spec.total_cost(&zero).unwrap(), 0.0);

        let one = Trajectory {
            states: vec![v(&[1.0, 0.0, 0.0, 0.0]), v(&[0.5, 0.0, 0.0, 0.0])],
            actions: vec![v(&[2.0])],
        };
        // 10·1 + 0.1·4 + 100·0.25
        assert_relative_eq!(spec.total_cost(&one).unwrap(), 35.4, epsilon = 1e-12);

        let tracking = unit_spec(CostMode::Tracking);
        // Tracking sums every state: 1 + 4 + 0.25
        assert_relative_eq!(tracking.total_cost(&one).unwrap(), 5.25, epsilon = 1e-12);

        let bad = Trajectory {
            states: vec![v(&[0.0; 4])],
            actions: vec![v(&[0.0])],
        };
        assert!(spec.total_cost(&bad).is_err());
    }

    #[test]
    fn total_cost_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [CostMode::Tracking, CostMode::TerminalRegulation] {
            let spec = random_spec(&mut rng, mode);
            let t = 40;
            let traj = Trajectory {
                states: (0..=t)
                    .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0)))
                    .collect(),
                actions: (0..t)
                    .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)))
                    .collect(),
            };
            let r = spec.effective_reference();
            let mut naive = 0.0;
            for tau in 0..=t {
                let e: Vec<f64> = (0..4).map(|i| traj.states[tau][i] - r[i]).collect();
                if tau < t {
                    naive += quad_elementwise(&spec.q, &e);
                    naive += quad_elementwise(&spec.r, traj.actions[tau].as_slice());
                } else if mode == CostMode::Tracking {
                    naive += quad_elementwise(&spec.q, &e);
                } else {
                    naive += quad_elementwise(&spec.q_terminal, &e);
                }
            }
            let total = spec.total_cost(&traj).unwrap();
            assert_relative_eq!(total, naive, max_relative = 1e-9);

            // Reassociated summation: reverse order.
            let mut rev = spec.terminal_cost(&traj.states[t]).unwrap();
            for tau in (0..t).rev() {
                rev += spec.stage_cost(&traj.states[tau], &traj.actions[tau]).unwrap();
            }
            assert_relative_eq!(total, rev, max_relative = 1e-9);
        }
    }

    #[test]
    fn expansion_at_reference_has_zero_gradient() {
        let spec = CostSpec::vehicle_default();
        let ex = spec.cost_expansion(&spec.reference, &v(&[0.0, 0.0]), false).unwrap();
        assert_eq!(ex.jx, DVector::zeros(4));
        assert_eq!(ex.ju, DVector::zeros(2));
        assert_eq!(ex.jxx, 2.0 * &spec.q);
        assert_eq!(ex.juu, 2.0 * &spec.r);
        assert_eq!(ex.jux, DMatrix::zeros(2, 4));
    }

    #[test]
    fn expansion_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-5;
        for mode in [CostMode::Tracking, CostMode::TerminalRegulation] {
            for _ in 0..100 {
                let spec = random_spec(&mut rng, mode);
                let x = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
                let u = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
                let ex = spec.cost_expansion(&x, &u, false).unwrap();
                let ext = spec.cost_expansion(&x, &u, true).unwrap();
                // Hessians are constant: identical at another point.
                let other = spec.cost_expansion(&(2.0 * &x), &(-&u), false).unwrap();
                assert_eq!(ex.jxx, other.jxx);
                assert_eq!(ex.juu, other.juu);
                for i in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += eps;
                    xm[i] -= eps;
                    let fd = (spec.stage_cost(&xp, &u).unwrap() - spec.stage_cost(&xm, &u).unwrap()) / (2.0 * eps);
                    assert!((fd - ex.jx[i]).abs() <= 1e-6 * ex.jx[i].abs().max(1.0));
                    let fdt = (spec.terminal_cost(&xp).unwrap() - spec.terminal_cost(&xm).unwrap()) / (2.0 * eps);
                    assert!((fdt - ext.jx[i]).abs() <= 1e-6 * ext.jx[i].abs().max(1.0));
                }
                for i in 0..2 {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[i] += eps;
                    um[i] -= eps;
                    let fd = (spec.stage_cost(&x, &up).unwrap() - spec.stage_cost(&x, &um).unwrap()) / (2.0 * eps);
                    assert!((fd - ex.ju[i]).abs() <= 1e-6 * ex.ju[i].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_weights() {
        let mut spec = CostSpec::cartpole_default();
        spec.r = diag(&[0.0]);
        assert_eq!(spec.validate(), Err(CostError::NotPositiveDefinite("R")));
        let mut spec = CostSpec::cartpole_default();
        spec.q[(0, 1)] = 1.0;
        assert_eq!(spec.validate(), Err(CostError::NotSymmetric("Q")));
        let mut spec = CostSpec::cartpole_default();
        spec.q[(0, 0)] = -1.0;
        assert_eq!(spec.validate(), Err(CostError::NotPositiveSemidefinite("Q")));
        assert!(CostSpec::vehicle_default().validate().is_ok());
    }

    #[test]
    fn serde_round_trip() {
        for spec in [CostSpec::cartpole_default(), CostSpec::vehicle_default()] {
            let text = toml::to_string(&spec).unwrap();
            let back: CostSpec = toml::from_str(&text).unwrap();
            assert_eq!(back, spec);
        }
        let bad = "mode = \"tracking\"\nq = [[1.0]]\nr = [[-1.0]]\nq_terminal = [[1.0]]\nreference = [0.0]\n";
        assert!(toml::from_str::<CostSpec>(bad).is_err());
    }
}
