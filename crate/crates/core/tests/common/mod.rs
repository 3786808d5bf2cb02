//! Random linear-quadratic instances and an independent Riccati solution.

// Each test target compiles this module separately and uses a subset.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use neural_ilqr::cost::{CostMode, CostSpec};
use neural_ilqr::env::{rollout, LinearPlant};
use neural_ilqr::ilqr::Trajectory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub plant: LinearPlant,
    pub cost: CostSpec,
    pub x0: DVector<f64>,
    pub horizon: usize,
}

fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=4);
    let horizon = rng.random_range(1..=20);
    let a = DMatrix::from_fn(
        n,
        n,
        |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.4..0.4),
    );
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let cost = CostSpec {
        q: spd(&mut rng, n, 0.1),
        r: spd(&mut rng, m, 0.1),
        q_terminal: spd(&mut rng, n, 0.5),
        reference: DVector::zeros(n),
        mode: CostMode::TerminalRegulation,
    };
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    Instance {
        plant: LinearPlant::new(a, b).unwrap(),
        cost,
        x0,
        horizon,
    }
}

/// Returns the optimal feedback matrices `u_t = -L_t x_t` and cost
/// `x0ᵀ P_0 x0` for `Σ xᵀQx + uᵀRu + x_Tᵀ Q_T x_T`.
pub fn riccati(inst: &Instance) -> (Vec<DMatrix<f64>>, f64) {
    let (a, b) = (&inst.plant.a, &inst.plant.b);
    let (q, r) = (&inst.cost.q, &inst.cost.r);
    let mut p = inst.cost.q_terminal.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); inst.horizon];
    for t in (0..inst.horizon).rev() {
        let s = r + b.transpose() * &p * b;
        let l = s.try_inverse().unwrap() * b.transpose() * &p * a;
        p = q + a.transpose() * &p * (a - b * &l);
        p = (&p + p.transpose()) * 0.5;
        gains[t] = l;
    }
    let cost = (inst.x0.transpose() * &p * &inst.x0)[(0, 0)];
    (gains, cost)
}

pub fn zero_trajectory(inst: &Instance) -> Trajectory {
    let m = inst.plant.b.ncols();
    rollout(&inst.plant, &inst.x0, &vec![DVector::zeros(m); inst.horizon]).unwrap()
}
