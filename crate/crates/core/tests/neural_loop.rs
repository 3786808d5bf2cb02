use nalgebra::{DMatrix, DVector};
use neural_ilqr::cost::{CostMode, CostSpec};
use neural_ilqr::env::{rollout, Dynamics, LinearPlant, PlantParams};
use neural_ilqr::ilqr::Trajectory;
use neural_ilqr::neural::{Architecture, FilterConfig, Network, NetworkSpec, TargetMode, TrainSettings};
use neural_ilqr::neural_loop::{
    escape_perturbation, neural_iteration, pretrain, solve_neural_ilqr, IterationOutcome, LoopSettings,
};
use neural_ilqr::par::Execution;

fn lqr() -> (LinearPlant, CostSpec, DVector<f64>) {
    let plant = LinearPlant::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.1, 0.98]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
    )
    .unwrap();
    let cost = CostSpec {
        q: DMatrix::identity(2, 2),
        r: DMatrix::from_element(1, 1, 0.1),
        q_terminal: DMatrix::identity(2, 2) * 10.0,
        reference: DVector::zeros(2),
        mode: CostMode::TerminalRegulation,
    };
    (plant, cost, DVector::from_vec(vec![1.0, -0.5]))
}

fn riccati_optimum(plant: &LinearPlant, cost: &CostSpec, x0: &DVector<f64>, horizon: usize) -> f64 {
    let (a, b) = (&plant.a, &plant.b);
    let mut p = cost.q_terminal.clone();
    for _ in 0..horizon {
        let l = (&cost.r + b.transpose() * &p * b).try_inverse().unwrap() * b.transpose() * &p * a;
        p = &cost.q + a.transpose() * &p * (a - b * l);
    }
    (x0.transpose() * p * x0)[(0, 0)]
}

fn small_settings() -> LoopSettings {
    LoopSettings {
        pretrain: TrainSettings {
            epochs: 150,
            batch_size: 64,
            ..TrainSettings::default()
        },
        retrain: TrainSettings {
            epochs: 2,
            batch_size: 64,
            ..TrainSettings::retrain_default()
        },
        filter: FilterConfig::with_sigma(0.0),
        trials: 20,
        action_scale: vec![1.0],
        max_outer_iterations: 5,
        execution: Execution::Sequential,
        ..LoopSettings::default()
    }
}

#[test]
fn zero_noise_is_identity() {
    let actions = vec![DVector::from_vec(vec![1.0, -2.0]); 30];
    assert_eq!(escape_perturbation(&actions, &[0.0, 0.0], 3), actions);
}

#[test]
fn noise_has_requested_spread() {
    let actions = vec![DVector::from_vec(vec![0.5, 0.5]); 5000];
    let noisy = escape_perturbation(&actions, &[0.3, 2.0], 11);
    for (j, std) in [0.3, 2.0].into_iter().enumerate() {
        let diffs: Vec<f64> = noisy.iter().zip(&actions).map(|(a, b)| a[j] - b[j]).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var.sqrt() - std).abs() <= 0.1 * std, "dimension {j}: {}", var.sqrt());
        assert!(mean.abs() < 0.1 * std);
    }
}

#[test]
fn perturbation_depends_on_seed() {
    let actions = vec![DVector::zeros(1); 10];
    assert_ne!(
        escape_perturbation(&actions, &[1.0], 0),
        escape_perturbation(&actions, &[1.0], 1)
    );
    assert_eq!(
        escape_perturbation(&actions, &[1.0], 5),
        escape_perturbation(&actions, &[1.0], 5)
    );
}

#[test]
fn pretrain_dataset_size_and_time() {
    let (plant, _, x0) = lqr();
    let settings = LoopSettings {
        pretrain: TrainSettings {
            epochs: 2,
            ..TrainSettings::default()
        },
        ..small_settings()
    };
    let spec = NetworkSpec::new(Architecture::SmallFcnn, 2, 1);
    let pre = pretrain(&plant, &x0, 15, &spec, &settings).unwrap();
    assert_eq!(pre.dataset.len(), 20 * 15);
    assert!(pre.wall_time > 0.0);
    assert_eq!(pre.report.train_loss.len(), 2);
}

#[test]
fn pretrained_cartpole_model_is_accurate_one_step() {
    let plant = PlantParams::cartpole();
    let x0 = DVector::from_vec(vec![std::f64::consts::PI, 0.0, 0.0, 0.0]);
    let settings = LoopSettings {
        pretrain: TrainSettings {
            epochs: 300,
            ..TrainSettings::default()
        },
        trials: 40,
        action_scale: vec![10.0],
        ..LoopSettings::default()
    };
    let pre = pretrain(
        &plant,
        &x0,
        150,
        &NetworkSpec::new(Architecture::SmallFcnn, 4, 1),
        &settings,
    )
    .unwrap();
    let fresh =
        neural_ilqr::dataset::collect_random_trials(&plant, &x0, 5, 150, &[10.0], 999, Execution::Sequential).unwrap();
    // Error relative to the size of the true state change.
    let (mut err, mut scale) = (0.0, 0.0);
    for s in fresh.samples() {
        let pred = pre.network.predict(&s.x, &s.u).unwrap();
        err += (pred - &s.x_next).norm_squared();
        scale += (&s.x_next - &s.x).norm_squared();
    }
    let relative = (err / scale).sqrt();
    assert!(relative < 0.05, "relative one-step error {relative}");
}

#[test]
fn accurate_network_approaches_riccati_optimum() {
    let (plant, cost, x0) = lqr();
    let horizon = 20;
    let mut settings = small_settings();
    settings.pretrain.epochs = 300;
    settings.trials = 100;
    let spec = NetworkSpec::new(Architecture::SmallFcnn, 2, 1);
    let pre = pretrain(&plant, &x0, horizon, &spec, &settings).unwrap();
    let nominal = rollout(&plant, &x0, &vec![DVector::zeros(1); horizon]).unwrap();
    let nominal_cost = cost.total_cost(&nominal).unwrap();
    let optimum = riccati_optimum(&plant, &cost, &x0, horizon);
    // A piecewise-linear model is only approximately linear, so allow a
    // couple of refinement steps.
    let (mut traj, mut c) = (nominal, nominal_cost);
    for _ in 0..3 {
        match neural_iteration(&plant, &pre.network, &traj, c, &cost, &settings, 0.0).unwrap() {
            IterationOutcome::Improved {
                cost: next, trajectory, ..
            } => {
                assert!(next < c);
                assert_eq!(cost.total_cost(&trajectory).unwrap(), next);
                traj = trajectory;
                c = next;
            }
            IterationOutcome::Stalled { .. } => break,
        }
    }
    assert!(c < nominal_cost);
    assert!((c - optimum) / optimum < 0.01, "cost {c} vs optimum {optimum}");
}

#[test]
fn zero_network_stalls() {
    let (plant, cost, x0) = lqr();
    let mut spec = NetworkSpec::new(Architecture::SmallFcnn, 2, 1);
    spec.target = TargetMode::NextState;
    let mut net = Network::new(spec).unwrap();
    net.zero_weights();
    let nominal = rollout(&plant, &x0, &vec![DVector::zeros(1); 10]).unwrap();
    let c = cost.total_cost(&nominal).unwrap();
    let outcome = neural_iteration(&plant, &net, &nominal, c, &cost, &small_settings(), 1e-6).unwrap();
    assert!(matches!(outcome, IterationOutcome::Stalled { .. }));
}

fn replays_exactly<D: Dynamics>(plant: &D, data: &neural_ilqr::dataset::Dataset) -> bool {
    data.samples()
        .iter()
        .all(|s| plant.step(&s.x, &s.u).unwrap() == s.x_next)
}

#[test]
fn loop_invariants_on_linear_plant() {
    let (plant, cost, x0) = lqr();
    let mut settings = small_settings();
    settings.max_outer_iterations = 12;
    let spec = NetworkSpec::new(Architecture::SmallFcnn, 2, 1);
    let run = solve_neural_ilqr(&plant, &cost, &x0, 20, &spec, &settings).unwrap();
    let m = &run.metrics;
    assert_eq!(m.objective_curve.len(), m.iterations());
    assert_eq!(m.iterations(), run.records.len());
    assert!(m.objective_curve.windows(2).all(|w| w[1] <= w[0]));
    assert!(m.k >= 1 && m.k <= m.iterations());
    let min = m.objective_curve.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(m.objective_curve[m.k - 1], min);
    assert!(m.objective_curve[..m.k - 1].iter().all(|&v| v > min));
    assert_eq!(m.best_objective, cost.total_cost(&run.trajectory).unwrap());
    assert!(replays_exactly(&plant, &run.dataset));
    let optimum = riccati_optimum(&plant, &cost, &x0, 20);
    assert!(m.best_objective <= optimum * 1.01, "{} vs {optimum}", m.best_objective);
    let replay: Trajectory = rollout(&plant, &x0, &run.trajectory.actions).unwrap();
    assert_eq!(replay, run.trajectory);
}

#[test]
fn loop_is_deterministic_per_seed() {
    let (plant, cost, x0) = lqr();
    let mut settings = small_settings();
    settings.pretrain.epochs = 20;
    settings.seed = 4;
    let spec = NetworkSpec::new(Architecture::Residual, 2, 1);
    let a = solve_neural_ilqr(&plant, &cost, &x0, 15, &spec, &settings).unwrap();
    let b = solve_neural_ilqr(&plant, &cost, &x0, 15, &spec, &settings).unwrap();
    assert!(a.metrics.same_outcome(&b.metrics));
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.network, b.network);
    settings.seed = 5;
    let c = solve_neural_ilqr(&plant, &cost, &x0, 15, &spec, &settings).unwrap();
    assert_ne!(a.network, c.network);
}

#[test]
fn invalid_settings_are_rejected() {
    let (plant, cost, x0) = lqr();
    let spec = NetworkSpec::new(Architecture::SmallFcnn, 2, 1);
    let mut settings = small_settings();
    settings.action_scale = vec![1.0, 1.0];
    assert!(solve_neural_ilqr(&plant, &cost, &x0, 10, &spec, &settings).is_err());
    let mut settings = small_settings();
    settings.noise_std = Some(vec![-1.0]);
    assert!(solve_neural_ilqr(&plant, &cost, &x0, 10, &spec, &settings).is_err());
}
