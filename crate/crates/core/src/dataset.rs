//! Transition samples collected from the real plant.
//!
//! On-disk format: a header line `n,m,plant-tag,seed`, then one line per
//! sample `tag,x[0..n),u[0..m),x_next[0..n)` with shortest round-trip
//! decimal floats. UTF-8, LF line endings.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{rollout, Dynamics, DynamicsError};
use crate::ilqr::Trajectory;
use crate::par::Execution;
use crate::{ActionVector, StateVector};

/// Redraws allowed per random trial whose rollout turns non-finite.
const MAX_TRIAL_ATTEMPTS: u64 = 16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample has dimensions ({actual_n}, {actual_m}), dataset holds ({n}, {m})")]
    DimensionMismatch {
        n: usize,
        m: usize,
        actual_n: usize,
        actual_m: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("random trial {trial} stayed non-finite after {attempts} attempts")]
    TrialFailed { trial: usize, attempts: u64 },
    #[error("invalid collection request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleTag {
    RandomTrial,
    IlqrRollout,
    PerturbedRollout,
}

impl SampleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleTag::RandomTrial => "random-trial",
            SampleTag::IlqrRollout => "ilqr-rollout",
            SampleTag::PerturbedRollout => "perturbed-rollout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random-trial" => Some(SampleTag::RandomTrial),
            "ilqr-rollout" => Some(SampleTag::IlqrRollout),
            "perturbed-rollout" => Some(SampleTag::PerturbedRollout),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSample {
    pub x: StateVector,
    pub u: ActionVector,
    pub x_next: StateVector,
    pub tag: SampleTag,
}

/// Append-only store of transitions sharing dimensions `(n, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    state_dim: usize,
    action_dim: usize,
    pub plant_tag: String,
    pub seed: u64,
    samples: Vec<TransitionSample>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize, plant_tag: impl Into<String>, seed: u64) -> Self {
        Self {
            state_dim,
            action_dim,
            plant_tag: plant_tag.into(),
            seed,
            samples: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TransitionSample] {
        &self.samples
    }

    pub fn push(&mut self, sample: TransitionSample) -> Result<(), DatasetError> {
        if sample.x.len() != self.state_dim
            || sample.x_next.len() != self.state_dim
            || sample.u.len() != self.action_dim
        {
            return Err(DatasetError::DimensionMismatch {
                n: self.state_dim,
                m: self.action_dim,
                actual_n: sample.x.len(),
                actual_m: sample.u.len(),
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Appends the `T` transitions of `traj` tagged with their source `tag`.
    pub fn append_trajectory(&mut self, traj: &Trajectory, tag: SampleTag) -> Result<(), DatasetError> {
        // Validate first so a failure leaves the dataset untouched.
        for (x, u) in traj.states.iter().zip(&traj.actions) {
            if x.len() != self.state_dim || u.len() != self.action_dim {
                return Err(DatasetError::DimensionMismatch {
                    n: self.state_dim,
                    m: self.action_dim,
                    actual_n: x.len(),
                    actual_m: u.len(),
                });
            }
        }
        for tau in 0..traj.horizon() {
            self.push(TransitionSample {
                x: traj.states[tau].clone(),
                u: traj.actions[tau].clone(),
                x_next: traj.states[tau + 1].clone(),
                tag,
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{},{},{},{}\n",
            self.state_dim, self.action_dim, self.plant_tag, self.seed
        );
        for s in &self.samples {
            out.push_str(s.tag.as_str());
            for v in s.x.iter().chain(&s.u).chain(&s.x_next) {
                write!(out, ",{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        let bad_header = |message: String| DatasetError::Parse { line: 1, message };
        if fields.len() != 4 {
            return Err(bad_header(format!("expected `n,m,plant-tag,seed`, got {header:?}")));
        }
        let n: usize = fields[0]
            .parse()
            .map_err(|_| bad_header(format!("bad state dimension {:?}", fields[0])))?;
        let m: usize = fields[1]
            .parse()
            .map_err(|_| bad_header(format!("bad action dimension {:?}", fields[1])))?;
        let seed: u64 = fields[3]
            .parse()
            .map_err(|_| bad_header(format!("bad seed {:?}", fields[3])))?;
        if n == 0 || m == 0 || fields[2].is_empty() {
            return Err(bad_header(
                "dimensions must be positive and the plant tag non-empty".into(),
            ));
        }
        let mut data = Dataset::new(n, m, fields[2], seed);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let parse_err = |message: String| DatasetError::Parse { line: line_no, message };
            let mut parts = line.split(',').map(str::trim);
            let tag_str = parts.next().unwrap_or_default();
            let tag = SampleTag::parse(tag_str).ok_or_else(|| parse_err(format!("unknown tag {tag_str:?}")))?;
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|_| parse_err(format!("bad number {p:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != 2 * n + m {
                return Err(parse_err(format!(
                    "expected {} values, found {}",
                    2 * n + m,
                    values.len()
                )));
            }
            data.samples.push(TransitionSample {
                x: DVector::from_row_slice(&values[..n]),
                u: DVector::from_row_slice(&values[n..n + m]),
                x_next: DVector::from_row_slice(&values[n + m..]),
                tag,
            });
        }
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Uniform random actions in `[-scale, scale]` per dimension.
pub fn random_actions(rng: &mut impl Rng, horizon: usize, scale: &[f64]) -> Vec<ActionVector> {
    (0..horizon)
        .map(|_| DVector::from_iterator(scale.len(), scale.iter().map(|s| rng.random_range(-1.0..=1.0) * s)))
        .collect()
}

/// Collects `trials` independent random-action rollouts of length `horizon`
/// from `x0`. Each trial draws from its own seeded stream, so the result is
/// identical under every execution mode.
pub fn collect_random_trials<D: Dynamics + ?Sized>(
    plant: &D,
    x0: &StateVector,
    trials: usize,
    horizon: usize,
    action_scale: &[f64],
    seed: u64,
    exec: Execution,
) -> Result<Dataset, DatasetError> {
    if trials == 0 || horizon == 0 {
        return Err(DatasetError::InvalidRequest(
            "trial count and horizon must be at least 1".into(),
        ));
    }
    if action_scale.len() != plant.action_dim() || action_scale.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(DatasetError::InvalidRequest(format!(
            "action scale must have {} non-negative entries",
            plant.action_dim()
        )));
    }
    let runs = exec.map_range(trials, |trial| {
        for attempt in 0..MAX_TRIAL_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64 * MAX_TRIAL_ATTEMPTS + attempt);
            let actions = random_actions(&mut rng, horizon, action_scale);
            match rollout(plant, x0, &actions) {
                Ok(traj) => return Ok(traj),
                Err(DynamicsError::NonFiniteState { .. }) => continue,
                Err(e) => return Err(DatasetError::Dynamics(e)),
            }
        }
        Err(DatasetError::TrialFailed {
            trial,
            attempts: MAX_TRIAL_ATTEMPTS,
        })
    });
    let mut data = Dataset::new(plant.state_dim(), plant.action_dim(), plant.tag(), seed);
    for traj in runs {
        data.append_trajectory(&traj?, SampleTag::RandomTrial)?;
    }
    Ok(data)
}
