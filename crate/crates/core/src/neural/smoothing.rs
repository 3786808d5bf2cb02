//! Time-axis Gaussian smoothing of Jacobian schedules.

use serde::{Deserialize, Serialize};

use crate::ilqr::{Linearization, LinearizationSchedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Half-sample symmetric: `d c b a | a b c d | d c b a`.
    #[default]
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Kernel standard deviation in timesteps; 0 disables filtering.
    pub sigma: f64,
    /// Kernel radius in multiples of `sigma`.
    pub truncate: f64,
    pub boundary: Boundary,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            truncate: 4.0,
            boundary: Boundary::Reflect,
        }
    }
}

impl FilterConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    /// Normalized, truncated Gaussian weights for offsets `-r..=r`.
    pub fn kernel(&self) -> Vec<f64> {
        if self.sigma <= 0.0 {
            return vec![1.0];
        }
        let radius = (self.truncate * self.sigma + 0.5) as i64;
        let weights: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }
}

fn reflect(i: i64, len: usize) -> usize {
    let len = len as i64;
    let period = 2 * len;
    let j = i.rem_euclid(period);
    (if j < len { j } else { period - 1 - j }) as usize
}

/// Convolves `series` with `kernel` (odd length, centered), reflecting at the
/// ends.
pub fn smooth_series(series: &[f64], kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    (0..series.len())
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * series[reflect(t as i64 + k as i64 - radius, series.len())])
                .sum()
        })
        .collect()
}

/// Smooths every entry sequence `{N_x(τ)[i,j]}_τ` and `{N_u(τ)[i,j]}_τ` along τ.
pub fn smooth_jacobians(sched: &LinearizationSchedule, cfg: &FilterConfig) -> LinearizationSchedule {
    if cfg.sigma <= 0.0 || sched.is_empty() {
        return sched.clone();
    }
    let kernel = cfg.kernel();
    let mut out = sched.clone();
    let first = &sched.steps[0];
    let smooth_entries = |get: &dyn Fn(&Linearization) -> &nalgebra::DMatrix<f64>,
                          set: &mut dyn FnMut(usize, usize, usize, f64),
                          rows: usize,
                          cols: usize| {
        for i in 0..rows {
            for j in 0..cols {
                let series: Vec<f64> = sched.steps.iter().map(|s| get(s)[(i, j)]).collect();
                for (tau, v) in smooth_series(&series, &kernel).into_iter().enumerate() {
                    set(tau, i, j, v);
                }
            }
        }
    };
    let (na, ma) = first.a.shape();
    let (nb, mb) = first.b.shape();
    smooth_entries(&|s| &s.a, &mut |tau, i, j, v| out.steps[tau].a[(i, j)] = v, na, ma);
    smooth_entries(&|s| &s.b, &mut |tau, i, j, v| out.steps[tau].b[(i, j)] = v, nb, mb);
    out
}
