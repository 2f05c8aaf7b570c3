//! Synthetic load-profile generation and ground-truth simulation.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::Result;
use crate::grid_model::{solve_powerflow, Feeder, StateSnapshot};
use crate::measurements::{build_block_matrix, build_measurement_matrix, BlockMatrix};

/// Parameters of the per-node injection series: each node follows
/// `base * (1 + amplitude * c_k * cos(pi (2t - 1) / 2T))` plus Gaussian
/// jitter. The cosine is the first DCT-II atom, so with `sigma = 0` every
/// series is exactly 2-sparse in the DCT basis.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileParams {
    /// Scales every node's nominal load.
    pub base_scale: f64,
    /// Relative swing of the low-frequency component.
    pub amplitude: f64,
    /// Standard deviation of the per-step jitter, per-unit.
    pub sigma: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            base_scale: 1.0,
            amplitude: 0.25,
            sigma: 0.0,
        }
    }
}

/// Deterministic per-node complex injection series for `t = 1..=t_steps`.
pub fn generate_load_profiles(
    feeder: &Feeder,
    t_steps: usize,
    params: &ProfileParams,
    seed: u64,
) -> Vec<DVector<Complex64>> {
    let n = feeder.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per-node swing factor in [0.5, 1.0]; keeps the temporal shape shared
    // (rank-2 structure) while nodes move by different amounts.
    let swing: Vec<f64> = (0..n).map(|_| 0.5 + 0.5 * rng.random::<f64>()).collect();
    let base = feeder.base_injections().map(|s| s * params.base_scale);

    let jitter = if params.sigma > 0.0 {
        Some(Normal::new(0.0, params.sigma).expect("valid sigma"))
    } else {
        None
    };

    let mut series = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let shape = (std::f64::consts::PI * (2.0 * t as f64 - 1.0) / (2.0 * t_steps as f64)).cos();
        let mut injections = DVector::from_fn(n, |k, _| {
            base[k] * (1.0 + params.amplitude * swing[k] * shape)
        });
        if let Some(noise) = &jitter {
            for k in 0..n {
                injections[k] += Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        series.push(injections);
    }
    series
}

/// Run the nonlinear power-flow oracle over a generated profile and
/// assemble the ground-truth block matrix.
pub fn simulate_truth(
    feeder: &Feeder,
    t_steps: usize,
    params: &ProfileParams,
    seed: u64,
) -> Result<(Vec<StateSnapshot>, BlockMatrix)> {
    let profiles = generate_load_profiles(feeder, t_steps, params, seed);
    let mut snapshots = Vec::with_capacity(t_steps);
    let mut matrices = Vec::with_capacity(t_steps);
    for (t0, injections) in profiles.iter().enumerate() {
        let mut snapshot = solve_powerflow(feeder, injections)?;
        snapshot.time_index = t0 + 1;
        matrices.push(build_measurement_matrix(&snapshot));
        snapshots.push(snapshot);
    }
    let block = build_block_matrix(&matrices)?;
    Ok((snapshots, block))
}
