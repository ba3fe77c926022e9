//! Independent noisy replays of one ground truth.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{emit_measurements, GroundTruth, MeasurementModel, NoiseModel};
use crate::error::{Error, Result};
use crate::pipeline::SessionConfig;
use crate::runner::{run_log, RunOptions, SimulationRun};

/// Noise seed of run `run` under `master`.
pub fn run_seed(master: u64, run: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(run as u64);
    rng.next_u64()
}

/// Runs `n_runs` replays in parallel; run `i` uses noise seed
/// [`run_seed`]`(master_seed, i)`. Results are in run order.
pub fn monte_carlo(
    n_runs: usize,
    gt: &GroundTruth,
    noise: &NoiseModel,
    model: MeasurementModel,
    config: &SessionConfig,
    opts: RunOptions,
    master_seed: u64,
) -> Result<Vec<SimulationRun>> {
    if n_runs == 0 {
        return Err(Error::Params("n_runs must be at least 1".into()));
    }
    (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let seed = run_seed(master_seed, i);
            let log = emit_measurements(gt, &NoiseModel { seed, ..noise.clone() }, model, &config.window)?;
            run_log(&log, config, opts, seed)
        })
        .collect()
}
