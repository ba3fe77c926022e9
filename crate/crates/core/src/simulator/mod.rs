//! Planar SLAM simulation: ground-truth trajectories with point landmarks,
//! whitened measurement logs, and Monte Carlo runs.

mod emit;
mod log;
pub mod models;
mod monte_carlo;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use emit::emit_measurements;
pub use log::{LogBlock, LogRecord, LogStep, MeasurementLog, RecordKind, LOG_FORMAT, LOG_VERSION};
pub use monte_carlo::{monte_carlo, run_seed};

/// Planar pose `(x, y, heading)`.
pub type Pose2 = [f64; 3];
pub type Point2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    CircleTwice,
    LineOutAndBack,
    RandomWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementModel {
    /// Odometry and landmark observations as global-frame differences.
    Linear,
    /// Body-frame odometry and range-bearing observations.
    #[serde(rename = "nonlinear-2d", alias = "nonlinear2d")]
    Nonlinear2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    /// Circle: steps per lap. Line: steps per leg. Random walk: total steps.
    pub steps: usize,
    /// Circle radius.
    pub radius: f64,
    /// Distance moved per step on the line and the random walk.
    pub step_length: f64,
    /// Landmarks per meter of path (one lap or one leg).
    pub feature_density: f64,
    /// Landmarks are scattered up to this distance either side of the path.
    pub feature_spread: f64,
    /// Observation range.
    pub sensor_range: f64,
    /// Nearest visible landmarks kept per step.
    pub max_visible: usize,
    /// Place landmarks evenly along the path with a repeating lateral
    /// pattern instead of at random, so every step sees the same traffic.
    pub regular_features: bool,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            steps: 100,
            radius: 5.0,
            step_length: 0.3,
            feature_density: 4.0,
            feature_spread: 1.5,
            sensor_range: 2.5,
            max_visible: 40,
            regular_features: false,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Params(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(self.radius > 0.0 && self.step_length > 0.0 && self.sensor_range > 0.0) {
            return bad("radius, step_length and sensor_range must be positive");
        }
        if !(self.feature_density > 0.0) || self.feature_spread < 0.0 || self.max_visible == 0 {
            return bad("feature density and visibility cap must be positive");
        }
        Ok(())
    }
}

/// Ground truth of one scenario: pose `k` is the pose at step `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kind: ScenarioKind,
    pub poses: Vec<Pose2>,
    pub features: Vec<Point2>,
    /// Landmark indices visible at each step, nearest first.
    pub visibility: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn steps(&self) -> usize {
        self.poses.len()
    }

    /// Steps at which landmark `l` is visible.
    pub fn sightings(&self, l: usize) -> Vec<usize> {
        (0..self.steps()).filter(|&k| self.visibility[k].contains(&l)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Odometry standard deviations for `(x, y, heading)`.
    pub odometry_sigma: [f64; 3],
    /// Observation standard deviations: `(x, y)` for the linear model,
    /// `(range, bearing)` for the nonlinear one.
    pub observation_sigma: [f64; 2],
    /// Standard deviation of the anchoring prior on the first pose.
    pub prior_sigma: f64,
    pub seed: u64,
    /// Whether measurements are actually perturbed. With `false` every
    /// measurement is noise-free while the sigmas still weight the rows.
    pub perturb: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            odometry_sigma: [0.02, 0.02, 0.01],
            observation_sigma: [0.05, 0.05],
            prior_sigma: 1e-3,
            seed: 0,
            perturb: true,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let all = self.odometry_sigma.iter().chain(&self.observation_sigma).chain([&self.prior_sigma]);
        if all.into_iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Params("noise sigmas must be positive".into()));
        }
        Ok(())
    }
}

fn wrap(a: f64) -> f64 {
    models::wrap_angle(a)
}

/// Generates a deterministic scenario.
///
/// Circle: `2 * steps + 1` poses running counter-clockwise twice around a
/// circle, with pose `k` and pose `k + steps` identical. Line: out along the
/// x axis for `steps` steps, then back. Random walk: `steps + 1` poses with
/// random turns. Landmarks seen at fewer than two steps are discarded.
pub fn generate_scenario(kind: ScenarioKind, params: &ScenarioParams, seed: u64) -> Result<GroundTruth> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.steps;
    let (poses, path_length) = match kind {
        ScenarioKind::CircleTwice => {
            let poses = (0..=2 * n)
                .map(|k| {
                    let a = std::f64::consts::TAU * (k % n) as f64 / n as f64;
                    [params.radius * a.cos(), params.radius * a.sin(), wrap(a + std::f64::consts::FRAC_PI_2)]
                })
                .collect();
            (poses, std::f64::consts::TAU * params.radius)
        }
        ScenarioKind::LineOutAndBack => {
            let poses = (0..=2 * n)
                .map(|k| {
                    let (d, heading) = if k <= n { (k, 0.0) } else { (2 * n - k, std::f64::consts::PI) };
                    [d as f64 * params.step_length, 0.0, heading]
                })
                .collect();
            (poses, n as f64 * params.step_length)
        }
        ScenarioKind::RandomWalk => {
            let mut p: Pose2 = [0.0, 0.0, 0.0];
            let mut poses = vec![p];
            for _ in 0..n {
                let turn = rng.random_range(-0.3..0.3);
                p = [
                    p[0] + params.step_length * p[2].cos(),
                    p[1] + params.step_length * p[2].sin(),
                    wrap(p[2] + turn),
                ];
                poses.push(p);
            }
            (poses, n as f64 * params.step_length)
        }
    };

    let count = ((path_length * params.feature_density).ceil() as usize).max(1);
    let last = match kind {
        ScenarioKind::RandomWalk => poses.len(),
        _ => n + 1,
    };
    let spacing = path_length / (last - 1) as f64;
    const PATTERN: [f64; 6] = [-1.0, 0.2, -0.6, 1.0, -0.2, 0.6];
    let features: Vec<Point2> = (0..count)
        .map(|i| {
            let (anchor, lateral, along) = if params.regular_features {
                let t = i as f64 * (last - 1) as f64 / count as f64;
                let k = t.floor() as usize;
                (&poses[k], PATTERN[i % PATTERN.len()] * params.feature_spread, (t - k as f64) * spacing)
            } else {
                let anchor = &poses[rng.random_range(0..last)];
                let lateral = rng.random_range(-params.feature_spread..=params.feature_spread);
                (anchor, lateral, rng.random_range(-0.5..0.5) * spacing)
            };
            let (c, s) = (anchor[2].cos(), anchor[2].sin());
            [anchor[0] + along * c - lateral * s, anchor[1] + along * s + lateral * c]
        })
        .collect();

    let visible = |p: &Pose2| -> Vec<usize> {
        let mut v: Vec<(f64, usize)> = features
            .iter()
            .enumerate()
            .map(|(i, f)| (((f[0] - p[0]).powi(2) + (f[1] - p[1]).powi(2)).sqrt(), i))
            .filter(|&(d, _)| d <= params.sensor_range && d > 1e-6)
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.truncate(params.max_visible);
        v.into_iter().map(|(_, i)| i).collect()
    };
    let raw: Vec<Vec<usize>> = poses.iter().map(visible).collect();
    let mut seen = vec![0usize; features.len()];
    for v in &raw {
        for &i in v {
            seen[i] += 1;
        }
    }
    // Renumber the landmarks that are seen at least twice.
    let mut remap = vec![usize::MAX; features.len()];
    let mut kept = Vec::new();
    for (i, f) in features.iter().enumerate() {
        if seen[i] >= 2 {
            remap[i] = kept.len();
            kept.push(*f);
        }
    }
    let visibility = raw
        .into_iter()
        .map(|v| v.into_iter().filter(|&i| remap[i] != usize::MAX).map(|i| remap[i]).collect())
        .collect();
    Ok(GroundTruth { kind, poses, features: kept, visibility })
}
