//! Measurement emission with track bookkeeping.
//!
//! Each landmark is represented by a sequence of feature blocks. At every
//! sighting one rule applies:
//!
//! * first sighting: a new feature block is created;
//! * last seen more than `loop_gap` steps ago: the sighting is a loop
//!   closure on the landmark's latest block;
//! * latest block younger than `max_track_length` steps: the sighting
//!   extends that block's track;
//! * otherwise the track is split and a new block is created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::models::{observation, odometry, wrap_angle};
use super::{GroundTruth, LogBlock, LogRecord, LogStep, MeasurementLog, MeasurementModel, NoiseModel, RecordKind};
use crate::error::Result;
use crate::factor::{BlockKey, MeasurementTag};
use crate::pipeline::WindowConfig;

struct Track {
    block: u32,
    created: usize,
    last_seen: usize,
}

pub fn emit_measurements(
    gt: &GroundTruth,
    noise: &NoiseModel,
    model: MeasurementModel,
    window: &WindowConfig,
) -> Result<MeasurementLog> {
    noise.validate()?;
    window.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut draw = |sigma: f64| -> f64 {
        let n: f64 = StandardNormal.sample(&mut rng);
        if noise.perturb {
            sigma * n
        } else {
            0.0
        }
    };
    let angle = |i: usize, v: f64| if model == MeasurementModel::Nonlinear2d && i == 2 { wrap_angle(v) } else { v };

    let mut tracks: Vec<Option<Track>> = (0..gt.features.len()).map(|_| None).collect();
    let mut next_feature = 0u32;
    let mut steps = Vec::with_capacity(gt.steps());
    for (k, pose) in gt.poses.iter().enumerate() {
        let pk = BlockKey::Pose(k as u32);
        let mut s = LogStep { step: k as u32, blocks: vec![LogBlock { key: pk, init: None }], records: Vec::new() };
        if k == 0 {
            let sigma = vec![noise.prior_sigma; 3];
            let value = (0..3).map(|i| angle(i, pose[i] + draw(noise.prior_sigma))).collect();
            s.records.push(LogRecord { tag: MeasurementTag::Prior, kind: RecordKind::Prior { block: pk, value, sigma } });
        } else {
            let (z, _, _) = odometry(model, &gt.poses[k - 1], pose);
            let sg = noise.odometry_sigma;
            let value = [z[0] + draw(sg[0]), z[1] + draw(sg[1]), angle(2, z[2] + draw(sg[2]))];
            s.records.push(LogRecord {
                tag: MeasurementTag::Odometry,
                kind: RecordKind::Odometry { from: BlockKey::Pose(k as u32 - 1), to: pk, value, sigma: sg },
            });
        }
        for &l in gt.visibility[k].iter().take(window.max_tracks_per_step) {
            let (tag, block) = match &mut tracks[l] {
                Some(t) if k - t.last_seen > window.loop_gap => {
                    t.last_seen = k;
                    (MeasurementTag::LoopClosure, t.block)
                }
                Some(t) if k - t.created < window.max_track_length => {
                    t.last_seen = k;
                    (MeasurementTag::LocalTrack, t.block)
                }
                slot => {
                    *slot = Some(Track { block: next_feature, created: k, last_seen: k });
                    s.blocks.push(LogBlock { key: BlockKey::Feature(next_feature), init: None });
                    next_feature += 1;
                    (MeasurementTag::LocalTrack, next_feature - 1)
                }
            };
            let (z, _, _) = observation(model, pose, &gt.features[l]);
            let sg = noise.observation_sigma;
            let mut value = [z[0] + draw(sg[0]), z[1] + draw(sg[1])];
            if model == MeasurementModel::Nonlinear2d {
                value[1] = wrap_angle(value[1]);
            }
            s.records.push(LogRecord {
                tag,
                kind: RecordKind::Observation { pose: pk, feature: BlockKey::Feature(block), value, sigma: sg },
            });
        }
        steps.push(s);
    }
    Ok(MeasurementLog { model, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_scenario, ScenarioKind, ScenarioParams};

    #[test]
    fn loop_closures_fire_exactly_on_the_gap_rule() {
        let gt = generate_scenario(ScenarioKind::CircleTwice, &ScenarioParams::default(), 5).unwrap();
        let w = WindowConfig::default();
        let log = emit_measurements(&gt, &NoiseModel::default(), MeasurementModel::Nonlinear2d, &w).unwrap();
        let mut last_seen = vec![None; gt.features.len()];
        let mut loops = 0;
        for (k, s) in log.steps.iter().enumerate() {
            let obs = s.records.iter().filter(|r| matches!(r.kind, RecordKind::Observation { .. }));
            for (r, &l) in obs.zip(&gt.visibility[k]) {
                let expect = matches!(last_seen[l], Some(p) if k - p > w.loop_gap);
                assert_eq!(r.tag == MeasurementTag::LoopClosure, expect, "step {k} landmark {l}");
                loops += expect as usize;
                last_seen[l] = Some(k);
            }
        }
        assert!(loops > 0);
        let is_loop = |s: &LogStep| s.records.iter().any(|r| r.tag == MeasurementTag::LoopClosure);
        // The first lap only closes on itself near its end.
        assert!(!log.steps[..50].iter().any(is_loop));
        assert!(log.steps[100..].iter().any(is_loop));
    }

    #[test]
    fn without_perturbation_measurements_are_exact() {
        let gt = generate_scenario(ScenarioKind::LineOutAndBack, &ScenarioParams { steps: 20, ..Default::default() }, 2).unwrap();
        let noise = NoiseModel { perturb: false, ..Default::default() };
        let model = MeasurementModel::Nonlinear2d;
        let log = emit_measurements(&gt, &noise, model, &WindowConfig::default()).unwrap();
        let mut feature_of = std::collections::HashMap::new();
        for (k, s) in log.steps.iter().enumerate() {
            let obs = s.records.iter().filter_map(|r| match &r.kind {
                RecordKind::Observation { feature, value, .. } => Some((feature, value)),
                _ => None,
            });
            for ((f, v), &l) in obs.zip(&gt.visibility[k]) {
                assert_eq!(*feature_of.entry(*f).or_insert(l), l);
                let (z, _, _) = observation(model, &gt.poses[k], &gt.features[l]);
                assert_eq!(*v, [z[0], wrap_angle(z[1])]);
            }
        }
    }
}
