//! Sensing and actuation noise.
//!
//! Every channel draws from its own counter-based stream: ChaCha8 keyed by the
//! config seed, stream id = channel, word position = step index. A draw only
//! depends on (seed, channel, step), so switching one channel on or off never
//! moves another channel's samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::handmodel::{RobotJointVector, Vec3};
use crate::simenv::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Channel {
    Proprio = 0,
    Actuation = 1,
    Tracking = 2,
    Freeze = 3,
    Pixel = 4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub proprio_std: f64,
    pub actuation_std: f64,
    pub tracking_std_m: f64,
    pub tracking_freeze_frames: usize,
    pub freeze_probability: f64,
    pub pixel_range: u8,
    pub proprio_enabled: bool,
    pub actuation_enabled: bool,
    pub tracking_enabled: bool,
    pub freeze_enabled: bool,
    pub pixel_enabled: bool,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            proprio_std: 0.01,
            actuation_std: 0.01,
            tracking_std_m: 0.01,
            tracking_freeze_frames: 20,
            freeze_probability: 0.01,
            pixel_range: 5,
            proprio_enabled: true,
            actuation_enabled: true,
            tracking_enabled: true,
            freeze_enabled: true,
            pixel_enabled: true,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// Every channel switched off.
    pub fn disabled() -> Self {
        Self {
            proprio_enabled: false,
            actuation_enabled: false,
            tracking_enabled: false,
            freeze_enabled: false,
            pixel_enabled: false,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.proprio_enabled
            || self.actuation_enabled
            || self.tracking_enabled
            || self.freeze_enabled
            || self.pixel_enabled
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("proprio_std", self.proprio_std),
            ("actuation_std", self.actuation_std),
            ("tracking_std_m", self.tracking_std_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.freeze_probability) {
            return Err(format!(
                "freeze_probability must lie in [0, 1], got {}",
                self.freeze_probability
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Position of an episode in the noise streams plus the tracking freeze.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub obs_step: u64,
    pub act_step: u64,
    pub freeze_remaining: usize,
    pub frozen_points: Option<Vec<Vec3>>,
}

/// Stream for one channel at one step. Each step owns 2^40 words.
pub fn stream(seed: u64, channel: Channel, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel as u64);
    rng.set_word_pos((step as u128) << 40);
    rng
}

fn gaussian(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated non-negative")
}

/// Adds integer noise in [-range, range] and clips to the byte range.
pub fn perturb_pixel(value: u8, delta: i32) -> u8 {
    (value as i32 + delta).clamp(0, 255) as u8
}

pub fn perturb_observation(
    obs: &Observation,
    cfg: &NoiseConfig,
    state: &NoiseState,
) -> (Observation, NoiseState) {
    let mut out = obs.clone();
    let mut next = state.clone();
    let t = state.obs_step;
    next.obs_step += 1;

    if cfg.proprio_enabled && cfg.proprio_std > 0.0 {
        let mut rng = stream(cfg.seed, Channel::Proprio, t);
        let n = gaussian(cfg.proprio_std);
        for v in out.proprio.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }

    let mut tracking_changed = false;
    if next.freeze_remaining > 0 {
        if let Some(p) = &next.frozen_points {
            out.tracked_points = p.clone();
            tracking_changed = true;
        }
        next.freeze_remaining -= 1;
        if next.freeze_remaining == 0 {
            next.frozen_points = None;
        }
    } else {
        if cfg.tracking_enabled && cfg.tracking_std_m > 0.0 {
            let mut rng = stream(cfg.seed, Channel::Tracking, t);
            let n = gaussian(cfg.tracking_std_m);
            for p in out.tracked_points.iter_mut() {
                for c in p.iter_mut() {
                    *c += n.sample(&mut rng);
                }
            }
            tracking_changed = true;
        }
        if cfg.freeze_enabled && cfg.tracking_freeze_frames > 0 {
            let mut rng = stream(cfg.seed, Channel::Freeze, t);
            if rng.random::<f64>() < cfg.freeze_probability {
                // this frame is the first of the frozen run
                next.frozen_points = Some(out.tracked_points.clone());
                next.freeze_remaining = cfg.tracking_freeze_frames - 1;
                if next.freeze_remaining == 0 {
                    next.frozen_points = None;
                }
            }
        }
    }
    if tracking_changed {
        out.refresh_distances();
    }

    if cfg.pixel_enabled && cfg.pixel_range > 0 {
        if let Some(img) = out.images.as_mut() {
            let mut rng = stream(cfg.seed, Channel::Pixel, t);
            let r = cfg.pixel_range as i32;
            for px in img.intensity.iter_mut() {
                *px = perturb_pixel(*px, rng.random_range(-r..=r));
            }
        }
    }
    (out, next)
}

/// Adds actuation noise to joint targets; the environment clamps afterwards.
pub fn perturb_action(
    a: &RobotJointVector,
    cfg: &NoiseConfig,
    state: &NoiseState,
) -> (RobotJointVector, NoiseState) {
    let mut out = *a;
    let mut next = state.clone();
    let t = state.act_step;
    next.act_step += 1;
    if cfg.actuation_enabled && cfg.actuation_std > 0.0 {
        let mut rng = stream(cfg.seed, Channel::Actuation, t);
        let n = gaussian(cfg.actuation_std);
        for i in 0..out.0.len() {
            out[i] += n.sample(&mut rng);
        }
    }
    (out, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::RenderedImages;
    use proptest::prelude::*;

    fn obs() -> Observation {
        let mut o = Observation {
            proprio: (0..60).map(|i| i as f64 * 0.01).collect(),
            hand_points: (0..10)
                .map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.1))
                .collect(),
            tracked_points: (0..20)
                .map(|i| Vec3::new(0.0, i as f64 * 0.005, 0.03))
                .collect(),
            distances: Vec::new(),
            touch: vec![false; 21],
            images: Some(RenderedImages {
                size: 4,
                intensity: vec![
                    0, 3, 128, 254, 255, 250, 5, 100, 0, 0, 0, 0, 255, 255, 255, 255,
                ],
                depth: vec![0.5; 16],
                affordance: vec![0; 16],
            }),
        };
        o.refresh_distances();
        o
    }

    fn sample_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    }

    #[test]
    fn disabled_is_identity() {
        let o = obs();
        let cfg = NoiseConfig::disabled();
        let mut s = NoiseState::default();
        for _ in 0..50 {
            let (p, n) = perturb_observation(&o, &cfg, &s);
            assert_eq!(p, o);
            s = n;
        }
        let a = RobotJointVector::from_slice(&[0.3; 30]).unwrap();
        assert_eq!(perturb_action(&a, &cfg, &NoiseState::default()).0, a);
    }

    #[test]
    fn zero_std_action_unchanged() {
        let cfg = NoiseConfig {
            actuation_std: 0.0,
            ..Default::default()
        };
        let a = RobotJointVector::from_slice(&[0.1; 30]).unwrap();
        assert_eq!(perturb_action(&a, &cfg, &NoiseState::default()).0, a);
    }

    #[test]
    fn proprio_std_matches() {
        let cfg = NoiseConfig {
            seed: 3,
            ..NoiseConfig::disabled()
        };
        let cfg = NoiseConfig {
            proprio_enabled: true,
            ..cfg
        };
        let o = obs();
        let mut s = NoiseState::default();
        let mut d = Vec::new();
        while d.len() < 100_000 {
            let (p, n) = perturb_observation(&o, &cfg, &s);
            d.extend(p.proprio.iter().zip(&o.proprio).map(|(a, b)| a - b));
            s = n;
        }
        let (m, sd) = sample_std(&d);
        assert!(m.abs() < 1e-3);
        assert!((sd - 0.01).abs() < 0.05 * 0.01, "std {sd}");
    }

    #[test]
    fn action_mean_near_zero_and_deterministic() {
        let cfg = NoiseConfig {
            seed: 11,
            ..Default::default()
        };
        let a = RobotJointVector::zeros();
        let mut s = NoiseState::default();
        let mut d = Vec::new();
        while d.len() < 100_000 {
            let (p, n) = perturb_action(&a, &cfg, &s);
            d.extend_from_slice(p.as_slice());
            s = n;
        }
        let (m, sd) = sample_std(&d);
        assert!(m.abs() < 1e-3, "mean {m}");
        assert!((sd - 0.01).abs() < 0.05 * 0.01);
        let st = NoiseState {
            act_step: 42,
            ..Default::default()
        };
        assert_eq!(perturb_action(&a, &cfg, &st), perturb_action(&a, &cfg, &st));
    }

    #[test]
    fn pixel_clip() {
        assert_eq!(perturb_pixel(254, 5), 255);
        assert_eq!(perturb_pixel(2, -5), 0);
        assert_eq!(perturb_pixel(100, -5), 95);
    }

    #[test]
    fn pixel_noise_bounded() {
        let cfg = NoiseConfig {
            pixel_enabled: true,
            ..NoiseConfig::disabled()
        };
        let o = obs();
        let src = &o.images.as_ref().unwrap().intensity;
        let mut s = NoiseState::default();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let (p, n) = perturb_observation(&o, &cfg, &s);
            for (a, b) in p.images.unwrap().intensity.iter().zip(src) {
                let d = *a as i32 - *b as i32;
                assert!((-5..=5).contains(&d));
                if (10..=245).contains(b) {
                    seen.insert(d);
                }
            }
            s = n;
        }
        assert_eq!(seen.len(), 11);
    }

    #[test]
    fn freeze_lasts_exactly_configured_frames() {
        let cfg = NoiseConfig {
            freeze_probability: 0.05,
            seed: 5,
            ..NoiseConfig::disabled()
        };
        let cfg = NoiseConfig {
            tracking_enabled: true,
            freeze_enabled: true,
            ..cfg
        };
        let o = obs();
        let mut s = NoiseState::default();
        let mut frames = Vec::new();
        for _ in 0..2000 {
            let (p, n) = perturb_observation(&o, &cfg, &s);
            frames.push(p.tracked_points);
            s = n;
        }
        // fresh tracking noise makes consecutive unfrozen frames distinct, so
        // every maximal run of identical frames is one freeze
        let mut runs = Vec::new();
        let mut len = 1;
        for w in frames.windows(2) {
            if w[0] == w[1] {
                len += 1;
            } else {
                runs.push(len);
                len = 1;
            }
        }
        let freezes: Vec<_> = runs.iter().filter(|&&r| r > 1).collect();
        assert!(!freezes.is_empty());
        assert!(freezes.iter().all(|&&r| r == 20), "{freezes:?}");
    }

    #[test]
    fn channels_are_independent() {
        let o = obs();
        let only_proprio = NoiseConfig {
            proprio_enabled: true,
            seed: 9,
            ..NoiseConfig::disabled()
        };
        let all = NoiseConfig {
            seed: 9,
            ..Default::default()
        };
        let st = NoiseState {
            obs_step: 17,
            ..Default::default()
        };
        let a = perturb_observation(&o, &only_proprio, &st).0;
        let b = perturb_observation(&o, &all, &st).0;
        assert_eq!(a.proprio, b.proprio);
    }

    proptest! {
        #[test]
        fn reproducible_from_seed_and_step(seed in any::<u64>(), step in 0u64..100_000) {
            let o = obs();
            let cfg = NoiseConfig { seed, ..Default::default() };
            let st = NoiseState { obs_step: step, ..Default::default() };
            prop_assert_eq!(perturb_observation(&o, &cfg, &st), perturb_observation(&o, &cfg, &st));
        }

        #[test]
        fn distances_follow_noisy_points(seed in any::<u64>()) {
            let o = obs();
            let cfg = NoiseConfig { seed, ..Default::default() };
            let (p, _) = perturb_observation(&o, &cfg, &NoiseState::default());
            let expect = crate::simenv::pairwise_distances(&p.hand_points, &p.tracked_points);
            prop_assert_eq!(p.distances, expect);
        }
    }
}
