//! Reward terms and their weighted sum.
//!
//! `total = α·r_succ + β·r_aff + γ·r_pose + η·r_entropy`, with variants that
//! swap the affordance target for the object center of mass, drop the pose
//! term, or replace affordance and pose with a flat touch bonus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handmodel::{
    angle_error, JointHierarchy, Level, RobotJointVector, Vec3, NUM_TOUCH_SENSORS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("chamfer distance needs two non-empty point sets")]
    EmptySet,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Success + affordance + consensus-pose prior.
    Dexvip,
    /// Success + affordance, no pose term.
    GraffLike,
    /// Success + distance to the object center of mass.
    Com,
    /// Success + a flat bonus whenever the touch gate is met.
    Touch,
    /// Success + affordance + the flat touch bonus.
    AffordanceTouch,
}

impl std::str::FromStr for RewardVariant {
    type Err = RewardError;
    fn from_str(s: &str) -> Result<Self, RewardError> {
        match s {
            "dexvip" => Ok(Self::Dexvip),
            "graff_like" => Ok(Self::GraffLike),
            "com" => Ok(Self::Com),
            "touch" => Ok(Self::Touch),
            "affordance_touch" => Ok(Self::AffordanceTouch),
            _ => Err(RewardError::InvalidConfig(format!(
                "unknown reward variant {s:?}"
            ))),
        }
    }
}

impl RewardVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dexvip => "dexvip",
            Self::GraffLike => "graff_like",
            Self::Com => "com",
            Self::Touch => "touch",
            Self::AffordanceTouch => "affordance_touch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Wrist, knuckle, middle, distal.
    pub level_weights: [f64; 4],
    pub gate_fraction: f64,
    pub variant: RewardVariant,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            eta: 0.001,
            level_weights: [1.0, 0.75, 0.5, 0.25],
            gate_fraction: 0.3,
            variant: RewardVariant::Dexvip,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let all = [self.alpha, self.beta, self.gamma, self.eta];
        if all
            .iter()
            .chain(&self.level_weights)
            .any(|v| !v.is_finite())
        {
            return Err(RewardError::InvalidConfig(
                "coefficients must be finite".into(),
            ));
        }
        if !(self.gate_fraction > 0.0 && self.gate_fraction <= 1.0) {
            return Err(RewardError::InvalidConfig(format!(
                "gate fraction {} not in (0, 1]",
                self.gate_fraction
            )));
        }
        Ok(())
    }

    /// Active sensors required to open the pose gate: ceil(fraction · 21).
    pub fn gate_threshold(&self) -> usize {
        let raw = self.gate_fraction * NUM_TOUCH_SENSORS as f64;
        // guard against 0.3 * 21 = 6.300000000000001 style noise
        (raw - 1e-9).ceil().max(1.0) as usize
    }

    pub fn gate_met(&self, touch_active: usize) -> bool {
        touch_active >= self.gate_threshold()
    }
}

/// Σ_m min_n ‖m−n‖² + Σ_n min_m ‖m−n‖².
pub fn chamfer(m: &[Vec3], n: &[Vec3]) -> Result<f64, RewardError> {
    if m.is_empty() || n.is_empty() {
        return Err(RewardError::EmptySet);
    }
    let nearest = |p: &Vec3, set: &[Vec3]| {
        set.iter()
            .map(|q| (p - q).norm_squared())
            .fold(f64::INFINITY, f64::min)
    };
    let a: f64 = m.iter().map(|p| nearest(p, n)).sum();
    let b: f64 = n.iter().map(|p| nearest(p, m)).sum();
    Ok(a + b)
}

/// Affordance reward: negative chamfer between hand points and the target set.
pub fn r_aff(hand: &[Vec3], affordance: &[Vec3]) -> Result<f64, RewardError> {
    Ok(-chamfer(hand, affordance)?)
}

/// Center-of-mass variant of the affordance reward.
pub fn r_aff_com(hand: &[Vec3], com: &Vec3) -> Result<f64, RewardError> {
    r_aff(hand, std::slice::from_ref(com))
}

/// Per-level summed wrapped joint errors: wrist, knuckle, middle, distal.
pub fn pose_level_errors(
    current: &RobotJointVector,
    target: &RobotJointVector,
    robot: &JointHierarchy,
) -> [f64; 4] {
    let mut e = [0.0; 4];
    for (i, level) in robot.levels.iter().enumerate() {
        let slot = match level {
            Level::Wrist => 0,
            Level::Knuckle => 1,
            Level::Middle => 2,
            Level::Distal => 3,
            Level::Arm | Level::Tip => continue,
        };
        e[slot] += angle_error(current[i], target[i]);
    }
    e
}

/// Hierarchically weighted pose penalty; zero while the touch gate is closed.
pub fn r_pose(
    current: &RobotJointVector,
    target: &RobotJointVector,
    touch_active: usize,
    config: &RewardConfig,
    robot: &JointHierarchy,
) -> f64 {
    if !config.gate_met(touch_active) {
        return 0.0;
    }
    let e = pose_level_errors(current, target, robot);
    -e.iter()
        .zip(&config.level_weights)
        .map(|(e, w)| e * w)
        .sum::<f64>()
}

pub fn r_succ(hand_object_contact: bool, object_table_contact: bool) -> f64 {
    if hand_object_contact && !object_table_contact {
        1.0
    } else {
        0.0
    }
}

/// Differential entropy of a diagonal Gaussian with the given log std-devs.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    log_std.iter().map(|l| c + l).sum()
}

/// Entropy of the fixed unit-variance policy over `dim` actions.
pub fn r_entropy(dim: usize) -> f64 {
    gaussian_entropy(&vec![0.0; dim])
}

/// Raw terms for one step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub r_succ: f64,
    pub r_aff: f64,
    pub r_pose: f64,
    pub r_entropy: f64,
    pub gate_active: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRewardBreakdown {
    pub r_succ: f64,
    pub r_aff: f64,
    pub r_pose: f64,
    pub r_entropy: f64,
    pub total: f64,
    pub gate_active: bool,
}

/// Weighted combination. Terms must already reflect the variant (see
/// [`terms_for_variant`]). `Touch` puts the gate bonus in the affordance slot
/// and zeroes the pose slot, `AffordanceTouch` puts it in the pose slot, and
/// `GraffLike` zeroes the pose slot, so the breakdown always satisfies
/// `total = α·r_succ + β·r_aff + γ·r_pose + η·r_entropy`.
pub fn total_reward(terms: &RewardTerms, config: &RewardConfig) -> StepRewardBreakdown {
    let bonus = if terms.gate_active { 1.0 } else { 0.0 };
    let (r_aff, r_pose) = match config.variant {
        RewardVariant::Dexvip | RewardVariant::Com => (terms.r_aff, terms.r_pose),
        RewardVariant::GraffLike => (terms.r_aff, 0.0),
        RewardVariant::Touch => (bonus, 0.0),
        RewardVariant::AffordanceTouch => (terms.r_aff, bonus),
    };
    let total = config.alpha * terms.r_succ
        + config.beta * r_aff
        + config.gamma * r_pose
        + config.eta * terms.r_entropy;
    StepRewardBreakdown {
        r_succ: terms.r_succ,
        r_aff,
        r_pose,
        r_entropy: terms.r_entropy,
        total,
        gate_active: terms.gate_active,
    }
}

/// Everything the reward needs from one simulator step.
pub struct RewardInputs<'a> {
    pub hand_object_contact: bool,
    pub object_table_contact: bool,
    pub hand_points: &'a [Vec3],
    pub affordance: &'a [Vec3],
    pub center_of_mass: Vec3,
    pub current: &'a RobotJointVector,
    pub target: &'a RobotJointVector,
    pub touch_active: usize,
    pub action_dim: usize,
}

pub fn terms_for_variant(
    inputs: &RewardInputs,
    config: &RewardConfig,
    robot: &JointHierarchy,
) -> Result<RewardTerms, RewardError> {
    let r_aff = match config.variant {
        RewardVariant::Com => r_aff_com(inputs.hand_points, &inputs.center_of_mass)?,
        RewardVariant::Touch => 0.0,
        _ => r_aff(inputs.hand_points, inputs.affordance)?,
    };
    let r_pose = match config.variant {
        RewardVariant::Dexvip => r_pose(
            inputs.current,
            inputs.target,
            inputs.touch_active,
            config,
            robot,
        ),
        _ => 0.0,
    };
    Ok(RewardTerms {
        r_succ: r_succ(inputs.hand_object_contact, inputs.object_table_contact),
        r_aff,
        r_pose,
        r_entropy: r_entropy(inputs.action_dim),
        gate_active: config.gate_met(inputs.touch_active),
    })
}

pub fn compute_reward(
    inputs: &RewardInputs,
    config: &RewardConfig,
    robot: &JointHierarchy,
) -> Result<StepRewardBreakdown, RewardError> {
    Ok(total_reward(
        &terms_for_variant(inputs, config, robot)?,
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_chamfer(m: &[Vec3], n: &[Vec3]) -> f64 {
        let mut total = 0.0;
        for a in m {
            let mut best = f64::MAX;
            for b in n {
                let d = (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        for b in n {
            let mut best = f64::MAX;
            for a in m {
                let d = (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total
    }

    fn robot() -> JointHierarchy {
        JointHierarchy::robot()
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let b = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &b).unwrap(), 0.0);
        let p = Vec3::new(0.1, 0.2, 0.3);
        let q = Vec3::new(-0.4, 0.0, 0.5);
        assert!((chamfer(&[p], &[q]).unwrap() - 2.0 * (p - q).norm_squared()).abs() < 1e-15);
        assert_eq!(chamfer(&[], &[q]), Err(RewardError::EmptySet));
        assert_eq!(r_aff(&[q], &[]), Err(RewardError::EmptySet));
    }

    #[test]
    fn com_variant_zero_at_com() {
        let c = Vec3::new(0.3, 0.1, 0.2);
        assert_eq!(r_aff_com(&[c], &c).unwrap(), 0.0);
    }

    #[test]
    fn gate_threshold_is_seven() {
        let c = RewardConfig::default();
        assert_eq!(c.gate_threshold(), 7);
        assert!(!c.gate_met(6));
        assert!(c.gate_met(7));
    }

    #[test]
    fn pose_examples() {
        let c = RewardConfig::default();
        let t = RobotJointVector::zeros();
        assert_eq!(r_pose(&t, &t, 21, &c, &robot()), 0.0);
        let mut cur = t;
        for i in 6..30 {
            cur[i] = 0.5;
        }
        assert_eq!(r_pose(&cur, &t, 6, &c, &robot()), 0.0);
        let mut w = t;
        w[7] = 0.2;
        assert!((r_pose(&w, &t, 7, &c, &robot()) + 0.2).abs() < 1e-15);
        let mut arm = t;
        arm[0] = 0.3;
        arm[4] = 1.0;
        assert_eq!(r_pose(&arm, &t, 21, &c, &robot()), 0.0);
    }

    #[test]
    fn pose_level_weights_by_hand() {
        // index FFJ2 (knuckle), FFJ1 (middle), FFJ0 (distal), thumb THJ1 (middle)
        let c = RewardConfig::default();
        let t = RobotJointVector::zeros();
        let mut cur = t;
        cur[14] = 0.4;
        cur[15] = 0.2;
        cur[16] = 0.1;
        cur[11] = 0.3;
        let expected = -(0.75 * 0.4 + 0.5 * (0.2 + 0.3) + 0.25 * 0.1);
        assert!((r_pose(&cur, &t, 10, &c, &robot()) - expected).abs() < 1e-15);
    }

    #[test]
    fn succ_truth_table() {
        assert_eq!(r_succ(true, false), 1.0);
        assert_eq!(r_succ(false, false), 0.0);
        assert_eq!(r_succ(true, true), 0.0);
        assert_eq!(r_succ(false, true), 0.0);
    }

    #[test]
    fn entropy_closed_form() {
        let h = r_entropy(30);
        assert!(
            (h - 30.0 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs()
                < 1e-12
        );
        assert!((h - 42.568).abs() < 1e-3);
        let mut ls = vec![0.0; 30];
        ls[3] = 1.0;
        assert!((gaussian_entropy(&ls) - (h + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let c = RewardConfig::default();
        let terms = RewardTerms {
            r_succ: 1.0,
            r_aff: -0.5,
            r_pose: -0.2,
            r_entropy: 42.568,
            gate_active: true,
        };
        let b = total_reward(&terms, &c);
        assert!((b.total - (1.0 - 0.5 - 0.2 + 0.042568)).abs() < 1e-12);
        let touch = RewardConfig {
            variant: RewardVariant::Touch,
            ..c.clone()
        };
        let b = total_reward(&terms, &touch);
        assert!((b.total - (1.0 + 1.0 + 0.001 * 42.568)).abs() < 1e-12);
        let closed = RewardTerms {
            gate_active: false,
            ..terms
        };
        assert!((total_reward(&closed, &touch).total - (1.0 + 0.042568)).abs() < 1e-12);
        assert_eq!(total_reward(&RewardTerms::default(), &c).total, 0.0);
        let graff = RewardConfig {
            variant: RewardVariant::GraffLike,
            ..c
        };
        assert!((total_reward(&terms, &graff).total - (1.0 - 0.5 + 0.042568)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig {
            gate_fraction: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RewardConfig {
            alpha: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            "graff_like".parse::<RewardVariant>().unwrap(),
            RewardVariant::GraffLike
        );
    }

    #[test]
    fn affordance_side_term_can_rise_when_hand_moves_closer() {
        let n = [Vec3::zeros(), Vec3::x()];
        let before = r_aff(&[Vec3::new(0.4, 0.0, 0.0)], &n).unwrap();
        let after = r_aff(&[Vec3::new(0.1, 0.0, 0.0)], &n).unwrap();
        assert!((before + 0.68).abs() < 1e-12);
        assert!((after + 0.83).abs() < 1e-12);
    }

    fn pts(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), n)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn chamfer_matches_brute_force(m in pts(10), n in pts(20)) {
            let c = chamfer(&m, &n).unwrap();
            prop_assert!((c - brute_chamfer(&m, &n)).abs() < 1e-12);
            prop_assert!((c - chamfer(&n, &m).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn chamfer_rigid_invariant(m in pts(10), n in pts(20), r in proptest::array::uniform3(-3.0f64..3.0), t in proptest::array::uniform3(-2.0f64..2.0)) {
            let rot = crate::geometry::rotvec_to_matrix(r);
            let f = |p: &Vec3| rot * p + Vec3::from(t);
            let m2: Vec<_> = m.iter().map(f).collect();
            let n2: Vec<_> = n.iter().map(f).collect();
            prop_assert!((chamfer(&m, &n).unwrap() - chamfer(&m2, &n2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn moving_closer_never_lowers_r_aff(m in pts(10), n in pts(20), s in 0.0f64..1.0) {
            let closer: Vec<_> = m.iter().map(|p| {
                let q = n.iter().min_by(|a, b| (p - *a).norm().total_cmp(&(p - *b).norm())).unwrap();
                p + (q - p) * s
            }).collect();
            let one_sided = |h: &[Vec3]| -> f64 {
                h.iter().map(|p| n.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)).sum()
            };
            prop_assert!(one_sided(&closer) <= one_sided(&m) + 1e-12);
            let com = [n[0]];
            let closer_com: Vec<_> = m.iter().map(|p| p + (com[0] - p) * s).collect();
            prop_assert!(r_aff(&closer_com, &com).unwrap() >= r_aff(&m, &com).unwrap() - 1e-12);
        }

        #[test]
        fn pose_nonpositive_and_levels_additive(
            cur in proptest::collection::vec(-3.0f64..3.0, 30),
            tgt in proptest::collection::vec(-3.0f64..3.0, 30),
            active in 0usize..=21,
            drop in 0usize..4,
        ) {
            let c = RobotJointVector::from_slice(&cur).unwrap();
            let t = RobotJointVector::from_slice(&tgt).unwrap();
            let cfg = RewardConfig::default();
            let full = r_pose(&c, &t, active, &cfg, &robot());
            prop_assert!(full <= 0.0);
            let mut reduced = cfg.clone();
            reduced.level_weights[drop] = 0.0;
            let e = pose_level_errors(&c, &t, &robot());
            let expected = if cfg.gate_met(active) { full + cfg.level_weights[drop] * e[drop] } else { 0.0 };
            prop_assert!((r_pose(&c, &t, active, &reduced, &robot()) - expected).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear_in_coefficients(
            s in 0.0f64..1.0, a in -2.0f64..0.0, p in -3.0f64..0.0, h in 0.0f64..50.0, k in 0usize..4, delta in 0.01f64..1.0,
        ) {
            let terms = RewardTerms { r_succ: s, r_aff: a, r_pose: p, r_entropy: h, gate_active: true };
            let base = RewardConfig::default();
            let mut bumped = base.clone();
            let term = match k { 0 => { bumped.alpha += delta; s } 1 => { bumped.beta += delta; a } 2 => { bumped.gamma += delta; p } _ => { bumped.eta += delta; h } };
            let diff = total_reward(&terms, &bumped).total - total_reward(&terms, &base).total;
            prop_assert!((diff / delta - term).abs() < 1e-9);
        }
    }
}
