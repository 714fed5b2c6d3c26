//! Quasi-static tabletop grasping environment.
//!
//! The hand is kinematic: joints track their position targets through a
//! first-order servo whose per-step gain is `servo_gain / damping`. Hand
//! points may not push into the object or the table; a blocked joint stops at
//! the largest collision-free fraction of its step. A touch sensor is active
//! when its site is within the contact radius of the object (inside counts).
//! The grasp closes when at least three sensors touch and two of the touched
//! faces oppose each other; a closed grasp with enough contacts for the
//! object's weight attaches the object to the hand while the wrist rises.
//! Released objects fall straight down onto the table.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{rot_x, rot_y, rot_z, rotvec_to_matrix, MeshQuery, Pose, TriMesh};
use crate::handmodel::{
    Finger, HandModel, RobotJointVector, Segment, TouchSensorLayout, Vec3, NUM_HAND_POINTS,
    NUM_ROBOT_JOINTS, NUM_TOUCH_SENSORS,
};
use crate::ingest::ObjectAsset;
use crate::retarget::spherical;
use crate::rewards::{compute_reward, RewardConfig, RewardInputs, StepRewardBreakdown};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("episode already finished at step {0}")]
    EpisodeOver(usize),
    #[error("object is not attached to the hand")]
    NotAttached,
    #[error("action contains non-finite values")]
    NonFiniteAction,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("reward: {0}")]
    Reward(#[from] crate::rewards::RewardError),
    #[error("replay diverged at step {step}: {what}")]
    ReplayMismatch { step: usize, what: String },
    #[error("episode log: {0}")]
    Log(String),
}

/// Joint index groups in proximal-to-distal order.
pub const FINGER_JOINTS: [&[usize]; 5] = [
    &[8, 9, 10, 11, 12],
    &[13, 14, 15, 16],
    &[17, 18, 19, 20],
    &[21, 22, 23, 24],
    &[25, 26, 27, 28, 29],
];
const ARM_WRIST: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub size: usize,
    /// Side of the square viewed area, meters.
    pub extent: f64,
    pub camera_height: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            size: 32,
            extent: 0.32,
            camera_height: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub sliding_friction: f64,
    pub torsional_friction: f64,
    pub rolling_friction: f64,
    pub wrist_damping: f64,
    pub finger_damping: f64,
    pub object_rotational_damping: f64,
    /// Overrides the asset mass when set.
    pub object_mass: Option<f64>,
    /// Uniform scale applied on top of the asset.
    pub object_scale: Option<f64>,
    pub episode_length: usize,
    pub contact_radius: f64,
    pub servo_gain: f64,
    pub yaw_range_deg: [f64; 2],
    pub dt: f64,
    pub gravity: f64,
    pub table_height: f64,
    /// Object counts as on the table within this gap.
    pub table_contact_tolerance: f64,
    /// Hand points may sink this far into the object or table.
    pub penetration_tolerance: f64,
    /// Normal force each squeezing contact contributes, newtons.
    pub contact_normal_force: f64,
    /// Friction load per kilogram a lift must carry, N/kg.
    pub lift_load_per_kg: f64,
    pub min_closure_contacts: usize,
    pub opposing_dot: f64,
    /// World position of the wrist at zero arm translation.
    pub base_position: [f64; 3],
    pub render: Option<RenderConfig>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sliding_friction: 1.0,
            torsional_friction: 0.5,
            rolling_friction: 0.01,
            wrist_damping: 0.5,
            finger_damping: 0.05,
            object_rotational_damping: 0.1,
            object_mass: None,
            object_scale: None,
            episode_length: 200,
            contact_radius: 0.008,
            servo_gain: 0.02,
            yaw_range_deg: [0.0, 180.0],
            dt: 0.02,
            gravity: 9.81,
            table_height: 0.0,
            table_contact_tolerance: 0.001,
            penetration_tolerance: 0.002,
            contact_normal_force: 1.0,
            lift_load_per_kg: 3.0,
            min_closure_contacts: 3,
            opposing_dot: -0.3,
            base_position: [-0.075, -0.065, 0.12],
            render: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("sliding_friction", self.sliding_friction),
            ("torsional_friction", self.torsional_friction),
            ("rolling_friction", self.rolling_friction),
            ("wrist_damping", self.wrist_damping),
            ("finger_damping", self.finger_damping),
            ("object_rotational_damping", self.object_rotational_damping),
            ("contact_radius", self.contact_radius),
            ("servo_gain", self.servo_gain),
            ("dt", self.dt),
            ("contact_normal_force", self.contact_normal_force),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("object_mass", self.object_mass),
            ("object_scale", self.object_scale),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(SimError::InvalidConfig(format!(
                        "{name} must be positive, got {v}"
                    )));
                }
            }
        }
        if self.episode_length == 0 {
            return Err(SimError::InvalidConfig(
                "episode_length must be at least 1".into(),
            ));
        }
        if self.yaw_range_deg[1] < self.yaw_range_deg[0] {
            return Err(SimError::InvalidConfig("yaw range is reversed".into()));
        }
        Ok(())
    }

    /// Per-step servo fraction for a joint.
    pub fn servo_fraction(&self, joint: usize) -> f64 {
        let damping = if joint < 8 {
            self.wrist_damping
        } else {
            self.finger_damping
        };
        (self.servo_gain / damping).min(1.0)
    }

    /// Active contacts needed to lift `mass` kilograms.
    pub fn required_contacts(&self, mass: f64) -> usize {
        let grip = self.sliding_friction * self.contact_normal_force;
        let n = (mass * self.lift_load_per_kg / grip - 1e-9).ceil().max(0.0) as usize;
        n.max(self.min_closure_contacts)
    }
}

/// Orientation of the hand frame at zero arm rotation: fingers along world
/// +x, thumb up, palm facing world +y.
pub fn base_rotation() -> Matrix3<f64> {
    Matrix3::from_columns(&[
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(0.0, -1.0, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
    ])
}

/// World-space hand kinematics for one joint vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HandFrames {
    pub hand: Pose,
    /// Frame of each phalanx (origin at its proximal joint, Z along the bone).
    pub phalanges: [[Pose; 3]; 5],
    pub sites: Vec<Vec3>,
    pub tips: [Vec3; 5],
}

impl HandFrames {
    /// Points checked against the object and table for one finger.
    fn finger_points(&self, finger: usize, layout_offset: usize) -> [Vec3; 4] {
        let s = layout_offset + 3 * finger;
        [
            self.sites[s],
            self.sites[s + 1],
            self.sites[s + 2],
            self.tips[finger],
        ]
    }

    fn all_points(&self) -> Vec<Vec3> {
        let mut p = self.sites.clone();
        p.extend_from_slice(&self.tips);
        p
    }
}

/// Forward kinematics mirroring the retargeting angle convention.
pub fn hand_fk(model: &HandModel, base_position: &Vec3, q: &RobotJointVector) -> HandFrames {
    let g = &model.geometry;
    let r_arm = base_rotation() * rotvec_to_matrix([q[3], q[4], q[5]]);
    let r_hand = r_arm * rot_x(q[7]) * rot_y(q[6]);
    let hand = Pose::new(r_hand, base_position + Vec3::new(q[0], q[1], q[2]));
    let mut phalanges = [[Pose::identity(); 3]; 5];
    let mut tips = [Vec3::zeros(); 5];
    for f in Finger::ALL {
        let fi = f.index();
        let mut knuckle = g.knuckle(f);
        let (a0, e0) = spherical(&knuckle);
        let mut rk = rot_x(e0) * rot_y(a0);
        // (abduction, flexion) at the knuckle, flexion at the middle and distal joints,
        // plus the thumb's second abduction
        let (abd, flex0, abd1, flex1, flex2) = match f {
            Finger::Thumb => (q[8], q[9], q[10], q[11], q[12]),
            Finger::Little => {
                let pivot = Vec3::from(g.little_metacarpal_pivot);
                let m = rot_x(q[25]);
                knuckle = pivot + m * (knuckle - pivot);
                rk = m * rk;
                (q[26], q[27], 0.0, q[28], q[29])
            }
            _ => {
                let j = FINGER_JOINTS[fi];
                (q[j[0]], q[j[1]], 0.0, q[j[2]], q[j[3]])
            }
        };
        let len = g.phalanges[fi];
        let r1 = rk * rot_x(flex0) * rot_y(abd);
        let p1 = knuckle;
        let r2 = r1 * rot_x(flex1) * rot_y(abd1);
        let p2 = p1 + r1.column(2) * len[0];
        let r3 = r2 * rot_x(flex2);
        let p3 = p2 + r2.column(2) * len[1];
        let tip = p3 + r3.column(2) * len[2];
        phalanges[fi] = [
            hand.compose(&Pose::new(r1, p1)),
            hand.compose(&Pose::new(r2, p2)),
            hand.compose(&Pose::new(r3, p3)),
        ];
        tips[fi] = hand.apply(&tip);
    }
    let sites = model
        .touch
        .sites
        .iter()
        .map(|s| {
            let off = Vec3::from(s.offset);
            match s.segment {
                Segment::Palm => hand.apply(&off),
                Segment::Finger { finger, phalanx } => {
                    phalanges[finger.index()][phalanx as usize].apply(&off)
                }
            }
        })
        .collect();
    HandFrames {
        hand,
        phalanges,
        sites,
        tips,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis6 {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Axis6 {
    pub const ALL: [Axis6; 6] = [
        Axis6::PosX,
        Axis6::NegX,
        Axis6::PosY,
        Axis6::NegY,
        Axis6::PosZ,
        Axis6::NegZ,
    ];

    pub fn direction(self) -> Vec3 {
        match self {
            Axis6::PosX => Vec3::x(),
            Axis6::NegX => -Vec3::x(),
            Axis6::PosY => Vec3::y(),
            Axis6::NegY => -Vec3::y(),
            Axis6::PosZ => Vec3::z(),
            Axis6::NegZ => -Vec3::z(),
        }
    }
}

/// One active touch sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub sensor: usize,
    pub distance: f64,
    /// Outward object normal at the contact, world frame.
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pose: RobotJointVector,
    pub velocity: RobotJointVector,
    /// World pose of the object frame (base center at the origin).
    pub object: Pose,
    pub object_vz: f64,
    /// Object pose in the hand frame while attached.
    pub attached: Option<Pose>,
    pub contacts: Vec<Contact>,
    pub hand_object_contact: bool,
    pub object_table_contact: bool,
    pub step: usize,
    pub seed: u64,
    pub initial_yaw: f64,
}

impl EnvState {
    pub fn touch(&self) -> Vec<bool> {
        let mut t = vec![false; NUM_TOUCH_SENSORS];
        for c in &self.contacts {
            t[c.sensor] = true;
        }
        t
    }

    pub fn active_count(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_attached(&self) -> bool {
        self.attached.is_some()
    }

    /// Hand touches the object and the object is off the table.
    pub fn lifted(&self) -> bool {
        self.hand_object_contact && !self.object_table_contact
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedImages {
    pub size: usize,
    /// Shaded intensity, 0..=255.
    pub intensity: Vec<u8>,
    /// Distance from the camera plane, meters; 0 where nothing is hit.
    pub depth: Vec<f32>,
    /// 255 where the visible surface is near an affordance point.
    pub affordance: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Joint positions then joint velocities.
    pub proprio: Vec<f64>,
    pub hand_points: Vec<Vec3>,
    /// Tracked affordance points, world frame.
    pub tracked_points: Vec<Vec3>,
    /// Hand-point by tracked-point distances, row-major.
    pub distances: Vec<f64>,
    pub touch: Vec<bool>,
    pub images: Option<RenderedImages>,
}

impl Observation {
    pub fn refresh_distances(&mut self) {
        self.distances = pairwise_distances(&self.hand_points, &self.tracked_points);
    }

    /// Flat low-dimensional feature vector: proprio, distances, touch.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feature_len());
        f.extend_from_slice(&self.proprio);
        f.extend_from_slice(&self.distances);
        f.extend(self.touch.iter().map(|&t| if t { 1.0 } else { 0.0 }));
        f
    }

    pub fn feature_len(&self) -> usize {
        self.proprio.len() + self.distances.len() + self.touch.len()
    }

    /// SHA-256 over the features and images, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.features() {
            h.update(v.to_le_bytes());
        }
        for p in self.hand_points.iter().chain(&self.tracked_points) {
            for c in p.iter() {
                h.update(c.to_le_bytes());
            }
        }
        if let Some(img) = &self.images {
            h.update(&img.intensity);
            h.update(&img.affordance);
            for d in &img.depth {
                h.update(d.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn pairwise_distances(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    let mut d = Vec::with_capacity(a.len() * b.len());
    for p in a {
        for q in b {
            d.push((p - q).norm());
        }
    }
    d
}

pub const OBSERVATION_FEATURES: usize =
    2 * NUM_ROBOT_JOINTS + NUM_HAND_POINTS * 20 + NUM_TOUCH_SENSORS;

#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: EnvState,
    pub observation: Observation,
    pub reward: StepRewardBreakdown,
    pub done: bool,
}

/// Object data in its own frame: base center at the origin, upright.
#[derive(Clone, Debug)]
struct ObjectModel {
    class: String,
    query: MeshQuery,
    affordance: Vec<Vec3>,
    com: Vec3,
    mass: f64,
    vertices: Vec<Vec3>,
}

impl ObjectModel {
    fn new(asset: &ObjectAsset, mass: Option<f64>, scale: Option<f64>) -> Self {
        let asset = asset.with_mass_and_scale(mass.unwrap_or(asset.mass), scale.unwrap_or(1.0));
        let c = asset.mesh.centroid();
        let shift = Vec3::new(c.x, c.y, asset.mesh.min_z());
        let local = |p: &Vec3| p - shift;
        let mesh = TriMesh::new(
            asset.mesh.vertices.iter().map(local).collect(),
            asset.mesh.faces.clone(),
        );
        Self {
            class: asset.object_class.clone(),
            com: local(&asset.center_of_mass()),
            affordance: asset.affordance.iter().map(local).collect(),
            mass: asset.mass,
            vertices: mesh.vertices.clone(),
            query: MeshQuery::new(mesh),
        }
    }

    fn min_z(&self, pose: &Pose) -> f64 {
        self.vertices
            .iter()
            .map(|v| pose.apply(v).z)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Environment definition shared by every episode; immutable while stepping.
#[derive(Clone, Debug)]
pub struct GraspEnv {
    pub config: EnvConfig,
    pub reward: RewardConfig,
    pub model: HandModel,
    pub target: RobotJointVector,
    object: ObjectModel,
    base: Vec3,
}

impl GraspEnv {
    pub fn new(
        asset: &ObjectAsset,
        model: HandModel,
        target: RobotJointVector,
        reward: RewardConfig,
        config: EnvConfig,
    ) -> Result<Self, SimError> {
        config.validate()?;
        reward.validate()?;
        if model.touch.sites.len() != NUM_TOUCH_SENSORS {
            return Err(SimError::InvalidConfig(
                "hand model needs 21 touch sensors".into(),
            ));
        }
        let object = ObjectModel::new(asset, config.object_mass, config.object_scale);
        let base = Vec3::from(config.base_position);
        Ok(Self {
            config,
            reward,
            model,
            target,
            object,
            base,
        })
    }

    pub fn object_class(&self) -> &str {
        &self.object.class
    }

    pub fn object_mass(&self) -> f64 {
        self.object.mass
    }

    pub fn fk(&self, q: &RobotJointVector) -> HandFrames {
        hand_fk(&self.model, &self.base, q)
    }

    /// Start pose: arm at the base, every other joint at the value nearest zero.
    pub fn start_pose(&self) -> RobotJointVector {
        self.model.clamp_to_limits(&RobotJointVector::zeros())
    }

    /// Yaw in radians drawn uniformly from the configured range.
    pub fn sample_yaw(&self, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lo, hi] = self.config.yaw_range_deg;
        (lo + (hi - lo) * rng.random::<f64>()).to_radians()
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        self.reset_with_yaw(self.sample_yaw(seed), seed)
    }

    pub fn reset_with_yaw(&self, yaw: f64, seed: u64) -> (EnvState, Observation) {
        let object = Pose::new(rot_z(yaw), Vec3::new(0.0, 0.0, self.config.table_height));
        let pose = self.start_pose();
        let mut state = EnvState {
            pose,
            velocity: RobotJointVector::zeros(),
            object,
            object_vz: 0.0,
            attached: None,
            contacts: Vec::new(),
            hand_object_contact: false,
            object_table_contact: false,
            step: 0,
            seed,
            initial_yaw: yaw,
        };
        self.refresh_contacts(&mut state);
        let obs = self.observe(&state);
        (state, obs)
    }

    fn object_pose_for(&self, state: &EnvState, hand: &Pose) -> Pose {
        match &state.attached {
            Some(rel) => hand.compose(rel),
            None => state.object,
        }
    }

    /// Depth of a point inside the object (0 outside) and below the table.
    fn penetration(&self, object: &Pose, p: &Vec3) -> f64 {
        let local = object.inverse().apply(p);
        let obj = self
            .object
            .query
            .signed_distance_within(&local, 0.0)
            .map(|h| -h.distance)
            .unwrap_or(0.0)
            .max(0.0);
        obj.max(self.config.table_height - p.z)
    }

    fn motion_allowed(&self, state: &EnvState, old: &[Vec3], new: &[Vec3], object: &Pose) -> bool {
        let tol = self.config.penetration_tolerance;
        old.iter().zip(new).all(|(o, n)| {
            let dn = self.penetration(object, n);
            dn <= tol || dn <= self.penetration(object, o) + 1e-12
        }) && match &state.attached {
            Some(_) => self.object.min_z(object) >= self.config.table_height - 1e-12,
            None => true,
        }
    }

    /// Largest fraction in [0, 1] of the move `from -> to` over `joints` that
    /// passes `ok`; bisection assumes blocking is monotone along the move.
    fn limit_motion(
        from: &RobotJointVector,
        to: &RobotJointVector,
        joints: &[usize],
        mut ok: impl FnMut(&RobotJointVector) -> bool,
    ) -> RobotJointVector {
        let blend = |s: f64| {
            let mut q = *from;
            for &j in joints {
                q[j] = from[j] + s * (to[j] - from[j]);
            }
            q
        };
        if joints.iter().all(|&j| from[j] == to[j]) {
            return *from;
        }
        let full = blend(1.0);
        if ok(&full) {
            return full;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..10 {
            let mid = 0.5 * (lo + hi);
            if ok(&blend(mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        blend(lo)
    }

    pub fn step(
        &self,
        state: &EnvState,
        action: &RobotJointVector,
    ) -> Result<StepResult, SimError> {
        if state.step >= self.config.episode_length {
            return Err(SimError::EpisodeOver(state.step));
        }
        if !action.is_finite() {
            return Err(SimError::NonFiniteAction);
        }
        let target = self.model.clamp_to_limits(action);
        let mut proposal = state.pose;
        for i in 0..NUM_ROBOT_JOINTS {
            proposal[i] += self.config.servo_fraction(i) * (target[i] - state.pose[i]);
        }

        // arm and wrist first, fingers held, then each finger joint proximal to distal
        let old_frames = self.fk(&state.pose);
        let old_points = old_frames.all_points();
        let mut q = Self::limit_motion(&state.pose, &proposal, &ARM_WRIST, |cand| {
            let fr = self.fk(cand);
            let obj = self.object_pose_for(state, &fr.hand);
            self.motion_allowed(state, &old_points, &fr.all_points(), &obj)
        });
        let thumb_offset = 6;
        for (fi, joints) in FINGER_JOINTS.iter().enumerate() {
            for &j in joints.iter() {
                let before = self.fk(&q);
                let obj = self.object_pose_for(state, &before.hand);
                let old = before.finger_points(fi, thumb_offset);
                let mut one = q;
                one[j] = proposal[j];
                q = Self::limit_motion(&q, &one, &[j], |cand| {
                    let fr = self.fk(cand);
                    let new = fr.finger_points(fi, thumb_offset);
                    self.motion_allowed(state, &old, &new, &obj)
                });
            }
        }

        let mut next = state.clone();
        for i in 0..NUM_ROBOT_JOINTS {
            next.velocity[i] = (q[i] - state.pose[i]) / self.config.dt;
        }
        next.pose = q;
        let frames = self.fk(&q);

        match &state.attached {
            Some(rel) => next.object = frames.hand.compose(rel),
            None => self.settle_object(&mut next),
        }
        self.refresh_contacts(&mut next);

        let rising = frames.hand.translation.z > old_frames.hand.translation.z + 1e-9;
        let holdable = self.grasp_closed(&next.contacts)
            && next.contacts.len() >= self.config.required_contacts(self.object.mass);
        if next.attached.is_none() && holdable && rising {
            next.attached = Some(frames.hand.inverse().compose(&next.object));
            next.object_vz = 0.0;
        } else if next.attached.is_some() && !holdable {
            next.attached = None;
            next.object_vz = 0.0;
        }

        next.step = state.step + 1;
        let reward = self.reward_for(&next)?;
        let observation = self.observe(&next);
        let done = next.step >= self.config.episode_length;
        Ok(StepResult {
            state: next,
            observation,
            reward,
            done,
        })
    }

    /// Free fall onto the table and a slow return to upright once resting.
    fn settle_object(&self, s: &mut EnvState) {
        let table = self.config.table_height;
        let min_z = self.object.min_z(&s.object);
        if min_z > table + 1e-12 {
            s.object_vz -= self.config.gravity * self.config.dt;
            let dz = (s.object_vz * self.config.dt).max(table - min_z);
            s.object.translation.z += dz;
            if self.object.min_z(&s.object) <= table + 1e-12 {
                s.object_vz = 0.0;
            }
        } else {
            s.object_vz = 0.0;
            let r = s.object.rotation;
            let up = r * Vec3::z();
            if (up - Vec3::z()).norm() > 1e-12 {
                let axis = up.cross(&Vec3::z());
                let angle = up.dot(&Vec3::z()).clamp(-1.0, 1.0).acos();
                let k = (self.config.servo_gain / self.config.object_rotational_damping).min(1.0);
                let turn = if axis.norm() > 1e-12 {
                    axis.normalize() * (k * angle)
                } else {
                    Vec3::zeros()
                };
                s.object.rotation = rotvec_to_matrix([turn.x, turn.y, turn.z]) * r;
            }
            // keep the lowest vertex on the table
            let lift = table - self.object.min_z(&s.object);
            s.object.translation.z += lift;
        }
    }

    fn contacts_for(&self, sites: &[Vec3], object: &Pose) -> Vec<Contact> {
        let inv = object.inverse();
        let mut out = Vec::new();
        for (i, p) in sites.iter().enumerate() {
            let local = inv.apply(p);
            if let Some(h) = self
                .object
                .query
                .signed_distance_within(&local, self.config.contact_radius)
            {
                out.push(Contact {
                    sensor: i,
                    distance: h.distance.max(0.0),
                    normal: object.rotation * h.normal,
                });
            }
        }
        out
    }

    fn refresh_contacts(&self, s: &mut EnvState) {
        let frames = self.fk(&s.pose);
        s.contacts = self.contacts_for(&frames.sites, &s.object);
        s.hand_object_contact = !s.contacts.is_empty();
        s.object_table_contact = self.object.min_z(&s.object)
            <= self.config.table_height + self.config.table_contact_tolerance;
    }

    /// Active sensors, recomputed from the state's joint and object poses.
    pub fn touch_readings(&self, state: &EnvState) -> Vec<bool> {
        let frames = self.fk(&state.pose);
        let mut t = vec![false; NUM_TOUCH_SENSORS];
        for c in self.contacts_for(&frames.sites, &state.object) {
            t[c.sensor] = true;
        }
        t
    }

    /// At least the minimum number of contacts, two of them on opposing faces.
    pub fn grasp_closed(&self, contacts: &[Contact]) -> bool {
        contacts.len() >= self.config.min_closure_contacts && self.opposed_contacts(contacts) >= 2
    }

    /// Contacts that have a partner on an opposing face.
    pub fn opposed_contacts(&self, contacts: &[Contact]) -> usize {
        contacts
            .iter()
            .filter(|a| {
                contacts
                    .iter()
                    .any(|b| a.normal.dot(&b.normal) < self.config.opposing_dot)
            })
            .count()
    }

    /// Whether an external force along `axis` leaves the grasp intact.
    ///
    /// Friction from squeezing contacts (those with an opposing partner)
    /// resists up to μ·n·F_n; a contact whose face points along the push
    /// blocks it outright. The state is not modified.
    pub fn apply_perturbation(
        &self,
        state: &EnvState,
        force: f64,
        axis: Axis6,
    ) -> Result<bool, SimError> {
        if state.attached.is_none() {
            return Err(SimError::NotAttached);
        }
        let d = axis.direction();
        let squeezing = self.opposed_contacts(&state.contacts) as f64;
        let friction = self.config.sliding_friction * squeezing * self.config.contact_normal_force;
        let blocked = state.contacts.iter().any(|c| c.normal.dot(&d) > 0.3);
        Ok(force <= friction + 1e-12 || blocked)
    }

    pub fn hand_points(&self, frames: &HandFrames) -> Vec<Vec3> {
        TouchSensorLayout::hand_point_sites()
            .iter()
            .map(|&i| frames.sites[i])
            .collect()
    }

    pub fn affordance_world(&self, state: &EnvState) -> Vec<Vec3> {
        self.object
            .affordance
            .iter()
            .map(|p| state.object.apply(p))
            .collect()
    }

    pub fn center_of_mass_world(&self, state: &EnvState) -> Vec3 {
        state.object.apply(&self.object.com)
    }

    /// Reward from a state alone (used live and for log replay).
    pub fn reward_for(&self, state: &EnvState) -> Result<StepRewardBreakdown, SimError> {
        let frames = self.fk(&state.pose);
        let hand = self.hand_points(&frames);
        let aff = self.affordance_world(state);
        let inputs = RewardInputs {
            hand_object_contact: state.hand_object_contact,
            object_table_contact: state.object_table_contact,
            hand_points: &hand,
            affordance: &aff,
            center_of_mass: self.center_of_mass_world(state),
            current: &state.pose,
            target: &self.target,
            touch_active: state.contacts.len(),
            action_dim: NUM_ROBOT_JOINTS,
        };
        Ok(compute_reward(&inputs, &self.reward, &self.model.robot)?)
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        let frames = self.fk(&state.pose);
        let mut proprio = Vec::with_capacity(2 * NUM_ROBOT_JOINTS);
        proprio.extend_from_slice(state.pose.as_slice());
        proprio.extend_from_slice(state.velocity.as_slice());
        let hand_points = self.hand_points(&frames);
        let tracked_points = self.affordance_world(state);
        let images = self
            .config
            .render
            .as_ref()
            .map(|r| self.render(state, &frames, r));
        let mut obs = Observation {
            proprio,
            hand_points,
            tracked_points,
            distances: Vec::new(),
            touch: state.touch(),
            images,
        };
        obs.refresh_distances();
        obs
    }

    /// Orthographic top-down view centered on the table origin.
    pub fn render(
        &self,
        state: &EnvState,
        frames: &HandFrames,
        cfg: &RenderConfig,
    ) -> RenderedImages {
        let n = cfg.size;
        let mut intensity = vec![0u8; n * n];
        let mut depth = vec![0f32; n * n];
        let mut affordance = vec![0u8; n * n];
        let inv = state.object.inverse();
        let down = inv.apply_vector(&-Vec3::z());
        let aff = &self.object.affordance;
        let hand_r = 0.01;
        for v in 0..n {
            for u in 0..n {
                let x = (u as f64 + 0.5) / n as f64 * cfg.extent - cfg.extent / 2.0;
                let y = cfg.extent / 2.0 - (v as f64 + 0.5) / n as f64 * cfg.extent;
                let origin = Vec3::new(x, y, cfg.camera_height);
                let mut best = cfg.camera_height - self.config.table_height;
                let mut shade = 40u8;
                let mut aff_hit = false;
                if let Some((t, face)) = self.object.query.mesh.raycast(&inv.apply(&origin), &down)
                {
                    if t < best {
                        best = t;
                        let nz = (state.object.rotation * self.object.query.mesh.face_normal(face))
                            .z
                            .abs();
                        shade = (80.0 + 150.0 * nz) as u8;
                        let hit = inv.apply(&origin) + down * t;
                        aff_hit = aff.iter().any(|a| (a - hit).norm() < 0.01);
                    }
                }
                for p in frames.sites.iter().chain(frames.tips.iter()) {
                    let dxy = ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt();
                    if dxy < hand_r {
                        let t = cfg.camera_height - p.z - (hand_r * hand_r - dxy * dxy).sqrt();
                        if t < best {
                            best = t;
                            shade = 250;
                            aff_hit = false;
                        }
                    }
                }
                intensity[v * n + u] = shade;
                depth[v * n + u] = best as f32;
                affordance[v * n + u] = if aff_hit { 255 } else { 0 };
            }
        }
        RenderedImages {
            size: n,
            intensity,
            depth,
            affordance,
        }
    }
}

/// Header line of a persisted episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub object_class: String,
    pub seed: u64,
    pub initial_yaw: f64,
    pub config_hash: String,
    pub reward_variant: String,
    pub initial_state: EnvState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Joint targets sent to the environment (after any actuation noise).
    pub action: RobotJointVector,
    pub state: EnvState,
    pub observation_digest: String,
    pub reward: StepRewardBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn new(env: &GraspEnv, initial: &EnvState, config_hash: impl Into<String>) -> Self {
        Self {
            header: EpisodeHeader {
                object_class: env.object_class().to_string(),
                seed: initial.seed,
                initial_yaw: initial.initial_yaw,
                config_hash: config_hash.into(),
                reward_variant: env.reward.variant.name().to_string(),
                initial_state: initial.clone(),
            },
            steps: Vec::new(),
        }
    }

    pub fn record(&mut self, action: &RobotJointVector, result: &StepResult) {
        self.steps.push(StepRecord {
            step: result.state.step,
            action: *action,
            state: result.state.clone(),
            observation_digest: result.observation.digest(),
            reward: result.reward,
        });
    }

    pub fn final_state(&self) -> &EnvState {
        self.steps
            .last()
            .map(|s| &s.state)
            .unwrap_or(&self.header.initial_state)
    }

    /// Line-delimited JSON: the header, then one record per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let line = |e: serde_json::Error| SimError::Log(e.to_string());
        let io = |e: std::io::Error| SimError::Log(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&self.header).map_err(line)?).map_err(io)?;
        for s in &self.steps {
            writeln!(w, "{}", serde_json::to_string(s).map_err(line)?).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| SimError::Log("empty episode log".into()))?
            .map_err(|e| SimError::Log(e.to_string()))?;
        let header: EpisodeHeader =
            serde_json::from_str(&first).map_err(|e| SimError::Log(e.to_string()))?;
        let mut steps = Vec::new();
        for (i, l) in lines.enumerate() {
            let l = l.map_err(|e| SimError::Log(e.to_string()))?;
            if l.trim().is_empty() {
                continue;
            }
            steps.push(
                serde_json::from_str(&l)
                    .map_err(|e| SimError::Log(format!("line {}: {e}", i + 2)))?,
            );
        }
        Ok(Self { header, steps })
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let f = std::fs::File::create(path).map_err(|e| SimError::Log(e.to_string()))?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let f = std::fs::File::open(path).map_err(|e| SimError::Log(e.to_string()))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub steps_matched: usize,
    pub steps_total: usize,
    pub max_reward_error: f64,
}

/// Re-executes the logged actions from the logged initial state and checks
/// every state, observation digest and reward bit for bit, then recomputes
/// each reward from the logged state alone.
pub fn replay(env: &GraspEnv, log: &EpisodeLog) -> Result<ReplayReport, SimError> {
    let (fresh, _) = env.reset_with_yaw(log.header.initial_yaw, log.header.seed);
    if fresh != log.header.initial_state {
        return Err(SimError::ReplayMismatch {
            step: 0,
            what: "initial state".into(),
        });
    }
    let mut state = fresh;
    let mut max_err: f64 = 0.0;
    for rec in &log.steps {
        let r = env.step(&state, &rec.action)?;
        if r.state != rec.state {
            return Err(SimError::ReplayMismatch {
                step: rec.step,
                what: "state".into(),
            });
        }
        if r.observation.digest() != rec.observation_digest {
            return Err(SimError::ReplayMismatch {
                step: rec.step,
                what: "observation digest".into(),
            });
        }
        if r.reward != rec.reward {
            return Err(SimError::ReplayMismatch {
                step: rec.step,
                what: "reward".into(),
            });
        }
        let again = env.reward_for(&rec.state)?;
        let b = &rec.reward;
        let recomposed = env.reward.alpha * b.r_succ
            + env.reward.beta * b.r_aff
            + env.reward.gamma * b.r_pose
            + env.reward.eta * b.r_entropy;
        max_err = max_err
            .max((again.total - b.total).abs())
            .max((recomposed - b.total).abs());
        if max_err > 1e-9 {
            return Err(SimError::ReplayMismatch {
                step: rec.step,
                what: format!("reward recomputation off by {max_err}"),
            });
        }
        state = r.state;
    }
    Ok(ReplayReport {
        steps_matched: log.steps.len(),
        steps_total: log.steps.len(),
        max_reward_error: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    fn env() -> GraspEnv {
        let asset = toy::cube_asset();
        GraspEnv::new(
            &asset,
            HandModel::default().with_adroit_like_limits(),
            RobotJointVector::zeros(),
            RewardConfig::default(),
            EnvConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_resting() {
        let e = env();
        let (a, oa) = e.reset(7);
        let (b, ob) = e.reset(7);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        assert!(a.object_table_contact);
        assert!(!a.hand_object_contact);
        assert_eq!(a.step, 0);
        assert_eq!(oa.features().len(), OBSERVATION_FEATURES);
    }

    #[test]
    fn yaw_is_uniform() {
        let e = env();
        let mean = (0..100).map(|s| e.sample_yaw(s).to_degrees()).sum::<f64>() / 100.0;
        assert!((mean - 90.0).abs() < 10.0, "mean yaw {mean}");
        assert!((0..100).all(|s| (0.0..=180.0).contains(&e.sample_yaw(s).to_degrees())));
    }

    #[test]
    fn holding_pose_is_a_fixed_point() {
        let e = env();
        let (s, _) = e.reset(1);
        let r = e.step(&s, &s.pose).unwrap();
        assert_eq!(r.state.pose, s.pose);
        assert!(r.state.velocity.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn far_hand_gets_no_success_or_pose_reward() {
        let e = env();
        let (s, _) = e.reset(1);
        let mut up = s.pose;
        up[2] = 0.15;
        let r = e.step(&s, &up).unwrap();
        assert_eq!(r.reward.r_succ, 0.0);
        assert!(!r.reward.gate_active);
        assert_eq!(r.reward.r_pose, 0.0);
    }

    #[test]
    fn episode_over() {
        let cfg = EnvConfig {
            episode_length: 2,
            ..Default::default()
        };
        let e = GraspEnv::new(
            &toy::cube_asset(),
            HandModel::default(),
            RobotJointVector::zeros(),
            RewardConfig::default(),
            cfg,
        )
        .unwrap();
        let (mut s, _) = e.reset(0);
        for _ in 0..2 {
            let r = e.step(&s, &s.pose).unwrap();
            s = r.state;
        }
        assert_eq!(e.step(&s, &s.pose).unwrap_err(), SimError::EpisodeOver(2));
    }

    #[test]
    fn far_hand_touches_nothing() {
        let e = env();
        let (mut s, _) = e.reset(0);
        s.pose[2] = 1.0;
        assert!(e.touch_readings(&s).iter().all(|t| !t));
    }

    #[test]
    fn site_on_surface_is_active() {
        let e = env();
        let (s, _) = e.reset(0);
        let frames = e.fk(&s.pose);
        // move the object so its top face passes exactly through the palm center site
        let site = frames.sites[0];
        let mut moved = s.clone();
        let top = e.object.min_z(&Pose::identity())
            + e.object.vertices.iter().map(|v| v.z).fold(0.0, f64::max);
        moved.object.translation = Vec3::new(site.x, site.y, site.z - top);
        moved.object.rotation = Matrix3::identity();
        assert!(e.touch_readings(&moved)[0]);
    }

    #[test]
    fn required_contacts_scale_with_mass() {
        let c = EnvConfig::default();
        assert_eq!(c.required_contacts(0.5), 3);
        assert_eq!(c.required_contacts(1.0), 3);
        assert_eq!(c.required_contacts(1.5), 5);
    }

    fn contact(sensor: usize, n: Vec3) -> Contact {
        Contact {
            sensor,
            distance: 0.0,
            normal: n,
        }
    }

    #[test]
    fn perturbation_rules() {
        let e = env();
        let (s, _) = e.reset(0);
        assert_eq!(
            e.apply_perturbation(&s, 1.0, Axis6::PosX),
            Err(SimError::NotAttached)
        );
        let mut held = s.clone();
        held.attached = Some(Pose::identity());
        held.contacts = vec![
            contact(0, Vec3::z()),
            contact(9, Vec3::x()),
            contact(6, -Vec3::x()),
        ];
        for a in Axis6::ALL {
            assert!(e.apply_perturbation(&held, 1.0, a).unwrap());
        }
        held.contacts = vec![contact(9, Vec3::x())];
        let drops = Axis6::ALL
            .iter()
            .filter(|&&a| !e.apply_perturbation(&held, 1.0, a).unwrap())
            .count();
        assert!(drops >= 1);
        assert!(held.is_attached());
    }

    #[test]
    fn flat_hand_fk_matches_geometry() {
        let m = HandModel::default();
        let f = hand_fk(&m, &Vec3::zeros(), &RobotJointVector::zeros());
        let r = base_rotation();
        let idx_tip_hand = m.geometry.knuckle(Finger::Index)
            + spherical_dir(&m.geometry.knuckle(Finger::Index))
                * m.geometry.phalanges[1].iter().sum::<f64>();
        assert!((f.tips[1] - r * idx_tip_hand).norm() < 1e-12);
    }

    fn spherical_dir(k: &Vec3) -> Vec3 {
        let (a, e) = spherical(k);
        rot_x(e) * rot_y(a) * Vec3::z()
    }

    #[test]
    fn scripted_lift_succeeds_and_replays() {
        let e = env();
        let plan = toy::ScriptedGrasp::for_class("cube");
        let (log, _) = toy::run_scripted(&e, &plan, 3, "test").unwrap();
        let last = log.final_state();
        assert!(last.is_attached(), "cube not attached at the end");
        assert!(log.steps[150..].iter().all(|r| r.state.lifted()));
        assert!(log
            .steps
            .iter()
            .filter(|r| r.reward.r_succ == 1.0)
            .all(|r| r.state.lifted()));
        for w in log.steps.windows(2) {
            assert!(w[1].state.object.translation.z >= e.config.table_height - 1e-9);
            if w[0].state.attached.is_some() && w[1].state.attached.is_some() {
                let fr = e.fk(&w[1].state.pose);
                let expect = fr.hand.compose(w[0].state.attached.as_ref().unwrap());
                assert_eq!(expect, w[1].state.object);
            }
        }
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = EpisodeLog::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, log);
        let rep = replay(&e, &back).unwrap();
        assert_eq!(rep.steps_matched, 200);
    }
}
