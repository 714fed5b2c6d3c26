//! Kinematic hierarchies shared by every other module.
//!
//! Two trees live here: the 21-keypoint human hand produced by monocular hand
//! pose estimators, and the 30-DoF robot (6-DoF arm carrying a 24-DoF
//! five-fingered hand). The robot joint order is fixed so that serialized
//! vectors are unambiguous:
//!
//! ```text
//!  0..=5   arm      ARTx ARTy ARTz (m)  ARRx ARRy ARRz (rad, rotation vector)
//!  6..=7   wrist    WRJ1 WRJ0
//!  8..=12  thumb    THJ4 THJ3 THJ2 THJ1 THJ0
//! 13..=16  index    FFJ3 FFJ2 FFJ1 FFJ0
//! 17..=20  middle   MFJ3 MFJ2 MFJ1 MFJ0
//! 21..=24  ring     RFJ3 RFJ2 RFJ1 RFJ0
//! 25..=29  little   LFJ4 LFJ3 LFJ2 LFJ1 LFJ0
//! ```
//!
//! With the arm stripped, the hand-local index (`i - 6`) puts the index-finger
//! middle joint at 9 and the little-finger metacarpal at 19.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

pub const NUM_HUMAN_JOINTS: usize = 21;
pub const NUM_ROBOT_JOINTS: usize = 30;
pub const NUM_ARM_JOINTS: usize = 6;
pub const NUM_TOUCH_SENSORS: usize = 21;
/// Number of sampled hand surface points used for hand-affordance distances.
pub const NUM_HAND_POINTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandModelError {
    #[error("missing joint `{0}`")]
    MissingJoint(String),
    #[error("duplicate joint `{0}`")]
    DuplicateJoint(String),
    #[error("unknown joint label `{0}`")]
    UnknownJoint(String),
    #[error("non-finite coordinate at joint `{0}`")]
    NonFinite(String),
    #[error("degenerate keypoint cloud (wrist coincides with middle knuckle)")]
    DegenerateCloud,
    #[error("hierarchy is not a rooted tree: {0}")]
    BadHierarchy(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Arm,
    Wrist,
    Knuckle,
    Middle,
    Distal,
    /// Human fingertips. They carry no rotation but anchor the distal angle.
    Tip,
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arm" => Ok(Level::Arm),
            "wrist" => Ok(Level::Wrist),
            "knuckle" => Ok(Level::Knuckle),
            "middle" => Ok(Level::Middle),
            "distal" => Ok(Level::Distal),
            "tip" => Ok(Level::Tip),
            other => Err(format!("unknown level `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

impl Finger {
    pub const ALL: [Finger; 5] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Little,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Human keypoint indices of (knuckle, middle, distal, tip).
    pub fn human_chain(self) -> [usize; 4] {
        let base = 1 + 3 * self.index();
        [base, base + 1, base + 2, 16 + self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phalanx {
    Proximal,
    Middle,
    Distal,
}

impl Phalanx {
    pub const ALL: [Phalanx; 3] = [Phalanx::Proximal, Phalanx::Middle, Phalanx::Distal];
}

pub const HUMAN_JOINT_LABELS: [&str; NUM_HUMAN_JOINTS] = [
    "wrist",
    "thumb_knuckle",
    "thumb_middle",
    "thumb_distal",
    "index_knuckle",
    "index_middle",
    "index_distal",
    "middle_knuckle",
    "middle_middle",
    "middle_distal",
    "ring_knuckle",
    "ring_middle",
    "ring_distal",
    "little_knuckle",
    "little_middle",
    "little_distal",
    "thumb_tip",
    "index_tip",
    "middle_tip",
    "ring_tip",
    "little_tip",
];

pub const ROBOT_JOINT_NAMES: [&str; NUM_ROBOT_JOINTS] = [
    "ARTx", "ARTy", "ARTz", "ARRx", "ARRy", "ARRz", "WRJ1", "WRJ0", "THJ4", "THJ3", "THJ2", "THJ1",
    "THJ0", "FFJ3", "FFJ2", "FFJ1", "FFJ0", "MFJ3", "MFJ2", "MFJ1", "MFJ0", "RFJ3", "RFJ2", "RFJ1",
    "RFJ0", "LFJ4", "LFJ3", "LFJ2", "LFJ1", "LFJ0",
];

/// Index of a human keypoint by label.
pub fn human_joint_index(label: &str) -> Option<usize> {
    HUMAN_JOINT_LABELS.iter().position(|l| *l == label)
}

/// Index of a robot joint by name.
pub fn robot_joint_index(name: &str) -> Option<usize> {
    ROBOT_JOINT_NAMES.iter().position(|n| *n == name)
}

/// Wrap an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Absolute wrapped angular difference in [0, π].
pub fn angle_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// One validated right-hand keypoint set, positions in meters, canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanHandKeypoints {
    positions: Vec<[f64; 3]>,
}

impl HumanHandKeypoints {
    /// Validates labeled points (any order) into the canonical ordering.
    pub fn validate<S: AsRef<str>>(raw: &[(S, [f64; 3])]) -> Result<Self, HandModelError> {
        let mut slots: [Option<[f64; 3]>; NUM_HUMAN_JOINTS] = [None; NUM_HUMAN_JOINTS];
        for (label, p) in raw {
            let label = label.as_ref();
            let idx = human_joint_index(label)
                .ok_or_else(|| HandModelError::UnknownJoint(label.to_string()))?;
            if slots[idx].is_some() {
                return Err(HandModelError::DuplicateJoint(label.to_string()));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(HandModelError::NonFinite(label.to_string()));
            }
            slots[idx] = Some(*p);
        }
        let mut positions = Vec::with_capacity(NUM_HUMAN_JOINTS);
        for (idx, slot) in slots.iter().enumerate() {
            match slot {
                Some(p) => positions.push(*p),
                None => return Err(HandModelError::MissingJoint(HUMAN_JOINT_LABELS[idx].into())),
            }
        }
        Self::from_positions(positions)
    }

    /// Validates positions already in canonical order.
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self, HandModelError> {
        if positions.len() != NUM_HUMAN_JOINTS {
            let idx = positions.len().min(NUM_HUMAN_JOINTS - 1);
            return Err(HandModelError::MissingJoint(HUMAN_JOINT_LABELS[idx].into()));
        }
        for (i, p) in positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(HandModelError::NonFinite(HUMAN_JOINT_LABELS[i].into()));
            }
        }
        let wrist = Vec3::from(positions[0]);
        let middle = Vec3::from(positions[Finger::Middle.human_chain()[0]]);
        if (middle - wrist).norm() <= 1e-12 {
            return Err(HandModelError::DegenerateCloud);
        }
        Ok(Self { positions })
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self, HandModelError> {
        Self::from_positions(points.iter().map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn position(&self, joint: usize) -> Vec3 {
        Vec3::from(self.positions[joint])
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.positions.iter().map(|p| Vec3::from(*p)).collect()
    }

    pub fn labeled(&self) -> Vec<(String, [f64; 3])> {
        HUMAN_JOINT_LABELS
            .iter()
            .zip(&self.positions)
            .map(|(l, p)| (l.to_string(), *p))
            .collect()
    }

    pub fn handedness(&self) -> &'static str {
        "right"
    }
}

/// 30 joint values in the canonical robot order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotJointVector(pub [f64; NUM_ROBOT_JOINTS]);

impl Default for RobotJointVector {
    fn default() -> Self {
        Self::zeros()
    }
}

impl RobotJointVector {
    pub fn zeros() -> Self {
        Self([0.0; NUM_ROBOT_JOINTS])
    }

    pub fn from_slice(values: &[f64]) -> Option<Self> {
        let arr: [f64; NUM_ROBOT_JOINTS] = values.try_into().ok()?;
        Some(Self(arr))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        robot_joint_index(name).map(|i| self.0[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> bool {
        match robot_joint_index(name) {
            Some(i) => {
                self.0[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Named map, used by the file formats.
    pub fn to_named(&self) -> Vec<(String, f64)> {
        ROBOT_JOINT_NAMES
            .iter()
            .zip(self.0.iter())
            .map(|(n, v)| (n.to_string(), *v))
            .collect()
    }

    pub fn from_named<S: AsRef<str>>(named: &[(S, f64)]) -> Result<Self, HandModelError> {
        let mut seen = [false; NUM_ROBOT_JOINTS];
        let mut out = Self::zeros();
        for (name, v) in named {
            let name = name.as_ref();
            let i = robot_joint_index(name)
                .ok_or_else(|| HandModelError::UnknownJoint(name.to_string()))?;
            if seen[i] {
                return Err(HandModelError::DuplicateJoint(name.to_string()));
            }
            if !v.is_finite() {
                return Err(HandModelError::NonFinite(name.to_string()));
            }
            seen[i] = true;
            out.0[i] = *v;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(HandModelError::MissingJoint(ROBOT_JOINT_NAMES[i].into()));
        }
        Ok(out)
    }
}

impl std::ops::Index<usize> for RobotJointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for RobotJointVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Serialize for RobotJointVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(NUM_ROBOT_JOINTS))?;
        for (n, v) in ROBOT_JOINT_NAMES.iter().zip(self.0.iter()) {
            m.serialize_entry(n, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for RobotJointVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map: named_map::OrderedMap = Deserialize::deserialize(d)?;
        RobotJointVector::from_named(&map.0).map_err(serde::de::Error::custom)
    }
}

mod named_map {
    use serde::de::{MapAccess, Visitor};
    use serde::Deserialize;

    /// Preserves entry order and duplicates so validation can report them.
    pub struct OrderedMap(pub Vec<(String, f64)>);

    impl<'de> Deserialize<'de> for OrderedMap {
        fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            struct V;
            impl<'de> Visitor<'de> for V {
                type Value = OrderedMap;
                fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                    f.write_str("a map of joint name to value")
                }
                fn visit_map<A: MapAccess<'de>>(self, mut a: A) -> Result<OrderedMap, A::Error> {
                    let mut out = Vec::new();
                    while let Some((k, v)) = a.next_entry::<String, f64>()? {
                        out.push((k, v));
                    }
                    Ok(OrderedMap(out))
                }
            }
            d.deserialize_map(V)
        }
    }
}

/// Parent pointers and level tags for one kinematic tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointHierarchy {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub levels: Vec<Level>,
}

impl JointHierarchy {
    pub fn human() -> Self {
        let mut parents = vec![None; NUM_HUMAN_JOINTS];
        let mut levels = vec![Level::Wrist; NUM_HUMAN_JOINTS];
        for f in Finger::ALL {
            let [k, m, d, t] = f.human_chain();
            parents[k] = Some(0);
            parents[m] = Some(k);
            parents[d] = Some(m);
            parents[t] = Some(d);
            levels[k] = Level::Knuckle;
            levels[m] = Level::Middle;
            levels[d] = Level::Distal;
            levels[t] = Level::Tip;
        }
        Self {
            names: HUMAN_JOINT_LABELS.iter().map(|s| s.to_string()).collect(),
            parents,
            levels,
        }
    }

    pub fn robot() -> Self {
        let mut parents = vec![None; NUM_ROBOT_JOINTS];
        let mut levels = vec![Level::Arm; NUM_ROBOT_JOINTS];
        for i in 1..8 {
            parents[i] = Some(i - 1);
        }
        levels[6] = Level::Wrist;
        levels[7] = Level::Wrist;
        let chains: [&[(usize, Level)]; 5] = [
            &[
                (8, Level::Knuckle),
                (9, Level::Knuckle),
                (10, Level::Knuckle),
                (11, Level::Middle),
                (12, Level::Distal),
            ],
            &[
                (13, Level::Knuckle),
                (14, Level::Knuckle),
                (15, Level::Middle),
                (16, Level::Distal),
            ],
            &[
                (17, Level::Knuckle),
                (18, Level::Knuckle),
                (19, Level::Middle),
                (20, Level::Distal),
            ],
            &[
                (21, Level::Knuckle),
                (22, Level::Knuckle),
                (23, Level::Middle),
                (24, Level::Distal),
            ],
            &[
                (25, Level::Knuckle),
                (26, Level::Knuckle),
                (27, Level::Knuckle),
                (28, Level::Middle),
                (29, Level::Distal),
            ],
        ];
        for chain in chains {
            let mut parent = 7;
            for &(j, level) in chain {
                parents[j] = Some(parent);
                levels[j] = level;
                parent = j;
            }
        }
        Self {
            names: ROBOT_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents,
            levels,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> Option<usize> {
        self.parents.iter().position(|p| p.is_none())
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.parents[j] == Some(joint))
            .collect()
    }

    /// Checks for a single root and no cycles.
    pub fn validate(&self) -> Result<(), HandModelError> {
        let n = self.len();
        if self.parents.len() != n || self.levels.len() != n {
            return Err(HandModelError::BadHierarchy("table length mismatch".into()));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(HandModelError::BadHierarchy(format!("{roots} roots")));
        }
        for j in 0..n {
            let mut cur = j;
            let mut hops = 0;
            while let Some(p) = self.parents[cur] {
                if p >= n {
                    return Err(HandModelError::BadHierarchy(format!(
                        "joint {} has out-of-range parent",
                        self.names[cur]
                    )));
                }
                cur = p;
                hops += 1;
                if hops > n {
                    return Err(HandModelError::BadHierarchy(format!(
                        "cycle through {}",
                        self.names[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Depth-first preorder from the root, children in index order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack: Vec<usize> = self.root().into_iter().collect();
        while let Some(j) = stack.pop() {
            out.push(j);
            let mut kids = self.children(j);
            kids.reverse();
            stack.extend(kids);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for JointLimits {
    fn default() -> Self {
        let mut lower = vec![-FRAC_PI_2; NUM_ROBOT_JOINTS];
        let mut upper = vec![FRAC_PI_2; NUM_ROBOT_JOINTS];
        for i in 0..3 {
            lower[i] = -0.5;
            upper[i] = 0.5;
        }
        for i in 3..6 {
            lower[i] = -PI;
            upper[i] = PI;
        }
        Self { lower, upper }
    }
}

impl JointLimits {
    pub fn clamp(&self, v: &RobotJointVector) -> RobotJointVector {
        let mut out = *v;
        for i in 0..NUM_ROBOT_JOINTS {
            out.0[i] = v.0[i].clamp(self.lower[i], self.upper[i]);
        }
        out
    }

    pub fn contains(&self, v: &RobotJointVector) -> bool {
        (0..NUM_ROBOT_JOINTS).all(|i| v.0[i] >= self.lower[i] && v.0[i] <= self.upper[i])
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.lower[i] + self.upper[i])
    }

    pub fn half_range(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] - self.lower[i])
    }

    pub fn set(&mut self, joint: usize, lo: f64, hi: f64) {
        self.lower[joint] = lo;
        self.upper[joint] = hi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Segment {
    Palm,
    Finger { finger: Finger, phalanx: Phalanx },
}

/// A touch sensor: offset in the local frame of its segment. Finger segment
/// frames have their origin at the segment's proximal joint and Z along the bone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSite {
    pub name: String,
    pub segment: Segment,
    pub offset: [f64; 3],
}

/// Link lengths and attachment points of the robot hand, hand frame in meters.
///
/// Hand frame: origin at the wrist, +Z toward the fingers, +Y out of the back
/// of the hand, +X toward the thumb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandGeometry {
    /// Knuckle position per finger (thumb entry is the thumb base).
    pub knuckles: [[f64; 3]; 5],
    /// Proximal, middle, distal phalanx length per finger.
    pub phalanges: [[f64; 3]; 5],
    /// Pivot of the little-finger metacarpal joint.
    pub little_metacarpal_pivot: [f64; 3],
    /// Palmar offset of finger sensor sites from the bone axis.
    pub pad_offset: f64,
}

impl Default for HandGeometry {
    fn default() -> Self {
        Self {
            knuckles: [
                [0.045, -0.009, 0.029],
                [0.022, 0.0, 0.095],
                [0.0, 0.0, 0.099],
                [-0.022, 0.0, 0.095],
                [-0.044, 0.0, 0.086],
            ],
            phalanges: [
                [0.038, 0.032, 0.027],
                [0.045, 0.025, 0.026],
                [0.045, 0.025, 0.026],
                [0.045, 0.025, 0.026],
                [0.045, 0.025, 0.026],
            ],
            little_metacarpal_pivot: [-0.03, 0.0, 0.025],
            pad_offset: 0.006,
        }
    }
}

impl HandGeometry {
    pub fn knuckle(&self, f: Finger) -> Vec3 {
        Vec3::from(self.knuckles[f.index()])
    }

    pub fn palm_center(&self) -> Vec3 {
        Vec3::new(0.0, -0.012, 0.05)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TouchSensorLayout {
    pub sites: Vec<SensorSite>,
}

impl TouchSensorLayout {
    /// Palm center, four palm quadrants, the thumb base, and one site per
    /// phalanx of every finger.
    pub fn standard(geometry: &HandGeometry) -> Self {
        let mut sites = Vec::with_capacity(NUM_TOUCH_SENSORS);
        let c = geometry.palm_center();
        sites.push(SensorSite {
            name: "palm_center".into(),
            segment: Segment::Palm,
            offset: [c.x, c.y, c.z],
        });
        for (name, dx, dz) in [
            ("palm_radial_proximal", 0.02, -0.02),
            ("palm_ulnar_proximal", -0.02, -0.02),
            ("palm_radial_distal", 0.02, 0.02),
            ("palm_ulnar_distal", -0.02, 0.02),
        ] {
            sites.push(SensorSite {
                name: name.into(),
                segment: Segment::Palm,
                offset: [c.x + dx, c.y, c.z + dz],
            });
        }
        sites.push(SensorSite {
            name: "thumb_base".into(),
            segment: Segment::Palm,
            offset: [0.026, -0.014, 0.022],
        });
        for f in Finger::ALL {
            for (pi, ph) in Phalanx::ALL.iter().enumerate() {
                let len = geometry.phalanges[f.index()][pi];
                let frac = if *ph == Phalanx::Distal { 0.75 } else { 0.5 };
                sites.push(SensorSite {
                    name: format!("{}_{}", finger_name(f), phalanx_name(*ph)),
                    segment: Segment::Finger {
                        finger: f,
                        phalanx: *ph,
                    },
                    offset: [0.0, -geometry.pad_offset, frac * len],
                });
            }
        }
        Self { sites }
    }

    pub fn validate(&self) -> Result<(), HandModelError> {
        if self.sites.len() != NUM_TOUCH_SENSORS {
            return Err(HandModelError::BadHierarchy(format!(
                "touch layout has {} sites, expected {NUM_TOUCH_SENSORS}",
                self.sites.len()
            )));
        }
        Ok(())
    }

    /// Sensor sites doubling as the hand points for hand-affordance distances:
    /// the five palm sites and the five distal pads.
    pub fn hand_point_sites() -> [usize; NUM_HAND_POINTS] {
        [0, 1, 2, 3, 4, 8, 11, 14, 17, 20]
    }
}

pub fn finger_name(f: Finger) -> &'static str {
    match f {
        Finger::Thumb => "thumb",
        Finger::Index => "index",
        Finger::Middle => "middle",
        Finger::Ring => "ring",
        Finger::Little => "little",
    }
}

fn phalanx_name(p: Phalanx) -> &'static str {
    match p {
        Phalanx::Proximal => "proximal",
        Phalanx::Middle => "middle",
        Phalanx::Distal => "distal",
    }
}

/// Everything kinematic about the two hands, with compiled-in defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    pub human: JointHierarchy,
    pub robot: JointHierarchy,
    pub limits: JointLimits,
    pub geometry: HandGeometry,
    pub touch: TouchSensorLayout,
}

impl Default for HandModel {
    fn default() -> Self {
        let geometry = HandGeometry::default();
        Self {
            human: JointHierarchy::human(),
            robot: JointHierarchy::robot(),
            limits: JointLimits::default(),
            touch: TouchSensorLayout::standard(&geometry),
            geometry,
        }
    }
}

impl HandModel {
    pub fn clamp_to_limits(&self, v: &RobotJointVector) -> RobotJointVector {
        self.limits.clamp(v)
    }

    /// Applies a key=value override file on top of the defaults.
    ///
    /// ```text
    /// # comments and blank lines are ignored
    /// limit.FFJ2 = -0.1, 1.6      # lower, upper
    /// parent.LFJ3 = LFJ4          # robot hierarchy edge
    /// level.THJ2 = middle         # robot weighting level
    /// ```
    pub fn from_config_str(text: &str) -> Result<Self, HandModelError> {
        let mut model = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| HandModelError::Config { line, msg };
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let (kind, joint) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| err(format!("malformed key `{}`", key.trim())))?;
            let j = robot_joint_index(joint.trim())
                .ok_or_else(|| err(format!("unknown robot joint `{}`", joint.trim())))?;
            let value = value.trim();
            match kind {
                "limit" => {
                    let nums: Vec<f64> = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| err(format!("bad limit: {e}")))?;
                    if nums.len() != 2 || !(nums[0] <= nums[1]) {
                        return Err(err("limit needs `lower, upper` with lower <= upper".into()));
                    }
                    model.limits.set(j, nums[0], nums[1]);
                }
                "parent" => {
                    let p = robot_joint_index(value)
                        .ok_or_else(|| err(format!("unknown parent `{value}`")))?;
                    model.robot.parents[j] = Some(p);
                }
                "level" => {
                    model.robot.levels[j] = value.parse().map_err(err)?;
                }
                other => return Err(err(format!("unknown key kind `{other}`"))),
            }
        }
        model.robot.validate()?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_config_str(&text)?)
    }

    /// Limits close to the physical Adroit ranges; fingers flex one way only.
    pub fn with_adroit_like_limits(mut self) -> Self {
        let table: HashMap<&str, (f64, f64)> = [
            ("ARTx", (-0.15, 0.15)),
            ("ARTy", (-0.15, 0.15)),
            ("ARTz", (-0.15, 0.15)),
            ("ARRx", (-0.9, 0.9)),
            ("ARRy", (-0.5, 0.5)),
            ("ARRz", (-FRAC_PI_2, FRAC_PI_2)),
            ("WRJ1", (-0.524, 0.175)),
            ("WRJ0", (-0.785, 0.611)),
            ("THJ4", (-1.047, 1.047)),
            ("THJ3", (0.0, 1.309)),
            ("THJ2", (-0.262, 0.262)),
            ("THJ1", (-0.524, 0.524)),
            ("THJ0", (0.0, 1.571)),
            ("LFJ4", (0.0, 0.698)),
        ]
        .into_iter()
        .collect();
        for (i, name) in ROBOT_JOINT_NAMES.iter().enumerate() {
            if let Some(&(lo, hi)) = table.get(name) {
                self.limits.set(i, lo, hi);
            } else if name.ends_with("J3") {
                self.limits.set(i, -0.436, 0.436);
            } else if i >= 8 {
                self.limits.set(i, 0.0, FRAC_PI_2);
            }
        }
        self
    }
}

impl fmt::Display for RobotJointVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in ROBOT_JOINT_NAMES.iter().zip(self.0.iter()).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{n}={v:.4}")?;
        }
        Ok(())
    }
}
