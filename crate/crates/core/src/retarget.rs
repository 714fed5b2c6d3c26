//! Human keypoints to robot joint angles.
//!
//! Four stages: translate to the wrist, read the arm orientation off the
//! palmar plane (wrist, index knuckle, ring knuckle), walk the tree building a
//! frame at every joint, then read azimuth/elevation of each child in its
//! parent's frame and map them onto the robot revolutes.
//!
//! Frame convention: the frame at a joint has its origin at the joint, Z along
//! the incoming bone, Y toward the back of the hand. A child at local position
//! `(x, y, z)` has elevation `atan2(-y, z)` (flexion, toward the palm is
//! positive) and azimuth `atan2(x, hypot(y, z))` (abduction toward the thumb).
//! The child's own frame is `R_parent * Rx(elevation) * Ry(azimuth)`, which
//! puts its Z on the bone and keeps the roll about the bone fixed by the
//! parent (roll is not observable from points).

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{matrix_to_rotvec, rot_x, rot_y};
use crate::handmodel::{
    Finger, HandModel, HumanHandKeypoints, JointHierarchy, Level, RobotJointVector, Vec3,
    NUM_HUMAN_JOINTS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetargetError {
    #[error("wrist, index knuckle and ring knuckle are collinear")]
    CollinearPalm,
    #[error("bone ending at joint {0} is shorter than 1e-6 m")]
    DegenerateBone(usize),
}

/// Relative tolerance on the palm-plane cross product.
const COLLINEAR_TOL: f64 = 1e-8;
const MIN_BONE: f64 = 1e-6;

/// Little-finger metacarpal gets this fraction of the little knuckle flexion.
pub const LITTLE_METACARPAL_RATIO: f64 = 0.25;

/// Where a robot revolute reads its value from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AngleSource {
    /// No human counterpart.
    Zero,
    /// Azimuth of the child of this human joint, in this joint's frame.
    Azimuth(usize),
    /// Elevation of the child of this human joint, in this joint's frame.
    Elevation(usize),
    /// Scaled elevation.
    ScaledElevation(usize, f64),
}

/// Human-to-robot table for robot joints 6..30.
///
/// Reconstructed from the two hierarchies: only the index-middle example and the
/// little-metacarpal rule are pinned down externally; the rest follows the same
/// pattern (abduction from azimuth, flexion from elevation at the same joint).
pub const JOINT_MAP: [(usize, AngleSource); 24] = [
    (6, AngleSource::Zero),
    (7, AngleSource::Zero),
    (8, AngleSource::Azimuth(1)),
    (9, AngleSource::Elevation(1)),
    (10, AngleSource::Azimuth(2)),
    (11, AngleSource::Elevation(2)),
    (12, AngleSource::Elevation(3)),
    (13, AngleSource::Azimuth(4)),
    (14, AngleSource::Elevation(4)),
    (15, AngleSource::Elevation(5)),
    (16, AngleSource::Elevation(6)),
    (17, AngleSource::Azimuth(7)),
    (18, AngleSource::Elevation(7)),
    (19, AngleSource::Elevation(8)),
    (20, AngleSource::Elevation(9)),
    (21, AngleSource::Azimuth(10)),
    (22, AngleSource::Elevation(10)),
    (23, AngleSource::Elevation(11)),
    (24, AngleSource::Elevation(12)),
    (
        25,
        AngleSource::ScaledElevation(13, LITTLE_METACARPAL_RATIO),
    ),
    (26, AngleSource::Azimuth(13)),
    (27, AngleSource::Elevation(13)),
    (28, AngleSource::Elevation(14)),
    (29, AngleSource::Elevation(15)),
];

/// Per-joint frames and parent-relative positions of a human hand.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentRelativeFrames {
    /// World (root-relative) orientation of each joint frame; columns are X, Y, Z.
    pub frames: Vec<Matrix3<f64>>,
    /// Position of each joint in its parent's frame; zero for the wrist.
    pub local: Vec<Vec3>,
    /// Root-relative positions the frames were built from.
    pub positions: Vec<Vec3>,
}

impl ParentRelativeFrames {
    /// (azimuth, elevation) of the single child of `joint`, in `joint`'s frame.
    pub fn child_angles(&self, hierarchy: &JointHierarchy, joint: usize) -> Option<(f64, f64)> {
        let child = hierarchy.children(joint).into_iter().next()?;
        Some(spherical(&self.local[child]))
    }

    /// Recomposes world positions from the local chain (for round-trip checks).
    pub fn recompose(&self, hierarchy: &JointHierarchy) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.local.len()];
        for j in hierarchy.preorder() {
            if let Some(p) = hierarchy.parents[j] {
                out[j] = out[p] + self.frames[p] * self.local[j];
            }
        }
        out
    }
}

/// (azimuth, elevation) of a point in a joint frame.
pub fn spherical(local: &Vec3) -> (f64, f64) {
    let elevation = (-local.y).atan2(local.z);
    let azimuth = local.x.atan2(local.y.hypot(local.z));
    (azimuth, elevation)
}

pub fn to_root_relative(k: &HumanHandKeypoints) -> Vec<Vec3> {
    let wrist = k.position(0);
    k.points().into_iter().map(|p| p - wrist).collect()
}

/// Orthonormal palm frame (columns X, Y, Z) from root-relative keypoints.
///
/// Y is the palm-plane normal pointing out of the back of a right hand, Z the
/// in-plane direction from the wrist to the midpoint of the index and ring
/// knuckles, X = Y × Z (toward the thumb).
pub fn palm_frame(rr: &[Vec3]) -> Result<Matrix3<f64>, RetargetError> {
    let wrist = rr[0];
    let index = rr[Finger::Index.human_chain()[0]] - wrist;
    let ring = rr[Finger::Ring.human_chain()[0]] - wrist;
    let normal = ring.cross(&index);
    let scale = index.norm() * ring.norm();
    if scale == 0.0 || normal.norm() <= COLLINEAR_TOL * scale {
        return Err(RetargetError::CollinearPalm);
    }
    let y = normal.normalize();
    let mid = 0.5 * (index + ring);
    let z = (mid - y * y.dot(&mid)).normalize();
    let x = y.cross(&z);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Arm orientation as a rotation vector taking the robot's canonical palm
/// frame (identity) onto the palmar-plane frame.
pub fn palmar_frame(rr: &[Vec3]) -> Result<[f64; 3], RetargetError> {
    Ok(matrix_to_rotvec(&palm_frame(rr)?))
}

pub fn parent_relative_frames(
    rr: &[Vec3],
    hierarchy: &JointHierarchy,
) -> Result<ParentRelativeFrames, RetargetError> {
    let root_frame = palm_frame(rr)?;
    let n = rr.len();
    let mut frames = vec![Matrix3::identity(); n];
    let mut local = vec![Vec3::zeros(); n];
    for j in hierarchy.preorder() {
        match hierarchy.parents[j] {
            None => frames[j] = root_frame,
            Some(p) => {
                let bone = rr[j] - rr[p];
                if bone.norm() < MIN_BONE {
                    return Err(RetargetError::DegenerateBone(j));
                }
                let l = frames[p].transpose() * bone;
                let (azimuth, elevation) = spherical(&l);
                local[j] = l;
                frames[j] = frames[p] * rot_x(elevation) * rot_y(azimuth);
            }
        }
    }
    Ok(ParentRelativeFrames {
        frames,
        local,
        positions: rr.to_vec(),
    })
}

/// The 24 hand revolutes (robot joints 6..30) from parent-relative frames.
pub fn extract_joint_angles(fr: &ParentRelativeFrames, hierarchy: &JointHierarchy) -> [f64; 24] {
    let angle = |j: usize| fr.child_angles(hierarchy, j).unwrap_or((0.0, 0.0));
    let mut out = [0.0; 24];
    for &(robot, source) in JOINT_MAP.iter() {
        out[robot - 6] = match source {
            AngleSource::Zero => 0.0,
            AngleSource::Azimuth(j) => angle(j).0,
            AngleSource::Elevation(j) => angle(j).1,
            AngleSource::ScaledElevation(j, s) => s * angle(j).1,
        };
    }
    out
}

/// Full pipeline. Arm translation stays 0 and the result is clamped to limits.
pub fn retarget(
    k: &HumanHandKeypoints,
    model: &HandModel,
) -> Result<RobotJointVector, RetargetError> {
    let rr = to_root_relative(k);
    let arm = palmar_frame(&rr)?;
    let frames = parent_relative_frames(&rr, &model.human)?;
    let hand = extract_joint_angles(&frames, &model.human);
    let mut v = RobotJointVector::zeros();
    v.0[3..6].copy_from_slice(&arm);
    v.0[6..30].copy_from_slice(&hand);
    Ok(model.clamp_to_limits(&v))
}

/// Checks every frame is a proper rotation to `tol`.
pub fn frames_orthonormal(fr: &ParentRelativeFrames, tol: f64) -> bool {
    fr.frames.iter().all(|m| {
        let e = m.transpose() * m - Matrix3::identity();
        e.iter().all(|v| v.abs() <= tol) && (m.determinant() - 1.0).abs() <= tol
    })
}

/// Human levels of joints that drive a bend (not the wrist or tips).
pub fn bending_joints(hierarchy: &JointHierarchy) -> Vec<usize> {
    (0..NUM_HUMAN_JOINTS)
        .filter(|&j| !matches!(hierarchy.levels[j], Level::Wrist | Level::Tip))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::synth::{human_keypoints_from_angles, HumanPoseAngles};
    use std::f64::consts::FRAC_PI_2;

    fn model() -> HandModel {
        HandModel::default()
    }

    fn flat() -> HumanHandKeypoints {
        human_keypoints_from_angles(&HumanPoseAngles::default(), &model().geometry)
    }

    #[test]
    fn root_relative_translation() {
        let k = flat();
        let shifted: Vec<Vec3> = k
            .points()
            .iter()
            .map(|p| p + Vec3::new(1.0, 2.0, 3.0))
            .collect();
        let ks = HumanHandKeypoints::from_points(&shifted).unwrap();
        let rr = to_root_relative(&ks);
        assert_eq!(rr[0], Vec3::zeros());
        for (a, b) in rr.iter().zip(to_root_relative(&k)) {
            assert!((a - b).norm() < 1e-12);
        }
        let again = HumanHandKeypoints::from_points(&rr).unwrap();
        assert_eq!(to_root_relative(&again), rr);
    }

    #[test]
    fn flat_hand_is_zero() {
        let v = retarget(&flat(), &model()).unwrap();
        for (i, x) in v.0.iter().enumerate() {
            assert!(x.abs() < 1e-12, "joint {i} = {x}");
        }
    }

    #[test]
    fn collinear_palm_is_rejected() {
        let mut pts = flat().points();
        pts[4] = Vec3::new(0.0, 0.0, 0.1);
        pts[10] = Vec3::new(0.0, 0.0, 0.05);
        assert_eq!(palmar_frame(&pts), Err(RetargetError::CollinearPalm));
        pts[4] = Vec3::zeros();
        pts[10] = Vec3::zeros();
        assert_eq!(palmar_frame(&pts), Err(RetargetError::CollinearPalm));
    }

    #[test]
    fn zero_length_bone() {
        let mut pts = flat().points();
        pts[6] = pts[5];
        let r = parent_relative_frames(&pts, &model().human);
        assert_eq!(r, Err(RetargetError::DegenerateBone(6)));
    }

    #[test]
    fn straight_finger_lies_on_parent_z() {
        let pts = flat().points();
        let fr = parent_relative_frames(&pts, &model().human).unwrap();
        for j in 1..NUM_HUMAN_JOINTS {
            if model().human.levels[j] == Level::Knuckle {
                continue;
            }
            let l = fr.local[j];
            assert!(
                l.x.abs() < 1e-12 && l.y.abs() < 1e-12 && l.z > 0.0,
                "joint {j}: {l:?}"
            );
        }
        assert!(frames_orthonormal(&fr, 1e-9));
    }

    #[test]
    fn ninety_degree_flexion() {
        let mut a = HumanPoseAngles::default();
        a.flex[Finger::Index.index()][1] = FRAC_PI_2;
        let k = human_keypoints_from_angles(&a, &model().geometry);
        let fr = parent_relative_frames(&to_root_relative(&k), &model().human).unwrap();
        let (az, el) = fr.child_angles(&model().human, 5).unwrap();
        assert!((el - FRAC_PI_2).abs() < 1e-12);
        assert!(az.abs() < 1e-12);
        let recomposed = fr.recompose(&model().human);
        for (a, b) in recomposed.iter().zip(&fr.positions) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn little_metacarpal_rule() {
        let mut a = HumanPoseAngles::default();
        a.flex[Finger::Little.index()][0] = 0.8;
        let k = human_keypoints_from_angles(&a, &model().geometry);
        let v = retarget(&k, &model()).unwrap();
        assert!((v[25] - 0.25 * v[27]).abs() < 1e-15);
        assert!((v[27] - 0.8).abs() < 1e-12);
    }
}
