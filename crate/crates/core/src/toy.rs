//! Toy data: synthetic human hands, a small object suite, scripted grasps
//! and synthetic pose-record files.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::geometry::{box_mesh, cylinder_mesh, rot_z};
use crate::handmodel::{HandModel, RobotJointVector, Vec3, HUMAN_JOINT_LABELS};
use crate::ingest::{
    parse_pose_records, write_obj, write_pose_records, AffordanceSpec, AssetDescriptor,
    LabeledPoints, ObjectAsset, RawFrame, RawPoseRecordFile, DEFAULT_CONFIDENCE_THRESHOLD,
};
use crate::poseprior::{consensus_pose, retarget_records, ConsensusLibrary, PoseSet, DEFAULT_K};
use crate::simenv::{EnvState, EpisodeLog, GraspEnv, SimError};

pub mod synth {
    use crate::geometry::{rot_x, rot_y, rotvec_to_matrix};
    use crate::handmodel::{Finger, HandGeometry, HumanHandKeypoints, Vec3};
    use crate::retarget::spherical;

    /// Joint angles of a synthetic human hand, in the retargeting convention.
    #[derive(Clone, Debug, PartialEq)]
    pub struct HumanPoseAngles {
        /// Knuckle, middle and distal flexion per finger.
        pub flex: [[f64; 3]; 5],
        /// Knuckle abduction per finger.
        pub abd: [f64; 5],
        /// Abduction at the middle joint; only the thumb has one.
        pub mid_abd: [f64; 5],
        /// Rotation vector of the palm frame.
        pub palm_rotation: [f64; 3],
        pub wrist_position: [f64; 3],
        pub scale: f64,
    }

    impl Default for HumanPoseAngles {
        fn default() -> Self {
            Self {
                flex: [[0.0; 3]; 5],
                abd: [0.0; 5],
                mid_abd: [0.0; 5],
                palm_rotation: [0.0; 3],
                wrist_position: [0.0; 3],
                scale: 1.0,
            }
        }
    }

    /// Hand-frame keypoints: wrist, three joints per finger, then the tips.
    pub fn local_keypoints(a: &HumanPoseAngles, g: &HandGeometry) -> Vec<Vec3> {
        let mut pts = vec![Vec3::zeros(); 21];
        for f in Finger::ALL {
            let fi = f.index();
            let k = g.knuckle(f);
            let (a0, e0) = spherical(&k);
            let len = g.phalanges[fi];
            let r1 = rot_x(e0) * rot_y(a0) * rot_x(a.flex[fi][0]) * rot_y(a.abd[fi]);
            let m = k + r1.column(2) * len[0];
            let r2 = r1 * rot_x(a.flex[fi][1]) * rot_y(a.mid_abd[fi]);
            let d = m + r2.column(2) * len[1];
            let r3 = r2 * rot_x(a.flex[fi][2]);
            let tip = d + r3.column(2) * len[2];
            let [kj, mj, dj, tj] = f.human_chain();
            pts[kj] = k;
            pts[mj] = m;
            pts[dj] = d;
            pts[tj] = tip;
        }
        pts
    }

    pub fn human_keypoints_from_angles(
        a: &HumanPoseAngles,
        g: &HandGeometry,
    ) -> HumanHandKeypoints {
        let r = rotvec_to_matrix(a.palm_rotation);
        let w = Vec3::from(a.wrist_position);
        let pts = local_keypoints(a, g)
            .into_iter()
            .map(|p| w + r * (p * a.scale))
            .collect::<Vec<_>>();
        HumanHandKeypoints::from_points(&pts).expect("21 finite points")
    }
}

use synth::HumanPoseAngles;

/// Standard toy cube side, meters.
pub const CUBE_SIDE: f64 = 0.032;
pub const CYLINDER_RADIUS: f64 = 0.017;
pub const CYLINDER_HEIGHT: f64 = 0.10;
pub const BAR_SIDE: f64 = 0.026;
pub const BAR_HEIGHT: f64 = 0.12;
pub const DEFAULT_TOY_MASS: f64 = 1.0;
pub const TOY_AFFORDANCE_POINTS: usize = 20;

/// Points on the side faces of an origin-centered square prism, in a band of
/// heights around `z_mid`.
fn prism_band(half: f64, z_mid: f64, band: f64, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let side = i % 4;
            let t = ((i / 4) as f64 + 0.5) / ((n + 3) / 4) as f64;
            let s = -half + 2.0 * half * t;
            let z = z_mid + band * if i % 2 == 0 { 0.5 } else { -0.5 };
            match side {
                0 => Vec3::new(half, s, z),
                1 => Vec3::new(-half, -s, z),
                2 => Vec3::new(-s, half, z),
                _ => Vec3::new(s, -half, z),
            }
        })
        .collect()
}

fn cylinder_band(r: f64, z_mid: f64, band: f64, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            let z = z_mid + band * if i % 2 == 0 { 0.5 } else { -0.5 };
            // points on the analytic circle sit just outside the faceted side
            Vec3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

pub fn cube_asset() -> ObjectAsset {
    let h = CUBE_SIDE / 2.0;
    let aff = prism_band(h, 0.0, 0.5 * h, TOY_AFFORDANCE_POINTS);
    ObjectAsset::new("cube", box_mesh([CUBE_SIDE; 3]), aff, DEFAULT_TOY_MASS, 1)
        .expect("valid toy cube")
}

pub fn cylinder_asset() -> ObjectAsset {
    let aff = cylinder_band(CYLINDER_RADIUS, -0.01, 0.02, TOY_AFFORDANCE_POINTS);
    ObjectAsset::new(
        "cylinder",
        cylinder_mesh(CYLINDER_RADIUS, CYLINDER_HEIGHT, 32),
        aff,
        DEFAULT_TOY_MASS,
        2,
    )
    .expect("valid toy cylinder")
}

pub fn bar_asset() -> ObjectAsset {
    let aff = prism_band(BAR_SIDE / 2.0, -0.02, 0.02, TOY_AFFORDANCE_POINTS);
    ObjectAsset::new(
        "bar",
        box_mesh([BAR_SIDE, BAR_SIDE, BAR_HEIGHT]),
        aff,
        DEFAULT_TOY_MASS,
        3,
    )
    .expect("valid toy bar")
}

pub const TOY_CLASSES: [&str; 3] = ["cube", "cylinder", "bar"];

pub fn toy_suite() -> Vec<ObjectAsset> {
    vec![cube_asset(), cylinder_asset(), bar_asset()]
}

pub fn toy_asset(class: &str) -> Option<ObjectAsset> {
    toy_suite().into_iter().find(|a| a.object_class == class)
}

/// Finger joint angles of a grasp, as robot joint values 8..30.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FingerPosture {
    pub thumb: [f64; 5],
    /// (J3 abduction, J2, J1, J0) for index, middle, ring.
    pub fingers: [[f64; 4]; 3],
    /// (J3 abduction, J2, J1, J0); the metacarpal follows the retargeting rule.
    pub little: [f64; 4],
}

impl FingerPosture {
    pub fn write_into(&self, q: &mut RobotJointVector) {
        q.0[8..13].copy_from_slice(&self.thumb);
        for (i, f) in self.fingers.iter().enumerate() {
            let b = 13 + 4 * i;
            q.0[b..b + 4].copy_from_slice(f);
        }
        q[25] = crate::retarget::LITTLE_METACARPAL_RATIO * self.little[1];
        q.0[26..30].copy_from_slice(&self.little);
    }

    pub fn robot_pose(&self) -> RobotJointVector {
        let mut q = RobotJointVector::zeros();
        self.write_into(&mut q);
        q
    }

    /// Finger joints of a robot pose; the little metacarpal is implied.
    pub fn from_robot_pose(q: &RobotJointVector) -> Self {
        let mut p = FingerPosture {
            thumb: [0.0; 5],
            fingers: [[0.0; 4]; 3],
            little: [0.0; 4],
        };
        p.thumb.copy_from_slice(&q.0[8..13]);
        for (i, f) in p.fingers.iter_mut().enumerate() {
            let b = 13 + 4 * i;
            f.copy_from_slice(&q.0[b..b + 4]);
        }
        p.little.copy_from_slice(&q.0[26..30]);
        p
    }

    /// Human angles that retarget onto this posture.
    pub fn human_angles(&self) -> HumanPoseAngles {
        let mut a = HumanPoseAngles::default();
        let [t4, t3, t2, t1, t0] = self.thumb;
        a.abd[0] = t4;
        a.flex[0] = [t3, t1, t0];
        a.mid_abd[0] = t2;
        for (i, f) in self.fingers.iter().enumerate() {
            a.abd[i + 1] = f[0];
            a.flex[i + 1] = [f[1], f[2], f[3]];
        }
        a.abd[4] = self.little[0];
        a.flex[4] = [self.little[1], self.little[2], self.little[3]];
        a
    }

    fn blend(&self, other: &FingerPosture, t: f64) -> FingerPosture {
        let l = |a: f64, b: f64| a + t * (b - a);
        let mut out = *self;
        for i in 0..5 {
            out.thumb[i] = l(self.thumb[i], other.thumb[i]);
        }
        for f in 0..3 {
            for j in 0..4 {
                out.fingers[f][j] = l(self.fingers[f][j], other.fingers[f][j]);
            }
        }
        for j in 0..4 {
            out.little[j] = l(self.little[j], other.little[j]);
        }
        out
    }
}

/// Wrap posture: fingers curl around the far side, thumb tucked against the
/// index finger.
pub fn wrap_posture() -> FingerPosture {
    FingerPosture {
        thumb: [-0.87, 0.35, 0.14, -0.3, 0.69],
        fingers: [[0.0, 1.05, 1.14, 1.0]; 3],
        little: [0.42, 1.05, 1.14, 1.0],
    }
}

/// Looser wrap with the fingers spread: a second human grasp style.
pub fn spread_posture() -> FingerPosture {
    FingerPosture {
        thumb: [-0.2, 1.1, 0.1, 0.4, 0.8],
        fingers: [
            [0.25, 1.2, 1.3, 1.0],
            [0.0, 1.25, 1.3, 1.0],
            [-0.2, 1.3, 1.3, 1.0],
        ],
        little: [0.35, 1.35, 1.3, 1.0],
    }
}

/// Open hand used while approaching.
pub fn open_posture() -> FingerPosture {
    FingerPosture {
        thumb: [-0.87, 0.3, 0.0, 0.0, 0.0],
        fingers: [[0.0; 4]; 3],
        little: [0.42, 0.0, 0.0, 0.0],
    }
}

/// A hand-authored approach, close and lift sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedGrasp {
    /// Wrist position relative to the object base center, in the object's
    /// yaw-aligned frame, at the grasp.
    pub wrist_offset: [f64; 3],
    pub open: FingerPosture,
    pub closed: FingerPosture,
    /// Steps at which the close and the lift begin.
    pub close_at: usize,
    pub lift_at: usize,
    /// Steps over which the close is ramped in.
    pub close_steps: usize,
    pub lift_height: f64,
    /// Arm rotation follows the object yaw modulo this period (0 disables).
    pub yaw_period: f64,
}

impl ScriptedGrasp {
    pub fn for_class(class: &str) -> Self {
        let period = if class == "cylinder" { 0.0 } else { FRAC_PI_2 };
        Self {
            wrist_offset: [-0.062, -0.026, 0.037],
            open: open_posture(),
            closed: wrap_posture(),
            close_at: 70,
            lift_at: 95,
            close_steps: 10,
            lift_height: 0.06,
            yaw_period: period,
        }
    }

    /// Arm rotation about world z matching the object's symmetric yaw. The
    /// grasp holds best with the hand turned about 0.3 rad behind the object.
    pub fn arm_yaw(&self, object_yaw: f64) -> f64 {
        if self.yaw_period <= 0.0 {
            return 0.0;
        }
        let lo = -0.7;
        (object_yaw - 0.3 - lo).rem_euclid(self.yaw_period) + lo
    }

    /// Joint target at a given step.
    pub fn target(&self, env: &GraspEnv, state: &EnvState, step: usize) -> RobotJointVector {
        let yaw = self.arm_yaw(state.initial_yaw);
        let obj = state.object.translation;
        let base = Vec3::from(env.config.base_position);
        let w = rot_z(yaw) * Vec3::from(self.wrist_offset);
        let mut q = RobotJointVector::zeros();
        let wrist = Vec3::new(obj.x + w.x, obj.y + w.y, env.config.table_height + w.z);
        let art = wrist - base;
        q[0] = art.x;
        q[1] = art.y;
        q[2] = art.z;
        if step >= self.lift_at {
            q[2] += self.lift_height;
        }
        q[3] = yaw;
        let posture = if step < self.close_at {
            self.open
        } else {
            let t = ((step - self.close_at + 1) as f64 / self.close_steps.max(1) as f64).min(1.0);
            self.open.blend(&self.closed, t)
        };
        posture.write_into(&mut q);
        // past the limits the servo keeps squeezing
        if step >= self.close_at + self.close_steps {
            for i in 8..30 {
                if self.closed.robot_pose()[i] > 0.5 {
                    q[i] += 0.3;
                }
            }
        }
        q
    }
}

/// Finger posture the scripted grasp settles into while holding a toy object,
/// with the fingers stopped by its surface. Synthetic human records of that
/// object are drawn around it.
pub fn hold_posture(class: &str) -> Option<FingerPosture> {
    let asset = toy_asset(class)?;
    let env = GraspEnv::new(
        &asset,
        HandModel::default().with_adroit_like_limits(),
        wrap_posture().robot_pose(),
        Default::default(),
        Default::default(),
    )
    .ok()?;
    let (_, last) = run_scripted(&env, &ScriptedGrasp::for_class(class), 0, "").ok()?;
    Some(FingerPosture::from_robot_pose(&last.pose))
}

/// Runs a scripted grasp for one full episode and logs it.
pub fn run_scripted(
    env: &GraspEnv,
    plan: &ScriptedGrasp,
    seed: u64,
    config_hash: &str,
) -> Result<(EpisodeLog, EnvState), SimError> {
    let (mut state, _) = env.reset(seed);
    let mut log = EpisodeLog::new(env, &state, config_hash);
    while state.step < env.config.episode_length {
        let a = plan.target(env, &state, state.step);
        let r = env.step(&state, &a)?;
        log.record(&a, &r);
        state = r.state;
    }
    Ok((log, state))
}

/// Consensus library for the toy suite built from synthetic records through
/// the full ingest, retarget and clustering pipeline.
pub fn toy_consensus_library(model: &HandModel, frames: usize, seed: u64) -> ConsensusLibrary {
    let mut lib = ConsensusLibrary::default();
    for (i, class) in TOY_CLASSES.iter().enumerate() {
        let raw = synthetic_pose_records(class, frames, seed.wrapping_add(i as u64));
        let text = serde_json::to_string(&raw).expect("records serialize");
        let records = parse_pose_records(&text, DEFAULT_CONFIDENCE_THRESHOLD, class)
            .expect("synthetic records are valid");
        let (poses, _) = retarget_records(&records, model);
        let set = PoseSet::new(*class, poses).expect("synthetic records retarget");
        let k = DEFAULT_K.min(set.len());
        let result = consensus_pose(&set, k, seed).expect("k fits the set");
        lib.insert(&set, &result, k, seed);
    }
    lib
}

/// Writes the toy suite as ordinary input files: an OBJ mesh, an asset
/// descriptor and a synthetic pose-record file per object, plus a run config
/// wiring them together. Returns the config path.
pub fn write_toy_suite(dir: &Path, frames: usize, seed: u64) -> crate::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut cfg = RunConfig {
        seeds: vec![seed],
        ..Default::default()
    };
    cfg.ppo.net.hidden = vec![64, 64];
    for (i, asset) in toy_suite().iter().enumerate() {
        let class = asset.object_class.as_str();
        std::fs::write(dir.join(format!("{class}.obj")), write_obj(&asset.mesh))?;
        let desc = AssetDescriptor {
            object_class: class.to_string(),
            mesh: PathBuf::from(format!("{class}.obj")),
            mass: asset.mass,
            scale: 1.0,
            upright: Default::default(),
            affordance: Some(AffordanceSpec {
                points: Some(asset.affordance.iter().map(|p| [p.x, p.y, p.z]).collect()),
                points_file: None,
                mask: None,
                depth: None,
                depth_scale: 0.001,
                intrinsics: None,
                camera_pose: Default::default(),
            }),
        };
        let text = toml::to_string(&desc).map_err(|e| crate::Error::Config(e.to_string()))?;
        std::fs::write(dir.join(format!("{class}.toml")), text)?;
        let records = synthetic_pose_records(class, frames, seed.wrapping_add(i as u64));
        write_pose_records(&records, &dir.join(format!("{class}_records.json")))?;
        cfg.paths.assets.push(format!("{class}.toml"));
        cfg.paths
            .pose_records
            .push(PathBuf::from(format!("{class}_records.json")));
    }
    cfg.paths.consensus = Some(PathBuf::from("consensus.json"));
    cfg.paths.checkpoint_dir = Some(PathBuf::from("checkpoints"));
    cfg.paths.log_dir = Some(PathBuf::from("logs"));
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml())?;
    Ok(path)
}

/// Synthetic human pose records for one object: a main grasp style, a second
/// style, and a few outliers, each with per-joint noise, a random rigid
/// transform and a random hand scale.
pub fn synthetic_pose_records(class: &str, n: usize, seed: u64) -> RawPoseRecordFile {
    let model = HandModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.05).expect("positive std");
    let styles = [
        hold_posture(class)
            .unwrap_or_else(wrap_posture)
            .human_angles(),
        spread_posture().human_angles(),
    ];
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut a = if u < 0.6 {
            styles[0].clone()
        } else if u < 0.9 {
            styles[1].clone()
        } else {
            // loosely open hand
            let mut o = open_posture().human_angles();
            for f in 0..5 {
                o.flex[f][0] = rng.random_range(0.0..0.6);
            }
            o
        };
        for f in 0..5 {
            for j in 0..3 {
                a.flex[f][j] += jitter.sample(&mut rng);
            }
            a.abd[f] += 0.5 * jitter.sample(&mut rng);
        }
        a.mid_abd[0] += 0.5 * jitter.sample(&mut rng);
        // keep abduction well inside the hemisphere the retargeting reads
        for f in 0..5 {
            a.abd[f] = a.abd[f].clamp(-1.2, 1.2);
        }
        let axis = Vec3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let angle = rng.random_range(0.0..PI);
        let rv = if axis.norm() > 1e-9 {
            axis.normalize() * angle
        } else {
            Vec3::zeros()
        };
        a.palm_rotation = [rv.x, rv.y, rv.z];
        a.wrist_position = [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(0.3..0.8),
        ];
        a.scale = rng.random_range(0.9..1.1);
        let k = synth::human_keypoints_from_angles(&a, &model.geometry);
        let labeled = k
            .points()
            .iter()
            .enumerate()
            .map(|(j, p)| (HUMAN_JOINT_LABELS[j].to_string(), [p.x, p.y, p.z]))
            .collect();
        frames.push(RawFrame {
            source_id: format!("{class}-{i:04}"),
            confidence: rng.random_range(0.6..1.0),
            keypoints: LabeledPoints(labeled),
        });
    }
    RawPoseRecordFile {
        object_class: class.to_string(),
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retarget::retarget;

    #[test]
    fn written_suite_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy_suite(dir.path(), 12, 4).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        cfg.check_inputs().unwrap();
        let assets = cfg.load_assets().unwrap();
        assert_eq!(assets.len(), 3);
        for (a, b) in assets.iter().zip(toy_suite()) {
            assert_eq!(a.object_class, b.object_class);
            assert_eq!(a.affordance, b.affordance);
            assert_eq!(a.mesh.faces, b.mesh.faces);
        }
    }

    #[test]
    fn toy_assets_validate() {
        for a in toy_suite() {
            a.validate().unwrap();
            assert_eq!(a.affordance.len(), TOY_AFFORDANCE_POINTS);
            assert!(!a.flagged);
        }
    }

    #[test]
    fn posture_round_trips_through_retargeting() {
        let m = HandModel::default();
        for p in [wrap_posture(), spread_posture(), open_posture()] {
            let k = synth::human_keypoints_from_angles(&p.human_angles(), &m.geometry);
            let q = retarget(&k, &m).unwrap();
            let expect = p.robot_pose();
            for i in 8..30 {
                assert!(
                    (q[i] - expect[i]).abs() < 1e-9,
                    "joint {i}: {} vs {}",
                    q[i],
                    expect[i]
                );
            }
        }
    }

    #[test]
    fn synthetic_records_are_deterministic() {
        let a = synthetic_pose_records("cube", 10, 4);
        let b = synthetic_pose_records("cube", 10, 4);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.frames.len(), 10);
    }
}
