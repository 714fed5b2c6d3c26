//! Per-class consensus grasp poses via k-medoid clustering.
//!
//! Poses are compared in retargeted robot-joint space over the 24 hand
//! revolutes (arm DoF excluded), using wrapped absolute angle differences.
//! Clustering is PAM: k-medoids++ seeding followed by best-improvement
//! single swaps, restarted a few times from the seeded RNG and from the
//! classic greedy BUILD initialization. The consensus pose is the medoid of
//! the largest cluster; ties go to the cluster with lower within-cluster cost,
//! then to the lower medoid index.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handmodel::{
    angle_error, HandModel, HumanHandKeypoints, RobotJointVector, NUM_ARM_JOINTS, NUM_ROBOT_JOINTS,
};
use crate::ingest::{DroppedFrame, PoseRecordFile};
use crate::retarget::retarget;

pub const CONSENSUS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 3;
const DEFAULT_RESTARTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of poses ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("pose set is empty")]
    EmptySet,
    #[error("pose {0} belongs to a different object class")]
    MixedClass(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub source_id: String,
    pub keypoints: HumanHandKeypoints,
    pub robot: RobotJointVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub object_class: String,
    pub poses: Vec<PoseEntry>,
}

impl PoseSet {
    pub fn new(
        object_class: impl Into<String>,
        poses: Vec<PoseEntry>,
    ) -> Result<Self, ClusterError> {
        if poses.is_empty() {
            return Err(ClusterError::EmptySet);
        }
        Ok(Self {
            object_class: object_class.into(),
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn robot_poses(&self) -> Vec<RobotJointVector> {
        self.poses.iter().map(|p| p.robot).collect()
    }
}

/// Retargets every accepted frame of a record file; frames the retargeting
/// rejects are returned with the reason.
pub fn retarget_records(
    records: &PoseRecordFile,
    model: &HandModel,
) -> (Vec<PoseEntry>, Vec<DroppedFrame>) {
    let mut poses = Vec::with_capacity(records.frames.len());
    let mut dropped = Vec::new();
    for f in &records.frames {
        match retarget(&f.keypoints, model) {
            Ok(robot) => poses.push(PoseEntry {
                source_id: f.source_id.clone(),
                keypoints: f.keypoints.clone(),
                robot,
            }),
            Err(e) => dropped.push(DroppedFrame {
                source_id: f.source_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (poses, dropped)
}

/// Retargeted poses of one object class as written by the `retarget` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetedFile {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub object_class: String,
    pub poses: Vec<PoseEntry>,
    pub dropped: Vec<DroppedFrame>,
}

impl RetargetedFile {
    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn pose_set(&self) -> Result<PoseSet, ClusterError> {
        PoseSet::new(self.object_class.clone(), self.poses.clone())
    }
}

/// Mean wrapped absolute difference over the 24 hand revolutes.
pub fn pose_distance(a: &RobotJointVector, b: &RobotJointVector) -> f64 {
    let n = NUM_ROBOT_JOINTS - NUM_ARM_JOINTS;
    let sum: f64 = (NUM_ARM_JOINTS..NUM_ROBOT_JOINTS)
        .map(|i| angle_error(a[i], b[i]))
        .sum();
    sum / n as f64
}

pub fn distance_matrix(poses: &[RobotJointVector]) -> Vec<Vec<f64>> {
    let n = poses.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = pose_distance(&poses[i], &poses[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id per pose.
    pub assignments: Vec<usize>,
    /// Medoid pose index per cluster, ascending.
    pub medoids: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Sum of member-to-medoid distances per cluster.
    pub costs: Vec<f64>,
    pub total_cost: f64,
    pub consensus_cluster: usize,
    pub consensus_index: usize,
    pub consensus_robot_pose: RobotJointVector,
}

/// Assigns each point to its nearest medoid (ties to the earlier medoid).
fn assign(d: &[Vec<f64>], medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assignments = (0..d.len())
        .map(|i| {
            let mut best = 0;
            for (c, &m) in medoids.iter().enumerate() {
                if d[i][m] < d[i][medoids[best]] {
                    best = c;
                }
            }
            total += d[i][medoids[best]];
            best
        })
        .collect();
    (assignments, total)
}

fn cost_of(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..d.len())
        .map(|i| {
            medoids
                .iter()
                .map(|&m| d[i][m])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// k-medoids++ style seeding: first medoid uniform, then D²-weighted.
fn seed_plus_plus(d: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = d.len();
    let mut medoids = vec![rng.random_range(0..n)];
    while medoids.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                let m = medoids
                    .iter()
                    .map(|&m| d[i][m])
                    .fold(f64::INFINITY, f64::min);
                m * m
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total <= 0.0 {
            (0..n).find(|i| !medoids.contains(i)).expect("k <= n")
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            if medoids.contains(&pick) {
                (0..n)
                    .rev()
                    .find(|i| weights[*i] > 0.0 && !medoids.contains(i))
                    .expect("k <= n")
            } else {
                pick
            }
        };
        medoids.push(next);
    }
    medoids
}

/// Greedy BUILD initialization.
fn seed_build(d: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = d.len();
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best = (f64::INFINITY, 0);
        for c in (0..n).filter(|c| !medoids.contains(c)) {
            let mut trial = medoids.clone();
            trial.push(c);
            let cost = cost_of(d, &trial);
            if cost < best.0 {
                best = (cost, c);
            }
        }
        medoids.push(best.1);
    }
    medoids
}

/// Best-improvement swap descent. Returns the medoids and the cost trace.
fn pam_swap(d: &[Vec<f64>], mut medoids: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
    let n = d.len();
    let mut cost = cost_of(d, &medoids);
    let mut trace = vec![cost];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..medoids.len() {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let old = medoids[slot];
                medoids[slot] = cand;
                let c = cost_of(d, &medoids);
                medoids[slot] = old;
                if c < cost - 1e-12 && best.map_or(true, |(b, _, _)| c < b) {
                    best = Some((c, slot, cand));
                }
            }
        }
        match best {
            Some((c, slot, cand)) => {
                medoids[slot] = cand;
                cost = c;
                trace.push(cost);
            }
            None => break,
        }
    }
    medoids.sort_unstable();
    (medoids, trace)
}

#[derive(Clone, Copy, Debug)]
pub struct ClusterOptions {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl ClusterOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

/// PAM on a precomputed dissimilarity matrix. Returns (medoids ascending, cost).
pub fn pam(d: &[Vec<f64>], opts: ClusterOptions) -> Result<(Vec<usize>, f64), ClusterError> {
    let n = d.len();
    if n == 0 {
        return Err(ClusterError::EmptySet);
    }
    if opts.k == 0 {
        return Err(ClusterError::KZero);
    }
    if opts.k > n {
        return Err(ClusterError::KTooLarge { k: opts.k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut starts = vec![seed_build(d, opts.k)];
    for _ in 0..opts.restarts.max(1) {
        starts.push(seed_plus_plus(d, opts.k, &mut rng));
    }
    for init in starts {
        let (meds, trace) = pam_swap(d, init);
        let cost = *trace.last().expect("trace is never empty");
        let better = match &best {
            None => true,
            Some((bm, bc)) => cost < bc - 1e-12 || (cost <= bc + 1e-12 && meds < *bm),
        };
        if better {
            best = Some((meds, cost));
        }
    }
    Ok(best.expect("at least one start"))
}

fn summarize(d: &[Vec<f64>], poses: &[RobotJointVector], medoids: Vec<usize>) -> ClusterResult {
    let (assignments, total_cost) = assign(d, &medoids);
    let k = medoids.len();
    let mut sizes = vec![0usize; k];
    let mut costs = vec![0.0; k];
    for (i, &c) in assignments.iter().enumerate() {
        sizes[c] += 1;
        costs[c] += d[i][medoids[c]];
    }
    let mut consensus = 0;
    for c in 1..k {
        let better = sizes[c] > sizes[consensus]
            || (sizes[c] == sizes[consensus] && costs[c] < costs[consensus])
            || (sizes[c] == sizes[consensus]
                && costs[c] == costs[consensus]
                && medoids[c] < medoids[consensus]);
        if better {
            consensus = c;
        }
    }
    ClusterResult {
        assignments,
        sizes,
        costs,
        total_cost,
        consensus_cluster: consensus,
        consensus_index: medoids[consensus],
        consensus_robot_pose: poses[medoids[consensus]],
        medoids,
    }
}

pub fn k_medoids(poses: &PoseSet, k: usize, seed: u64) -> Result<ClusterResult, ClusterError> {
    cluster_poses(&poses.robot_poses(), ClusterOptions::new(k, seed))
}

/// Consensus pose of a pose set: the medoid of its largest cluster.
pub fn consensus_pose(poses: &PoseSet, k: usize, seed: u64) -> Result<ClusterResult, ClusterError> {
    k_medoids(poses, k, seed)
}

pub fn cluster_poses(
    poses: &[RobotJointVector],
    opts: ClusterOptions,
) -> Result<ClusterResult, ClusterError> {
    let d = distance_matrix(poses);
    let (medoids, _) = pam(&d, opts)?;
    Ok(summarize(&d, poses, medoids))
}

/// Cost trace of a single seeded PAM run, for convergence checks.
pub fn pam_cost_trace(d: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<f64>, ClusterError> {
    if k == 0 {
        return Err(ClusterError::KZero);
    }
    if k > d.len() {
        return Err(ClusterError::KTooLarge { k, n: d.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = seed_plus_plus(d, k, &mut rng);
    Ok(pam_swap(d, init).1)
}

/// Mean silhouette of a clustering; 0 when every cluster is a singleton.
pub fn silhouette(d: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let n = d.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += d[i][j];
                counts[assignments[j]] += 1;
            }
        }
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

/// Picks k in 1..=5 by mean silhouette; falls back to 1 below `min_silhouette`.
pub fn select_k(poses: &[RobotJointVector], seed: u64, min_silhouette: f64) -> usize {
    let d = distance_matrix(poses);
    let mut best = (min_silhouette, 1);
    for k in 2..=5.min(poses.len().saturating_sub(1)) {
        if let Ok((meds, _)) = pam(&d, ClusterOptions::new(k, seed)) {
            let (assignments, _) = assign(&d, &meds);
            let s = silhouette(&d, &assignments, k);
            if s > best.0 {
                best = (s, k);
            }
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub pose: RobotJointVector,
    pub source_id: String,
    pub k: usize,
    pub seed: u64,
    pub consensus_index: usize,
    pub medoids: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub cluster_costs: Vec<f64>,
    pub total_cost: f64,
    pub assignments: Vec<usize>,
}

/// object_class -> consensus pose, persisted as versioned JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusLibrary {
    pub format_version: u32,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub entries: BTreeMap<String, ConsensusEntry>,
}

impl Default for ConsensusLibrary {
    fn default() -> Self {
        Self {
            format_version: CONSENSUS_FORMAT_VERSION,
            config_hash: String::new(),
            seeds: Vec::new(),
            entries: BTreeMap::new(),
        }
    }
}

impl ConsensusLibrary {
    pub fn insert(&mut self, set: &PoseSet, result: &ClusterResult, k: usize, seed: u64) {
        self.entries.insert(
            set.object_class.clone(),
            ConsensusEntry {
                pose: result.consensus_robot_pose,
                source_id: set.poses[result.consensus_index].source_id.clone(),
                k,
                seed,
                consensus_index: result.consensus_index,
                medoids: result.medoids.clone(),
                cluster_sizes: result.sizes.clone(),
                cluster_costs: result.costs.clone(),
                total_cost: result.total_cost,
                assignments: result.assignments.clone(),
            },
        );
    }

    pub fn target(&self, object_class: &str) -> Option<&RobotJointVector> {
        self.entries.get(object_class).map(|e| &e.pose)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let lib: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if lib.format_version != CONSENSUS_FORMAT_VERSION {
            return Err(crate::Error::Config(format!(
                "consensus library version {} unsupported (expected {CONSENSUS_FORMAT_VERSION})",
                lib.format_version
            )));
        }
        Ok(lib)
    }
}
