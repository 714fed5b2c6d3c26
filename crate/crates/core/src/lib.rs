//! Grasp pose priors from human hand keypoints.
//!
//! The pipeline: ingest hand keypoints detected in video frames, retarget
//! them onto a 30-DoF robot hand, cluster the retargeted poses per object
//! class into a consensus grasp pose, then train and evaluate a PPO grasping
//! policy in a quasi-static tabletop simulator whose reward favors that pose.

pub mod agent;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod handmodel;
pub mod ingest;
pub mod noise;
pub mod poseprior;
pub mod retarget;
pub mod rewards;
pub mod simenv;
pub mod toy;

use thiserror::Error;

pub use handmodel::{HandModel, HumanHandKeypoints, RobotJointVector, Vec3};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    HandModel(#[from] handmodel::HandModelError),
    #[error(transparent)]
    Retarget(#[from] retarget::RetargetError),
    #[error(transparent)]
    Cluster(#[from] poseprior::ClusterError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Reward(#[from] rewards::RewardError),
    #[error(transparent)]
    Sim(#[from] simenv::SimError),
    #[error(transparent)]
    Agent(#[from] agent::AgentError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
