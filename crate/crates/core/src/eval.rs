//! Evaluation metrics, multi-seed reports and the mass/scale sweep.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{action_to_target, image_tensor, mix_seed, AgentError, Policy, PolicyInput};
use crate::handmodel::{angle_error, RobotJointVector, NUM_ARM_JOINTS, NUM_ROBOT_JOINTS};
use crate::noise::{perturb_action, perturb_observation, NoiseConfig, NoiseState};
use crate::simenv::{Axis6, EnvState, EpisodeLog, GraspEnv, Observation, SimError};
use crate::toy::ScriptedGrasp;

/// Final steps over which the object must stay lifted.
pub const SUCCESS_TAIL: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("episode log has {got} steps, expected {expected}")]
    IncompleteLog { expected: usize, got: usize },
    #[error("metric is defined only for successful grasps")]
    NotSuccessful,
    #[error("no consensus pose for object class {0:?}")]
    MissingConsensus(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_object: usize,
    pub seeds: Vec<u64>,
    pub functionality_threshold: f64,
    pub posture_reference: f64,
    pub perturbation_force: f64,
    pub success_tail: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_object: 100,
            seeds: vec![0, 1, 2, 3],
            functionality_threshold: 0.05,
            posture_reference: FRAC_PI_2,
            perturbation_force: 1.0,
            success_tail: SUCCESS_TAIL,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.episodes_per_object == 0 || self.seeds.is_empty() {
            return Err(EvalError::InvalidConfig(
                "need at least one episode and one seed".into(),
            ));
        }
        if !(self.functionality_threshold > 0.0
            && self.posture_reference > 0.0
            && self.perturbation_force >= 0.0)
        {
            return Err(EvalError::InvalidConfig(
                "thresholds must be positive".into(),
            ));
        }
        if self.success_tail == 0 {
            return Err(EvalError::InvalidConfig(
                "success_tail must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// True iff the object is held off the table at every one of the final
/// `tail` steps of a complete episode.
pub fn grasp_success(
    log: &EpisodeLog,
    episode_length: usize,
    tail: usize,
) -> Result<bool, EvalError> {
    if log.steps.len() != episode_length || episode_length < tail {
        return Err(EvalError::IncompleteLog {
            expected: episode_length,
            got: log.steps.len(),
        });
    }
    Ok(log.steps[episode_length - tail..]
        .iter()
        .all(|s| s.state.lifted()))
}

/// Perturbation outcome along each of the six axes.
pub fn perturbation_results(env: &GraspEnv, state: &EnvState, force: f64) -> Vec<bool> {
    Axis6::ALL
        .iter()
        .map(|&ax| env.apply_perturbation(state, force, ax).unwrap_or(false))
        .collect()
}

/// True iff the final grasp survives the force along all six axes.
pub fn grasp_stability(
    env: &GraspEnv,
    final_state: &EnvState,
    success: bool,
    force: f64,
) -> Result<bool, EvalError> {
    if !success {
        return Err(EvalError::NotSuccessful);
    }
    Ok(perturbation_results(env, final_state, force)
        .iter()
        .all(|&h| h))
}

/// Mean distance from each hand point to its nearest affordance point.
pub fn mean_nearest_distance(hand: &[crate::Vec3], affordance: &[crate::Vec3]) -> f64 {
    let total: f64 = hand
        .iter()
        .map(|h| {
            affordance
                .iter()
                .map(|a| (h - a).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / hand.len() as f64
}

/// True iff the final hand points lie closer than `threshold` (strictly) to
/// the ground-truth affordance on average.
pub fn functionality(
    env: &GraspEnv,
    log: &EpisodeLog,
    success: bool,
    threshold: f64,
) -> Result<bool, EvalError> {
    if !success {
        return Err(EvalError::NotSuccessful);
    }
    let state = log.final_state();
    let hand = env.hand_points(&env.fk(&state.pose));
    Ok(mean_nearest_distance(&hand, &env.affordance_world(state)) < threshold)
}

/// 100·max(0, 1 − e/e_ref), e the mean wrapped absolute error over the 24 hand joints.
pub fn posture_score(
    final_pose: &RobotJointVector,
    target: &RobotJointVector,
    reference: f64,
) -> f64 {
    let n = (NUM_ROBOT_JOINTS - NUM_ARM_JOINTS) as f64;
    let e: f64 = (NUM_ARM_JOINTS..NUM_ROBOT_JOINTS)
        .map(|i| angle_error(final_pose[i], target[i]))
        .sum::<f64>()
        / n;
    100.0 * (1.0 - e / reference).max(0.0)
}

/// Anything that can drive a grasp episode.
pub trait Controller {
    fn uses_images(&self) -> bool {
        false
    }
    /// Joint target before actuation noise.
    fn act(
        &mut self,
        env: &GraspEnv,
        state: &EnvState,
        input: &PolicyInput,
    ) -> Result<RobotJointVector, EvalError>;
}

impl Controller for Policy {
    fn uses_images(&self) -> bool {
        self.net.config.visual.is_some()
    }

    fn act(
        &mut self,
        env: &GraspEnv,
        _state: &EnvState,
        input: &PolicyInput,
    ) -> Result<RobotJointVector, EvalError> {
        let a = self.mean_action(input)?;
        Ok(action_to_target(&a, &env.model.limits))
    }
}

impl Controller for ScriptedGrasp {
    fn act(
        &mut self,
        env: &GraspEnv,
        state: &EnvState,
        _input: &PolicyInput,
    ) -> Result<RobotJointVector, EvalError> {
        Ok(self.target(env, state, state.step))
    }
}

/// Keeps the hand open at its start pose; never grasps.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdleController;

impl Controller for IdleController {
    fn act(
        &mut self,
        env: &GraspEnv,
        _state: &EnvState,
        _input: &PolicyInput,
    ) -> Result<RobotJointVector, EvalError> {
        Ok(env.start_pose())
    }
}

fn policy_input(obs: &Observation, images: bool) -> PolicyInput {
    PolicyInput {
        features: obs.features(),
        image: if images { image_tensor(obs) } else { None },
    }
}

/// Runs one full episode at a fixed yaw, with noise seeded from the episode seed.
pub fn run_episode(
    env: &GraspEnv,
    controller: &mut dyn Controller,
    yaw: f64,
    seed: u64,
    noise: &NoiseConfig,
    config_hash: &str,
) -> Result<EpisodeLog, EvalError> {
    let (mut state, obs) = env.reset_with_yaw(yaw, seed);
    let noise = noise.with_seed(mix_seed(noise.seed, seed));
    let mut ns = NoiseState::default();
    let (mut obs, n1) = perturb_observation(&obs, &noise, &ns);
    ns = n1;
    let images = controller.uses_images();
    let mut log = EpisodeLog::new(env, &state, config_hash);
    while state.step < env.config.episode_length {
        let target = controller.act(env, &state, &policy_input(&obs, images))?;
        let (target, n2) = perturb_action(&target, &noise, &ns);
        ns = n2;
        let r = env.step(&state, &target)?;
        log.record(&target, &r);
        let (o, n3) = perturb_observation(&r.observation, &noise, &ns);
        ns = n3;
        obs = o;
        state = r.state;
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub object_class: String,
    /// Position of the evaluation seed in the config's seed list.
    pub seed_index: usize,
    /// Episode seed.
    pub seed: u64,
    pub yaw: f64,
    pub success: bool,
    pub stable: bool,
    pub functional: bool,
    /// Only for successful grasps.
    pub posture: Option<f64>,
    pub episode_return: f64,
}

/// Scores a finished episode log.
pub fn score_episode(
    env: &GraspEnv,
    log: &EpisodeLog,
    cfg: &EvalConfig,
) -> Result<EpisodeOutcome, EvalError> {
    let success = grasp_success(log, env.config.episode_length, cfg.success_tail)?;
    let final_state = log.final_state();
    let (stable, functional, posture) = if success {
        (
            grasp_stability(env, final_state, true, cfg.perturbation_force)?,
            functionality(env, log, true, cfg.functionality_threshold)?,
            Some(posture_score(
                &final_state.pose,
                &env.target,
                cfg.posture_reference,
            )),
        )
    } else {
        (false, false, None)
    };
    Ok(EpisodeOutcome {
        object_class: log.header.object_class.clone(),
        seed_index: 0,
        seed: log.header.seed,
        yaw: log.header.initial_yaw,
        success,
        stable,
        functional,
        posture,
        episode_return: log.steps.iter().map(|s| s.reward.total).sum(),
    })
}

/// Percentages over a set of episodes. Success and stability are over all
/// episodes (so stability ≤ success); functionality and posture are over the
/// successful ones and absent when there are none.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success: f64,
    pub stability: f64,
    pub functionality: Option<f64>,
    pub posture: Option<f64>,
}

impl Metrics {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a EpisodeOutcome>) -> Self {
        let all: Vec<&EpisodeOutcome> = outcomes.into_iter().collect();
        let n = all.len();
        if n == 0 {
            return Self::default();
        }
        let succ: Vec<&&EpisodeOutcome> = all.iter().filter(|o| o.success).collect();
        let pct = |k: usize, d: usize| 100.0 * k as f64 / d as f64;
        let s = succ.len();
        Self {
            episodes: n,
            success: pct(s, n),
            stability: pct(all.iter().filter(|o| o.stable).count(), n),
            functionality: (s > 0).then(|| pct(succ.iter().filter(|o| o.functional).count(), s)),
            posture: (s > 0).then(|| succ.iter().filter_map(|o| o.posture).sum::<f64>() / s as f64),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub object_class: String,
    pub metrics: Metrics,
    pub per_seed: Vec<Metrics>,
    pub success_across_seeds: Spread,
    pub stability_across_seeds: Spread,
}

impl GroupMetrics {
    fn new(object_class: &str, outcomes: &[EpisodeOutcome], seeds: &[u64]) -> Self {
        let per_seed: Vec<Metrics> = (0..seeds.len())
            .map(|si| Metrics::from_outcomes(outcomes.iter().filter(|o| o.seed_index == si)))
            .collect();
        Self {
            object_class: object_class.to_string(),
            metrics: Metrics::from_outcomes(outcomes),
            success_across_seeds: Spread::of(
                &per_seed.iter().map(|m| m.success).collect::<Vec<_>>(),
            ),
            stability_across_seeds: Spread::of(
                &per_seed.iter().map(|m| m.stability).collect::<Vec<_>>(),
            ),
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub episodes_per_object: usize,
    pub objects: Vec<GroupMetrics>,
    pub aggregate: GroupMetrics,
    pub episodes: Vec<EpisodeOutcome>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per object plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config_hash,object_class,episodes,success,success_std,stability,stability_std,functionality,posture\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for g in self.objects.iter().chain(std::iter::once(&self.aggregate)) {
            s.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{},{}\n",
                self.config_hash,
                g.object_class,
                g.metrics.episodes,
                g.metrics.success,
                g.success_across_seeds.std,
                g.metrics.stability,
                g.stability_across_seeds.std,
                opt(g.metrics.functionality),
                opt(g.metrics.posture),
            ));
        }
        s
    }
}

/// Yaw of episode `i` of `n`, at the center of its stratum of the configured range.
pub fn stratified_yaw(env: &GraspEnv, i: usize, n: usize) -> f64 {
    let [lo, hi] = env.config.yaw_range_deg;
    (lo + (hi - lo) * (i as f64 + 0.5) / n as f64).to_radians()
}

/// Episode seed for (evaluation seed, object, episode).
pub fn episode_seed(seed: u64, object: usize, episode: usize) -> u64 {
    mix_seed(seed, ((object as u64) << 32) | episode as u64)
}

/// Runs every object for every seed and assembles the report. `on_episode`
/// receives each log after it is scored (for persistence).
pub fn evaluate_with(
    make_controller: &mut dyn FnMut(&GraspEnv) -> Box<dyn Controller>,
    envs: &[GraspEnv],
    cfg: &EvalConfig,
    noise: &NoiseConfig,
    config_hash: &str,
    on_episode: &mut dyn FnMut(&EpisodeLog, &EpisodeOutcome),
) -> Result<MetricsReport, EvalError> {
    cfg.validate()?;
    let n = cfg.episodes_per_object;
    let mut all = Vec::with_capacity(envs.len() * n * cfg.seeds.len());
    let mut groups = Vec::with_capacity(envs.len());
    for (oi, env) in envs.iter().enumerate() {
        let mut outcomes = Vec::with_capacity(n * cfg.seeds.len());
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let mut controller = make_controller(env);
            for i in 0..n {
                let es = episode_seed(seed, oi, i);
                let log = run_episode(
                    env,
                    controller.as_mut(),
                    stratified_yaw(env, i, n),
                    es,
                    noise,
                    config_hash,
                )?;
                let outcome = EpisodeOutcome {
                    seed_index: si,
                    ..score_episode(env, &log, cfg)?
                };
                on_episode(&log, &outcome);
                outcomes.push(outcome);
            }
        }
        groups.push(GroupMetrics::new(env.object_class(), &outcomes, &cfg.seeds));
        all.extend(outcomes);
    }
    let aggregate = GroupMetrics::new("all", &all, &cfg.seeds);
    Ok(MetricsReport {
        config_hash: config_hash.to_string(),
        seeds: cfg.seeds.clone(),
        episodes_per_object: n,
        objects: groups,
        aggregate,
        episodes: all,
    })
}

/// Evaluates one fixed policy.
pub fn evaluate(
    policy: &Policy,
    envs: &[GraspEnv],
    cfg: &EvalConfig,
    noise: &NoiseConfig,
    config_hash: &str,
) -> Result<MetricsReport, EvalError> {
    evaluate_with(
        &mut |_| Box::new(policy.clone()),
        envs,
        cfg,
        noise,
        config_hash,
        &mut |_, _| {},
    )
}

/// Recomputes a report from persisted logs; equals the live report when the
/// logs are the ones the live run produced.
pub fn report_from_logs(
    envs: &[GraspEnv],
    logs: &[EpisodeLog],
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<MetricsReport, EvalError> {
    let n = cfg.episodes_per_object;
    let mut groups = Vec::new();
    let mut all = Vec::new();
    for (oi, env) in envs.iter().enumerate() {
        let mut outcomes = Vec::new();
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            for i in 0..n {
                let es = episode_seed(seed, oi, i);
                let log = logs
                    .iter()
                    .find(|l| l.header.seed == es && l.header.object_class == env.object_class())
                    .ok_or(EvalError::IncompleteLog {
                        expected: n,
                        got: 0,
                    })?;
                outcomes.push(EpisodeOutcome {
                    seed_index: si,
                    ..score_episode(env, log, cfg)?
                });
            }
        }
        groups.push(GroupMetrics::new(env.object_class(), &outcomes, &cfg.seeds));
        all.extend(outcomes);
    }
    Ok(MetricsReport {
        config_hash: config_hash.to_string(),
        seeds: cfg.seeds.clone(),
        episodes_per_object: n,
        aggregate: GroupMetrics::new("all", &all, &cfg.seeds),
        objects: groups,
        episodes: all,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub mass: f64,
    pub scale: f64,
    pub required_contacts: usize,
    pub success: f64,
    pub stability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub object_class: String,
    pub seeds: Vec<u64>,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "config_hash,object_class,mass,scale,required_contacts,success,stability\n",
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4}\n",
                self.config_hash,
                self.object_class,
                e.mass,
                e.scale,
                e.required_contacts,
                e.success,
                e.stability
            ));
        }
        s
    }

    pub fn get(&self, mass: f64, scale: f64) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .find(|e| (e.mass - mass).abs() < 1e-12 && (e.scale - scale).abs() < 1e-12)
    }
}

/// Evaluates one object over a mass × scale grid; `make_env` rebuilds the
/// environment with the given overrides.
pub fn sweep(
    make_controller: &mut dyn FnMut(&GraspEnv) -> Box<dyn Controller>,
    make_env: &dyn Fn(f64, f64) -> Result<GraspEnv, EvalError>,
    masses: &[f64],
    scales: &[f64],
    cfg: &EvalConfig,
    noise: &NoiseConfig,
    config_hash: &str,
) -> Result<SweepReport, EvalError> {
    if masses
        .iter()
        .chain(scales)
        .any(|v| !(*v > 0.0 && v.is_finite()))
    {
        return Err(EvalError::InvalidConfig(
            "masses and scales must be positive".into(),
        ));
    }
    let mut entries = Vec::with_capacity(masses.len() * scales.len());
    let mut class = String::new();
    for &m in masses {
        for &s in scales {
            let env = make_env(m, s)?;
            class = env.object_class().to_string();
            let r = evaluate_with(
                make_controller,
                std::slice::from_ref(&env),
                cfg,
                noise,
                config_hash,
                &mut |_, _| {},
            )?;
            entries.push(SweepEntry {
                mass: m,
                scale: s,
                required_contacts: env.config.required_contacts(env.object_mass()),
                success: r.aggregate.metrics.success,
                stability: r.aggregate.metrics.stability,
            });
        }
    }
    Ok(SweepReport {
        config_hash: config_hash.to_string(),
        object_class: class,
        seeds: cfg.seeds.clone(),
        entries,
    })
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
