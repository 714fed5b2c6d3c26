use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use graspprior::agent::{grasp_trainer, write_stats_line, Checkpoint};
use graspprior::config::RunConfig;
use graspprior::eval::{self, EvalError};
use graspprior::ingest::load_pose_records_with;
use graspprior::poseprior::{
    consensus_pose, retarget_records, select_k, ConsensusLibrary, RetargetedFile,
};
use graspprior::simenv::{replay, EpisodeLog, GraspEnv};
use graspprior::toy;

#[derive(Parser)]
#[command(
    name = "graspprior",
    version,
    about = "Human grasp pose priors and dexterous grasping policies"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Retarget human keypoint records onto the 30-DoF robot hand.
    Retarget {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Frames below this detection confidence are dropped.
        #[arg(long)]
        min_confidence: Option<f64>,
    },
    /// Cluster retargeted poses per class into a consensus library.
    Cluster {
        /// One retargeted file per object class.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Number of clusters; 0 picks k by silhouette.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one policy per seed on all configured objects.
    Train {
        /// Overrides the configured step budget.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the configured episodes per object.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output directory for report.json, report.csv and episode logs.
        #[arg(long)]
        output: PathBuf,
        /// Persist every episode log.
        #[arg(long)]
        save_logs: bool,
    },
    /// Evaluate a checkpoint over the configured mass and scale grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Object class to sweep.
        #[arg(long)]
        object: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-execute an episode log and verify it reproduces bit for bit.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Write the toy object suite, synthetic pose records and a run config.
    MakeToySuite {
        #[arg(long)]
        output: PathBuf,
        /// Pose records per object.
        #[arg(long, default_value_t = 60)]
        frames: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
        cfg.cluster.seed = s;
        cfg.eval.seeds = vec![s];
    }
    cfg.validate()?;
    cfg.check_inputs()?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .with_context(|| format!("config has no paths.{what}"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn envs_from_config(cfg: &RunConfig) -> Result<Vec<GraspEnv>> {
    let lib_path = require(&cfg.paths.consensus, "consensus")?;
    let lib = ConsensusLibrary::load(lib_path)
        .with_context(|| format!("loading {}", lib_path.display()))?;
    let assets = cfg.load_assets()?;
    if assets.is_empty() {
        bail!("config lists no assets");
    }
    Ok(cfg.build_envs(&assets, &lib, &cfg.hand_model()?)?)
}

fn cmd_retarget(cfg: &RunConfig, input: &Path, output: &Path, min_conf: Option<f64>) -> Result<()> {
    let model = cfg.hand_model()?;
    let records = load_pose_records_with(input, min_conf.unwrap_or(cfg.cluster.min_confidence))?;
    let (poses, mut dropped) = retarget_records(&records, &model);
    dropped.splice(0..0, records.dropped.iter().cloned());
    let file = RetargetedFile {
        config_hash: cfg.hash(),
        seeds: cfg.seed_list(),
        object_class: records.object_class.clone(),
        poses,
        dropped,
    };
    file.save(output)?;
    println!(
        "{}: {} frames retargeted, {} dropped",
        file.object_class,
        file.poses.len(),
        file.dropped.len()
    );
    for d in &file.dropped {
        println!("  dropped {}: {}", d.source_id, d.reason);
    }
    Ok(())
}

fn cmd_cluster(cfg: &RunConfig, inputs: &[PathBuf], k: Option<usize>, output: &Path) -> Result<()> {
    let mut lib = ConsensusLibrary {
        config_hash: cfg.hash(),
        seeds: vec![cfg.cluster.seed],
        ..Default::default()
    };
    for path in inputs {
        let file =
            RetargetedFile::load(path).with_context(|| format!("loading {}", path.display()))?;
        let set = file.pose_set()?;
        let k = match k.unwrap_or(cfg.cluster.k) {
            0 => select_k(&set.robot_poses(), cfg.cluster.seed, 0.25),
            k => k,
        };
        let result = consensus_pose(&set, k, cfg.cluster.seed)?;
        println!(
            "{}: {} poses, k={}, cluster sizes {:?}, consensus {} (cost {:.4})",
            set.object_class,
            set.len(),
            k,
            result.sizes,
            set.poses[result.consensus_index].source_id,
            result.total_cost
        );
        lib.insert(&set, &result, k, cfg.cluster.seed);
    }
    lib.save(output)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, steps: Option<u64>) -> Result<()> {
    let envs = envs_from_config(cfg)?;
    let ck_dir = require(&cfg.paths.checkpoint_dir, "checkpoint_dir")?;
    let log_dir = require(&cfg.paths.log_dir, "log_dir")?;
    fs::create_dir_all(ck_dir)?;
    fs::create_dir_all(log_dir)?;
    let hash = cfg.hash();
    let total = steps.unwrap_or(cfg.train.total_steps);
    for seed in cfg.seed_list() {
        let mut trainer = grasp_trainer(
            cfg.ppo.clone(),
            &envs,
            &cfg.noise,
            cfg.train.use_images,
            seed,
        )?;
        trainer.config_hash = hash.clone();
        let stats_path = log_dir.join(format!("train-seed{seed}.jsonl"));
        let mut stats = BufWriter::new(File::create(&stats_path)?);
        let ck_path = ck_dir.join(format!("policy-seed{seed}.ckpt"));
        info!("seed {seed}: training for {total} steps");
        while trainer.env_steps < total {
            let s = trainer.iterate()?;
            write_stats_line(&mut stats, &s)?;
            info!(
                "update {} steps {} return {:?} success {:?}",
                s.update, s.env_steps, s.mean_episode_return, s.success_rate
            );
            let every = cfg.train.checkpoint_every;
            if every > 0 && s.update % every == 0 {
                trainer.checkpoint(&hash).save(&ck_path)?;
            }
        }
        stats.flush()?;
        trainer.checkpoint(&hash).save(&ck_path)?;
        println!(
            "seed {seed}: {} steps, {} updates, checkpoint {}",
            trainer.env_steps,
            trainer.updates,
            ck_path.display()
        );
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != cfg.hash() {
        warn!(
            "checkpoint was trained under config {}, evaluating under {}",
            ck.config_hash,
            cfg.hash()
        );
    }
    Ok(ck)
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: Option<usize>,
    out: &Path,
    save_logs: bool,
) -> Result<()> {
    let envs = envs_from_config(cfg)?;
    let ck = load_checkpoint(cfg, checkpoint)?;
    let mut ecfg = cfg.eval.clone();
    if let Some(n) = episodes {
        ecfg.episodes_per_object = n;
    }
    let logs_dir = out.join("episodes");
    fs::create_dir_all(if save_logs { &logs_dir } else { out })?;
    let policy = ck.policy();
    let mut save_err = None;
    let report = eval::evaluate_with(
        &mut |_| Box::new(policy.clone()),
        &envs,
        &ecfg,
        &cfg.noise,
        &cfg.hash(),
        &mut |log, o| {
            if save_logs && save_err.is_none() {
                let name = format!("{}-{}-{:016x}.jsonl", o.object_class, o.seed_index, o.seed);
                if let Err(e) = log.save(&logs_dir.join(name)) {
                    save_err = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    for g in report.objects.iter().chain([&report.aggregate]) {
        println!(
            "{:>10}  success {:5.1} ± {:4.1}  stability {:5.1}  functionality {}  posture {}",
            g.object_class,
            g.metrics.success,
            g.success_across_seeds.std,
            g.metrics.stability,
            fmt_opt(g.metrics.functionality),
            fmt_opt(g.metrics.posture)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:5.1}"))
        .unwrap_or_else(|| "  n/a".into())
}

fn cmd_sweep(
    cfg: &RunConfig,
    checkpoint: &Path,
    object: &str,
    episodes: Option<usize>,
    out: &Path,
) -> Result<()> {
    let envs = envs_from_config(cfg)?;
    let base = envs
        .iter()
        .find(|e| e.object_class() == object)
        .with_context(|| format!("object {object:?} is not in the configured assets"))?;
    let assets = cfg.load_assets()?;
    let asset = assets
        .iter()
        .find(|a| a.object_class == object)
        .expect("env built from this asset");
    let ck = load_checkpoint(cfg, checkpoint)?;
    let mut ecfg = cfg.eval.clone();
    if let Some(n) = episodes {
        ecfg.episodes_per_object = n;
    }
    let policy = ck.policy();
    let make_env = |mass: f64, scale: f64| -> Result<GraspEnv, EvalError> {
        let mut env_cfg = base.config.clone();
        env_cfg.object_mass = Some(mass);
        env_cfg.object_scale = Some(scale);
        Ok(GraspEnv::new(
            asset,
            base.model.clone(),
            base.target,
            base.reward.clone(),
            env_cfg,
        )?)
    };
    let report = eval::sweep(
        &mut |_| Box::new(policy.clone()),
        &make_env,
        &cfg.sweep.masses,
        &cfg.sweep.scales,
        &ecfg,
        &cfg.noise,
        &cfg.hash(),
    )?;
    fs::create_dir_all(out)?;
    write_json(&out.join("sweep.json"), &report)?;
    fs::write(out.join("sweep.csv"), report.to_csv())?;
    for e in &report.entries {
        println!(
            "mass {:.2} kg  scale {:.2}  contacts {}  success {:5.1}",
            e.mass, e.scale, e.required_contacts, e.success
        );
    }
    Ok(())
}

fn cmd_replay(cfg: &RunConfig, path: &Path) -> Result<()> {
    let log = EpisodeLog::load(path).with_context(|| format!("loading {}", path.display()))?;
    if log.header.config_hash != cfg.hash() {
        warn!("log was written under config {}", log.header.config_hash);
    }
    let envs = envs_from_config(cfg)?;
    let env = envs
        .iter()
        .find(|e| e.object_class() == log.header.object_class)
        .with_context(|| {
            format!(
                "object {:?} is not in the configured assets",
                log.header.object_class
            )
        })?;
    let report = replay(env, &log)?;
    println!(
        "OK, {}/{} steps match",
        report.steps_matched, report.steps_total
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::MakeToySuite { output, frames } = &cli.command {
        let path = toy::write_toy_suite(output, *frames, cli.seed.unwrap_or(0))?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Retarget {
            input,
            output,
            min_confidence,
        } => cmd_retarget(&cfg, input, output, *min_confidence),
        Command::Cluster { input, k, output } => cmd_cluster(&cfg, input, *k, output),
        Command::Train { steps } => cmd_train(&cfg, *steps),
        Command::Eval {
            checkpoint,
            episodes,
            output,
            save_logs,
        } => cmd_eval(&cfg, checkpoint, *episodes, output, *save_logs),
        Command::Sweep {
            checkpoint,
            object,
            episodes,
            output,
        } => cmd_sweep(&cfg, checkpoint, object, *episodes, output),
        Command::Replay { log } => cmd_replay(&cfg, log),
        Command::MakeToySuite { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
