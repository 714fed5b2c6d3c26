//! End-to-end acceptance checks. Each test prints one PASS/FAIL line for its
//! criterion straight to stdout so the lines survive output capture.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graspprior::agent::{
    grasp_trainer, log_prob, ppo_loss_and_grad, reach_config, reach_returns, reach_trainer,
    NetConfig, NetInput, Policy, PolicyNet, PpoBatch, PpoConfig,
};
use graspprior::eval::{
    self, grasp_stability, grasp_success, perturbation_results, EvalConfig, EvalError,
};
use graspprior::handmodel::{HandModel, HumanHandKeypoints, RobotJointVector, Vec3};
use graspprior::noise::{perturb_action, perturb_observation, NoiseConfig, NoiseState};
use graspprior::poseprior::{cluster_poses, ClusterOptions};
use graspprior::retarget::{parent_relative_frames, retarget, to_root_relative};
use graspprior::rewards::{chamfer, r_pose, RewardConfig, RewardVariant};
use graspprior::simenv::{
    replay, Axis6, EnvConfig, EnvState, EpisodeLog, GraspEnv, Observation, RenderedImages,
};
use graspprior::toy::{self, synth::HumanPoseAngles, ScriptedGrasp};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn model() -> HandModel {
    HandModel::default().with_adroit_like_limits()
}

// ---- plain-array geometry for the retargeting oracle ----

type V3 = [f64; 3];
/// Row-major: m[row][col].
type M3 = [[f64; 3]; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn from_cols(x: V3, y: V3, z: V3) -> M3 {
    [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]]
}

fn mul(a: &M3, b: &M3) -> M3 {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m
}

fn mul_t(a: &M3, v: V3) -> V3 {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

fn about_x(t: f64) -> M3 {
    let (s, c) = (t.sin(), t.cos());
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn about_y(t: f64) -> M3 {
    let (s, c) = (t.sin(), t.cos());
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rodrigues(v: V3) -> M3 {
    let th = dot(v, v).sqrt();
    if th == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [v[0] / th, v[1] / th, v[2] / th];
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let k2 = mul(&kx, &kx);
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let i = if r == c { 1.0 } else { 0.0 };
            m[r][c] = i + th.sin() * kx[r][c] + (1.0 - th.cos()) * k2[r][c];
        }
    }
    m
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// (abduction, flexion) such that Rx(flexion)·Ry(abduction) carries +Z onto
/// the direction of `u`, found by root bracketing rather than inverse trig.
fn solve_angles(u: V3) -> (f64, f64) {
    let u = unit(u);
    let abd = bisect(-FRAC_PI_2, FRAC_PI_2, |a| a.sin() - u[0]);
    // Rx(e)^T u must have no Y component and a positive Z component
    let y = |e: f64| e.cos() * u[1] + e.sin() * u[2];
    let z = |e: f64| -e.sin() * u[1] + e.cos() * u[2];
    let n = 3600;
    for i in 0..n {
        let a = -PI + 2.0 * PI * i as f64 / n as f64;
        let b = -PI + 2.0 * PI * (i + 1) as f64 / n as f64;
        if y(a) == 0.0 && z(a) > 0.0 {
            return (abd, a);
        }
        if (y(a) > 0.0) != (y(b) > 0.0) && z(0.5 * (a + b)) > 0.0 {
            return (abd, bisect(a, b, y));
        }
    }
    panic!("no flexion bracket for {u:?}");
}

struct OracleHand {
    palm: M3,
    /// Per finger (thumb..little): (abduction, flexion) of the bone leaving
    /// each of its three joints, measured in that joint's frame.
    angles: [[(f64, f64); 3]; 5],
}

fn oracle_hand(pts: &[V3]) -> OracleHand {
    let w = pts[0];
    let index = sub(pts[4], w);
    let ring = sub(pts[10], w);
    let y = unit(cross(ring, index));
    let mid = [
        0.5 * (index[0] + ring[0]),
        0.5 * (index[1] + ring[1]),
        0.5 * (index[2] + ring[2]),
    ];
    let d = dot(y, mid);
    let z = unit([mid[0] - y[0] * d, mid[1] - y[1] * d, mid[2] - y[2] * d]);
    let x = cross(y, z);
    let palm = from_cols(x, y, z);
    let mut angles = [[(0.0, 0.0); 3]; 5];
    for f in 0..5 {
        let chain = [0, 1 + 3 * f, 2 + 3 * f, 3 + 3 * f, 16 + f];
        let mut frame = palm;
        for k in 0..4 {
            let (a, e) = solve_angles(mul_t(&frame, sub(pts[chain[k + 1]], pts[chain[k]])));
            if k > 0 {
                angles[f][k - 1] = (a, e);
            }
            frame = mul(&mul(&frame, &about_x(e)), &about_y(a));
        }
    }
    OracleHand { palm, angles }
}

/// Robot hand revolutes 6..30 from the oracle angles: the wrist is unactuated,
/// the thumb takes both angles at its first two joints, the other fingers take
/// knuckle abduction plus three flexions, and the little metacarpal gets a
/// quarter of the little knuckle flexion.
fn oracle_robot_hand(h: &OracleHand) -> [f64; 24] {
    let mut q = [0.0; 24];
    let t = h.angles[0];
    q[2..7].copy_from_slice(&[t[0].0, t[0].1, t[1].0, t[1].1, t[2].1]);
    for f in 1..4 {
        let a = h.angles[f];
        let base = 7 + 4 * (f - 1);
        q[base..base + 4].copy_from_slice(&[a[0].0, a[0].1, a[1].1, a[2].1]);
    }
    let l = h.angles[4];
    q[19..24].copy_from_slice(&[0.25 * l[0].1, l[0].0, l[0].1, l[1].1, l[2].1]);
    q
}

fn random_angles(rng: &mut ChaCha8Rng) -> HumanPoseAngles {
    let mut a = HumanPoseAngles::default();
    for f in 0..5 {
        a.flex[f] = [
            rng.random_range(0.05..1.2),
            rng.random_range(0.05..1.2),
            rng.random_range(0.05..1.0),
        ];
        a.abd[f] = rng.random_range(-0.3..0.3);
    }
    a.abd[0] = rng.random_range(-0.8..0.8);
    a.mid_abd[0] = rng.random_range(-0.4..0.4);
    a.palm_rotation = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ];
    a.wrist_position = [
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    a.scale = rng.random_range(0.7..1.4);
    a
}

fn as_arrays(k: &HumanHandKeypoints) -> Vec<V3> {
    k.points().iter().map(|p| [p.x, p.y, p.z]).collect()
}

#[test]
fn criterion_01_retargeting_matches_independent_oracle() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let poses: Vec<(HumanPoseAngles, HumanHandKeypoints)> = (0..50)
        .map(|_| {
            let a = random_angles(&mut rng);
            let k = toy::synth::human_keypoints_from_angles(&a, &m.geometry);
            (a, k)
        })
        .collect();

    let t0 = Instant::now();
    let out: Vec<RobotJointVector> = poses
        .iter()
        .map(|(_, k)| retarget(k, &m).unwrap())
        .collect();
    let elapsed = t0.elapsed().as_secs_f64();

    let mut worst_oracle: f64 = 0.0;
    let mut worst_source: f64 = 0.0;
    let mut worst_arm: f64 = 0.0;
    for ((a, k), q) in poses.iter().zip(&out) {
        let h = oracle_hand(&as_arrays(k));
        let raw = oracle_robot_hand(&h);
        for i in 0..24 {
            let j = i + 6;
            let expect = raw[i].clamp(m.limits.lower[j], m.limits.upper[j]);
            worst_oracle = worst_oracle.max((q[j] - expect).abs());
        }
        // recovered angles are the generating ones
        for f in 0..5 {
            for (k, &(abd, flex)) in h.angles[f].iter().enumerate() {
                worst_source = worst_source.max((flex - a.flex[f][k]).abs());
                let want_abd = match k {
                    0 => a.abd[f],
                    1 => a.mid_abd[f],
                    _ => 0.0,
                };
                worst_source = worst_source.max((abd - want_abd).abs());
            }
        }
        let gen = rodrigues(a.palm_rotation);
        let got = rodrigues([q[3], q[4], q[5]]);
        for r in 0..3 {
            for c in 0..3 {
                worst_arm = worst_arm
                    .max((got[r][c] - h.palm[r][c]).abs())
                    .max((gen[r][c] - h.palm[r][c]).abs());
            }
        }
    }

    // rigid motion and uniform scale of the keypoints leave the hand joints alone
    let mut worst_invariance: f64 = 0.0;
    for (_, k) in &poses {
        let r = graspprior::geometry::rotvec_to_matrix([
            rng.random_range(-PI..PI) / 2.0,
            rng.random_range(-PI..PI) / 2.0,
            rng.random_range(-PI..PI) / 2.0,
        ]);
        let s = rng.random_range(0.5..2.0);
        let t = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            0.3,
        );
        let moved: Vec<Vec3> = k.points().iter().map(|p| r * p * s + t).collect();
        let k2 = HumanHandKeypoints::from_points(&moved).unwrap();
        let a = retarget(k, &m).unwrap();
        let b = retarget(&k2, &m).unwrap();
        for j in 6..30 {
            worst_invariance = worst_invariance.max((a[j] - b[j]).abs());
        }
    }

    let pass = worst_oracle <= 1e-9
        && worst_source <= 1e-9
        && worst_arm <= 1e-9
        && worst_invariance <= 1e-9
        && elapsed < 1.0;
    report(
        1,
        pass,
        &format!(
            "retarget vs oracle max err {worst_oracle:.2e}, vs generating angles {worst_source:.2e}, \
             arm {worst_arm:.2e}, rigid/scale {worst_invariance:.2e}, 50 poses in {elapsed:.3} s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_little_metacarpal_is_quarter_knuckle_flexion() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut exact = true;
    let mut checked = 0;
    for _ in 0..200 {
        let a = random_angles(&mut rng);
        let k = toy::synth::human_keypoints_from_angles(&a, &m.geometry);
        let q = retarget(&k, &m).unwrap();
        let frames = parent_relative_frames(&to_root_relative(&k), &m.human).unwrap();
        let (_, elev) = frames.child_angles(&m.human, 13).unwrap();
        if elev * 0.25 <= m.limits.upper[25] && elev >= m.limits.lower[25] {
            exact &= q[25] == 0.25 * elev;
            exact &= (q[25] - 0.25 * a.flex[4][0]).abs() <= 1e-12;
            checked += 1;
        }
    }
    let pass = exact && checked == 200;
    report(
        2,
        pass,
        &format!("LFJ4 == 0.25 x knuckle elevation bit-exact on {checked}/200 poses"),
    );
    assert!(pass);
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

fn double_loop_chamfer(m: &[Vec3], n: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for a in m {
        let mut best = f64::INFINITY;
        for b in n {
            let d = (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2);
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    for b in n {
        let mut best = f64::INFINITY;
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

#[test]
fn criterion_03_chamfer_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut oracle, mut sym, mut rigid): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let m = random_points(&mut rng, 10);
        let n = random_points(&mut rng, 20);
        let c = chamfer(&m, &n).unwrap();
        oracle = oracle.max((c - double_loop_chamfer(&m, &n)).abs());
        sym = sym.max((c - chamfer(&n, &m).unwrap()).abs());
        let r = graspprior::geometry::rotvec_to_matrix([
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ]);
        let t = Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            1.0,
        );
        let m2: Vec<Vec3> = m.iter().map(|p| r * p + t).collect();
        let n2: Vec<Vec3> = n.iter().map(|p| r * p + t).collect();
        rigid = rigid.max((c - chamfer(&m2, &n2).unwrap()).abs());
    }
    let pass = oracle <= 1e-12 && sym <= 1e-12 && rigid <= 1e-9;
    report(
        3,
        pass,
        &format!(
            "1000 pairs: oracle err {oracle:.2e}, symmetry err {sym:.2e}, rigid err {rigid:.2e}"
        ),
    );
    assert!(pass);
}

fn wrapped(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d < -PI {
        d += 2.0 * PI;
    }
    d.abs()
}

fn hand_distance(a: &RobotJointVector, b: &RobotJointVector) -> f64 {
    (6..30).map(|i| wrapped(a[i], b[i])).sum::<f64>() / 24.0
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for last in (k - 1)..n {
        for mut c in combinations(last, k - 1) {
            c.push(last);
            out.push(c);
        }
    }
    out
}

#[test]
fn criterion_04_k_medoids_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut consensus_ok = 0;
    for inst in 0..100 {
        let k = rng.random_range(1..=3usize);
        let n = rng.random_range(k.max(2)..=8usize);
        let poses: Vec<RobotJointVector> = (0..n)
            .map(|_| {
                let mut q = RobotJointVector::zeros();
                for i in 6..30 {
                    q[i] = rng.random_range(-1.5..1.5);
                }
                q
            })
            .collect();
        let d: Vec<Vec<f64>> = poses
            .iter()
            .map(|a| poses.iter().map(|b| hand_distance(a, b)).collect())
            .collect();
        let cost = |meds: &[usize]| -> f64 {
            (0..n)
                .map(|i| meds.iter().map(|&m| d[i][m]).fold(f64::INFINITY, f64::min))
                .sum()
        };
        let best = combinations(n, k)
            .iter()
            .map(|c| cost(c))
            .fold(f64::INFINITY, f64::min);
        let r = cluster_poses(&poses, ClusterOptions::new(k, inst)).unwrap();
        worst = worst.max((r.total_cost - best).abs() / best.max(1e-300));
        worst = worst.max((cost(&r.medoids) - best).abs() / best.max(1e-300));

        // consensus: largest cluster, then lower member cost, then lower medoid index
        let mut sizes = vec![0usize; k];
        let mut costs = vec![0.0; k];
        for i in 0..n {
            let mut c = 0;
            for j in 1..k {
                if d[i][r.medoids[j]] < d[i][r.medoids[c]] {
                    c = j;
                }
            }
            sizes[c] += 1;
            costs[c] += d[i][r.medoids[c]];
        }
        let mut pick = 0;
        for c in 1..k {
            let key = |c: usize| (std::cmp::Reverse(sizes[c]), costs[c], r.medoids[c]);
            if key(c).partial_cmp(&key(pick)) == Some(std::cmp::Ordering::Less) {
                pick = c;
            }
        }
        if r.consensus_index == r.medoids[pick] && r.consensus_robot_pose == poses[r.medoids[pick]]
        {
            consensus_ok += 1;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && consensus_ok == 100 && elapsed < 10.0;
    report(
        4,
        pass,
        &format!(
            "100 instances: max relative cost gap {worst:.2e}, consensus rule {consensus_ok}/100, {elapsed:.2} s"
        ),
    );
    assert!(pass);
}

fn toy_env(class: &str, reward: RewardConfig) -> GraspEnv {
    let m = model();
    let lib = toy::toy_consensus_library(&m, 60, 0);
    GraspEnv::new(
        &toy::toy_asset(class).unwrap(),
        m,
        *lib.target(class).unwrap(),
        reward,
        EnvConfig::default(),
    )
    .unwrap()
}

fn random_episode(env: &GraspEnv, seed: u64) -> EpisodeLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, _) = env.reset(seed);
    let mut log = EpisodeLog::new(env, &state, "acceptance");
    while state.step < env.config.episode_length {
        let mut q = RobotJointVector::zeros();
        for i in 0..30 {
            q[i] = rng.random_range(env.model.limits.lower[i]..=env.model.limits.upper[i]);
        }
        let r = env.step(&state, &q).unwrap();
        log.record(&q, &r);
        state = r.state;
    }
    log
}

#[test]
fn criterion_05_reward_composition_and_pose_gate() {
    let cfg = RewardConfig::default();
    let defaults = cfg.alpha == 1.0
        && cfg.beta == 1.0
        && cfg.gamma == 1.0
        && cfg.eta == 0.001
        && cfg.gate_threshold() == 7;

    let mut logs = Vec::new();
    let mut envs = Vec::new();
    for class in toy::TOY_CLASSES {
        let env = toy_env(class, cfg.clone());
        logs.push((
            envs.len(),
            toy::run_scripted(&env, &ScriptedGrasp::for_class(class), 7, "acceptance")
                .unwrap()
                .0,
        ));
        logs.push((envs.len(), random_episode(&env, 8)));
        envs.push(env);
    }

    let mut decomposition: f64 = 0.0;
    let mut replay_err: f64 = 0.0;
    let mut replay_ok = true;
    let (mut closed, mut open, mut gate_violations) = (0, 0, 0);
    for (e, log) in &logs {
        let env = &envs[*e];
        match replay(env, log) {
            Ok(rep) => replay_err = replay_err.max(rep.max_reward_error),
            Err(_) => replay_ok = false,
        }
        for s in &log.steps {
            let r = &s.reward;
            let sum = cfg.alpha * r.r_succ
                + cfg.beta * r.r_aff
                + cfg.gamma * r.r_pose
                + cfg.eta * r.r_entropy;
            decomposition = decomposition.max((sum - r.total).abs());
            let active = s.state.contacts.len();
            let err: f64 = (6..30)
                .map(|i| wrapped(s.state.pose[i], env.target[i]))
                .sum();
            if active < 7 {
                closed += 1;
                gate_violations += (r.r_pose != 0.0) as usize;
            } else {
                open += 1;
                gate_violations += (err > 0.0 && !(r.r_pose < 0.0)) as usize;
            }
        }
    }

    // the gate over every possible sensor count
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..200 {
        let mut a = RobotJointVector::zeros();
        let mut b = RobotJointVector::zeros();
        for i in 0..30 {
            a[i] = rng.random_range(-1.0..1.0);
            b[i] = rng.random_range(-1.0..1.0);
        }
        for active in 0..=21 {
            let v = r_pose(&a, &b, active, &cfg, &m.robot);
            let ok = if active < 7 { v == 0.0 } else { v < 0.0 };
            gate_violations += (!ok) as usize;
        }
        gate_violations += (r_pose(&a, &a, 21, &cfg, &m.robot) != 0.0) as usize;
    }

    let pass = defaults
        && decomposition <= 1e-9
        && replay_ok
        && replay_err <= 1e-9
        && gate_violations == 0
        && closed > 0
        && open > 0;
    report(
        5,
        pass,
        &format!(
            "decomposition err {decomposition:.2e}, replay err {replay_err:.2e}, \
             gate checked on {closed} closed / {open} open logged steps, {gate_violations} violations"
        ),
    );
    assert!(pass);
}

fn noise_observation() -> Observation {
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
                0, 3, 128, 254, 255, 250, 5, 100, 0, 0, 60, 70, 255, 255, 200, 1,
            ],
            depth: vec![0.5; 16],
            affordance: vec![0; 16],
        }),
    };
    o.refresh_distances();
    o
}

fn std_of(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn criterion_06_noise_statistics() {
    let base = noise_observation();
    let cfg = NoiseConfig {
        freeze_enabled: false,
        seed: 606,
        ..NoiseConfig::default()
    };
    let draws = 100_000;

    let mut proprio = Vec::with_capacity(draws);
    let mut tracking = Vec::with_capacity(draws);
    let mut pixel_ok = true;
    let mut seen = [false; 11];
    let mut clipped_low = false;
    let mut clipped_high = false;
    let mut st = NoiseState::default();
    while proprio.len() < draws || tracking.len() < draws {
        let (o, next) = perturb_observation(&base, &cfg, &st);
        st = next;
        proprio.extend(o.proprio.iter().zip(&base.proprio).map(|(a, b)| a - b));
        for (p, q) in o.tracked_points.iter().zip(&base.tracked_points) {
            tracking.extend((p - q).iter());
        }
        let (before, after) = (
            &base.images.as_ref().unwrap().intensity,
            &o.images.as_ref().unwrap().intensity,
        );
        for (&b, &a) in before.iter().zip(after) {
            let d = a as i32 - b as i32;
            pixel_ok &= (-5..=5).contains(&d);
            if (5..=250).contains(&b) {
                seen[(d + 5) as usize] = true;
            }
            clipped_low |= b == 0 && a == 0;
            clipped_high |= b == 255 && a == 255;
        }
    }
    proprio.truncate(draws);
    tracking.truncate(draws);

    let mut actuation = Vec::with_capacity(draws);
    let mut st = NoiseState::default();
    let zero = RobotJointVector::zeros();
    while actuation.len() < draws {
        let (a, next) = perturb_action(&zero, &cfg, &st);
        st = next;
        actuation.extend(a.0.iter().copied());
    }
    actuation.truncate(draws);

    let rel = |v: &[f64], target: f64| (std_of(v) - target).abs() / target;
    let (rp, ra, rt) = (
        rel(&proprio, cfg.proprio_std),
        rel(&actuation, cfg.actuation_std),
        rel(&tracking, cfg.tracking_std_m),
    );

    // freezes: runs of identical tracked frames are exactly 20 long
    let freeze_cfg = NoiseConfig {
        freeze_probability: 0.05,
        seed: 607,
        ..NoiseConfig::default()
    };
    let mut st = NoiseState::default();
    let mut frames = Vec::new();
    for _ in 0..5000 {
        let (o, next) = perturb_observation(&base, &freeze_cfg, &st);
        st = next;
        frames.push(o.tracked_points);
    }
    let mut runs = Vec::new();
    let mut len = 1;
    for i in 1..frames.len() {
        if frames[i] == frames[i - 1] {
            len += 1;
        } else {
            if len > 1 {
                runs.push(len);
            }
            len = 1;
        }
    }
    let complete = runs.len();
    let freeze_ok = complete > 10 && runs.iter().all(|&r| r == freeze_cfg.tracking_freeze_frames);

    let pass = rp <= 0.05
        && ra <= 0.05
        && rt <= 0.05
        && pixel_ok
        && seen.iter().all(|&s| s)
        && clipped_low
        && clipped_high
        && freeze_ok;
    report(
        6,
        pass,
        &format!(
            "std rel err proprio {rp:.4} actuation {ra:.4} tracking {rt:.4}; pixel deltas in [-5,5] \
             with clipping {}; {complete} freezes all of 20 frames: {freeze_ok}",
            pixel_ok && clipped_low && clipped_high
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_ppo_gradient_matches_finite_differences() {
    let cfg = PpoConfig {
        net: NetConfig::tiny(),
        ..PpoConfig::default()
    };
    let mut net = PolicyNet::zeroed(NetConfig::tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for p in net.params.iter_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let xs: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let acts: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
    let input = NetInput {
        features: DMatrix::from_column_slice(8, 1, &xs),
        images: None,
    };
    let (mean, _) = net.forward(&input).unwrap();
    let offsets = [0.05, -0.1, 0.4, -0.5, 0.0, 0.15, -0.3, 0.6];
    let batch = PpoBatch {
        input,
        actions: DMatrix::from_column_slice(8, 1, &acts),
        old_log_probs: (0..8)
            .map(|i| log_prob(&[mean[(i, 0)]], &[acts[i]]) + offsets[i])
            .collect(),
        advantages: (0..8).map(|_| rng.random_range(-1.5..1.5)).collect(),
        returns: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let (_, grad) = ppo_loss_and_grad(&net, &batch, &cfg).unwrap();
    let loss = |n: &PolicyNet| ppo_loss_and_grad(n, &batch, &cfg).unwrap().0.total;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..net.param_count() {
        let mut p = net.clone();
        p.params[i] += h;
        let up = loss(&p);
        p.params[i] -= 2.0 * h;
        let down = loss(&p);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let pass = net.param_count() <= 10 && worst < 1e-4;
    report(
        7,
        pass,
        &format!(
            "{} parameters, max relative error {worst:.2e}",
            net.param_count()
        ),
    );
    assert!(pass);
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_08_reach_task_beats_random_baseline() {
    let t0 = Instant::now();
    let seeds = [0u64, 1, 2, 3];
    let episodes = 100;
    let mut trained = Vec::new();
    let mut random = Vec::new();
    let mut window_ok = true;
    for &s in &seeds {
        let mut t = reach_trainer(reach_config(), s).unwrap();
        let mut evals = Vec::new();
        let every = 20_000;
        let mut next = every;
        while t.env_steps < 200_000 {
            t.iterate().unwrap();
            if t.env_steps >= next {
                let r = reach_returns(Some(&t.policy()), 50, 10_000 + s).unwrap();
                evals.push(mean_of(&r));
                next += every;
            }
        }
        trained.push(mean_of(
            &reach_returns(Some(&t.policy()), episodes, 1000 + s).unwrap(),
        ));
        random.push(mean_of(&reach_returns(None, episodes, 1000 + s).unwrap()));
        let windows: Vec<f64> = evals
            .windows(evals.len().min(10).max(1))
            .map(mean_of)
            .collect();
        window_ok &= windows.windows(2).all(|w| w[1] >= w[0]);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let gap = mean_of(&trained) - mean_of(&random);
    let sigma = std_of(&trained);
    let pass = gap >= 3.0 * sigma && gap > 0.0 && elapsed < 1800.0;
    report(
        8,
        pass,
        &format!(
            "trained {:.2} vs random {:.2} (gap {gap:.2}, trained std across seeds {sigma:.2}); \
             moving-window mean non-decreasing: {window_ok}; {elapsed:.1} s",
            mean_of(&trained),
            mean_of(&random)
        ),
    );
    assert!(pass);
}

fn success_of(policy: &Policy, envs: &[GraspEnv], seed: u64, noise: &NoiseConfig) -> f64 {
    let cfg = EvalConfig {
        seeds: vec![seed],
        ..EvalConfig::default()
    };
    eval::evaluate(policy, envs, &cfg, noise, "acceptance")
        .unwrap()
        .aggregate
        .metrics
        .success
}

#[test]
fn criteria_09_10_reward_ablation_and_mass_sweep() {
    let t0 = Instant::now();
    let m = model();
    let lib = toy::toy_consensus_library(&m, 60, 0);
    let noise = NoiseConfig::default();
    let make_envs = |variant: RewardVariant| -> Vec<GraspEnv> {
        let reward = RewardConfig {
            variant,
            ..RewardConfig::default()
        };
        toy::toy_suite()
            .iter()
            .map(|a| {
                GraspEnv::new(
                    a,
                    m.clone(),
                    *lib.target(&a.object_class).unwrap(),
                    reward.clone(),
                    EnvConfig::default(),
                )
                .unwrap()
            })
            .collect()
    };
    let mut ppo = PpoConfig::default();
    ppo.net.hidden = vec![64, 64];
    let seeds = [0u64, 1, 2, 3];
    let variants = [
        ("full", RewardVariant::Dexvip),
        ("affordance+touch", RewardVariant::AffordanceTouch),
        ("affordance-only", RewardVariant::GraffLike),
    ];
    let mut means = Vec::new();
    let mut full_seed0: Option<Policy> = None;
    for (name, variant) in variants {
        let envs = make_envs(variant);
        let mut per_seed = Vec::new();
        for &s in &seeds {
            let mut t = grasp_trainer(ppo.clone(), &envs, &noise, false, s).unwrap();
            t.train(2_000_000, |_| {}).unwrap();
            let policy = t.policy();
            per_seed.push(success_of(&policy, &envs, s, &noise));
            if variant == RewardVariant::Dexvip && s == 0 {
                full_seed0 = Some(policy);
            }
        }
        let line = format!(
            "  {name:<17} success per seed {:?} mean {:.1}\n",
            per_seed,
            mean_of(&per_seed)
        );
        std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
        means.push(mean_of(&per_seed));
    }
    let (full, mid, low) = (means[0], means[1], means[2]);
    let middle_ok = full >= mid && mid >= low;
    let pass9 = full >= low && full - low >= 5.0 && t0.elapsed().as_secs_f64() < 6.0 * 3600.0;
    report(
        9,
        pass9,
        &format!(
            "full {full:.1} / affordance+touch {mid:.1} / affordance-only {low:.1}; \
             full - affordance-only = {:.1} points; middle ordering holds: {middle_ok}; {:.0} s",
            full - low,
            t0.elapsed().as_secs_f64()
        ),
    );

    // mass sweep with the seed-0 full policy
    let policy = full_seed0.expect("seed 0 trained");
    let base_envs = make_envs(RewardVariant::Dexvip);
    let cfg = EvalConfig {
        seeds: vec![0],
        ..EvalConfig::default()
    };
    let mut rows = Vec::new();
    let mut monotone = true;
    for (asset, base) in toy::toy_suite().iter().zip(&base_envs) {
        let make_env = |mass: f64, scale: f64| -> Result<GraspEnv, EvalError> {
            let mut c = base.config.clone();
            c.object_mass = Some(mass);
            c.object_scale = Some(scale);
            Ok(GraspEnv::new(
                asset,
                base.model.clone(),
                base.target,
                base.reward.clone(),
                c,
            )?)
        };
        let rep = eval::sweep(
            &mut |_| Box::new(policy.clone()),
            &make_env,
            &[0.5, 1.0, 1.5],
            &[0.8, 1.0, 1.2],
            &cfg,
            &noise,
            "acceptance",
        )
        .unwrap();
        for scale in [0.8, 1.0, 1.2] {
            let light = rep.get(0.5, scale).unwrap().success;
            let heavy = rep.get(1.5, scale).unwrap().success;
            monotone &= light >= heavy;
            rows.push(format!(
                "{}@{scale}: {light:.0}>={heavy:.0}",
                asset.object_class
            ));
        }
    }
    report(
        10,
        monotone,
        &format!("success at 0.5 kg vs 1.5 kg: {}", rows.join(", ")),
    );

    assert!(pass9, "ablation: full {full:.1}, affordance-only {low:.1}");
    assert!(monotone);
}

fn lifted_tail(log: &EpisodeLog) -> usize {
    log.steps
        .iter()
        .rev()
        .take_while(|s| s.state.lifted())
        .count()
}

fn expected_axes(env: &GraspEnv, state: &EnvState, force: f64) -> Vec<bool> {
    let c = &env.config;
    let squeezing = state
        .contacts
        .iter()
        .filter(|a| {
            state
                .contacts
                .iter()
                .any(|b| a.normal.dot(&b.normal) < c.opposing_dot)
        })
        .count() as f64;
    Axis6::ALL
        .iter()
        .map(|ax| {
            let d = ax.direction();
            force <= c.sliding_friction * squeezing * c.contact_normal_force
                || state.contacts.iter().any(|k| k.normal.dot(&d) > 0.3)
        })
        .collect()
}

#[test]
fn criterion_11_metric_semantics_on_scripted_trajectories() {
    let env = toy_env("cube", RewardConfig::default());
    let len = env.config.episode_length;
    let base = ScriptedGrasp::for_class("cube");
    let (log, _) = toy::run_scripted(&env, &base, 3, "acceptance").unwrap();
    let latency = len - lifted_tail(&log);
    let shift = |plan: &ScriptedGrasp, tail: usize| ScriptedGrasp {
        lift_at: plan.lift_at + (len - latency) - tail,
        ..plan.clone()
    };
    let mut tails = Vec::new();
    let mut boundary_ok = len == 200;
    for (tail, want) in [(50usize, true), (49, false), (51, true)] {
        let (l, _) = toy::run_scripted(&env, &shift(&base, tail), 3, "acceptance").unwrap();
        let got_tail = lifted_tail(&l);
        tails.push(got_tail);
        boundary_ok &=
            got_tail == tail && grasp_success(&l, len, eval::SUCCESS_TAIL).unwrap() == want;
    }

    // stability: all six axes at 1 N, checked against the friction rule
    let fin = log.final_state().clone();
    let axes = perturbation_results(&env, &fin, 1.0);
    let mut stability_ok = axes == expected_axes(&env, &fin, 1.0)
        && axes.iter().all(|&a| a)
        && grasp_stability(&env, &fin, true, 1.0).unwrap();
    // every contact subset of each scripted final grasp at 1 N, and again just
    // past the squeeze friction, where only faces pushing against the object hold
    let mut partial_at_1n = false;
    let mut five_of_six = false;
    let mut subsets = 0;
    for class in toy::TOY_CLASSES {
        let e = toy_env(class, RewardConfig::default());
        let (l, _) =
            toy::run_scripted(&e, &ScriptedGrasp::for_class(class), 3, "acceptance").unwrap();
        let fin = l.final_state().clone();
        let c = &e.config;
        let n = fin.contacts.len();
        let past_friction = c.sliding_friction * n as f64 * c.contact_normal_force + 0.5;
        for mask in 0u32..(1 << n) {
            let mut s = fin.clone();
            s.contacts = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| fin.contacts[i])
                .collect();
            subsets += 1;
            for force in [1.0, past_friction] {
                let r = perturbation_results(&e, &s, force);
                stability_ok &= r == expected_axes(&e, &s, force);
                let held = r.iter().filter(|&&h| h).count();
                stability_ok &= grasp_stability(&e, &s, true, force).unwrap() == (held == 6);
                if force == 1.0 {
                    partial_at_1n |= held > 0 && held < 6;
                } else {
                    five_of_six |= held == 5;
                }
            }
        }
    }
    stability_ok &= partial_at_1n && five_of_six;

    // scripted oracle on the cube: every episode succeeds, stability follows the rule
    let cfg = EvalConfig {
        seeds: vec![0],
        ..EvalConfig::default()
    };
    let mut rule_ok = true;
    let rep = eval::evaluate_with(
        &mut |e| Box::new(ScriptedGrasp::for_class(e.object_class())),
        std::slice::from_ref(&env),
        &cfg,
        &NoiseConfig::disabled(),
        "acceptance",
        &mut |l, o| {
            let s = l.final_state();
            rule_ok &= o.stable == (o.success && expected_axes(&env, s, 1.0).iter().all(|&a| a));
        },
    )
    .unwrap();
    let scripted = rep.aggregate.metrics.success;

    let pass = boundary_ok && stability_ok && rule_ok && scripted == 100.0;
    report(
        11,
        pass,
        &format!(
            "lifted tails {tails:?} -> success boundary at 50 of {len}: {boundary_ok}; \
             6/6 axes required at 1 N ({subsets} contact subsets; 5/6 rejected past friction: {five_of_six}): {stability_ok}; \
             scripted cube success {scripted:.0}%, stability rule holds: {rule_ok}"
        ),
    );
    assert!(pass);
}
