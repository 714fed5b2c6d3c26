//! Actor-critic policy, PPO trainer and the tasks it trains on.
//!
//! The network is a small in-repo implementation: dense layers batched through
//! nalgebra, an optional three-layer conv encoder evaluated per sample, a
//! shared trunk, a 30-D mean head and a scalar value head. The policy is a
//! unit-variance Gaussian around the mean, so its entropy is a constant.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handmodel::{JointLimits, RobotJointVector, NUM_ROBOT_JOINTS};
use crate::noise::{perturb_action, perturb_observation, NoiseConfig, NoiseState};
use crate::simenv::{EnvState, EpisodeLog, GraspEnv, Observation, SimError};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("input has {got} values, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("environment: {0}")]
    Env(String),
}

impl From<SimError> for AgentError {
    fn from(e: SimError) -> Self {
        AgentError::Env(e.to_string())
    }
}

/// Derives an independent seed from a parent seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// network

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualConfig {
    pub channels_in: usize,
    pub size: usize,
    pub filters: [usize; 3],
    pub strides: [usize; 3],
    pub channels: [usize; 3],
    pub bottleneck: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            channels_in: 3,
            size: 32,
            filters: [8, 4, 3],
            strides: [2, 2, 1],
            channels: [16, 32, 32],
            bottleneck: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub action_dim: usize,
    pub visual: Option<VisualConfig>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            obs_dim: crate::simenv::OBSERVATION_FEATURES,
            hidden: vec![512, 512],
            action_dim: NUM_ROBOT_JOINTS,
            visual: None,
        }
    }
}

impl NetConfig {
    /// One input, one hidden pair of units, one action: ten parameters.
    pub fn tiny() -> Self {
        Self {
            obs_dim: 1,
            hidden: vec![2],
            action_dim: 1,
            visual: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn size(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn weights<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(
            &p[self.w..self.w + self.n_in * self.n_out],
            self.n_out,
            self.n_in,
        )
    }

    fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.weights(p).transpose();
        for j in 0..self.n_out {
            y.column_mut(j).add_scalar_mut(p[self.b + j]);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(
        &self,
        p: &[f64],
        x: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        g: &mut [f64],
        need_dx: bool,
    ) -> Option<DMatrix<f64>> {
        let dw = dy.tr_mul(x);
        for (gi, d) in g[self.w..self.w + self.n_in * self.n_out]
            .iter_mut()
            .zip(dw.as_slice())
        {
            *gi += d;
        }
        for j in 0..self.n_out {
            g[self.b + j] += dy.column(j).sum();
        }
        need_dx.then(|| dy * self.weights(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    h_in: usize,
    h_out: usize,
    w: usize,
    b: usize,
}

impl Conv {
    fn size(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + self.c_out
    }

    fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.h_out
    }

    /// Pre-activation output for one square image stored channel-major.
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (k, hi, ho) = (self.k, self.h_in, self.h_out);
        let mut y = vec![0.0; self.out_len()];
        for o in 0..self.c_out {
            let bias = p[self.b + o];
            for oy in 0..ho {
                for ox in 0..ho {
                    let mut acc = bias;
                    for c in 0..self.c_in {
                        let wbase = self.w + ((o * self.c_in + c) * k) * k;
                        let xbase = c * hi * hi;
                        for ky in 0..k {
                            let row = xbase + (oy * self.stride + ky) * hi + ox * self.stride;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                acc += p[wrow + kx] * x[row + kx];
                            }
                        }
                    }
                    y[(o * ho + oy) * ho + ox] = acc;
                }
            }
        }
        y
    }

    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], need_dx: bool) -> Vec<f64> {
        let (k, hi, ho) = (self.k, self.h_in, self.h_out);
        let mut dx = if need_dx {
            vec![0.0; x.len()]
        } else {
            Vec::new()
        };
        for o in 0..self.c_out {
            for oy in 0..ho {
                for ox in 0..ho {
                    let d = dy[(o * ho + oy) * ho + ox];
                    if d == 0.0 {
                        continue;
                    }
                    g[self.b + o] += d;
                    for c in 0..self.c_in {
                        let wbase = self.w + ((o * self.c_in + c) * k) * k;
                        let xbase = c * hi * hi;
                        for ky in 0..k {
                            let row = xbase + (oy * self.stride + ky) * hi + ox * self.stride;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                g[wrow + kx] += d * x[row + kx];
                                if need_dx {
                                    dx[row + kx] += d * p[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    trunk: Vec<Dense>,
    conv: Vec<Conv>,
    visual_fc: Option<Dense>,
    actor: Dense,
    critic: Dense,
    total: usize,
    image_len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Result<Self, AgentError> {
        if cfg.obs_dim == 0 || cfg.action_dim == 0 {
            return Err(AgentError::InvalidConfig(
                "network needs inputs and actions".into(),
            ));
        }
        let mut off = 0;
        let dense = |n_in: usize, n_out: usize, off: &mut usize| {
            let d = Dense {
                n_in,
                n_out,
                w: *off,
                b: *off + n_in * n_out,
            };
            *off += d.size();
            d
        };
        let mut trunk = Vec::new();
        let mut width = cfg.obs_dim;
        for &h in &cfg.hidden {
            trunk.push(dense(width, h, &mut off));
            width = h;
        }
        let mut conv = Vec::new();
        let mut visual_fc = None;
        let mut image_len = 0;
        if let Some(v) = &cfg.visual {
            let mut h = v.size;
            let mut c = v.channels_in;
            image_len = c * h * h;
            for i in 0..3 {
                let (k, s) = (v.filters[i], v.strides[i]);
                if k > h || s == 0 {
                    return Err(AgentError::InvalidConfig(format!(
                        "conv layer {i} does not fit a {h}x{h} input"
                    )));
                }
                let ho = (h - k) / s + 1;
                let l = Conv {
                    c_in: c,
                    c_out: v.channels[i],
                    k,
                    stride: s,
                    h_in: h,
                    h_out: ho,
                    w: off,
                    b: off + v.channels[i] * c * k * k,
                };
                off += l.size();
                conv.push(l);
                h = ho;
                c = v.channels[i];
            }
            let flat = c * h * h;
            visual_fc = Some(dense(flat, v.bottleneck, &mut off));
            width += v.bottleneck;
        }
        let actor = dense(width, cfg.action_dim, &mut off);
        let critic = dense(width, 1, &mut off);
        Ok(Self {
            trunk,
            conv,
            visual_fc,
            actor,
            critic,
            total: off,
            image_len,
        })
    }
}

fn relu(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.max(0.0));
}

fn relu_grad(dy: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    dy.zip_apply(pre, |d, p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
}

/// Network inputs for a batch: features (rows are samples) and optional images.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub features: DMatrix<f64>,
    pub images: Option<Vec<Vec<f64>>>,
}

impl NetInput {
    pub fn single(features: &[f64], image: Option<&[f64]>) -> Self {
        Self {
            features: DMatrix::from_row_slice(1, features.len(), features),
            images: image.map(|i| vec![i.to_vec()]),
        }
    }

    pub fn batch(&self) -> usize {
        self.features.nrows()
    }
}

struct Cache {
    trunk_in: Vec<DMatrix<f64>>,
    trunk_pre: Vec<DMatrix<f64>>,
    conv_in: Vec<Vec<Vec<f64>>>,
    conv_pre: Vec<Vec<Vec<f64>>>,
    fc_in: Option<DMatrix<f64>>,
    fc_pre: Option<DMatrix<f64>>,
    z: DMatrix<f64>,
    motor_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub config: NetConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl PolicyNet {
    /// He-scaled hidden layers, a near-zero mean head and a unit-scale value head.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, AgentError> {
        let layout = Layout::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |params: &mut [f64], w: usize, n: usize, scale: f64| {
            for v in &mut params[w..w + n] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * scale;
            }
        };
        for d in &layout.trunk {
            fill(
                &mut params,
                d.w,
                d.n_in * d.n_out,
                (2.0 / d.n_in as f64).sqrt(),
            );
        }
        for c in &layout.conv {
            fill(
                &mut params,
                c.w,
                c.c_out * c.c_in * c.k * c.k,
                (2.0 / (c.c_in * c.k * c.k) as f64).sqrt(),
            );
        }
        if let Some(d) = &layout.visual_fc {
            fill(
                &mut params,
                d.w,
                d.n_in * d.n_out,
                (2.0 / d.n_in as f64).sqrt(),
            );
        }
        let a = layout.actor;
        fill(
            &mut params,
            a.w,
            a.n_in * a.n_out,
            0.01 / (a.n_in as f64).sqrt(),
        );
        let c = layout.critic;
        fill(&mut params, c.w, c.n_in, 1.0 / (c.n_in as f64).sqrt());
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn zeroed(config: NetConfig) -> Result<Self, AgentError> {
        let layout = Layout::new(&config)?;
        Ok(Self {
            params: vec![0.0; layout.total],
            config,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn check_input(&self, input: &NetInput) -> Result<(), AgentError> {
        if input.features.ncols() != self.config.obs_dim {
            return Err(AgentError::ShapeMismatch {
                expected: self.config.obs_dim,
                got: input.features.ncols(),
            });
        }
        match (&self.config.visual, &input.images) {
            (None, _) => Ok(()),
            (Some(_), None) => Err(AgentError::ShapeMismatch {
                expected: self.layout.image_len,
                got: 0,
            }),
            (Some(_), Some(imgs)) => {
                if imgs.len() != input.batch() {
                    return Err(AgentError::ShapeMismatch {
                        expected: input.batch(),
                        got: imgs.len(),
                    });
                }
                match imgs.iter().find(|i| i.len() != self.layout.image_len) {
                    Some(bad) => Err(AgentError::ShapeMismatch {
                        expected: self.layout.image_len,
                        got: bad.len(),
                    }),
                    None => Ok(()),
                }
            }
        }
    }

    fn forward_cached(
        &self,
        input: &NetInput,
    ) -> Result<(DMatrix<f64>, Vec<f64>, Cache), AgentError> {
        self.check_input(input)?;
        let p = &self.params;
        let mut h = input.features.clone();
        let mut trunk_in = Vec::with_capacity(self.layout.trunk.len());
        let mut trunk_pre = Vec::with_capacity(self.layout.trunk.len());
        for d in &self.layout.trunk {
            let pre = d.forward(p, &h);
            trunk_in.push(h);
            let mut a = pre.clone();
            relu(&mut a);
            trunk_pre.push(pre);
            h = a;
        }
        let motor_width = h.ncols();
        let (mut conv_in, mut conv_pre, mut fc_in, mut fc_pre) =
            (Vec::new(), Vec::new(), None, None);
        let z = match (&self.layout.visual_fc, &input.images) {
            (Some(fc), Some(images)) => {
                let flat_len = fc.n_in;
                let mut flat = DMatrix::zeros(images.len(), flat_len);
                for (s, img) in images.iter().enumerate() {
                    let mut x = img.clone();
                    let mut ins = Vec::with_capacity(3);
                    let mut pres = Vec::with_capacity(3);
                    for c in &self.layout.conv {
                        let pre = c.forward(p, &x);
                        ins.push(x);
                        x = pre.iter().map(|v| v.max(0.0)).collect();
                        pres.push(pre);
                    }
                    for (j, v) in x.iter().enumerate() {
                        flat[(s, j)] = *v;
                    }
                    conv_in.push(ins);
                    conv_pre.push(pres);
                }
                let pre = fc.forward(p, &flat);
                let mut v = pre.clone();
                relu(&mut v);
                fc_in = Some(flat);
                fc_pre = Some(pre);
                let mut z = DMatrix::zeros(h.nrows(), v.ncols() + motor_width);
                z.columns_mut(0, v.ncols()).copy_from(&v);
                z.columns_mut(v.ncols(), motor_width).copy_from(&h);
                z
            }
            _ => h,
        };
        let mean = self.layout.actor.forward(p, &z);
        let value = self
            .layout
            .critic
            .forward(p, &z)
            .column(0)
            .iter()
            .copied()
            .collect();
        Ok((
            mean,
            value,
            Cache {
                trunk_in,
                trunk_pre,
                conv_in,
                conv_pre,
                fc_in,
                fc_pre,
                z,
                motor_width,
            },
        ))
    }

    /// Action means (rows) and state values for a batch.
    pub fn forward(&self, input: &NetInput) -> Result<(DMatrix<f64>, Vec<f64>), AgentError> {
        let (m, v, _) = self.forward_cached(input)?;
        Ok((m, v))
    }

    fn backward(&self, cache: &Cache, dmean: &DMatrix<f64>, dvalue: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut g = vec![0.0; self.layout.total];
        let dv = DMatrix::from_column_slice(dvalue.len(), 1, dvalue);
        let mut dz = self
            .layout
            .actor
            .backward(p, &cache.z, dmean, &mut g, true)
            .expect("requested");
        dz += self
            .layout
            .critic
            .backward(p, &cache.z, &dv, &mut g, true)
            .expect("requested");
        let mw = cache.motor_width;
        let mut dh = if let (Some(fc), Some(fc_in), Some(fc_pre)) =
            (&self.layout.visual_fc, &cache.fc_in, &cache.fc_pre)
        {
            let vw = fc.n_out;
            let mut dvis = dz.columns(0, vw).into_owned();
            relu_grad(&mut dvis, fc_pre);
            let dflat = fc
                .backward(p, fc_in, &dvis, &mut g, true)
                .expect("requested");
            for s in 0..dflat.nrows() {
                let mut dx: Vec<f64> = dflat.row(s).iter().copied().collect();
                for (li, c) in self.layout.conv.iter().enumerate().rev() {
                    let pre = &cache.conv_pre[s][li];
                    for (d, pv) in dx.iter_mut().zip(pre) {
                        if *pv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dx = c.backward(p, &cache.conv_in[s][li], &dx, &mut g, li > 0);
                }
            }
            dz.columns(vw, mw).into_owned()
        } else {
            dz
        };
        for (i, d) in self.layout.trunk.iter().enumerate().rev() {
            relu_grad(&mut dh, &cache.trunk_pre[i]);
            match d.backward(p, &cache.trunk_in[i], &dh, &mut g, i > 0) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        g
    }
}

/// Mean and value for one observation.
pub fn policy_forward(
    net: &PolicyNet,
    features: &[f64],
    image: Option<&[f64]>,
) -> Result<(Vec<f64>, f64), AgentError> {
    let (m, v) = net.forward(&NetInput::single(features, image))?;
    Ok((m.row(0).iter().copied().collect(), v[0]))
}

/// Log-density of the unit-variance diagonal Gaussian.
pub fn log_prob(mean: &[f64], action: &[f64]) -> f64 {
    let sq: f64 = mean
        .iter()
        .zip(action)
        .map(|(m, a)| (a - m) * (a - m))
        .sum();
    -0.5 * sq - 0.5 * mean.len() as f64 * LN_2PI
}

/// Entropy of the unit-variance Gaussian in `dim` dimensions.
pub fn policy_entropy(dim: usize) -> f64 {
    0.5 * dim as f64 * (1.0 + LN_2PI)
}

pub fn sample_action(mean: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let a: Vec<f64> = mean
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + z
        })
        .collect();
    let lp = log_prob(mean, &a);
    (a, lp)
}

// ---------------------------------------------------------------------------
// observation normalization and optimizer

/// Running per-feature mean and variance (Welford), clipped standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub clip: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            clip: 10.0,
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for i in 0..self.mean.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.count < 2.0 {
            return x.to_vec();
        }
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let sd = (self.m2[i] / self.count).sqrt().max(1e-4);
                ((v - self.mean[i]) / sd).clamp(-self.clip, self.clip)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scales `g` so its norm is at most `cap`; returns the norm before scaling.
pub fn clip_grad_norm(g: &mut [f64], cap: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > cap && norm > 0.0 {
        let s = cap / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

// ---------------------------------------------------------------------------
// PPO

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub clip: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Steps collected per environment between updates.
    pub rollout_steps: usize,
    pub num_envs: usize,
    pub normalize_advantages: bool,
    pub normalize_observations: bool,
    pub net: NetConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            clip: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.001,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            rollout_steps: 256,
            num_envs: 8,
            normalize_advantages: true,
            normalize_observations: true,
            net: NetConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.num_envs == 0 {
            return bad("epochs, minibatch and num_envs must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Transitions stored time-major: index `t * n_envs + env`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub n_envs: usize,
    pub steps: usize,
    /// Normalized network inputs.
    pub features: Vec<f64>,
    pub images: Option<Vec<Vec<f64>>>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimate of the observation after the last step, per env.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// GAE(λ) advantages and returns, treating `done` as terminal.
pub fn compute_advantages(buf: &mut RolloutBuffer, discount: f64, lambda: f64) {
    let n = buf.n_envs;
    let t_len = buf.steps;
    buf.advantages = vec![0.0; buf.len()];
    for e in 0..n {
        let mut gae = 0.0;
        for t in (0..t_len).rev() {
            let i = t * n + e;
            let next_value = if t + 1 < t_len {
                buf.values[i + n]
            } else {
                buf.last_values[e]
            };
            let live = if buf.dones[i] { 0.0 } else { 1.0 };
            let delta = buf.rewards[i] + discount * next_value * live - buf.values[i];
            gae = delta + discount * lambda * live * gae;
            buf.advantages[i] = gae;
        }
    }
    buf.returns = buf
        .advantages
        .iter()
        .zip(&buf.values)
        .map(|(a, v)| a + v)
        .collect();
}

/// One minibatch for the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    pub input: NetInput,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn from_buffer(buf: &RolloutBuffer, idx: &[usize], advantages: &[f64]) -> Self {
        let (d, a) = (buf.obs_dim, buf.action_dim);
        let mut f = DMatrix::zeros(idx.len(), d);
        let mut act = DMatrix::zeros(idx.len(), a);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                f[(r, j)] = buf.features[i * d + j];
            }
            for j in 0..a {
                act[(r, j)] = buf.actions[i * a + j];
            }
        }
        Self {
            input: NetInput {
                features: f,
                images: buf
                    .images
                    .as_ref()
                    .map(|im| idx.iter().map(|&i| im[i].clone()).collect()),
            },
            actions: act,
            old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| advantages[i]).collect(),
            returns: idx.iter().map(|&i| buf.returns[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate + value + entropy loss and its gradient.
///
/// total = -mean(min(r·A, clip(r)·A)) + c_v·mean(½(V - R)²) - η·H
pub fn ppo_loss_and_grad(
    net: &PolicyNet,
    batch: &PpoBatch,
    cfg: &PpoConfig,
) -> Result<(LossParts, Vec<f64>), AgentError> {
    let (mean, value, cache) = net.forward_cached(&batch.input)?;
    let b = batch.input.batch();
    let a_dim = net.config.action_dim;
    let inv_b = 1.0 / b as f64;
    let mut dmean = DMatrix::zeros(b, a_dim);
    let mut dvalue = vec![0.0; b];
    let (mut pl, mut vl, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..b {
        let mut sq = 0.0;
        for j in 0..a_dim {
            let d = batch.actions[(i, j)] - mean[(i, j)];
            sq += d * d;
        }
        let lp = -0.5 * sq - 0.5 * a_dim as f64 * LN_2PI;
        let log_ratio = lp - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[i];
        let s1 = ratio * adv;
        let rc = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let s2 = rc * adv;
        pl -= s1.min(s2) * inv_b;
        if rc != ratio {
            clipped += inv_b;
        }
        kl += ((ratio - 1.0) - log_ratio) * inv_b;
        // gradient flows through the unclipped branch only when it is the minimum
        if s1 <= s2 {
            let coef = -ratio * adv * inv_b;
            for j in 0..a_dim {
                dmean[(i, j)] = coef * (batch.actions[(i, j)] - mean[(i, j)]);
            }
        }
        let err = value[i] - batch.returns[i];
        vl += 0.5 * err * err * inv_b;
        dvalue[i] = cfg.value_coef * err * inv_b;
    }
    let entropy = policy_entropy(a_dim);
    let total = pl + cfg.value_coef * vl - cfg.entropy_coef * entropy;
    if !total.is_finite() {
        return Err(AgentError::NonFiniteLoss);
    }
    let g = net.backward(&cache, &dmean, &dvalue);
    Ok((
        LossParts {
            policy: pl,
            value: vl,
            entropy,
            total,
            approx_kl: kl,
            clip_fraction: clipped,
        },
        g,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub config_hash: String,
    pub seed: u64,
    pub update: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_episode_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Runs the configured epochs of minibatch updates over a finished buffer.
pub fn ppo_update(
    net: &mut PolicyNet,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats, AgentError> {
    if buf.advantages.len() != buf.len() {
        return Err(AgentError::InvalidConfig(
            "advantages must be computed before the update".into(),
        ));
    }
    if buf
        .rewards
        .iter()
        .chain(&buf.features)
        .chain(&buf.actions)
        .any(|v| !v.is_finite())
    {
        return Err(AgentError::NonFiniteLoss);
    }
    let n = buf.len();
    let mut adv = buf.advantages.clone();
    if cfg.normalize_advantages && n > 1 {
        let m = adv.iter().sum::<f64>() / n as f64;
        let sd = (adv.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - m) / (sd + 1e-8));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        for chunk in idx.chunks(cfg.minibatch) {
            let batch = PpoBatch::from_buffer(buf, chunk, &adv);
            let (parts, mut g) = ppo_loss_and_grad(net, &batch, cfg)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AgentError::NonFiniteLoss);
            }
            let norm = clip_grad_norm(&mut g, cfg.max_grad_norm);
            adam.step(&mut net.params, &g);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.approx_kl += parts.approx_kl;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_norm += norm;
            stats.entropy = parts.entropy;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.approx_kl /= count;
        stats.clip_fraction /= count;
        stats.grad_norm /= count;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// tasks

/// What a task hands the policy: flat features and an optional image.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    pub features: Vec<f64>,
    pub image: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next: PolicyInput,
    pub reward: f64,
    pub done: bool,
    /// Set on the last step of an episode when the task defines success.
    pub success: Option<bool>,
}

pub trait Task {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, episode_seed: u64) -> Result<PolicyInput, AgentError>;
    /// Raw policy action; the task clamps and scales it.
    fn step(&mut self, action: &[f64]) -> Result<Transition, AgentError>;
}

/// Joint target for a raw action: midpoint plus half-range times the clamped action.
pub fn action_to_target(action: &[f64], limits: &JointLimits) -> RobotJointVector {
    let mut q = RobotJointVector::zeros();
    for i in 0..NUM_ROBOT_JOINTS {
        q[i] = limits.midpoint(i) + limits.half_range(i) * action[i].clamp(-1.0, 1.0);
    }
    q
}

/// Images flattened channel-major: intensity/255, depth, affordance/255.
pub fn image_tensor(obs: &Observation) -> Option<Vec<f64>> {
    obs.images.as_ref().map(|img| {
        let mut t = Vec::with_capacity(3 * img.intensity.len());
        t.extend(img.intensity.iter().map(|&v| v as f64 / 255.0));
        t.extend(img.depth.iter().map(|&v| v as f64));
        t.extend(img.affordance.iter().map(|&v| v as f64 / 255.0));
        t
    })
}

/// Grasping over a set of objects; each episode picks the next object in turn.
pub struct GraspTask {
    pub envs: Vec<GraspEnv>,
    pub noise: NoiseConfig,
    /// Offset so parallel tasks start on different objects.
    pub slot: usize,
    pub use_images: bool,
    pub record: bool,
    episode: u64,
    current: usize,
    state: Option<EnvState>,
    noise_state: NoiseState,
    log: Option<EpisodeLog>,
    lifted_tail: usize,
    pub last_log: Option<EpisodeLog>,
}

impl GraspTask {
    pub fn new(envs: Vec<GraspEnv>, noise: NoiseConfig, slot: usize) -> Self {
        Self {
            envs,
            noise,
            slot,
            use_images: false,
            record: false,
            episode: 0,
            current: 0,
            state: None,
            noise_state: NoiseState::default(),
            log: None,
            lifted_tail: 0,
            last_log: None,
        }
    }

    pub fn current_env(&self) -> &GraspEnv {
        &self.envs[self.current]
    }

    fn input(&self, obs: &Observation) -> PolicyInput {
        PolicyInput {
            features: obs.features(),
            image: if self.use_images {
                image_tensor(obs)
            } else {
                None
            },
        }
    }
}

impl Task for GraspTask {
    fn observation_dim(&self) -> usize {
        crate::simenv::OBSERVATION_FEATURES
    }

    fn action_dim(&self) -> usize {
        NUM_ROBOT_JOINTS
    }

    fn reset(&mut self, episode_seed: u64) -> Result<PolicyInput, AgentError> {
        self.current = (self.slot + self.episode as usize) % self.envs.len();
        self.episode += 1;
        let env = &self.envs[self.current];
        let (state, obs) = env.reset(episode_seed);
        self.noise_state = NoiseState::default();
        let noise = self
            .noise
            .with_seed(mix_seed(self.noise.seed, episode_seed));
        let (obs, ns) = perturb_observation(&obs, &noise, &self.noise_state);
        self.noise_state = ns;
        self.log = self.record.then(|| EpisodeLog::new(env, &state, ""));
        self.lifted_tail = 0;
        self.state = Some(state);
        Ok(self.input(&obs))
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition, AgentError> {
        if action.len() != NUM_ROBOT_JOINTS {
            return Err(AgentError::ShapeMismatch {
                expected: NUM_ROBOT_JOINTS,
                got: action.len(),
            });
        }
        let env = &self.envs[self.current];
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| AgentError::Env("step before reset".into()))?;
        let noise = self.noise.with_seed(mix_seed(self.noise.seed, state.seed));
        let target = action_to_target(action, &env.model.limits);
        let (target, ns) = perturb_action(&target, &noise, &self.noise_state);
        self.noise_state = ns;
        let r = env.step(state, &target)?;
        if let Some(log) = self.log.as_mut() {
            log.record(&target, &r);
        }
        self.lifted_tail = if r.state.lifted() {
            self.lifted_tail + 1
        } else {
            0
        };
        let (obs, ns) = perturb_observation(&r.observation, &noise, &self.noise_state);
        self.noise_state = ns;
        let success = r
            .done
            .then_some(self.lifted_tail >= crate::eval::SUCCESS_TAIL);
        if r.done {
            self.last_log = self.log.take();
        }
        let next = self.input(&obs);
        let reward = r.reward.total;
        self.state = Some(r.state);
        Ok(Transition {
            next,
            reward,
            done: r.done,
            success,
        })
    }
}

/// Reaching a fixed point on the plane from a random start, with a dense
/// negative-distance reward.
#[derive(Clone, Debug)]
pub struct ReachTask {
    pub horizon: usize,
    pub step_size: f64,
    pub goal: [f64; 2],
    pos: [f64; 2],
    t: usize,
}

impl Default for ReachTask {
    fn default() -> Self {
        Self {
            horizon: 50,
            step_size: 0.05,
            goal: [0.5, 0.5],
            pos: [0.0; 2],
            t: 0,
        }
    }
}

impl ReachTask {
    fn features(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.goal[0],
            self.goal[1],
            self.goal[0] - self.pos[0],
            self.goal[1] - self.pos[1],
        ]
    }

    fn distance(&self) -> f64 {
        (self.goal[0] - self.pos[0]).hypot(self.goal[1] - self.pos[1])
    }
}

impl Task for ReachTask {
    fn observation_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, episode_seed: u64) -> Result<PolicyInput, AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        self.pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.t = 0;
        Ok(PolicyInput {
            features: self.features(),
            image: None,
        })
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition, AgentError> {
        if action.len() != 2 {
            return Err(AgentError::ShapeMismatch {
                expected: 2,
                got: action.len(),
            });
        }
        for i in 0..2 {
            self.pos[i] =
                (self.pos[i] + self.step_size * action[i].clamp(-1.0, 1.0)).clamp(-1.5, 1.5);
        }
        self.t += 1;
        let done = self.t >= self.horizon;
        Ok(Transition {
            next: PolicyInput {
                features: self.features(),
                image: None,
            },
            reward: -self.distance(),
            done,
            success: None,
        })
    }
}

// ---------------------------------------------------------------------------
// rollouts and training

struct Slot {
    task: Box<dyn Task>,
    input: PolicyInput,
    episode_return: f64,
    episodes_started: u64,
}

/// Episode returns and outcomes finished during one rollout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

pub struct Trainer {
    pub cfg: PpoConfig,
    pub net: PolicyNet,
    pub adam: Adam,
    pub norm: RunningNorm,
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    /// Stamped into every stats line.
    pub config_hash: String,
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: PpoConfig, tasks: Vec<Box<dyn Task>>, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(AgentError::InvalidConfig("need at least one task".into()));
        }
        let net = PolicyNet::new(cfg.net.clone(), mix_seed(seed, 0))?;
        for t in &tasks {
            if t.observation_dim() != cfg.net.obs_dim || t.action_dim() != cfg.net.action_dim {
                return Err(AgentError::ShapeMismatch {
                    expected: cfg.net.obs_dim,
                    got: t.observation_dim(),
                });
            }
        }
        let adam = Adam::new(net.param_count(), cfg.learning_rate);
        let norm = RunningNorm::new(cfg.net.obs_dim);
        let mut slots = Vec::with_capacity(tasks.len());
        for (i, mut task) in tasks.into_iter().enumerate() {
            let input = task.reset(mix_seed(seed, episode_key(i, 0)))?;
            slots.push(Slot {
                task,
                input,
                episode_return: 0.0,
                episodes_started: 1,
            });
        }
        let mut t = Self {
            cfg,
            net,
            adam,
            norm,
            seed,
            env_steps: 0,
            updates: 0,
            config_hash: String::new(),
            slots,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 1)),
        };
        if t.cfg.normalize_observations {
            for i in 0..t.slots.len() {
                let f = t.slots[i].input.features.clone();
                t.norm.update(&f);
            }
        }
        Ok(t)
    }

    pub fn from_checkpoint(ck: &Checkpoint, tasks: Vec<Box<dyn Task>>) -> Result<Self, AgentError> {
        let mut t = Self::new(ck.ppo.clone(), tasks, ck.seed)?;
        t.net = ck.net.clone();
        t.adam = ck.adam.clone();
        t.norm = ck.norm.clone();
        t.env_steps = ck.env_steps;
        t.updates = ck.updates;
        Ok(t)
    }

    fn normalized(&self, f: &[f64]) -> Vec<f64> {
        if self.cfg.normalize_observations {
            self.norm.apply(f)
        } else {
            f.to_vec()
        }
    }

    /// Collects `steps` transitions from every task.
    pub fn collect(&mut self, steps: usize) -> Result<(RolloutBuffer, EpisodeSummary), AgentError> {
        let n = self.slots.len();
        let (d, a) = (self.cfg.net.obs_dim, self.cfg.net.action_dim);
        let visual = self.cfg.net.visual.is_some();
        let mut buf = RolloutBuffer {
            obs_dim: d,
            action_dim: a,
            n_envs: n,
            steps,
            images: visual.then(Vec::new),
            ..Default::default()
        };
        let mut summary = EpisodeSummary::default();
        for _ in 0..steps {
            let feats: Vec<Vec<f64>> = self
                .slots
                .iter()
                .map(|s| self.normalized(&s.input.features))
                .collect();
            let mut fm = DMatrix::zeros(n, d);
            for (r, f) in feats.iter().enumerate() {
                for j in 0..d {
                    fm[(r, j)] = f[j];
                }
            }
            let images = visual.then(|| {
                self.slots
                    .iter()
                    .map(|s| s.input.image.clone().unwrap_or_default())
                    .collect::<Vec<_>>()
            });
            let input = NetInput {
                features: fm,
                images: images.clone(),
            };
            let (means, values) = self.net.forward(&input)?;
            for (e, slot) in self.slots.iter_mut().enumerate() {
                let mean: Vec<f64> = means.row(e).iter().copied().collect();
                let (action, lp) = sample_action(&mean, &mut self.rng);
                let tr = slot.task.step(&action)?;
                buf.features.extend_from_slice(&feats[e]);
                if let (Some(all), Some(imgs)) = (buf.images.as_mut(), images.as_ref()) {
                    all.push(imgs[e].clone());
                }
                buf.actions.extend_from_slice(&action);
                buf.log_probs.push(lp);
                buf.values.push(values[e]);
                buf.rewards.push(tr.reward);
                buf.dones.push(tr.done);
                slot.episode_return += tr.reward;
                if tr.done {
                    summary.returns.push(slot.episode_return);
                    if let Some(s) = tr.success {
                        summary.successes.push(s);
                    }
                    slot.episode_return = 0.0;
                    let key = episode_key(e, slot.episodes_started);
                    slot.episodes_started += 1;
                    slot.input = slot.task.reset(mix_seed(self.seed, key))?;
                } else {
                    slot.input = tr.next;
                }
                if self.cfg.normalize_observations {
                    self.norm.update(&slot.input.features);
                }
            }
            self.env_steps += n as u64;
        }
        let feats: Vec<Vec<f64>> = self
            .slots
            .iter()
            .map(|s| self.normalized(&s.input.features))
            .collect();
        let mut fm = DMatrix::zeros(n, d);
        for (r, f) in feats.iter().enumerate() {
            for j in 0..d {
                fm[(r, j)] = f[j];
            }
        }
        let images = visual.then(|| {
            self.slots
                .iter()
                .map(|s| s.input.image.clone().unwrap_or_default())
                .collect()
        });
        buf.last_values = if steps > 0 {
            self.net
                .forward(&NetInput {
                    features: fm,
                    images,
                })?
                .1
        } else {
            vec![0.0; n]
        };
        Ok((buf, summary))
    }

    /// One collect-and-update cycle.
    pub fn iterate(&mut self) -> Result<UpdateStats, AgentError> {
        let (mut buf, summary) = self.collect(self.cfg.rollout_steps)?;
        compute_advantages(&mut buf, self.cfg.discount, self.cfg.gae_lambda);
        let mut stats = ppo_update(
            &mut self.net,
            &mut self.adam,
            &buf,
            &self.cfg,
            &mut self.rng,
        )?;
        self.updates += 1;
        stats.config_hash = self.config_hash.clone();
        stats.seed = self.seed;
        stats.update = self.updates;
        stats.env_steps = self.env_steps;
        stats.episodes = summary.returns.len();
        if !summary.returns.is_empty() {
            stats.mean_episode_return =
                Some(summary.returns.iter().sum::<f64>() / summary.returns.len() as f64);
        }
        if !summary.successes.is_empty() {
            stats.success_rate = Some(
                summary.successes.iter().filter(|&&s| s).count() as f64
                    / summary.successes.len() as f64,
            );
        }
        Ok(stats)
    }

    /// Trains until at least `total_steps` environment steps have been taken.
    pub fn train(
        &mut self,
        total_steps: u64,
        mut on_update: impl FnMut(&UpdateStats),
    ) -> Result<(), AgentError> {
        while self.env_steps < total_steps {
            let s = self.iterate()?;
            on_update(&s);
        }
        Ok(())
    }

    pub fn policy(&self) -> Policy {
        Policy {
            net: self.net.clone(),
            norm: self.cfg.normalize_observations.then(|| self.norm.clone()),
        }
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            seed: self.seed,
            env_steps: self.env_steps,
            updates: self.updates,
            ppo: self.cfg.clone(),
            net: self.net.clone(),
            adam: self.adam.clone(),
            norm: self.norm.clone(),
        }
    }
}

fn episode_key(slot: usize, episode: u64) -> u64 {
    ((slot as u64) << 40) | episode
}

/// A frozen policy: network plus observation normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub net: PolicyNet,
    pub norm: Option<RunningNorm>,
}

impl Policy {
    /// Deterministic action: the Gaussian mean.
    pub fn mean_action(&self, input: &PolicyInput) -> Result<Vec<f64>, AgentError> {
        let f = match &self.norm {
            Some(n) => n.apply(&input.features),
            None => input.features.clone(),
        };
        Ok(policy_forward(&self.net, &f, input.image.as_deref())?.0)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"GPPOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub ppo: PpoConfig,
    pub net: PolicyNet,
    pub adam: Adam,
    pub norm: RunningNorm,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    seed: u64,
    env_steps: u64,
    updates: u64,
    ppo: PpoConfig,
    adam_t: u64,
    adam_lr: f64,
    norm_count: f64,
    norm_clip: f64,
    params: usize,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_f64s(data: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>, AgentError> {
    let end = *pos + 8 * n;
    if end > data.len() {
        return Err(AgentError::Checkpoint("truncated".into()));
    }
    let v = data[*pos..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    *pos = end;
    Ok(v)
}

impl Checkpoint {
    pub fn policy(&self) -> Policy {
        Policy {
            net: self.net.clone(),
            norm: self.ppo.normalize_observations.then(|| self.norm.clone()),
        }
    }

    /// Magic, version, JSON header length and header, then little-endian f64
    /// arrays: parameters, Adam first and second moments, normalizer mean and m2.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            env_steps: self.env_steps,
            updates: self.updates,
            ppo: self.ppo.clone(),
            adam_t: self.adam.t,
            adam_lr: self.adam.lr,
            norm_count: self.norm.count,
            norm_clip: self.norm.clip,
            params: self.net.param_count(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + h.len() + 8 * 3 * self.net.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        put_f64s(&mut out, &self.net.params);
        put_f64s(&mut out, &self.adam.m);
        put_f64s(&mut out, &self.adam.v);
        put_f64s(&mut out, &self.norm.mean);
        put_f64s(&mut out, &self.norm.m2);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, AgentError> {
        let bad = |m: &str| AgentError::Checkpoint(m.to_string());
        if data.len() < 20 || &data[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes")) as usize;
        let mut pos = 20 + hlen;
        if pos > data.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&data[20..pos])
            .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        let mut net = PolicyNet::zeroed(header.ppo.net.clone())?;
        if net.param_count() != header.params {
            return Err(bad("parameter count does not match the network config"));
        }
        let n = header.params;
        let d = header.ppo.net.obs_dim;
        net.params = take_f64s(data, &mut pos, n)?;
        let m = take_f64s(data, &mut pos, n)?;
        let v = take_f64s(data, &mut pos, n)?;
        let mean = take_f64s(data, &mut pos, d)?;
        let m2 = take_f64s(data, &mut pos, d)?;
        if pos != data.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config_hash: header.config_hash,
            seed: header.seed,
            env_steps: header.env_steps,
            updates: header.updates,
            adam: Adam {
                lr: header.adam_lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: header.adam_t,
                m,
                v,
            },
            norm: RunningNorm {
                count: header.norm_count,
                mean,
                m2,
                clip: header.norm_clip,
            },
            ppo: header.ppo,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let mut f =
            std::fs::File::create(path).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| AgentError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let mut data = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut data))
            .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&data)
    }
}

/// Appends one JSON line per update.
pub fn write_stats_line<W: Write>(w: &mut W, stats: &UpdateStats) -> std::io::Result<()> {
    writeln!(
        w,
        "{}",
        serde_json::to_string(stats).map_err(std::io::Error::other)?
    )
}

/// Mean and standard deviation of episode returns for a fixed policy on the
/// reach task; `None` samples uniformly random clamped-Gaussian actions.
pub fn reach_returns(
    policy: Option<&Policy>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, AgentError> {
    let mut task = ReachTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut input = task.reset(mix_seed(seed, e as u64))?;
        let mut ret = 0.0;
        loop {
            let a = match policy {
                Some(p) => p.mean_action(&input)?,
                None => sample_action(&[0.0, 0.0], &mut rng).0,
            };
            let t = task.step(&a)?;
            ret += t.reward;
            input = t.next;
            if t.done {
                break;
            }
        }
        out.push(ret);
    }
    Ok(out)
}

pub fn reach_config() -> PpoConfig {
    PpoConfig {
        learning_rate: 3e-4,
        rollout_steps: 256,
        num_envs: 8,
        minibatch: 256,
        net: NetConfig {
            obs_dim: 6,
            hidden: vec![64, 64],
            action_dim: 2,
            visual: None,
        },
        ..PpoConfig::default()
    }
}

pub fn reach_trainer(cfg: PpoConfig, seed: u64) -> Result<Trainer, AgentError> {
    let tasks: Vec<Box<dyn Task>> = (0..cfg.num_envs)
        .map(|_| Box::new(ReachTask::default()) as Box<dyn Task>)
        .collect();
    Trainer::new(cfg, tasks, seed)
}

/// A trainer over `cfg.num_envs` grasp tasks sharing the object list; task
/// `i` starts on object `i` and cycles through the list.
pub fn grasp_trainer(
    cfg: PpoConfig,
    envs: &[GraspEnv],
    noise: &NoiseConfig,
    use_images: bool,
    seed: u64,
) -> Result<Trainer, AgentError> {
    if envs.is_empty() {
        return Err(AgentError::InvalidConfig("need at least one object".into()));
    }
    let tasks: Vec<Box<dyn Task>> = (0..cfg.num_envs)
        .map(|i| {
            let mut t = GraspTask::new(envs.to_vec(), noise.clone(), i);
            t.use_images = use_images;
            Box::new(t) as Box<dyn Task>
        })
        .collect();
    Trainer::new(cfg, tasks, seed)
}
