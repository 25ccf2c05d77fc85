//! Soft actor-critic with a TCN force-history encoder in the actor and twin
//! MLP critics.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nn::{
    concat_cols, relu2, relu3, relu_backward2, relu_backward3, Adam, CausalConv1d, Grads, Linear,
    ParamStore, Real,
};
use super::replay::{PrioritizedReplay, Sample};
use crate::error::{Error, Result};

const LOG_STD_MIN: Real = -5.0;
const LOG_STD_MAX: Real = 2.0;
const HALF_LOG_2PI: Real = 0.918_938_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub tcn_channels: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    /// Width of both the TCN and the observation encoders.
    pub feature_dim: usize,
    pub fusion_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            tcn_channels: 16,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4],
            feature_dim: 64,
            fusion_hidden: vec![128],
            critic_hidden: vec![128, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Initial (or fixed) entropy temperature.
    pub alpha: f64,
    pub auto_alpha: bool,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub network: NetworkSpec,
    pub per_alpha: f64,
    pub per_beta: f64,
    pub per_epsilon: f64,
    pub buffer_capacity: usize,
    pub total_steps: usize,
    /// Uniform random actions before the first update.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.2,
            auto_alpha: true,
            target_entropy: None,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            network: NetworkSpec::default(),
            per_alpha: 0.6,
            per_beta: 0.4,
            per_epsilon: 1e-3,
            buffer_capacity: 100_000,
            total_steps: 30_000,
            warmup_steps: 1_000,
            updates_per_step: 1,
            eval_interval: 1_000,
            eval_episodes: 6,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("batch_size and buffer_capacity must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        let n = &self.network;
        if n.tcn_channels == 0 || n.tcn_kernel == 0 || n.tcn_dilations.is_empty() || n.feature_dim == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Stack of dense layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    relu_output: bool,
}

struct MlpCache {
    inputs: Vec<Array2<Real>>,
    pre: Vec<Array2<Real>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        relu_output: bool,
        output_scale: Real,
        rng: &mut R,
    ) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let scale = if i + 1 == n { output_scale } else { 1.0 };
                Linear::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], scale, rng)
            })
            .collect();
        Self { layers, relu_output }
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_output
    }

    fn forward(&self, store: &ParamStore, x: ArrayView2<'_, Real>) -> (Array2<Real>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let pre = l.forward(store, h.view());
            let out = if self.activated(i) { relu2(&pre) } else { pre.clone() };
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = out;
        }
        (h, cache)
    }

    fn predict(&self, store: &ParamStore, x: ArrayView2<'_, Real>) -> Array2<Real> {
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let pre = l.forward(store, h.view());
            h = if self.activated(i) { relu2(&pre) } else { pre };
        }
        h
    }

    fn backward(&self, store: &ParamStore, cache: &MlpCache, dy: Array2<Real>, grads: &mut Grads) -> Array2<Real> {
        let mut g = dy;
        for (i, l) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                relu_backward2(&cache.pre[i], &mut g);
            }
            g = l.backward(store, cache.inputs[i].view(), g.view(), grads);
        }
        g
    }
}

/// Squashed-Gaussian policy: dilated causal TCN over the force history plus
/// a dense encoder of the remaining observation, fused into per-dimension
/// mean and log-std.
#[derive(Clone, Debug)]
pub struct Actor {
    pub store: ParamStore,
    convs: Vec<CausalConv1d>,
    tcn_fc: Mlp,
    obs_fc: Mlp,
    fusion: Mlp,
    pub history_channels: usize,
    pub history_len: usize,
    pub flat_dim: usize,
    pub action_dim: usize,
}

struct ActorCache {
    conv_inputs: Vec<Array3<Real>>,
    conv_pre: Vec<Array3<Real>>,
    tcn: MlpCache,
    obs: MlpCache,
    fusion: MlpCache,
    raw_log_std: Array2<Real>,
}

/// Per-sample policy output.
pub struct PolicyOutput {
    pub mean: Array2<Real>,
    pub log_std: Array2<Real>,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(
        spec: &NetworkSpec,
        history_channels: usize,
        history_len: usize,
        flat_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::default();
        let mut convs = Vec::new();
        let mut cin = history_channels;
        for (i, &d) in spec.tcn_dilations.iter().enumerate() {
            convs.push(CausalConv1d::new(
                &mut store,
                &format!("actor.tcn{i}"),
                cin,
                spec.tcn_channels,
                spec.tcn_kernel,
                d,
                rng,
            ));
            cin = spec.tcn_channels;
        }
        let tcn_fc = Mlp::new(
            &mut store,
            "actor.tcn_fc",
            &[spec.tcn_channels * history_len, spec.feature_dim],
            true,
            1.0,
            rng,
        );
        let obs_fc = Mlp::new(&mut store, "actor.obs_fc", &[flat_dim, spec.feature_dim], true, 1.0, rng);
        let mut sizes = vec![2 * spec.feature_dim];
        sizes.extend(&spec.fusion_hidden);
        sizes.push(2 * action_dim);
        let fusion = Mlp::new(&mut store, "actor.fusion", &sizes, false, 0.1, rng);
        Self {
            store,
            convs,
            tcn_fc,
            obs_fc,
            fusion,
            history_channels,
            history_len,
            flat_dim,
            action_dim,
        }
    }

    fn check(&self, hist: &ArrayView3<'_, Real>, flat: &ArrayView2<'_, Real>) -> Result<()> {
        let (b, c, n) = hist.dim();
        if c != self.history_channels || n != self.history_len {
            return Err(Error::ShapeMismatch(format!(
                "history {c}x{n}, expected {}x{}",
                self.history_channels, self.history_len
            )));
        }
        if flat.ncols() != self.flat_dim || flat.nrows() != b {
            return Err(Error::ShapeMismatch(format!(
                "flat features {}x{}, expected {b}x{}",
                flat.nrows(),
                flat.ncols(),
                self.flat_dim
            )));
        }
        Ok(())
    }

    fn forward_cached(
        &self,
        hist: ArrayView3<'_, Real>,
        flat: ArrayView2<'_, Real>,
    ) -> Result<(PolicyOutput, ActorCache)> {
        self.check(&hist, &flat)?;
        let b = hist.dim().0;
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        let mut h = hist.to_owned();
        for conv in &self.convs {
            let pre = conv.forward(&self.store, h.view());
            let out = relu3(&pre);
            conv_inputs.push(h);
            conv_pre.push(pre);
            h = out;
        }
        let flat_tcn = h
            .into_shape_with_order((b, self.convs.last().map_or(0, |c| c.out_channels) * self.history_len))
            .expect("contiguous");
        let (tcn_feat, tcn) = self.tcn_fc.forward(&self.store, flat_tcn.view());
        let (obs_feat, obs) = self.obs_fc.forward(&self.store, flat);
        let fused = concat_cols(tcn_feat.view(), obs_feat.view());
        let (out, fusion) = self.fusion.forward(&self.store, fused.view());
        let k = self.action_dim;
        let mean = out.slice(s![.., ..k]).to_owned();
        let raw = out.slice(s![.., k..]).to_owned();
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((
            PolicyOutput { mean, log_std },
            ActorCache {
                conv_inputs,
                conv_pre,
                tcn,
                obs,
                fusion,
                raw_log_std: raw,
            },
        ))
    }

    pub fn forward(&self, hist: ArrayView3<'_, Real>, flat: ArrayView2<'_, Real>) -> Result<PolicyOutput> {
        self.forward_cached(hist, flat).map(|(o, _)| o)
    }

    fn backward(&self, cache: &ActorCache, d_mean: &Array2<Real>, d_log_std: &Array2<Real>) -> Grads {
        let mut grads = self.store.zero_grads();
        let k = self.action_dim;
        let b = d_mean.nrows();
        let mut d_out = Array2::zeros((b, 2 * k));
        d_out.slice_mut(s![.., ..k]).assign(d_mean);
        let mut d_ls = d_log_std.clone();
        d_ls.zip_mut_with(&cache.raw_log_std, |g, &r| {
            if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&r) {
                *g = 0.0;
            }
        });
        d_out.slice_mut(s![.., k..]).assign(&d_ls);
        let d_fused = self.fusion.backward(&self.store, &cache.fusion, d_out, &mut grads);
        let f = d_fused.ncols() / 2;
        let d_tcn = d_fused.slice(s![.., ..f]).to_owned();
        let d_obs = d_fused.slice(s![.., f..]).to_owned();
        self.obs_fc.backward(&self.store, &cache.obs, d_obs, &mut grads);
        let d_flat = self.tcn_fc.backward(&self.store, &cache.tcn, d_tcn, &mut grads);
        let c = self.convs.last().map_or(0, |c| c.out_channels);
        let mut g = d_flat
            .into_shape_with_order((b, c, self.history_len))
            .expect("contiguous");
        for (i, conv) in self.convs.iter().enumerate().rev() {
            relu_backward3(&cache.conv_pre[i], &mut g);
            g = conv.backward(&self.store, cache.conv_inputs[i].view(), g.view(), &mut grads);
        }
        grads
    }
}

/// Sampled actions with log-probabilities and what the backward pass needs.
pub struct ActionSample {
    pub action: Array2<Real>,
    pub log_prob: Array1<Real>,
    noise: Array2<Real>,
}

/// Draw `tanh(mean + std * eps)` and its exact log-density.
pub fn sample_actions<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> ActionSample {
    let (b, k) = out.mean.dim();
    let noise = Array2::from_shape_fn((b, k), |_| rng.sample::<f64, _>(StandardNormal) as Real);
    let mut action = Array2::zeros((b, k));
    let mut log_prob = Array1::zeros(b);
    for i in 0..b {
        let mut lp = 0.0;
        for j in 0..k {
            let ls = out.log_std[[i, j]];
            let e = noise[[i, j]];
            let u = out.mean[[i, j]] + ls.exp() * e;
            action[[i, j]] = u.tanh();
            lp += -0.5 * e * e - ls - HALF_LOG_2PI - log1m_tanh2(u);
        }
        log_prob[i] = lp;
    }
    ActionSample {
        action,
        log_prob,
        noise,
    }
}

/// `ln(1 - tanh(u)²)` without cancellation.
fn log1m_tanh2(u: Real) -> Real {
    2.0 * (std::f32::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: Real) -> Real {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub store: ParamStore,
    mlp: Mlp,
    pub input_dim: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(name: &str, input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut store = ParamStore::default();
        let mut sizes = vec![input_dim];
        sizes.extend(hidden);
        sizes.push(1);
        let mlp = Mlp::new(&mut store, name, &sizes, false, 1.0, rng);
        Self { store, mlp, input_dim }
    }

    pub fn q(&self, input: ArrayView2<'_, Real>) -> Array1<Real> {
        self.mlp.predict(&self.store, input).column(0).to_owned()
    }

    fn forward(&self, input: ArrayView2<'_, Real>) -> (Array1<Real>, MlpCache) {
        let (out, cache) = self.mlp.forward(&self.store, input);
        (out.column(0).to_owned(), cache)
    }

    /// Parameter gradients and input gradient for per-sample output weights `dq`.
    fn backward(&self, cache: &MlpCache, dq: &Array1<Real>) -> (Grads, Array2<Real>) {
        let mut grads = self.store.zero_grads();
        let dy = dq.clone().insert_axis(Axis(1));
        let dx = self.mlp.backward(&self.store, cache, dy, &mut grads);
        (grads, dx)
    }
}

/// A replay minibatch as dense arrays.
#[derive(Clone, Debug)]
pub struct Batch {
    pub history: Array3<Real>,
    pub flat: Array2<Real>,
    pub action: Array2<Real>,
    pub reward: Array1<Real>,
    pub next_history: Array3<Real>,
    pub next_flat: Array2<Real>,
    pub done: Array1<Real>,
    pub weights: Array1<Real>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn from_replay(
        buffer: &PrioritizedReplay,
        sample: &Sample,
        history_channels: usize,
        history_len: usize,
    ) -> Result<Batch> {
        let b = sample.indices.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let first = buffer.get(sample.indices[0]);
        let (f, k) = (first.flat.len(), first.action.len());
        let hn = history_channels * history_len;
        let mut batch = Batch {
            history: Array3::zeros((b, history_channels, history_len)),
            flat: Array2::zeros((b, f)),
            action: Array2::zeros((b, k)),
            reward: Array1::zeros(b),
            next_history: Array3::zeros((b, history_channels, history_len)),
            next_flat: Array2::zeros((b, f)),
            done: Array1::zeros(b),
            weights: Array1::zeros(b),
        };
        for (row, (&i, &w)) in sample.indices.iter().zip(&sample.weights).enumerate() {
            let t = buffer.get(i);
            if t.history.len() != hn || t.flat.len() != f || t.action.len() != k {
                return Err(Error::ShapeMismatch(format!("transition {i} has inconsistent shapes")));
            }
            let mut h = batch.history.slice_mut(s![row, .., ..]);
            h.iter_mut().zip(&t.history).for_each(|(a, b)| *a = *b);
            let mut h = batch.next_history.slice_mut(s![row, .., ..]);
            h.iter_mut().zip(&t.next_history).for_each(|(a, b)| *a = *b);
            batch.flat.row_mut(row).iter_mut().zip(&t.flat).for_each(|(a, b)| *a = *b);
            batch.next_flat.row_mut(row).iter_mut().zip(&t.next_flat).for_each(|(a, b)| *a = *b);
            batch.action.row_mut(row).iter_mut().zip(&t.action).for_each(|(a, b)| *a = *b);
            batch.reward[row] = t.reward;
            batch.done[row] = if t.done { 1.0 } else { 0.0 };
            batch.weights[row] = w as Real;
        }
        Ok(batch)
    }
}

fn critic_input(hist: &ArrayView3<'_, Real>, flat: &ArrayView2<'_, Real>, action: &ArrayView2<'_, Real>) -> Array2<Real> {
    let (b, c, n) = hist.dim();
    let h = hist.to_owned().into_shape_with_order((b, c * n)).expect("contiguous");
    let x = concat_cols(flat.view(), h.view());
    concat_cols(x.view(), action.view())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    /// New PER priorities: `|TD error| + ε`.
    pub priorities: Vec<f64>,
}

/// Scalar Adam for the temperature.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub step: u64,
}

impl ScalarAdam {
    fn apply(&mut self, x: &mut f64, g: f64, lr: f64) {
        self.step += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.step as i32));
        let vh = self.v / (1.0 - 0.999f64.powi(self.step as i32));
        *x -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

pub struct Sac {
    pub config: SacConfig,
    pub actor: Actor,
    pub critics: [Critic; 2],
    pub targets: [Critic; 2],
    pub log_alpha: f64,
    pub actor_opt: Adam,
    pub critic_opts: [Adam; 2],
    pub alpha_opt: ScalarAdam,
    pub updates: u64,
}

impl Sac {
    pub fn new<R: Rng + ?Sized>(
        config: SacConfig,
        history_channels: usize,
        history_len: usize,
        flat_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let actor = Actor::new(&config.network, history_channels, history_len, flat_dim, action_dim, rng);
        let input = flat_dim + history_channels * history_len + action_dim;
        let hidden = config.network.critic_hidden.clone();
        let critics = [
            Critic::new("critic1", input, &hidden, rng),
            Critic::new("critic2", input, &hidden, rng),
        ];
        let targets = critics.clone();
        let actor_opt = Adam::new(&actor.store, config.actor_lr as Real);
        let critic_opts = [
            Adam::new(&critics[0].store, config.critic_lr as Real),
            Adam::new(&critics[1].store, config.critic_lr as Real),
        ];
        Ok(Self {
            log_alpha: config.alpha.max(1e-12).ln(),
            config,
            actor,
            critics,
            targets,
            actor_opt,
            critic_opts,
            alpha_opt: ScalarAdam::default(),
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        if self.config.alpha == 0.0 && !self.config.auto_alpha {
            0.0
        } else {
            self.log_alpha.exp()
        }
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.actor.action_dim as f64))
    }

    /// Action for a single observation; `deterministic` returns `tanh(mean)`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        history: &[f32],
        flat: &[f32],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let hist = ArrayView3::from_shape((1, self.actor.history_channels, self.actor.history_len), history)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let flat = ArrayView2::from_shape((1, self.actor.flat_dim), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let out = self.actor.forward(hist, flat)?;
        if deterministic {
            Ok(out.mean.row(0).iter().map(|m| m.tanh() as f64).collect())
        } else {
            let s = sample_actions(&out, rng);
            Ok(s.action.row(0).iter().map(|&a| a as f64).collect())
        }
    }

    /// Soft Bellman targets `r + γ (1 - done) (min Q' - α log π)`.
    pub fn compute_targets<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<Array1<Real>> {
        let out = self.actor.forward(batch.next_history.view(), batch.next_flat.view())?;
        let next = sample_actions(&out, rng);
        let input = critic_input(&batch.next_history.view(), &batch.next_flat.view(), &next.action.view());
        let q1 = self.targets[0].q(input.view());
        let q2 = self.targets[1].q(input.view());
        let alpha = self.alpha() as Real;
        let gamma = self.config.gamma as Real;
        Ok(Array1::from_shape_fn(batch.len(), |i| {
            let soft = q1[i].min(q2[i]) - alpha * next.log_prob[i];
            batch.reward[i] + gamma * (1.0 - batch.done[i]) * soft
        }))
    }

    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateReport> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let inv_b = 1.0 / b as Real;
        let y = self.compute_targets(batch, rng)?;

        // critics
        let input = critic_input(&batch.history.view(), &batch.flat.view(), &batch.action.view());
        let mut critic_loss = 0.0;
        let mut td = vec![0.0f64; b];
        for c in 0..2 {
            let (q, cache) = self.critics[c].forward(input.view());
            let diff = &q - &y;
            critic_loss += (0..b)
                .map(|i| (batch.weights[i] * diff[i] * diff[i]) as f64)
                .sum::<f64>()
                / b as f64;
            for (t, d) in td.iter_mut().zip(diff.iter()) {
                *t += 0.5 * (*d as f64).abs();
            }
            let dq = Array1::from_shape_fn(b, |i| 2.0 * batch.weights[i] * diff[i] * inv_b);
            let (grads, _) = self.critics[c].backward(&cache, &dq);
            self.critic_opts[c].apply(&mut self.critics[c].store, &grads);
        }

        // actor
        let alpha = self.alpha() as Real;
        let (out, cache) = self.actor.forward_cached(batch.history.view(), batch.flat.view())?;
        let pi = sample_actions(&out, rng);
        let input = critic_input(&batch.history.view(), &batch.flat.view(), &pi.action.view());
        let (q1, c1) = self.critics[0].forward(input.view());
        let (q2, c2) = self.critics[1].forward(input.view());
        let pick1 = Array1::from_shape_fn(b, |i| if q1[i] <= q2[i] { 1.0 } else { 0.0 });
        let pick2 = pick1.mapv(|p: Real| 1.0 - p);
        let (_, dx1) = self.critics[0].backward(&c1, &pick1);
        let (_, dx2) = self.critics[1].backward(&c2, &pick2);
        let k = self.actor.action_dim;
        let off = input.ncols() - k;
        let mut d_mean = Array2::zeros((b, k));
        let mut d_ls = Array2::zeros((b, k));
        let mut actor_loss = 0.0;
        for i in 0..b {
            actor_loss += (alpha * pi.log_prob[i] - q1[i].min(q2[i])) as f64;
            for j in 0..k {
                let a = pi.action[[i, j]];
                let qa = dx1[[i, off + j]] + dx2[[i, off + j]];
                let sig_eps = out.log_std[[i, j]].exp() * pi.noise[[i, j]];
                let squash = 1.0 - a * a;
                d_mean[[i, j]] = (alpha * 2.0 * a - qa * squash) * inv_b;
                d_ls[[i, j]] = (alpha * (2.0 * a * sig_eps - 1.0) - qa * squash * sig_eps) * inv_b;
            }
        }
        actor_loss /= b as f64;
        let grads = self.actor.backward(&cache, &d_mean, &d_ls);
        self.actor_opt.apply(&mut self.actor.store, &grads);

        // temperature
        let mean_lp = pi.log_prob.iter().map(|&v| v as f64).sum::<f64>() / b as f64;
        let mut alpha_loss = 0.0;
        if self.config.auto_alpha {
            let g = -(mean_lp + self.target_entropy());
            alpha_loss = self.log_alpha * g;
            let lr = self.config.alpha_lr;
            self.alpha_opt.apply(&mut self.log_alpha, g, lr);
            self.log_alpha = self.log_alpha.clamp(-20.0, 2.0);
        }

        let tau = self.config.tau as Real;
        for c in 0..2 {
            self.targets[c].store.polyak_from(&self.critics[c].store, tau);
        }
        self.updates += 1;
        let eps = self.config.per_epsilon;
        Ok(UpdateReport {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
            entropy: -mean_lp,
            priorities: td.into_iter().map(|t| t + eps).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::replay::{PerConfig, Transition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SacConfig {
        SacConfig {
            batch_size: 8,
            network: NetworkSpec {
                tcn_channels: 3,
                tcn_kernel: 2,
                tcn_dilations: vec![1, 2],
                feature_dim: 8,
                fusion_hidden: vec![8],
                critic_hidden: vec![8],
            },
            ..SacConfig::default()
        }
    }

    #[test]
    fn log_prob_is_finite_and_bounded_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sac = Sac::new(tiny(), 3, 12, 5, 2, &mut rng).unwrap();
        let hist = Array3::from_shape_fn((1000, 3, 12), |(i, c, t)| ((i + c * t) % 7) as Real - 3.0);
        let flat = Array2::from_shape_fn((1000, 5), |(i, j)| ((i * j) % 5) as Real * 0.5);
        let out = sac.actor.forward(hist.view(), flat.view()).unwrap();
        let s = sample_actions(&out, &mut rng);
        assert!(s.log_prob.iter().all(|v| v.is_finite()));
        assert!(s.action.iter().all(|a| (-1.0..=1.0).contains(a)));
        let det = sac.act(&vec![0.0; 36], &[0.0; 5], true, &mut rng).unwrap();
        assert!(det.iter().all(|a| a.abs() <= 1.0));
        assert!(matches!(
            sac.act(&vec![0.0; 30], &[0.0; 5], true, &mut rng),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn batch_of(n: usize, done: bool) -> (PrioritizedReplay, Batch) {
        let mut buf = PrioritizedReplay::new(PerConfig {
            capacity: 16,
            ..PerConfig::default()
        })
        .unwrap();
        for i in 0..n {
            buf.push(Transition {
                history: vec![0.1 * i as f32; 6],
                flat: vec![1.0, -1.0],
                action: vec![0.2],
                reward: i as f32,
                next_history: vec![0.0; 6],
                next_flat: vec![0.5, 0.5],
                done,
            });
        }
        let sample = Sample {
            indices: (0..n).collect(),
            weights: vec![1.0; n],
        };
        let batch = Batch::from_replay(&buf, &sample, 3, 2).unwrap();
        (buf, batch)
    }

    #[test]
    fn discount_free_targets_equal_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SacConfig {
            gamma: 0.5,
            ..tiny()
        };
        let sac = Sac::new(cfg, 3, 2, 2, 1, &mut rng).unwrap();
        let (_, batch) = batch_of(4, true);
        let y = sac.compute_targets(&batch, &mut rng).unwrap();
        assert_eq!(y, batch.reward);
    }

    #[test]
    fn unit_tau_copies_online_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SacConfig { tau: 1.0, ..tiny() };
        let mut sac = Sac::new(cfg, 3, 2, 2, 1, &mut rng).unwrap();
        let (_, batch) = batch_of(4, false);
        sac.update(&batch, &mut rng).unwrap();
        assert_eq!(sac.targets[0].store, sac.critics[0].store);
        assert_eq!(sac.targets[1].store, sac.critics[1].store);
    }

    #[test]
    fn gamma_must_be_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for g in [0.0, 1.0] {
            let cfg = SacConfig { gamma: g, ..tiny() };
            assert!(Sac::new(cfg, 3, 2, 2, 1, &mut rng).is_err());
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let (buf, _) = batch_of(2, false);
        let s = Sample {
            indices: vec![],
            weights: vec![],
        };
        assert!(matches!(Batch::from_replay(&buf, &s, 3, 2), Err(Error::EmptyBatch)));
    }
    #[test]
    fn zero_discount_targets_are_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sac = Sac::new(tiny(), 3, 2, 2, 1, &mut rng).unwrap();
        // outside the trainable range, but the target formula must still reduce to r
        sac.config.gamma = 0.0;
        let (_, batch) = batch_of(4, false);
        assert_eq!(sac.compute_targets(&batch, &mut rng).unwrap(), batch.reward);
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut actor = Actor::new(&tiny().network, 3, 6, 4, 2, &mut rng);
        let hist = Array3::from_shape_fn((3, 3, 6), |(i, c, t)| ((i * 7 + c * 3 + t) % 5) as Real * 0.4 - 0.8);
        let flat = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) % 3) as Real * 0.6 - 0.5);
        let wm = Array2::from_shape_fn((3, 2), |(i, j)| 1.0 + 0.5 * (i + j) as Real);
        let ws = Array2::from_shape_fn((3, 2), |(i, j)| 0.7 - 0.3 * (i * j) as Real);
        let loss = |a: &Actor| -> f64 {
            let o = a.forward(hist.view(), flat.view()).unwrap();
            ((&o.mean * &wm).sum() + (&o.log_std * &ws).sum()) as f64
        };
        let (_, cache) = actor.forward_cached(hist.view(), flat.view()).unwrap();
        let grads = actor.backward(&cache, &wm, &ws);
        let mut checked = 0;
        for p in 0..actor.store.params.len() {
            for k in [0usize, 5, 11] {
                if k >= actor.store.params[p].data.len() {
                    continue;
                }
                let h = 1e-2;
                let x0 = actor.store.params[p].data[k];
                actor.store.params[p].data[k] = x0 + h;
                let up = loss(&actor);
                actor.store.params[p].data[k] = x0 - h;
                let down = loss(&actor);
                actor.store.params[p].data[k] = x0;
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads.0[p][k] as f64;
                assert!(
                    (fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()) + 2e-3,
                    "{} [{k}]: fd {fd} vs analytic {an}",
                    actor.store.params[p].name
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    fn bandit(alpha: f64, seed: u64) -> (Sac, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SacConfig {
            alpha,
            auto_alpha: false,
            batch_size: 64,
            actor_lr: 1e-3,
            critic_lr: 3e-3,
            network: NetworkSpec {
                critic_hidden: vec![32, 32],
                ..tiny().network
            },
            ..tiny()
        };
        let mut sac = Sac::new(cfg, 3, 2, 2, 1, &mut rng).unwrap();
        let mut buf = PrioritizedReplay::new(PerConfig {
            capacity: 4096,
            alpha: 0.0,
            ..PerConfig::default()
        })
        .unwrap();
        let mut entropy = Vec::new();
        for step in 0..2063 {
            let a = if step < 256 {
                rng.random_range(-1.0..=1.0)
            } else {
                sac.act(&[0.0; 6], &[1.0, 0.0], false, &mut rng).unwrap()[0]
            };
            buf.push(Transition {
                history: vec![0.0; 6],
                flat: vec![1.0, 0.0],
                action: vec![a as f32],
                reward: -((a - 0.3) * (a - 0.3)) as f32,
                next_history: vec![0.0; 6],
                next_flat: vec![1.0, 0.0],
                done: true,
            });
            if buf.len() >= 64 {
                let s = buf.sample(64, &mut rng).unwrap();
                let batch = Batch::from_replay(&buf, &s, 3, 2).unwrap();
                entropy.push(sac.update(&batch, &mut rng).unwrap().entropy);
            }
        }
        assert_eq!(entropy.len(), 2000);
        // batch estimates are noisy; average the tail
        let tail = &entropy[entropy.len() - 200..];
        (sac, tail.iter().sum::<f64>() / tail.len() as f64)
    }

    #[test]
    fn learns_a_one_step_bandit() {
        let (sac, _) = bandit(0.05, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sac.act(&[0.0; 6], &[1.0, 0.0], true, &mut rng).unwrap()[0];
        assert!((a - 0.3).abs() < 0.05, "greedy action {a}");
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let e: Vec<f64> = [0.0, 0.05, 0.2].iter().map(|&alpha| bandit(alpha, 8).1).collect();
        assert!(e[0] < e[1] && e[1] < e[2], "entropies {e:?}");
    }
}
