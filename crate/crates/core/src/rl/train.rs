//! Off-policy training loop, deterministic evaluation and per-item metrics.

use ndarray::{ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{Observation, ObservationScale, SlicingEnv, Termination, ACTION_DIM, FLAT_FEATURES, WRENCH_DIM};
use super::nn::ParamStore;
use super::replay::{PerConfig, PrioritizedReplay, Transition};
use super::sac::{Actor, Batch, Sac, SacConfig};
use crate::bridge::TraceRecord;
use crate::error::{Error, Result};

/// Anything that maps observations to normalised actions.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>>;
}

impl<F: FnMut(&Observation) -> Vec<f64>> Policy for F {
    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self(obs))
    }
}

/// Deterministic (`tanh(mean)`) actor.
pub struct GreedyPolicy<'a> {
    pub actor: &'a Actor,
    pub scale: ObservationScale,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Vec<f64>> {
        let a = self.actor;
        let hist = obs.history_features(&self.scale);
        let flat = obs.flat_features(&self.scale);
        let hist = ArrayView3::from_shape((1, a.history_channels, a.history_len), &hist)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let flat = ArrayView2::from_shape((1, a.flat_dim), &flat).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let out = a.forward(hist, flat)?;
        Ok(out.mean.row(0).iter().map(|m| m.tanh() as f64).collect())
    }
}

/// Where the knife is relative to the item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Air,
    Food,
    Board,
}

impl Phase {
    pub fn of(z: f64, food_height: f64, board_band: f64) -> Phase {
        if z <= board_band {
            Phase::Board
        } else if z < food_height {
            Phase::Food
        } else {
            Phase::Air
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Air => "air",
            Phase::Food => "food",
            Phase::Board => "board",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub item: String,
    pub slice: usize,
    pub steps: usize,
    pub episode_return: f64,
    pub peak_force: f64,
    /// Peak force while the knife is within the board band; 0 if never there.
    pub board_peak_force: f64,
    /// NaN if the phase never occurred.
    pub mean_food_force: f64,
    pub mean_board_force: f64,
    pub jerk_rms: f64,
    pub success: bool,
    pub duration: f64,
    pub termination: Termination,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quartiles by linear interpolation, ignoring NaN; `None` if nothing is left.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Some(Quartiles {
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub peak_force: Option<Quartiles>,
    pub board_peak_force: Option<Quartiles>,
    pub mean_food_force: Option<Quartiles>,
    pub mean_board_force: Option<Quartiles>,
    pub jerk_rms: Option<Quartiles>,
    pub duration: Option<Quartiles>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: Vec<EpisodeMetrics>,
}

impl Metrics {
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.episode_return).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn count(&self, kind: Termination) -> usize {
        self.episodes.iter().filter(|e| e.termination == kind).count()
    }

    /// Per-item aggregates in first-seen item order.
    pub fn by_item(&self) -> Vec<ItemSummary> {
        let mut names: Vec<&str> = Vec::new();
        for e in &self.episodes {
            if !names.contains(&e.item.as_str()) {
                names.push(&e.item);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let eps: Vec<&EpisodeMetrics> = self.episodes.iter().filter(|e| e.item == name).collect();
                let col = |f: fn(&EpisodeMetrics) -> f64| quartiles(&eps.iter().map(|e| f(e)).collect::<Vec<_>>());
                ItemSummary {
                    item: name.to_string(),
                    episodes: eps.len(),
                    success_rate: eps.iter().filter(|e| e.success).count() as f64 / eps.len() as f64,
                    peak_force: col(|e| e.peak_force),
                    board_peak_force: col(|e| e.board_peak_force),
                    mean_food_force: col(|e| e.mean_food_force),
                    mean_board_force: col(|e| e.mean_board_force),
                    jerk_rms: col(|e| e.jerk_rms),
                    duration: col(|e| e.duration),
                }
            })
            .collect()
    }
}

/// Slices of one item: count and thickness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceTask {
    pub item: String,
    pub slices: usize,
    /// m
    pub thickness: f64,
}

/// Cucumber 15 × 5 mm, tomato 5 × 5 mm, potato 10 × 3 mm, carrot 5 × 5 mm.
pub fn default_schedule() -> Vec<SliceTask> {
    [("cucumber", 15, 0.005), ("tomato", 5, 0.005), ("potato", 10, 0.003), ("carrot", 5, 0.005)]
        .into_iter()
        .map(|(item, slices, thickness)| SliceTask {
            item: item.into(),
            slices,
            thickness,
        })
        .collect()
}

/// One finished evaluation episode with its full exchange-window trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub metrics: EpisodeMetrics,
    pub food_height: f64,
    pub trace: Vec<TraceRecord>,
}

/// Run the current episode of `env` to the end under `policy`.
pub fn run_episode(
    env: &mut SlicingEnv,
    policy: &mut dyn Policy,
    first: Observation,
    slice: usize,
) -> Result<EpisodeRecord> {
    let (item, _) = env.current_item().ok_or(Error::EpisodeFinished)?;
    let name = item.food.name.clone();
    let height = item.food.height;
    let band = env.config.target_tolerance;
    let mut obs = first;
    let mut trace = Vec::new();
    let mut ret = 0.0;
    let mut jerk_sq = 0.0;
    let mut steps = 0;
    let termination = loop {
        let action = policy.act(&obs)?;
        let out = env.step(&action)?;
        ret += out.reward;
        jerk_sq += out.info.jerk_norm.powi(2);
        steps += 1;
        trace.extend(out.info.records);
        obs = out.observation;
        if let Some(t) = out.termination {
            break t;
        }
    };
    let (mut peak, mut board_peak) = (0.0f64, 0.0f64);
    let (mut food_sum, mut food_n, mut board_sum, mut board_n) = (0.0, 0usize, 0.0, 0usize);
    for r in &trace {
        let f = r.force.magnitude();
        peak = peak.max(f);
        match Phase::of(r.pose[1], height, band) {
            Phase::Food => {
                food_sum += f;
                food_n += 1;
            }
            Phase::Board => {
                board_sum += f;
                board_n += 1;
                board_peak = board_peak.max(f);
            }
            Phase::Air => {}
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(EpisodeRecord {
        metrics: EpisodeMetrics {
            item: name,
            slice,
            steps,
            episode_return: ret,
            peak_force: peak,
            board_peak_force: board_peak,
            mean_food_force: mean(food_sum, food_n),
            mean_board_force: mean(board_sum, board_n),
            jerk_rms: (jerk_sq / steps as f64).sqrt(),
            success: termination == Termination::Completed,
            duration: trace.last().map_or(0.0, |r| r.t),
            termination,
        },
        food_height: height,
        trace,
    })
}

/// `episodes` deterministic episodes on uniformly drawn items.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &mut dyn Policy,
    env: &mut SlicingEnv,
    episodes: usize,
    rng: &mut R,
) -> Result<Metrics> {
    if episodes == 0 {
        return Err(Error::NoEpisodes);
    }
    let mut m = Metrics::default();
    for i in 0..episodes {
        let obs = env.reset(rng)?;
        m.episodes.push(run_episode(env, policy, obs, i)?.metrics);
    }
    Ok(m)
}

/// Evaluate along a slicing schedule; each slice shifts the cut plane by one thickness.
pub fn evaluate_schedule<R: Rng + ?Sized>(
    policy: &mut dyn Policy,
    env: &mut SlicingEnv,
    schedule: &[SliceTask],
    rng: &mut R,
) -> Result<Vec<EpisodeRecord>> {
    if schedule.iter().map(|t| t.slices).sum::<usize>() == 0 {
        return Err(Error::NoEpisodes);
    }
    let mut out = Vec::new();
    for task in schedule {
        let index = env
            .items()
            .iter()
            .position(|it| it.food.name == task.item)
            .ok_or_else(|| Error::Config(format!("schedule names unknown item '{}'", task.item)))?;
        for s in 0..task.slices {
            let centre = 0.5 * (task.slices as f64 - 1.0);
            let offset = (s as f64 - centre) * task.thickness;
            let mut item = env.items()[index].perturbed(env.config.noise_fraction, rng)?;
            item.food.anchor_y += offset;
            item.food.slice_column_width = task.thickness;
            let obs = env.reset_with(item)?;
            out.push(run_episode(env, policy, obs, s)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_return: f64,
    pub success_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    /// Agent steps completed when the episode ended.
    pub step: usize,
    pub episode_return: f64,
    pub length: usize,
    pub termination: Termination,
}

pub struct TrainOutcome {
    pub sac: Sac,
    pub curve: Vec<CurvePoint>,
    pub episodes: Vec<EpisodeLog>,
    /// Actor parameters of the best periodic evaluation, with its step.
    pub best: Option<(usize, ParamStore)>,
    pub steps: usize,
}

/// Progress carried over when training resumes.
pub struct Resume {
    pub sac: Sac,
    pub steps: usize,
    pub curve: Vec<CurvePoint>,
    pub episodes: Vec<EpisodeLog>,
}

pub fn new_agent<R: Rng + ?Sized>(env: &SlicingEnv, config: &SacConfig, rng: &mut R) -> Result<Sac> {
    Sac::new(
        config.clone(),
        WRENCH_DIM,
        env.config.history_len,
        FLAT_FEATURES,
        ACTION_DIM,
        rng,
    )
}

fn uniform_action<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Standard off-policy loop with periodic deterministic evaluation on `eval_env`.
///
/// Evaluations reuse one fixed seed so successive curve points are comparable.
pub fn train<R: Rng + ?Sized>(
    env: &mut SlicingEnv,
    eval_env: &mut SlicingEnv,
    config: &SacConfig,
    rng: &mut R,
    resume: Option<Resume>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let scale = env.config.observation;
    let (mut sac, start, mut curve, mut episodes) = match resume {
        Some(r) => (r.sac, r.steps, r.curve, r.episodes),
        None => (new_agent(env, config, rng)?, 0, Vec::new(), Vec::new()),
    };
    sac.config = config.clone();
    let mut replay = PrioritizedReplay::new(PerConfig {
        capacity: config.buffer_capacity,
        alpha: config.per_alpha,
        beta: config.per_beta,
        epsilon: config.per_epsilon,
    })?;
    let eval_seed: u64 = rng.random();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    let mut obs: Option<Observation> = None;
    let mut ep_return = 0.0;
    let mut ep_len = 0;
    for step in start..config.total_steps {
        let current = match obs.take() {
            Some(o) => o,
            None => {
                ep_return = 0.0;
                ep_len = 0;
                env.reset(rng)?
            }
        };
        let hist = current.history_features(&scale);
        let flat = current.flat_features(&scale);
        let action = if step < config.warmup_steps && start == 0 {
            uniform_action(rng)
        } else {
            sac.act(&hist, &flat, false, rng)?
        };
        let out = env.step(&action)?;
        ep_return += out.reward;
        ep_len += 1;
        let terminal = out.termination.is_some_and(|t| !t.is_truncation());
        replay.push(Transition {
            history: hist,
            flat: flat.to_vec(),
            action: action.iter().map(|&a| a as f32).collect(),
            reward: out.reward as f32,
            next_history: out.observation.history_features(&scale),
            next_flat: out.observation.flat_features(&scale).to_vec(),
            done: terminal,
        });
        if let Some(t) = out.termination {
            episodes.push(EpisodeLog {
                step: step + 1,
                episode_return: ep_return,
                length: ep_len,
                termination: t,
            });
        } else {
            obs = Some(out.observation);
        }

        if step + 1 >= config.warmup_steps && replay.len() >= config.batch_size {
            for _ in 0..config.updates_per_step {
                let sample = replay.sample(config.batch_size, rng)?;
                let batch = Batch::from_replay(&replay, &sample, WRENCH_DIM, env.config.history_len)?;
                let report = sac.update(&batch, rng)?;
                for (&i, &p) in sample.indices.iter().zip(&report.priorities) {
                    replay.update_priority(i, p);
                }
            }
        }

        if config.eval_interval > 0 && (step + 1) % config.eval_interval == 0 && config.eval_episodes > 0 {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed);
            let mut policy = GreedyPolicy {
                actor: &sac.actor,
                scale,
            };
            let m = evaluate(&mut policy, eval_env, config.eval_episodes, &mut eval_rng)?;
            let point = CurvePoint {
                step: step + 1,
                mean_return: m.mean_return(),
                success_rate: m.success_rate(),
            };
            log::info!(
                "step {}: eval return {:.2}, success {:.2}, alpha {:.4}",
                point.step,
                point.mean_return,
                point.success_rate,
                sac.alpha()
            );
            if best.as_ref().is_none_or(|b| point.mean_return > b.1) {
                best = Some((point.step, point.mean_return, sac.actor.store.clone()));
            }
            curve.push(point);
        }
    }
    Ok(TrainOutcome {
        sac,
        curve,
        episodes,
        best: best.map(|(s, _, p)| (s, p)),
        steps: config.total_steps.max(start),
    })
}
