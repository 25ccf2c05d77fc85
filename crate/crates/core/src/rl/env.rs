//! Slicing MDP on top of the co-simulation bridge.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{SpringModel, SpringScene};
use crate::bridge::{KnifeDriver, window_count, BridgeConfig, CoSim, ContactModel, RobotDriver, TraceRecord};
use crate::cutsim::{CutScene, FoodSpec, SimParams};
use crate::error::{Error, Result};
use crate::fdcc::{validate_gains, CompliantTarget, ControllerGains, GainBounds, Vec2};
use crate::robosim::{inverse_kinematics, ChainSpec};

/// Action dimension: `(Δy, Δz, K^c_y, K^c_z, K^p, K^d)`.
pub const ACTION_DIM: usize = 6;
/// Planar wrench components per history reading: `(f_y, f_z, τ)`.
pub const WRENCH_DIM: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    AsPrinted,
    #[default]
    Monotone,
}

/// How an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Collision,
    WorkspaceExit,
    Timeout,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::Collision => "collision",
            Self::WorkspaceExit => "workspace_exit",
            Self::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Completed, Self::Collision, Self::WorkspaceExit, Self::Timeout]
            .into_iter()
            .find(|t| t.as_str() == s)
    }

    /// Whether the value of the next state should be bootstrapped.
    pub fn is_truncation(self) -> bool {
        self == Self::Timeout
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub mode: RewardMode,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// N
    pub force_scale: f64,
    /// Knife height is divided by this before entering the height term, m.
    pub height_scale: f64,
    /// m/s³
    pub jerk_cap: f64,
    pub complete_bonus: f64,
    pub collision_penalty: f64,
    pub workspace_penalty: f64,
    pub step_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Monotone,
            w1: 1.0,
            w2: 0.3,
            w3: 0.01,
            force_scale: 20.0,
            height_scale: 0.05,
            jerk_cap: 1e4,
            complete_bonus: 100.0,
            collision_penalty: -100.0,
            workspace_penalty: -100.0,
            step_penalty: -1.0,
        }
    }
}

/// The penalty-table term for a step ending in `terminal` (`None` = episode continues).
pub fn penalty(terminal: Option<Termination>, cfg: &RewardConfig) -> f64 {
    match terminal {
        Some(Termination::Completed) => cfg.complete_bonus,
        Some(Termination::Collision) => cfg.collision_penalty,
        Some(Termination::WorkspaceExit) => cfg.workspace_penalty,
        Some(Termination::Timeout) | None => cfg.step_penalty,
    }
}

/// Per-step reward. `x_cut` is the knife height above the board in metres,
/// `force` the contact force magnitude, `jerk` the (unclipped) jerk norm.
pub fn compute_reward(
    x_cut: f64,
    force: f64,
    jerk: f64,
    terminal: Option<Termination>,
    cfg: &RewardConfig,
) -> f64 {
    let h = (x_cut.abs() / cfg.height_scale).tanh();
    let j = jerk.abs().min(cfg.jerk_cap);
    let p = penalty(terminal, cfg);
    match cfg.mode {
        RewardMode::AsPrinted => {
            // logistic written via exp(-f) so large forces do not overflow
            let e = (-force).exp();
            cfg.w1 * h - cfg.w2 * e / (1.0 + e) - cfg.w3 * j + p
        }
        RewardMode::Monotone => {
            -cfg.w1 * h - cfg.w2 * (force / cfg.force_scale).tanh() - cfg.w3 * j + p
        }
    }
}

/// Affine map between `[-1, 1]^k` and the configured action ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionBounds {
    /// Largest reference increment per agent step and axis, m.
    pub max_step: f64,
    pub gains: GainBounds,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            max_step: 2e-3,
            gains: GainBounds::default(),
        }
    }
}

impl ActionBounds {
    pub fn ranges(&self) -> [[f64; 2]; ACTION_DIM] {
        let g = &self.gains;
        [
            [-self.max_step, self.max_step],
            [-self.max_step, self.max_step],
            g.stiffness,
            g.stiffness,
            g.kp,
            g.kd,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.ranges() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("empty action range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn decode(&self, action: &[f64]) -> Result<[f64; ACTION_DIM]> {
        if action.len() != ACTION_DIM {
            return Err(Error::DimensionMismatch {
                expected: ACTION_DIM,
                got: action.len(),
            });
        }
        let mut out = [0.0; ACTION_DIM];
        for ((o, &a), [lo, hi]) in out.iter_mut().zip(action).zip(self.ranges()) {
            *o = lo + 0.5 * (a + 1.0) * (hi - lo);
        }
        Ok(out)
    }

    pub fn encode(&self, values: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for ((o, &v), [lo, hi]) in out.iter_mut().zip(values).zip(self.ranges()) {
            *o = 2.0 * (v - lo) / (hi - lo) - 1.0;
        }
        out
    }
}

/// Box around the slice plane, relative to the item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkspaceConfig {
    /// Half-width around the slice plane, m.
    pub lateral: f64,
    pub below_board: f64,
    pub above_food: f64,
    /// The reference stays this far inside the box so tracking overshoot
    /// alone does not end an episode, m.
    pub reference_margin: f64,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self {
            lateral: 0.03,
            below_board: 0.04,
            above_food: 0.03,
            reference_margin: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workspace {
    pub min: Vec2,
    pub max: Vec2,
}

impl Workspace {
    pub fn contains(&self, p: Vec2) -> bool {
        (0..2).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// The box shrunk by `margin` on every side (never past its centre).
    pub fn shrunk(&self, margin: f64) -> Workspace {
        let mut out = *self;
        for a in 0..2 {
            let m = margin.min(0.5 * (self.max[a] - self.min[a]));
            out.min[a] += m;
            out.max[a] -= m;
        }
        out
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        [p[0].clamp(self.min[0], self.max[0]), p[1].clamp(self.min[1], self.max[1])]
    }
}

/// Observation normalisation constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationScale {
    pub position: f64,
    pub velocity: f64,
    pub jerk: f64,
    pub force: f64,
    pub torque: f64,
}

impl Default for ObservationScale {
    fn default() -> Self {
        Self {
            position: 0.02,
            velocity: 0.05,
            jerk: 1e3,
            force: 10.0,
            torque: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    /// Collision threshold on the contact force magnitude, N.
    pub f_max: f64,
    /// Completion tolerance on the knife height above the board, m.
    pub target_tolerance: f64,
    /// Every spring must reach this damage for the slice to count as cut.
    pub completion_damage: f64,
    pub workspace: WorkspaceConfig,
    /// Start height above the food top, m.
    pub start_clearance: f64,
    pub max_steps: usize,
    /// s
    pub agent_period: f64,
    pub history_len: usize,
    pub action: ActionBounds,
    pub noise_fraction: f64,
    pub bridge: BridgeConfig,
    pub chain: ChainSpec,
    pub virtual_inertia: f64,
    pub virtual_mass: f64,
    /// Absolute angle of the last link at the start pose, rad.
    pub tool_angle: f64,
    pub elbow_up: bool,
    pub observation: ObservationScale,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            f_max: 40.0,
            target_tolerance: 1e-3,
            completion_damage: 0.99,
            workspace: WorkspaceConfig::default(),
            start_clearance: 0.005,
            max_steps: 200,
            agent_period: 0.05,
            history_len: 12,
            action: ActionBounds::default(),
            noise_fraction: 0.05,
            bridge: BridgeConfig::default(),
            chain: ChainSpec::default(),
            virtual_inertia: 1.0,
            virtual_mass: 1.0,
            tool_angle: -std::f64::consts::FRAC_PI_2,
            elbow_up: true,
            observation: ObservationScale::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.history_len < 1 {
            return Err(Error::Config("history_len must be at least 1".into()));
        }
        self.windows_per_step()?;
        self.action.validate()?;
        self.chain.validate()?;
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!(
                "noise_fraction must lie in [0, 1), got {}",
                self.noise_fraction
            )));
        }
        let positive = [
            ("f_max", self.f_max),
            ("target_tolerance", self.target_tolerance),
            ("virtual_inertia", self.virtual_inertia),
            ("virtual_mass", self.virtual_mass),
            ("reward.force_scale", self.reward.force_scale),
            ("reward.height_scale", self.reward.height_scale),
            ("reward.jerk_cap", self.reward.jerk_cap),
        ];
        if !(self.workspace.reference_margin >= 0.0) {
            return Err(Error::Config("workspace.reference_margin must be non-negative".into()));
        }
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Exchange windows per agent step.
    pub fn windows_per_step(&self) -> Result<usize> {
        if !(self.agent_period > 0.0) {
            return Err(Error::NonDivisibleTimestep {
                name: "agent_period",
                period: self.agent_period,
                dt: self.bridge.exchange_period,
            });
        }
        window_count(&self.bridge, self.agent_period).map_err(|_| Error::NonDivisibleTimestep {
            name: "agent_period",
            period: self.agent_period,
            dt: self.bridge.exchange_period,
        })
    }

    /// Workspace of an item.
    pub fn workspace_for(&self, food: &FoodSpec) -> Workspace {
        let w = &self.workspace;
        Workspace {
            min: [food.anchor_y - w.lateral, -w.below_board],
            max: [food.anchor_y + w.lateral, food.height + w.above_food],
        }
    }

    pub fn start_pose(&self, food: &FoodSpec) -> Vec2 {
        [food.anchor_y, food.height + self.start_clearance]
    }
}

/// Contact model for one food item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum ItemModel {
    Cutsim { params: SimParams },
    Baseline { spring: SpringModel },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvItem {
    pub food: FoodSpec,
    pub model: ItemModel,
}

impl EnvItem {
    /// Copy with every parameter scaled by an independent factor in `1 ± noise`.
    pub fn perturbed<R: Rng + ?Sized>(&self, noise: f64, rng: &mut R) -> Result<EnvItem> {
        let mut out = self.clone();
        if noise == 0.0 {
            return Ok(out);
        }
        let mut factor = || 1.0 + noise * (2.0 * rng.random::<f64>() - 1.0);
        match &mut out.model {
            ItemModel::Cutsim { params } => {
                let mut v = params.to_array();
                for x in v.iter_mut() {
                    *x *= factor();
                }
                *params = SimParams::from_array(v).clamped();
            }
            ItemModel::Baseline { spring } => {
                let (k, c) = spring.stiffness_damping()?;
                *spring = SpringModel::from_stiffness(
                    k * factor(),
                    c,
                    spring.h,
                    spring.rest_height,
                    spring.max_compression,
                    spring.board,
                )?;
            }
        }
        Ok(out)
    }

    fn contact(&self) -> Result<Box<dyn ContactModel>> {
        Ok(match &self.model {
            ItemModel::Cutsim { params } => Box::new(CutScene::new(self.food.clone(), *params)?),
            ItemModel::Baseline { spring } => Box::new(SpringScene::new(*spring)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Knife minus task target, m.
    pub pose_error: Vec2,
    pub velocity: Vec2,
    pub jerk: Vec2,
    /// Controller reference minus knife, m.
    pub reference_offset: Vec2,
    pub prev_action: [f64; ACTION_DIM],
    /// Oldest first; always `history_len` long.
    pub history: Vec<[f64; WRENCH_DIM]>,
}

/// Length of [`Observation::flat_features`].
pub const FLAT_FEATURES: usize = 8 + ACTION_DIM;

impl Observation {
    /// Scaled non-history features.
    pub fn flat_features(&self, s: &ObservationScale) -> [f32; FLAT_FEATURES] {
        let mut out = [0.0f32; FLAT_FEATURES];
        let scaled = [
            self.pose_error[0] / s.position,
            self.pose_error[1] / s.position,
            self.velocity[0] / s.velocity,
            self.velocity[1] / s.velocity,
            (self.jerk[0] / s.jerk).clamp(-10.0, 10.0),
            (self.jerk[1] / s.jerk).clamp(-10.0, 10.0),
            self.reference_offset[0] / s.position,
            self.reference_offset[1] / s.position,
        ];
        for (o, v) in out.iter_mut().zip(scaled.iter().chain(&self.prev_action)) {
            *o = *v as f32;
        }
        out
    }

    /// Scaled history, channel-major: `[channel][time]`.
    pub fn history_features(&self, s: &ObservationScale) -> Vec<f32> {
        let n = self.history.len();
        let mut out = vec![0.0f32; WRENCH_DIM * n];
        let div = [s.force, s.force, s.torque];
        for (t, w) in self.history.iter().enumerate() {
            for c in 0..WRENCH_DIM {
                out[c * n + t] = (w[c] / div[c]) as f32;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub records: Vec<TraceRecord>,
    /// Mean force magnitude over the step, N.
    pub mean_force: f64,
    pub peak_force: f64,
    pub jerk_norm: f64,
    pub gains: ControllerGains,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub termination: Option<Termination>,
    pub info: StepInfo,
}

struct Episode {
    sim: CoSim<Box<dyn ContactModel>, RobotDriver>,
    item: EnvItem,
    item_index: usize,
    workspace: Workspace,
    target: Vec2,
    reference: Vec2,
    prev_action: [f64; ACTION_DIM],
    history: VecDeque<[f64; WRENCH_DIM]>,
    velocity: Vec2,
    accel: Vec2,
    jerk: Vec2,
    steps: usize,
    done: bool,
}

pub struct SlicingEnv {
    pub config: EnvConfig,
    items: Vec<EnvItem>,
    episode: Option<Episode>,
}

impl SlicingEnv {
    pub fn new(config: EnvConfig, items: Vec<EnvItem>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            items,
            episode: None,
        })
    }

    pub fn items(&self) -> &[EnvItem] {
        &self.items
    }

    /// Sample an item uniformly, randomise it and start an episode.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Observation> {
        if self.items.is_empty() {
            return Err(Error::NoCalibratedItems);
        }
        let idx = rng.random_range(0..self.items.len());
        self.reset_item(idx, 0.0, rng)
    }

    /// Start an episode on item `index` with its slice plane shifted by `lateral_offset`.
    pub fn reset_item<R: Rng + ?Sized>(
        &mut self,
        index: usize,
        lateral_offset: f64,
        rng: &mut R,
    ) -> Result<Observation> {
        let base = self.items.get(index).ok_or(Error::NoCalibratedItems)?;
        let mut item = base.perturbed(self.config.noise_fraction, rng)?;
        item.food.anchor_y += lateral_offset;
        self.start(item, index)
    }

    /// Start an episode on an explicit item, bypassing the registry and noise.
    pub fn reset_with(&mut self, item: EnvItem) -> Result<Observation> {
        self.start(item, usize::MAX)
    }

    fn start(&mut self, item: EnvItem, item_index: usize) -> Result<Observation> {
        let cfg = &self.config;
        let start = cfg.start_pose(&item.food);
        let q = inverse_kinematics(&cfg.chain, start, cfg.tool_angle, cfg.elbow_up)?;
        let driver = RobotDriver::new(cfg.chain.clone(), q, cfg.virtual_inertia, cfg.virtual_mass)?;
        let sim = CoSim::new(cfg.bridge, item.contact()?, driver)?;
        let workspace = cfg.workspace_for(&item.food);
        let target = [item.food.anchor_y, 0.0];
        let history = std::iter::repeat_n([0.0; WRENCH_DIM], cfg.history_len).collect();
        self.episode = Some(Episode {
            sim,
            workspace,
            target,
            reference: start,
            prev_action: [0.0; ACTION_DIM],
            history,
            velocity: [0.0; 2],
            accel: [0.0; 2],
            jerk: [0.0; 2],
            steps: 0,
            done: false,
            item,
            item_index,
        });
        self.observe()
    }

    pub fn current_item(&self) -> Option<(&EnvItem, usize)> {
        self.episode.as_ref().map(|e| (&e.item, e.item_index))
    }

    pub fn steps(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.steps)
    }

    fn observe(&self) -> Result<Observation> {
        let ep = self.episode.as_ref().ok_or(Error::EpisodeFinished)?;
        let knife = ep.sim.driver.knife()?;
        Ok(Observation {
            pose_error: [knife.pose[0] - ep.target[0], knife.pose[1] - ep.target[1]],
            velocity: knife.velocity,
            jerk: ep.jerk,
            reference_offset: [ep.reference[0] - knife.pose[0], ep.reference[1] - knife.pose[1]],
            prev_action: ep.prev_action,
            history: ep.history.iter().copied().collect(),
        })
    }

    /// Apply a normalised action for one agent period.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let cfg = self.config.clone();
        let windows = cfg.windows_per_step()?;
        let ep = self.episode.as_mut().ok_or(Error::EpisodeFinished)?;
        if ep.done {
            return Err(Error::EpisodeFinished);
        }
        let clipped: Vec<f64> = action
            .iter()
            .map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) })
            .collect();
        let v = cfg.action.decode(&clipped)?;
        ep.reference = ep
            .workspace
            .shrunk(cfg.workspace.reference_margin)
            .clamp([ep.reference[0] + v[0], ep.reference[1] + v[1]]);
        let (gains, report) = validate_gains(
            ControllerGains {
                stiffness: [v[2], v[3]],
                kp: v[4],
                kd: v[5],
            },
            &cfg.action.gains,
        );
        let target = CompliantTarget::pose(ep.reference);

        let mut records = Vec::with_capacity(windows);
        let mut force_sum = [0.0; WRENCH_DIM];
        let mut mag_sum = 0.0;
        let mut peak: f64 = 0.0;
        let mut terminal = None;
        let tool_len = *cfg.chain.link_lengths.last().expect("validated chain");
        for _ in 0..windows {
            let rec = ep.sim.run_window(&target, &gains)?;
            let f = rec.force;
            let mag = f.magnitude();
            // torque of the contact force about the wrist
            let angle: f64 = ep.sim.driver.robot.q.iter().sum();
            let r = [tool_len * angle.cos(), tool_len * angle.sin()];
            let tau = r[0] * f.f_z - r[1] * f.f_y;
            force_sum[0] += f.f_y;
            force_sum[1] += f.f_z;
            force_sum[2] += tau;
            mag_sum += mag;
            peak = peak.max(mag);
            let outside = !ep.workspace.contains(rec.pose);
            records.push(rec);
            if mag > cfg.f_max {
                terminal = Some(Termination::Collision);
                break;
            }
            if outside {
                terminal = Some(Termination::WorkspaceExit);
                break;
            }
        }
        let n = records.len() as f64;
        let last = *records.last().expect("at least one window");
        ep.history.pop_front();
        ep.history.push_back(force_sum.map(|s| s / n));

        let dt = n * cfg.bridge.exchange_period;
        let accel = [
            (last.velocity[0] - ep.velocity[0]) / dt,
            (last.velocity[1] - ep.velocity[1]) / dt,
        ];
        ep.jerk = [(accel[0] - ep.accel[0]) / dt, (accel[1] - ep.accel[1]) / dt];
        ep.accel = accel;
        ep.velocity = last.velocity;
        let jerk_norm = ep.jerk[0].hypot(ep.jerk[1]);

        ep.steps += 1;
        ep.prev_action = std::array::from_fn(|i| clipped[i]);
        let height = last.pose[1] - ep.target[1];
        if terminal.is_none()
            && height.abs() <= cfg.target_tolerance
            && last.min_damage >= cfg.completion_damage
        {
            terminal = Some(Termination::Completed);
        }
        if terminal.is_none() && ep.steps >= cfg.max_steps {
            terminal = Some(Termination::Timeout);
        }
        let mean_force = mag_sum / n;
        let reward = compute_reward(height, mean_force, jerk_norm, terminal, &cfg.reward);
        ep.done = terminal.is_some();
        let done = ep.done;
        Ok(StepOutcome {
            observation: self.observe()?,
            reward,
            done,
            termination: terminal,
            info: StepInfo {
                records,
                mean_force,
                peak_force: peak,
                jerk_norm,
                gains,
                clamped: report.any(),
            },
        })
    }
}
