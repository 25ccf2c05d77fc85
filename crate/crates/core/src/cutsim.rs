//! Reduced-order cutting simulator.
//!
//! A slice column of `M` cut springs spans the cutting plane above a rigid
//! board at `z = 0`. The knife is an edge point moving in the `(y, z)` plane.
//! Springs resist the knife once it passes below their anchor height and
//! accumulate damage proportional to the force they carry, weakening until
//! they carry nothing. All contact gates are softplus-smoothed so the force
//! profile is differentiable in the six calibration parameters, and
//! [`loss_and_gradient`] propagates exact forward sensitivities through the
//! time loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sharpness of the softplus contact gates, in 1/m.
pub const SOFTPLUS_BETA: f64 = 1e3;

/// Number of calibration parameters.
pub const N_PARAMS: usize = 6;

/// `ln(1 + exp(beta * x)) / beta`, evaluated without overflow.
#[inline]
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 35.0 {
        x
    } else if bx < -35.0 {
        bx.exp() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// The six calibration parameters of the cutting model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    /// Cut spring stiffness, N/m.
    pub cut_spring_stiffness: f64,
    /// Force scale that sets how fast a loaded spring weakens, N.
    pub cut_spring_softness: f64,
    /// Board contact stiffness, N/m.
    pub contact_stiffness: f64,
    /// Board contact damping, N s/m.
    pub contact_damping: f64,
    /// Pre-sliding slope of the smooth Coulomb friction law.
    pub contact_friction_stiffness: f64,
    /// Coulomb friction coefficient.
    pub contact_friction_coeff: f64,
}

impl SimParams {
    pub const NAMES: [&'static str; N_PARAMS] = [
        "cut_spring_stiffness",
        "cut_spring_softness",
        "contact_stiffness",
        "contact_damping",
        "contact_friction_stiffness",
        "contact_friction_coeff",
    ];

    /// Admissible interval of each parameter, in [`SimParams::NAMES`] order.
    pub const RANGES: [(f64, f64); N_PARAMS] = [
        (100.0, 8000.0),
        (10.0, 5000.0),
        (200.0, 8000.0),
        (0.1, 100.0),
        (0.001, 8000.0),
        (0.45, 1.0),
    ];

    pub fn from_array(v: [f64; N_PARAMS]) -> Self {
        Self {
            cut_spring_stiffness: v[0],
            cut_spring_softness: v[1],
            contact_stiffness: v[2],
            contact_damping: v[3],
            contact_friction_stiffness: v[4],
            contact_friction_coeff: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.cut_spring_stiffness,
            self.cut_spring_softness,
            self.contact_stiffness,
            self.contact_damping,
            self.contact_friction_stiffness,
            self.contact_friction_coeff,
        ]
    }

    /// Midpoint of every admissible interval.
    pub fn midpoint() -> Self {
        let mut v = [0.0; N_PARAMS];
        for (x, (lo, hi)) in v.iter_mut().zip(Self::RANGES) {
            *x = 0.5 * (lo + hi);
        }
        Self::from_array(v)
    }

    pub fn validate(&self) -> Result<()> {
        for ((value, name), (lower, upper)) in
            self.to_array().into_iter().zip(Self::NAMES).zip(Self::RANGES)
        {
            if !(value >= lower && value <= upper) {
                return Err(Error::ParamOutOfRange {
                    field: name,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    pub fn clamped(&self) -> Self {
        let mut v = self.to_array();
        for (x, (lo, hi)) in v.iter_mut().zip(Self::RANGES) {
            *x = x.clamp(lo, hi);
        }
        Self::from_array(v)
    }
}

/// Geometry of one food item's slice column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoodSpec {
    pub name: String,
    /// Height of the item above the board, m.
    pub height: f64,
    /// Slice thickness, m.
    pub slice_column_width: f64,
    /// Number of cut springs along the column.
    pub spring_count: usize,
    /// Lateral position of the slice plane, m.
    pub anchor_y: f64,
}

impl FoodSpec {
    /// Anchor heights `z_i = (i + 0.5) * height / M`.
    pub fn spring_heights(&self) -> Vec<f64> {
        let m = self.spring_count as f64;
        (0..self.spring_count)
            .map(|i| (i as f64 + 0.5) * self.height / m)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.spring_count == 0 {
            return Err(Error::ParamOutOfRange {
                field: "spring_count",
                value: 0.0,
                lower: 1.0,
                upper: f64::INFINITY,
            });
        }
        for (field, value) in [
            ("height", self.height),
            ("slice_column_width", self.slice_column_width),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::ParamOutOfRange {
                    field,
                    value,
                    lower: 0.0,
                    upper: f64::INFINITY,
                });
            }
        }
        Ok(())
    }
}

/// Knife edge state in the cutting plane.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KnifeState {
    /// `(y, z)`, m.
    pub pose: [f64; 2],
    /// `(dy/dt, dz/dt)`, m/s.
    pub velocity: [f64; 2],
    pub time: f64,
}

impl KnifeState {
    pub fn is_finite(&self) -> bool {
        self.pose.iter().chain(&self.velocity).all(|v| v.is_finite())
    }
}

/// Wrench exerted on the knife by the environment.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContactForce {
    pub f_y: f64,
    pub f_z: f64,
    /// Summed cut-spring resistance (vertical).
    pub spring: f64,
    /// Lateral friction.
    pub friction: f64,
    /// Board repulsion (vertical, never negative).
    pub board: f64,
}

impl ContactForce {
    pub fn magnitude(&self) -> f64 {
        self.f_y.hypot(self.f_z)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.f_y, self.f_z]
    }
}

/// One row of a force recording.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileSample {
    pub t: f64,
    pub f_y: f64,
    pub f_z: f64,
    /// Knife height above the board when the sample was taken.
    pub z: f64,
}

impl ProfileSample {
    pub fn magnitude(&self) -> f64 {
        self.f_y.hypot(self.f_z)
    }
}

/// Time-stamped contact-force recording with strictly increasing time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForceProfile {
    samples: Vec<ProfileSample>,
}

impl ForceProfile {
    pub fn new(samples: Vec<ProfileSample>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidParam(format!(
                    "profile time not strictly increasing at sample {}",
                    i + 1
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[ProfileSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.t)
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.t, self.samples.last()?.t))
    }

    pub fn peak_magnitude(&self) -> Option<f64> {
        self.samples
            .iter()
            .map(ProfileSample::magnitude)
            .reduce(f64::max)
    }

    /// Linear interpolation of every column at `t`; `None` outside the range.
    pub fn sample_at(&self, t: f64) -> Option<ProfileSample> {
        let (k, w) = bracket(self.samples.len(), |i| self.samples[i].t, t)?;
        let a = &self.samples[k];
        if w == 0.0 {
            return Some(ProfileSample { t, ..*a });
        }
        let b = &self.samples[k + 1];
        let lerp = |x: f64, y: f64| x + w * (y - x);
        Some(ProfileSample {
            t,
            f_y: lerp(a.f_y, b.f_y),
            f_z: lerp(a.f_z, b.f_z),
            z: lerp(a.z, b.z),
        })
    }

    fn magnitude_at(&self, t: f64) -> Option<f64> {
        let (k, w) = bracket(self.samples.len(), |i| self.samples[i].t, t)?;
        let a = self.samples[k].magnitude();
        if w == 0.0 {
            return Some(a);
        }
        Some(a + w * (self.samples[k + 1].magnitude() - a))
    }
}

/// Locate `t` in a sorted time axis: returns `(k, w)` with
/// `t = time(k) + w * (time(k + 1) - time(k))`, `w ∈ [0, 1)`.
fn bracket(n: usize, time: impl Fn(usize) -> f64, t: f64) -> Option<(usize, f64)> {
    if n == 0 || t < time(0) || t > time(n - 1) {
        return None;
    }
    // first index with time > t
    let (mut lo, mut hi) = (0usize, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if time(mid) <= t {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let k = lo - 1;
    if k + 1 == n || time(k) == t {
        return Some((k, 0.0));
    }
    let (t0, t1) = (time(k), time(k + 1));
    Some((k, (t - t0) / (t1 - t0)))
}

/// A time-indexed source of knife states.
pub trait KnifeTrajectory {
    fn state_at(&self, t: f64) -> KnifeState;
}

impl<F: Fn(f64) -> KnifeState> KnifeTrajectory for F {
    fn state_at(&self, t: f64) -> KnifeState {
        self(t)
    }
}

/// Vertical descent at constant speed from `start` until `stop_z`, then hold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantSpeedDescent {
    pub start: [f64; 2],
    /// Downward speed, m/s (positive).
    pub speed: f64,
    pub stop_z: f64,
}

impl ConstantSpeedDescent {
    pub fn arrival_time(&self) -> f64 {
        ((self.start[1] - self.stop_z) / self.speed).max(0.0)
    }
}

impl KnifeTrajectory for ConstantSpeedDescent {
    fn state_at(&self, t: f64) -> KnifeState {
        let z = self.start[1] - self.speed * t;
        if z > self.stop_z {
            KnifeState {
                pose: [self.start[0], z],
                velocity: [0.0, -self.speed],
                time: t,
            }
        } else {
            KnifeState {
                pose: [self.start[0], self.stop_z],
                velocity: [0.0, 0.0],
                time: t,
            }
        }
    }
}

/// Cutting scene: one food item on the board, with per-spring damage.
#[derive(Clone, Debug, PartialEq)]
pub struct CutScene {
    pub food: FoodSpec,
    pub params: SimParams,
    damage: Vec<f64>,
    heights: Vec<f64>,
    pub board_height: f64,
    pub sim_time: f64,
    pub beta: f64,
}

/// Derivatives of `(f_y, f_z)` with respect to the six parameters.
type ForceJacobian = [[f64; N_PARAMS]; 2];

impl CutScene {
    /// Fresh scene with every spring intact.
    pub fn new(food: FoodSpec, params: SimParams) -> Result<Self> {
        params.validate()?;
        food.validate()?;
        let heights = food.spring_heights();
        Ok(Self {
            damage: vec![0.0; food.spring_count],
            heights,
            food,
            params,
            board_height: 0.0,
            sim_time: 0.0,
            beta: SOFTPLUS_BETA,
        })
    }

    pub fn damage(&self) -> &[f64] {
        &self.damage
    }

    pub fn min_damage(&self) -> f64 {
        self.damage.iter().copied().fold(1.0, f64::min)
    }

    pub fn mean_damage(&self) -> f64 {
        self.damage.iter().sum::<f64>() / self.damage.len() as f64
    }

    /// Back to the intact state at time zero, keeping food and parameters.
    pub fn reset(&mut self) {
        self.damage.iter_mut().for_each(|d| *d = 0.0);
        self.sim_time = 0.0;
    }

    /// Advance damage by `dt` against the knife and return the contact wrench.
    pub fn step(&mut self, knife: &KnifeState, dt: f64) -> Result<ContactForce> {
        self.step_inner(knife, dt, None).map(|(f, _)| f)
    }

    fn step_inner(
        &mut self,
        knife: &KnifeState,
        dt: f64,
        mut sens: Option<&mut [[f64; N_PARAMS]]>,
    ) -> Result<(ContactForce, ForceJacobian)> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
        }
        if !knife.is_finite() {
            return Err(Error::NonFiniteState(format!("knife state {knife:?}")));
        }
        let p = &self.params;
        let (ks, sigma) = (p.cut_spring_stiffness, p.cut_spring_softness);
        let z = knife.pose[1] - self.board_height;
        let vz = knife.velocity[1];
        let vy = knife.velocity[0];
        let beta = self.beta;

        let mut spring = 0.0;
        let mut d_spring = [0.0; N_PARAMS];
        for (i, (d, &zi)) in self.damage.iter_mut().zip(&self.heights).enumerate() {
            let pen = softplus(zi - z, beta);
            let intact = 1.0 - *d;
            let f = ks * intact * pen;
            spring += f;
            let next = *d + dt * f / sigma;
            if let Some(s) = sens.as_deref_mut() {
                let s = &mut s[i];
                // df/dp = e_ks (1 - d) pen - ks pen dd/dp
                let mut df = [0.0; N_PARAMS];
                for (k, dfk) in df.iter_mut().enumerate() {
                    *dfk = -ks * pen * s[k];
                }
                df[0] += intact * pen;
                for k in 0..N_PARAMS {
                    d_spring[k] += df[k];
                }
                if next >= 1.0 {
                    *s = [0.0; N_PARAMS];
                } else {
                    for k in 0..N_PARAMS {
                        s[k] += dt * df[k] / sigma;
                    }
                    s[1] -= dt * f / (sigma * sigma);
                }
            }
            *d = next.min(1.0);
        }

        let pen_board = softplus(-z, beta);
        let sink = if z < 0.0 { (-vz).max(0.0) } else { 0.0 };
        let board = p.contact_stiffness * pen_board + p.contact_damping * sink;
        let normal = spring + board;
        let slip = (p.contact_friction_stiffness * vy).tanh();
        let friction = -p.contact_friction_coeff * normal * slip;

        let mut jac = [[0.0; N_PARAMS]; 2];
        if sens.is_some() {
            let mut d_normal = d_spring;
            d_normal[2] += pen_board;
            d_normal[3] += sink;
            for k in 0..N_PARAMS {
                jac[1][k] = d_normal[k];
                jac[0][k] = -p.contact_friction_coeff * slip * d_normal[k];
            }
            jac[0][5] += -normal * slip;
            jac[0][4] += -p.contact_friction_coeff * normal * (1.0 - slip * slip) * vy;
        }

        self.sim_time += dt;
        let force = ContactForce {
            f_y: friction,
            f_z: normal,
            spring,
            friction,
            board,
        };
        if !(force.f_y.is_finite() && force.f_z.is_finite()) {
            return Err(Error::NonFiniteState(format!(
                "contact force at t = {}",
                self.sim_time
            )));
        }
        Ok((force, jac))
    }
}

/// Build a fresh scene for `food` with calibration parameters `params`.
pub fn build_scene(food: FoodSpec, params: SimParams) -> Result<CutScene> {
    CutScene::new(food, params)
}

/// Number of `dt` steps covering `duration`, rejecting grids that do not divide it.
pub fn step_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "need dt > 0 and duration >= 0, got dt = {dt}, duration = {duration}"
        )));
    }
    let n = (duration / dt).round();
    if (n * dt - duration).abs() > 1e-9 * duration.max(dt) {
        return Err(Error::InvalidParam(format!(
            "dt = {dt} does not divide duration = {duration}"
        )));
    }
    Ok(n as usize)
}

/// Run the scene against a knife trajectory, recording one sample per step.
///
/// Sample `k` is taken at `t_k = k * dt` with the force produced by the step
/// that starts there.
pub fn simulate_trace(
    scene: &mut CutScene,
    trajectory: &dyn KnifeTrajectory,
    dt: f64,
    duration: f64,
) -> Result<ForceProfile> {
    let n = step_count(duration, dt)?;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let knife = trajectory.state_at(t);
        let f = scene.step(&knife, dt)?;
        samples.push(ProfileSample {
            t,
            f_y: f.f_y,
            f_z: f.f_z,
            z: knife.pose[1],
        });
    }
    Ok(ForceProfile { samples })
}

/// Mean squared error of force magnitude on `reference`'s time grid, with
/// `sim` linearly interpolated. Reference samples outside `sim`'s time
/// range are skipped.
pub fn profile_loss(sim: &ForceProfile, reference: &ForceProfile) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in reference.samples() {
        if let Some(m) = sim.magnitude_at(r.t) {
            let e = m - r.magnitude();
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(sum / count as f64)
}

/// Gradient of [`profile_loss`] with respect to the six parameters for a
/// fresh scene driven along `trajectory`.
pub fn loss_gradient(
    food: &FoodSpec,
    trajectory: &dyn KnifeTrajectory,
    reference: &ForceProfile,
    params: &SimParams,
    dt: f64,
    duration: f64,
) -> Result<[f64; N_PARAMS]> {
    loss_and_gradient(food, trajectory, reference, params, dt, duration).map(|(_, g)| g)
}

/// Loss and its exact gradient, computed by forward sensitivity analysis of
/// the damage state through the time loop.
pub fn loss_and_gradient(
    food: &FoodSpec,
    trajectory: &dyn KnifeTrajectory,
    reference: &ForceProfile,
    params: &SimParams,
    dt: f64,
    duration: f64,
) -> Result<(f64, [f64; N_PARAMS])> {
    loss_and_gradient_sum(food, trajectory, &[reference], params, dt, duration)
}

/// Summed loss and gradient over several references sharing one knife
/// trajectory; the scene is simulated once.
pub fn loss_and_gradient_sum(
    food: &FoodSpec,
    trajectory: &dyn KnifeTrajectory,
    references: &[&ForceProfile],
    params: &SimParams,
    dt: f64,
    duration: f64,
) -> Result<(f64, [f64; N_PARAMS])> {
    let mut scene = CutScene::new(food.clone(), *params)?;
    let n = step_count(duration, dt)?;
    let mut sens = vec![[0.0; N_PARAMS]; food.spring_count];
    let mut mags = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let knife = trajectory.state_at(t);
        let (f, jac) = scene.step_inner(&knife, dt, Some(&mut sens))?;
        let m = f.magnitude();
        let mut g = [0.0; N_PARAMS];
        if m > 0.0 {
            for j in 0..N_PARAMS {
                g[j] = (f.f_y * jac[0][j] + f.f_z * jac[1][j]) / m;
            }
        }
        mags.push(m);
        grads.push(g);
    }

    let time = |i: usize| i as f64 * dt;
    let mut total = 0.0;
    let mut total_grad = [0.0; N_PARAMS];
    for reference in references {
        let mut sum = 0.0;
        let mut grad = [0.0; N_PARAMS];
        let mut count = 0usize;
        for r in reference.samples() {
            let Some((k, w)) = bracket(n, time, r.t) else {
                continue;
            };
            let (m, g) = if w == 0.0 {
                (mags[k], grads[k])
            } else {
                let mut g = [0.0; N_PARAMS];
                for j in 0..N_PARAMS {
                    g[j] = (1.0 - w) * grads[k][j] + w * grads[k + 1][j];
                }
                (mags[k] + w * (mags[k + 1] - mags[k]), g)
            };
            let e = m - r.magnitude();
            sum += e * e;
            for j in 0..N_PARAMS {
                grad[j] += 2.0 * e * g[j];
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyOverlap);
        }
        let inv = 1.0 / count as f64;
        total += sum * inv;
        for j in 0..N_PARAMS {
            total_grad[j] += grad[j] * inv;
        }
    }
    if total_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteState("loss gradient".into()));
    }
    Ok((total, total_grad))
}
