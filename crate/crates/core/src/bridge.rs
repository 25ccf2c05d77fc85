//! Lockstep co-simulation of the cutting model and the robot.
//!
//! Each exchange window the robot side runs first under the contact force
//! published at the end of the previous window, then publishes the knife
//! pose and velocity. The cutting side replays the window against that
//! knife state (extrapolated linearly backwards from the window end) and
//! publishes the window-mean contact force. Both clocks advance by whole
//! windows, so they agree exactly at every boundary.

use serde::{Deserialize, Serialize};

use crate::cutsim::{ContactForce, CutScene, KnifeState, KnifeTrajectory};
use crate::error::{Error, Result};
use crate::fdcc::{fdcc_step, CompliantTarget, ControllerGains, FdccState, Vec2};
use crate::robosim::{forward_kinematics, jacobian, step_robot, ChainSpec, RobotState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcePublish {
    #[default]
    WindowMean,
    LastSubstep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub exchange_period: f64,
    pub dt_cut: f64,
    pub dt_robot: f64,
    pub force_publish: ForcePublish,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            exchange_period: 2.0e-3,
            dt_cut: 1.0e-5,
            dt_robot: 1.0e-4,
            force_publish: ForcePublish::WindowMean,
        }
    }
}

fn exact_ratio(period: f64, dt: f64, name: &'static str) -> Result<usize> {
    let err = Error::NonDivisibleTimestep { name, period, dt };
    if !(dt > 0.0) || !(period > 0.0) {
        return Err(err);
    }
    let n = (period / dt).round();
    if n < 1.0 || (n * dt - period).abs() > 1e-9 * period {
        return Err(err);
    }
    Ok(n as usize)
}

/// Substeps per exchange window: `(n_cut, n_robot)`.
pub fn substep_counts(config: &BridgeConfig) -> Result<(usize, usize)> {
    Ok((
        exact_ratio(config.exchange_period, config.dt_cut, "dt_cut")?,
        exact_ratio(config.exchange_period, config.dt_robot, "dt_robot")?,
    ))
}

/// Whole exchange windows in `duration`.
pub fn window_count(config: &BridgeConfig, duration: f64) -> Result<usize> {
    if duration == 0.0 {
        return Ok(0);
    }
    exact_ratio(duration, config.exchange_period, "exchange_period")
}

/// Anything that answers a knife state with a contact wrench.
pub trait ContactModel {
    fn step(&mut self, knife: &KnifeState, dt: f64) -> Result<ContactForce>;

    /// Smallest damage over the slice column; models without damage report 1.
    fn min_damage(&self) -> f64 {
        1.0
    }

    fn mean_damage(&self) -> f64 {
        1.0
    }
}

impl ContactModel for CutScene {
    fn step(&mut self, knife: &KnifeState, dt: f64) -> Result<ContactForce> {
        CutScene::step(self, knife, dt)
    }

    fn min_damage(&self) -> f64 {
        CutScene::min_damage(self)
    }

    fn mean_damage(&self) -> f64 {
        CutScene::mean_damage(self)
    }
}

impl<T: ContactModel + ?Sized> ContactModel for Box<T> {
    fn step(&mut self, knife: &KnifeState, dt: f64) -> Result<ContactForce> {
        (**self).step(knife, dt)
    }

    fn min_damage(&self) -> f64 {
        (**self).min_damage()
    }

    fn mean_damage(&self) -> f64 {
        (**self).mean_damage()
    }
}

/// Hard penalty wall below `height`: `k max(0, h - z) + c max(0, -ż)` while penetrating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallContact {
    pub height: f64,
    pub stiffness: f64,
    pub damping: f64,
}

impl ContactModel for WallContact {
    fn step(&mut self, knife: &KnifeState, _dt: f64) -> Result<ContactForce> {
        let pen = self.height - knife.pose[1];
        let f = if pen > 0.0 {
            self.stiffness * pen + self.damping * (-knife.velocity[1]).max(0.0)
        } else {
            0.0
        };
        Ok(ContactForce {
            f_y: 0.0,
            f_z: f,
            spring: 0.0,
            friction: 0.0,
            board: f,
        })
    }
}

/// The motion side of the co-simulation.
pub trait KnifeDriver {
    /// Run `substeps` of `dt` against the force published last window (the
    /// reaction on the knife) and
    /// return the knife state at the end.
    fn advance(
        &mut self,
        f_ext: Vec2,
        target: &CompliantTarget,
        gains: &ControllerGains,
        substeps: usize,
        dt: f64,
    ) -> Result<KnifeState>;

    fn knife(&self) -> Result<KnifeState>;
}

/// Robot plus compliance controller.
#[derive(Clone, Debug)]
pub struct RobotDriver {
    pub chain: ChainSpec,
    pub robot: RobotState,
    pub controller: FdccState,
}

impl RobotDriver {
    pub fn new(chain: ChainSpec, q: Vec<f64>, inertia: f64, virtual_mass: f64) -> Result<Self> {
        chain.validate()?;
        let controller = FdccState::new(q.clone(), inertia, virtual_mass)?;
        Ok(Self {
            chain,
            robot: RobotState::at_rest(q),
            controller,
        })
    }
}

impl KnifeDriver for RobotDriver {
    fn advance(
        &mut self,
        f_ext: Vec2,
        target: &CompliantTarget,
        gains: &ControllerGains,
        substeps: usize,
        dt: f64,
    ) -> Result<KnifeState> {
        // the controller expects a sensor reading: what the tool applies to the scene
        let reading = [-f_ext[0], -f_ext[1]];
        for _ in 0..substeps {
            let (next, cmd) = fdcc_step(&self.controller, &self.chain, target, reading, gains, dt)?;
            self.controller = next;
            self.robot = step_robot(&self.chain, &self.robot, &cmd, dt)?;
        }
        self.knife()
    }

    fn knife(&self) -> Result<KnifeState> {
        let pose = forward_kinematics(&self.chain, &self.robot.q)?;
        let velocity = jacobian(&self.chain, &self.robot.q)?.mul(&self.robot.qd);
        Ok(KnifeState {
            pose,
            velocity,
            time: self.robot.time,
        })
    }
}

/// Replays a prescribed knife trajectory, ignoring force and commands.
pub struct ScriptedDriver<T> {
    pub trajectory: T,
    time: f64,
}

impl<T: KnifeTrajectory> ScriptedDriver<T> {
    pub fn new(trajectory: T) -> Self {
        Self {
            trajectory,
            time: 0.0,
        }
    }
}

impl<T: KnifeTrajectory> KnifeDriver for ScriptedDriver<T> {
    fn advance(
        &mut self,
        _f_ext: Vec2,
        _target: &CompliantTarget,
        _gains: &ControllerGains,
        substeps: usize,
        dt: f64,
    ) -> Result<KnifeState> {
        self.time += substeps as f64 * dt;
        self.knife()
    }

    fn knife(&self) -> Result<KnifeState> {
        Ok(self.trajectory.state_at(self.time))
    }
}

/// State at one exchange boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub pose: Vec2,
    pub velocity: Vec2,
    /// Force published at the end of this window.
    pub force: ContactForce,
    pub gains: ControllerGains,
    pub reference: Vec2,
    pub min_damage: f64,
    pub mean_damage: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub records: Vec<TraceRecord>,
}

/// Supplies controller targets and gains, changing them only at its own period.
pub trait ControllerSource {
    /// Exchange windows per command period.
    fn period_windows(&self) -> usize;

    fn command(&mut self, window: usize, last: Option<&TraceRecord>) -> (CompliantTarget, ControllerGains);
}

/// A fixed target and gain set.
#[derive(Clone, Copy, Debug)]
pub struct ConstantCommand {
    pub target: CompliantTarget,
    pub gains: ControllerGains,
}

impl ControllerSource for ConstantCommand {
    fn period_windows(&self) -> usize {
        1
    }

    fn command(&mut self, _: usize, _: Option<&TraceRecord>) -> (CompliantTarget, ControllerGains) {
        (self.target, self.gains)
    }
}

pub struct CoSim<C, D> {
    pub config: BridgeConfig,
    pub contact: C,
    pub driver: D,
    n_cut: usize,
    n_robot: usize,
    published: ContactForce,
    windows: usize,
    cut_substeps: usize,
    robot_substeps: usize,
}

impl<C: ContactModel, D: KnifeDriver> CoSim<C, D> {
    pub fn new(config: BridgeConfig, contact: C, driver: D) -> Result<Self> {
        let (n_cut, n_robot) = substep_counts(&config)?;
        Ok(Self {
            config,
            contact,
            driver,
            n_cut,
            n_robot,
            published: ContactForce::default(),
            windows: 0,
            cut_substeps: 0,
            robot_substeps: 0,
        })
    }

    /// Contact force most recently published to the controller.
    pub fn published_force(&self) -> ContactForce {
        self.published
    }

    pub fn windows_elapsed(&self) -> usize {
        self.windows
    }

    /// `(t_cut, t_robot)`; both advance by whole windows.
    pub fn clocks(&self) -> (f64, f64) {
        let period = self.config.exchange_period;
        (
            (self.cut_substeps / self.n_cut) as f64 * period,
            (self.robot_substeps / self.n_robot) as f64 * period,
        )
    }

    pub fn time(&self) -> f64 {
        self.windows as f64 * self.config.exchange_period
    }

    /// One exchange window.
    pub fn run_window(&mut self, target: &CompliantTarget, gains: &ControllerGains) -> Result<TraceRecord> {
        let period = self.config.exchange_period;
        let t0 = self.windows as f64 * period;
        let t1 = (self.windows + 1) as f64 * period;

        let knife = self.driver.advance(
            self.published.as_array(),
            target,
            gains,
            self.n_robot,
            self.config.dt_robot,
        )?;
        if !knife.is_finite() {
            return Err(Error::NonFiniteState(format!("knife at t = {t1}")));
        }
        self.robot_substeps += self.n_robot;

        let dt = self.config.dt_cut;
        let mut sum = ContactForce::default();
        let mut last = ContactForce::default();
        for j in 0..self.n_cut {
            let t = t0 + j as f64 * dt;
            let lag = t - t1;
            let state = KnifeState {
                pose: [
                    knife.pose[0] + knife.velocity[0] * lag,
                    knife.pose[1] + knife.velocity[1] * lag,
                ],
                velocity: knife.velocity,
                time: t,
            };
            last = self.contact.step(&state, dt)?;
            sum.f_y += last.f_y;
            sum.f_z += last.f_z;
            sum.spring += last.spring;
            sum.friction += last.friction;
            sum.board += last.board;
        }
        self.cut_substeps += self.n_cut;
        self.published = match self.config.force_publish {
            ForcePublish::WindowMean => {
                let inv = 1.0 / self.n_cut as f64;
                ContactForce {
                    f_y: sum.f_y * inv,
                    f_z: sum.f_z * inv,
                    spring: sum.spring * inv,
                    friction: sum.friction * inv,
                    board: sum.board * inv,
                }
            }
            ForcePublish::LastSubstep => last,
        };
        self.windows += 1;
        Ok(TraceRecord {
            t: t1,
            pose: knife.pose,
            velocity: knife.velocity,
            force: self.published,
            gains: *gains,
            reference: target.pose,
            min_damage: self.contact.min_damage(),
            mean_damage: self.contact.mean_damage(),
        })
    }
}

/// Run whole exchange windows for `duration`, querying `source` at its period boundaries.
pub fn run_cosim<C: ContactModel, D: KnifeDriver>(
    sim: &mut CoSim<C, D>,
    source: &mut dyn ControllerSource,
    duration: f64,
) -> Result<EpisodeTrace> {
    let n = window_count(&sim.config, duration)?;
    let every = source.period_windows().max(1);
    let mut trace = EpisodeTrace::default();
    let mut command = None;
    for w in 0..n {
        if w % every == 0 || command.is_none() {
            command = Some(source.command(w, trace.records.last()));
        }
        let (target, gains) = command.expect("set above");
        trace.records.push(sim.run_window(&target, &gains)?);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutsim::{ConstantSpeedDescent, FoodSpec, SimParams};

    #[test]
    fn substep_examples() {
        let c = |p, a, b| BridgeConfig {
            exchange_period: p,
            dt_cut: a,
            dt_robot: b,
            ..BridgeConfig::default()
        };
        assert_eq!(substep_counts(&c(2e-3, 1e-5, 1e-4)).unwrap(), (200, 20));
        assert_eq!(substep_counts(&c(1e-3, 1e-5, 1e-4)).unwrap(), (100, 10));
        assert!(matches!(
            substep_counts(&c(2e-3, 3e-5, 1e-4)),
            Err(Error::NonDivisibleTimestep { name: "dt_cut", .. })
        ));
    }

    fn scripted() -> CoSim<CutScene, ScriptedDriver<ConstantSpeedDescent>> {
        let food = FoodSpec {
            name: "t".into(),
            height: 0.02,
            slice_column_width: 0.005,
            spring_count: 4,
            anchor_y: 0.0,
        };
        let scene = CutScene::new(food, SimParams::midpoint()).unwrap();
        let traj = ConstantSpeedDescent {
            start: [0.0, 0.021],
            speed: 0.05,
            stop_z: -0.001,
        };
        CoSim::new(BridgeConfig::default(), scene, ScriptedDriver::new(traj)).unwrap()
    }

    fn idle() -> ConstantCommand {
        ConstantCommand {
            target: CompliantTarget::default(),
            gains: ControllerGains {
                stiffness: [0.0; 2],
                kp: 0.0,
                kd: 0.0,
            },
        }
    }

    #[test]
    fn zero_duration_is_empty() {
        let mut sim = scripted();
        let trace = run_cosim(&mut sim, &mut idle(), 0.0).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(sim.clocks(), (0.0, 0.0));
    }

    #[test]
    fn clocks_agree_at_every_boundary() {
        let mut sim = scripted();
        let (t, g) = (CompliantTarget::default(), idle().gains);
        for k in 1..=50 {
            let rec = sim.run_window(&t, &g).unwrap();
            let (a, b) = sim.clocks();
            assert_eq!(a, b);
            assert_eq!(rec.t, a);
            assert_eq!(a, k as f64 * 2e-3);
        }
    }

    #[test]
    fn wall_pushes_only_when_penetrated() {
        let mut w = WallContact {
            height: 0.0,
            stiffness: 1e4,
            damping: 10.0,
        };
        let above = KnifeState {
            pose: [0.0, 0.01],
            velocity: [0.0, -1.0],
            time: 0.0,
        };
        assert_eq!(w.step(&above, 1e-5).unwrap().f_z, 0.0);
        let below = KnifeState {
            pose: [0.0, -0.001],
            velocity: [0.0, 0.0],
            time: 0.0,
        };
        assert!((w.step(&below, 1e-5).unwrap().f_z - 10.0).abs() < 1e-9);
    }
}
