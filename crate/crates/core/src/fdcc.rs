//! Forward dynamics compliance control.
//!
//! Cartesian targets and the measured contact wrench form a net force that
//! drives forward dynamics of a virtual copy of the kinematic chain. The
//! virtual joint positions are the joint commands, so the Jacobian is only
//! ever transposed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robosim::{forward_kinematics, jacobian, ChainSpec};

pub type Vec2 = [f64; 2];

/// Stiffness `K^c` per task axis plus the PD gains applied to the net force.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    /// N/m, `(y, z)`.
    pub stiffness: Vec2,
    pub kp: f64,
    /// s
    pub kd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainBounds {
    pub stiffness: [f64; 2],
    pub kp: [f64; 2],
    pub kd: [f64; 2],
}

impl Default for GainBounds {
    /// `kp` starts at 3: with unit joint inertia the heavy task-space direction
    /// of the default chain weighs ~10 kg, and lower gains leave it too
    /// underdamped to settle within 2 s.
    fn default() -> Self {
        Self {
            stiffness: [200.0, 1000.0],
            kp: [3.0, 6.0],
            kd: [0.0, 0.01],
        }
    }
}

/// Which fields [`validate_gains`] had to clamp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClampReport {
    pub stiffness: [bool; 2],
    pub kp: bool,
    pub kd: bool,
}

impl ClampReport {
    pub fn any(&self) -> bool {
        self.stiffness[0] || self.stiffness[1] || self.kp || self.kd
    }
}

/// Clamp gains into `bounds`. Never rejects: every agent action must be executable.
pub fn validate_gains(gains: ControllerGains, bounds: &GainBounds) -> (ControllerGains, ClampReport) {
    let clamp = |v: f64, [lo, hi]: [f64; 2]| {
        let c = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        (c, c != v)
    };
    let (ky, cy) = clamp(gains.stiffness[0], bounds.stiffness);
    let (kz, cz) = clamp(gains.stiffness[1], bounds.stiffness);
    let (kp, ckp) = clamp(gains.kp, bounds.kp);
    let (kd, ckd) = clamp(gains.kd, bounds.kd);
    (
        ControllerGains {
            stiffness: [ky, kz],
            kp,
            kd,
        },
        ClampReport {
            stiffness: [cy, cz],
            kp: ckp,
            kd: ckd,
        },
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompliantTarget {
    /// Desired pose `x^d`, m.
    pub pose: Vec2,
    /// Desired wrench `F^d`, N.
    pub wrench: Vec2,
}

impl CompliantTarget {
    pub fn pose(pose: Vec2) -> Self {
        Self {
            pose,
            wrench: [0.0, 0.0],
        }
    }
}

/// Critical damping `2 sqrt(K^c m_v)` per task axis.
pub fn virtual_damping(stiffness: Vec2, virtual_mass: f64) -> Vec2 {
    stiffness.map(|k| 2.0 * (k.max(0.0) * virtual_mass).sqrt())
}

/// `F^net = K^c (x^d - x) + (F^d - F_ext) - D_v ẋ_v`
pub fn net_force(
    pose: Vec2,
    virtual_velocity: Vec2,
    target: &CompliantTarget,
    f_ext: Vec2,
    stiffness: Vec2,
    damping: Vec2,
) -> Vec2 {
    let mut out = [0.0; 2];
    for a in 0..2 {
        out[a] = stiffness[a] * (target.pose[a] - pose[a]) + (target.wrench[a] - f_ext[a])
            - damping[a] * virtual_velocity[a];
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdccState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub prev_net: Option<Vec2>,
    /// Diagonal of the virtual joint-space inertia `H`, kg m².
    pub inertia: Vec<f64>,
    /// Task-space mass used for the damping heuristic, kg.
    pub virtual_mass: f64,
}

impl FdccState {
    pub fn new(q: Vec<f64>, inertia: f64, virtual_mass: f64) -> Result<Self> {
        if !(inertia > 0.0) || !(virtual_mass > 0.0) {
            return Err(Error::InvalidParam(
                "virtual inertia and mass must be positive".into(),
            ));
        }
        let n = q.len();
        Ok(Self {
            q,
            qd: vec![0.0; n],
            prev_net: None,
            inertia: vec![inertia; n],
            virtual_mass,
        })
    }

    /// Tool pose of the virtual model.
    pub fn pose(&self, chain: &ChainSpec) -> Result<Vec2> {
        forward_kinematics(chain, &self.q)
    }
}

/// One controller tick; returns the advanced virtual state and the joint command.
///
/// `f_ext` is a force-sensor reading, i.e. the wrench the tool exerts on the
/// environment. Pressing into a surface therefore drives the virtual model
/// back out of it.
pub fn fdcc_step(
    state: &FdccState,
    chain: &ChainSpec,
    target: &CompliantTarget,
    f_ext: Vec2,
    gains: &ControllerGains,
    dt: f64,
) -> Result<(FdccState, Vec<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    if state.inertia.len() != chain.dof() {
        return Err(Error::DimensionMismatch {
            expected: chain.dof(),
            got: state.inertia.len(),
        });
    }
    let pose = forward_kinematics(chain, &state.q)?;
    let jac = jacobian(chain, &state.q)?;
    let xd_v = jac.mul(&state.qd);
    let damping = virtual_damping(gains.stiffness, state.virtual_mass);
    let net = net_force(pose, xd_v, target, f_ext, gains.stiffness, damping);
    let prev = state.prev_net.unwrap_or(net);
    let command_force = [
        gains.kp * net[0] + gains.kd * (net[0] - prev[0]) / dt,
        gains.kp * net[1] + gains.kd * (net[1] - prev[1]) / dt,
    ];
    let torque = jac.transpose_mul(command_force);

    let mut next = state.clone();
    for (j, tau) in torque.iter().enumerate() {
        next.qd[j] += tau / state.inertia[j] * dt;
        next.q[j] += next.qd[j] * dt;
        let [lo, hi] = chain.joint_limits[j];
        if next.q[j] < lo || next.q[j] > hi {
            next.q[j] = next.q[j].clamp(lo, hi);
            next.qd[j] = 0.0;
        }
    }
    next.prev_net = Some(net);
    if next.q.iter().chain(&next.qd).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState("virtual model diverged".into()));
    }
    let command = next.q.clone();
    Ok((next, command))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gains(k: f64) -> ControllerGains {
        ControllerGains {
            stiffness: [k, k],
            kp: 1.0,
            kd: 0.0,
        }
    }

    #[test]
    fn net_force_examples() {
        let t = CompliantTarget::pose([0.5, 0.1]);
        let f = net_force([0.5, 0.1], [0.0; 2], &t, [0.0; 2], [500.0; 2], [10.0; 2]);
        assert_eq!(f, [0.0, 0.0]);

        let f = net_force([0.5, 0.09], [0.0; 2], &t, [0.0; 2], [500.0; 2], [10.0; 2]);
        assert!((f[0]).abs() < 1e-12 && (f[1] - 5.0).abs() < 1e-9);

        let t2 = CompliantTarget {
            pose: [0.5, 0.1],
            wrench: [1.0, -3.0],
        };
        let f = net_force([0.5, 0.1], [0.0; 2], &t2, [1.0, -3.0], [500.0; 2], [10.0; 2]);
        assert_eq!(f, [0.0, 0.0]);
    }

    #[test]
    fn equilibrium_keeps_command() {
        let chain = ChainSpec::default();
        let q = vec![0.3, 1.0, -2.0];
        let state = FdccState::new(q.clone(), 1.0, 1.0).unwrap();
        let target = CompliantTarget::pose(forward_kinematics(&chain, &q).unwrap());
        let (_, cmd) = fdcc_step(&state, &chain, &target, [0.0; 2], &gains(500.0), 1e-4).unwrap();
        for (a, b) in cmd.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_configuration_stays_finite() {
        let chain = ChainSpec {
            base: [0.0, 0.0],
            link_lengths: vec![1.0, 1.0],
            joint_limits: vec![[-3.0, 3.0]; 2],
            ..ChainSpec::default()
        };
        let mut state = FdccState::new(vec![0.0, 0.0], 1.0, 1.0).unwrap();
        let target = CompliantTarget::pose([3.0, 0.0]);
        for _ in 0..1000 {
            let (next, cmd) =
                fdcc_step(&state, &chain, &target, [50.0, -20.0], &gains(1000.0), 1e-4).unwrap();
            assert!(cmd.iter().all(|v| v.is_finite()));
            state = next;
        }
    }

    #[test]
    fn zero_gains_freeze_command() {
        let chain = ChainSpec::default();
        let q = vec![0.3, 1.0, -2.0];
        let mut state = FdccState::new(q.clone(), 1.0, 1.0).unwrap();
        let g = ControllerGains {
            stiffness: [800.0; 2],
            kp: 0.0,
            kd: 0.0,
        };
        let target = CompliantTarget::pose([0.2, 0.2]);
        for i in 0..500 {
            let (next, cmd) =
                fdcc_step(&state, &chain, &target, [i as f64, 3.0], &g, 1e-4).unwrap();
            assert_eq!(cmd, q);
            state = next;
        }
    }

    #[test]
    fn validate_gains_clamps() {
        let b = GainBounds::default();
        let inside = ControllerGains {
            stiffness: [500.0, 200.0],
            kp: 4.0,
            kd: 0.005,
        };
        let (g, r) = validate_gains(inside, &b);
        assert_eq!(g, inside);
        assert!(!r.any());

        let (g, r) = validate_gains(
            ControllerGains {
                stiffness: [-5.0, 200.0],
                kp: 7.0,
                kd: 0.0,
            },
            &b,
        );
        assert_eq!(g.stiffness[0], b.stiffness[0]);
        assert_eq!(g.kp, b.kp[1]);
        assert!(r.stiffness[0] && r.kp && !r.kd && !r.stiffness[1]);
    }
}
