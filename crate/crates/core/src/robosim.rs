//! Kinematic planar serial chain: forward kinematics, Jacobian and
//! first-order joint command tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    /// Position of the first joint in the task frame, m.
    #[serde(default)]
    pub base: [f64; 2],
    /// Link lengths from base to tool, m.
    pub link_lengths: Vec<f64>,
    /// `[lower, upper]` per joint, rad.
    pub joint_limits: Vec<[f64; 2]>,
    /// Symmetric joint speed limit, rad/s.
    pub joint_velocity_limit: f64,
    /// Time constant of the joint position tracking lag, s.
    pub command_lag: f64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        // base above the board so both task axes stay well conditioned
        Self {
            base: [0.0, 0.4],
            link_lengths: vec![0.4, 0.4, 0.2],
            joint_limits: vec![[-3.1, 3.1], [-2.9, 2.9], [-2.9, 2.9]],
            joint_velocity_limit: 3.0,
            command_lag: 0.01,
        }
    }
}

impl ChainSpec {
    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.is_empty() {
            return Err(Error::Config("chain needs at least one link".into()));
        }
        if self.joint_limits.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: self.joint_limits.len(),
            });
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::Config("joint limits must satisfy lower < upper".into()));
        }
        if !(self.joint_velocity_limit > 0.0) || !(self.command_lag > 0.0) {
            return Err(Error::Config(
                "joint velocity limit and command lag must be positive".into(),
            ));
        }
        Ok(())
    }

    fn check(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Clamp joint positions into the limits, in place.
    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (x, [lo, hi]) in q.iter_mut().zip(&self.joint_limits) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

/// 2×N planar Jacobian, stored column-major (one `[dy, dz]` per joint).
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub columns: Vec<[f64; 2]>,
}

impl Jacobian {
    /// `J q̇`
    pub fn mul(&self, qd: &[f64]) -> [f64; 2] {
        self.columns
            .iter()
            .zip(qd)
            .fold([0.0, 0.0], |acc, (c, v)| [acc[0] + c[0] * v, acc[1] + c[1] * v])
    }

    /// `Jᵀ f`
    pub fn transpose_mul(&self, f: [f64; 2]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c[0] * f[0] + c[1] * f[1])
            .collect()
    }

    /// Row-major view: `[[dy/dq...], [dz/dq...]]`.
    pub fn rows(&self) -> [Vec<f64>; 2] {
        [
            self.columns.iter().map(|c| c[0]).collect(),
            self.columns.iter().map(|c| c[1]).collect(),
        ]
    }
}

/// Tool position `(y, z)` of the chain at joint angles `q`.
pub fn forward_kinematics(chain: &ChainSpec, q: &[f64]) -> Result<[f64; 2]> {
    chain.check(q)?;
    let mut angle = 0.0;
    let mut pose = chain.base;
    for (l, qi) in chain.link_lengths.iter().zip(q) {
        angle += qi;
        pose[0] += l * angle.cos();
        pose[1] += l * angle.sin();
    }
    Ok(pose)
}

pub fn jacobian(chain: &ChainSpec, q: &[f64]) -> Result<Jacobian> {
    chain.check(q)?;
    let n = chain.dof();
    // Column j sums over links j..n, so accumulate from the tool inward.
    let mut angles = Vec::with_capacity(n);
    let mut acc = 0.0;
    for qi in q {
        acc += qi;
        angles.push(acc);
    }
    let mut columns = vec![[0.0, 0.0]; n];
    let mut tail = [0.0, 0.0];
    for j in (0..n).rev() {
        let l = chain.link_lengths[j];
        tail[0] += -l * angles[j].sin();
        tail[1] += l * angles[j].cos();
        columns[j] = tail;
    }
    Ok(Jacobian { columns })
}

/// Joint angles placing the tool at `target` with the last link at absolute
/// angle `tool_angle` (ignored for two-link chains). Supports 1 to 3 links.
pub fn inverse_kinematics(
    chain: &ChainSpec,
    target: [f64; 2],
    tool_angle: f64,
    elbow_up: bool,
) -> Result<Vec<f64>> {
    let l = &chain.link_lengths;
    let unreachable = || Error::Config(format!("target {target:?} is out of reach"));
    let target = [target[0] - chain.base[0], target[1] - chain.base[1]];
    match l.len() {
        1 => Ok(vec![target[1].atan2(target[0])]),
        2 | 3 => {
            let wrist = if l.len() == 3 {
                [
                    target[0] - l[2] * tool_angle.cos(),
                    target[1] - l[2] * tool_angle.sin(),
                ]
            } else {
                target
            };
            let r2 = wrist[0] * wrist[0] + wrist[1] * wrist[1];
            let c2 = (r2 - l[0] * l[0] - l[1] * l[1]) / (2.0 * l[0] * l[1]);
            if !(-1.0..=1.0).contains(&c2) {
                return Err(unreachable());
            }
            let mut q2 = c2.acos();
            if elbow_up {
                q2 = -q2;
            }
            let q1 = wrist[1].atan2(wrist[0]) - (l[1] * q2.sin()).atan2(l[0] + l[1] * q2.cos());
            let mut q = vec![q1, q2];
            if l.len() == 3 {
                q.push(tool_angle - q1 - q2);
            }
            Ok(q)
        }
        n => Err(Error::Config(format!(
            "inverse kinematics supports up to 3 links, chain has {n}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub time: f64,
}

impl RobotState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: vec![0.0; n],
            time: 0.0,
        }
    }
}

/// First-order tracking of `q_command` with speed and position limits.
pub fn step_robot(
    chain: &ChainSpec,
    state: &RobotState,
    q_command: &[f64],
    dt: f64,
) -> Result<RobotState> {
    chain.check(&state.q)?;
    chain.check(q_command)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    let vmax = chain.joint_velocity_limit;
    let mut q = Vec::with_capacity(chain.dof());
    let mut qd = Vec::with_capacity(chain.dof());
    for ((&qi, &ci), [lo, hi]) in state.q.iter().zip(q_command).zip(&chain.joint_limits) {
        let v = ((ci - qi) / chain.command_lag).clamp(-vmax, vmax);
        let next = (qi + v * dt).clamp(*lo, *hi);
        q.push(next);
        qd.push((next - qi) / dt);
    }
    Ok(RobotState {
        q,
        qd,
        time: state.time + dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn two_link() -> ChainSpec {
        ChainSpec {
            base: [0.0, 0.0],
            link_lengths: vec![1.0, 1.0],
            joint_limits: vec![[-3.0, 3.0]; 2],
            joint_velocity_limit: 2.0,
            command_lag: 0.01,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn fk_examples() {
        let c = two_link();
        assert!(close(&forward_kinematics(&c, &[0.0, 0.0]).unwrap(), &[2.0, 0.0], 1e-15));
        assert!(close(&forward_kinematics(&c, &[FRAC_PI_2, 0.0]).unwrap(), &[0.0, 2.0], 1e-15));
        assert!(matches!(
            forward_kinematics(&c, &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian(&two_link(), &[0.0, 0.0]).unwrap();
        let [r0, r1] = j.rows();
        assert!(close(&r0, &[0.0, 0.0], 1e-15));
        assert!(close(&r1, &[2.0, 1.0], 1e-15));

        let one = ChainSpec {
            base: [0.0, 0.0],
            link_lengths: vec![1.0],
            joint_limits: vec![[-3.0, 3.0]],
            ..two_link()
        };
        let [r0, r1] = jacobian(&one, &[0.0]).unwrap().rows();
        assert!(close(&r0, &[0.0], 1e-15) && close(&r1, &[1.0], 1e-15));
        assert!(jacobian(&one, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn ik_round_trips() {
        let c = ChainSpec::default();
        let target = [0.55, 0.05];
        let q = inverse_kinematics(&c, target, -FRAC_PI_2, false).unwrap();
        assert!(close(&forward_kinematics(&c, &q).unwrap(), &target, 1e-12));
        assert!(inverse_kinematics(&c, [3.0, 0.0], 0.0, false).is_err());
    }

    #[test]
    fn equilibrium_command_only_advances_time() {
        let c = two_link();
        let s = RobotState::at_rest(vec![0.3, -0.2]);
        let next = step_robot(&c, &s, &s.q.clone(), 1e-4).unwrap();
        assert_eq!(next.q, s.q);
        assert_eq!(next.qd, vec![0.0, 0.0]);
        assert_eq!(next.time, 1e-4);
    }

    #[test]
    fn large_step_saturates_speed() {
        let c = two_link();
        let s = RobotState::at_rest(vec![0.0, 0.0]);
        let next = step_robot(&c, &s, &[2.0, -2.0], 1e-4).unwrap();
        assert!((next.qd[0] - 2.0).abs() < 1e-9 && (next.qd[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn command_beyond_limit_stops_at_limit() {
        let c = two_link();
        let mut s = RobotState::at_rest(vec![2.9, 0.0]);
        for _ in 0..2000 {
            s = step_robot(&c, &s, &[10.0, 0.0], 1e-4).unwrap();
            assert!(s.q[0] <= 3.0);
        }
        assert_eq!(s.q[0], 3.0);
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            q in prop::collection::vec(-3.0f64..3.0, 3)
        ) {
            let c = ChainSpec::default();
            let j = jacobian(&c, &q).unwrap();
            let h = 1e-6;
            for k in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let fp = forward_kinematics(&c, &qp).unwrap();
                let fm = forward_kinematics(&c, &qm).unwrap();
                for a in 0..2 {
                    let fd = (fp[a] - fm[a]) / (2.0 * h);
                    prop_assert!((fd - j.columns[k][a]).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn limits_hold_under_any_commands(
            cmds in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..40)
        ) {
            let c = ChainSpec::default();
            let mut s = RobotState::at_rest(vec![0.0, 0.0, 0.0]);
            for cmd in &cmds {
                for _ in 0..50 {
                    s = step_robot(&c, &s, cmd, 1e-3).unwrap();
                    for (k, [lo, hi]) in c.joint_limits.iter().enumerate() {
                        prop_assert!(s.q[k] >= *lo && s.q[k] <= *hi);
                        prop_assert!(s.qd[k].abs() <= c.joint_velocity_limit + 1e-9);
                    }
                }
            }
        }
    }
}
