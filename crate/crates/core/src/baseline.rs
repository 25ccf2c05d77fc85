//! Compression-spring stand-in for the cutting model, parameterized the way
//! rigid-body constraint solvers expose soft contacts (ERP / CFM).

use serde::{Deserialize, Serialize};

use crate::bridge::ContactModel;
use crate::cutsim::{softplus, ContactForce, ForceProfile, KnifeState, SOFTPLUS_BETA};
use crate::error::{Error, Result};

/// `(k, c)` from an error-reduction parameter, constraint force mixing and solver step:
/// `k = erp / (cfm h)`, `c = (1 - erp) / cfm`.
pub fn stiffness_damping(erp: f64, cfm: f64, h: f64) -> Result<(f64, f64)> {
    if !(cfm > 0.0) || !(h > 0.0) {
        return Err(Error::InvalidParam(format!(
            "cfm and h must be positive, got cfm = {cfm}, h = {h}"
        )));
    }
    if !(erp > 0.0 && erp <= 1.0) {
        return Err(Error::InvalidParam(format!("erp must lie in (0, 1], got {erp}")));
    }
    Ok((erp / (cfm * h), (1.0 - erp) / cfm))
}

/// Inverse of [`stiffness_damping`]: `erp = h k / (h k + c)`, `cfm = 1 / (h k + c)`.
pub fn erp_cfm(k: f64, c: f64, h: f64) -> Result<(f64, f64)> {
    if !(k > 0.0) || !(c >= 0.0) || !(h > 0.0) {
        return Err(Error::InvalidParam(format!(
            "need k > 0, c >= 0, h > 0; got k = {k}, c = {c}, h = {h}"
        )));
    }
    let denom = h * k + c;
    Ok((h * k / denom, 1.0 / denom))
}

/// Board contact used once the spring bottoms out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardContact {
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for BoardContact {
    fn default() -> Self {
        Self {
            stiffness: 5000.0,
            damping: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpringModel {
    pub erp: f64,
    pub cfm: f64,
    /// Solver step the ERP/CFM pair refers to, s.
    pub h: f64,
    pub max_compression: f64,
    pub rest_height: f64,
    pub board: BoardContact,
}

impl SpringModel {
    pub fn stiffness_damping(&self) -> Result<(f64, f64)> {
        stiffness_damping(self.erp, self.cfm, self.h)
    }

    pub fn from_stiffness(
        k: f64,
        c: f64,
        h: f64,
        rest_height: f64,
        max_compression: f64,
        board: BoardContact,
    ) -> Result<Self> {
        let (erp, cfm) = erp_cfm(k, c, h)?;
        Ok(Self {
            erp,
            cfm,
            h,
            max_compression,
            rest_height,
            board,
        })
    }

    /// Spring and board reaction on the knife; no lateral force.
    pub fn force(&self, knife: &KnifeState) -> Result<ContactForce> {
        let (k, c) = self.stiffness_damping()?;
        let z = knife.pose[1];
        let vz = knife.velocity[1];
        let compression = (self.rest_height - z).clamp(0.0, self.max_compression);
        let spring = if compression > 0.0 {
            k * compression + c * (-vz).max(0.0)
        } else {
            0.0
        };
        let sink = if z < 0.0 { (-vz).max(0.0) } else { 0.0 };
        let board = self.board.stiffness * softplus(-z, SOFTPLUS_BETA) + self.board.damping * sink;
        Ok(ContactForce {
            f_y: 0.0,
            f_z: spring + board,
            spring,
            friction: 0.0,
            board,
        })
    }
}

/// A spring model bound into the co-simulation contact slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpringScene {
    pub model: SpringModel,
    pub sim_time: f64,
}

impl SpringScene {
    pub fn new(model: SpringModel) -> Result<Self> {
        model.stiffness_damping()?;
        Ok(Self {
            model,
            sim_time: 0.0,
        })
    }
}

/// Stateless step: the spring force at `knife`.
pub fn step_spring(scene: &mut SpringScene, knife: &KnifeState, dt: f64) -> Result<ContactForce> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    let f = scene.model.force(knife)?;
    scene.sim_time += dt;
    Ok(f)
}

impl ContactModel for SpringScene {
    fn step(&mut self, knife: &KnifeState, dt: f64) -> Result<ContactForce> {
        step_spring(self, knife, dt)
    }
}

/// Undamped spring whose full compression produces the reference peak force.
pub fn calibrate_baseline(
    reference: &ForceProfile,
    rest_height: f64,
    max_compression: f64,
    h: f64,
    board: BoardContact,
) -> Result<SpringModel> {
    let peak = reference.peak_magnitude().ok_or(Error::EmptyProfile)?;
    if !(max_compression > 0.0) {
        return Err(Error::InvalidParam("max_compression must be positive".into()));
    }
    SpringModel::from_stiffness(peak / max_compression, 0.0, h, rest_height, max_compression, board)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutsim::ProfileSample;
    use proptest::prelude::*;

    fn knife(z: f64, vz: f64) -> KnifeState {
        KnifeState {
            pose: [0.0, z],
            velocity: [0.0, vz],
            time: 0.0,
        }
    }

    #[test]
    fn erp_cfm_example() {
        let (erp, cfm) = erp_cfm(5000.0, 50.0, 1e-4).unwrap();
        assert!((erp - 0.009901).abs() < 1e-6, "{erp}");
        assert!((cfm - 0.019802).abs() < 1e-6, "{cfm}");
        let (k, c) = stiffness_damping(erp, cfm, 1e-4).unwrap();
        assert!((k - 5000.0).abs() / 5000.0 < 1e-9 && (c - 50.0).abs() / 50.0 < 1e-9);
    }

    #[test]
    fn erp_one_means_no_damping() {
        let (_, c) = stiffness_damping(1.0, 0.01, 1e-3).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn zero_cfm_rejected() {
        assert!(matches!(stiffness_damping(0.5, 0.0, 1e-3), Err(Error::InvalidParam(_))));
    }

    fn model(k: f64) -> SpringModel {
        SpringModel::from_stiffness(k, 0.0, 1e-4, 0.04, 0.04, BoardContact::default()).unwrap()
    }

    #[test]
    fn spring_force_examples() {
        let mut s = SpringScene::new(model(500.0)).unwrap();
        assert!(step_spring(&mut s, &knife(0.05, -0.1), 1e-4).unwrap().f_z < 1e-9);

        let f = step_spring(&mut s, &knife(0.03, 0.0), 1e-4).unwrap();
        assert!((f.spring - 5.0).abs() < 1e-9 && f.f_y == 0.0);

        let a = step_spring(&mut s, &knife(-0.002, 0.0), 1e-4).unwrap();
        let b = step_spring(&mut s, &knife(-0.004, 0.0), 1e-4).unwrap();
        assert!((a.spring - 20.0).abs() < 1e-9 && (b.spring - 20.0).abs() < 1e-9);
        assert!(b.board > a.board);
    }

    #[test]
    fn calibration_matches_peak() {
        let p = ForceProfile::new(
            [3.0, 20.0, 7.0]
                .iter()
                .enumerate()
                .map(|(i, &f)| ProfileSample {
                    t: i as f64,
                    f_y: 0.0,
                    f_z: f,
                    z: 0.0,
                })
                .collect(),
        )
        .unwrap();
        let m = calibrate_baseline(&p, 0.04, 0.04, 1e-4, BoardContact::default()).unwrap();
        let (k, c) = m.stiffness_damping().unwrap();
        assert!((k - 500.0).abs() < 1e-9 && c == 0.0);
        let f = m.force(&knife(0.0, 0.0)).unwrap();
        assert!((f.spring - 20.0).abs() < 1e-9);

        assert!(matches!(
            calibrate_baseline(&ForceProfile::default(), 0.04, 0.04, 1e-4, BoardContact::default()),
            Err(Error::EmptyProfile)
        ));
    }

    proptest! {
        #[test]
        fn erp_cfm_round_trip(k in 1.0f64..1e5, c in 0.0f64..500.0, h in 1e-5f64..1e-2) {
            let (erp, cfm) = erp_cfm(k, c, h).unwrap();
            let (k2, c2) = stiffness_damping(erp, cfm, h).unwrap();
            prop_assert!((k2 - k).abs() <= 1e-9 * k);
            prop_assert!((c2 - c).abs() <= 1e-9 * c.max(1e-12) + 1e-12);
        }

        #[test]
        fn force_nonnegative_and_continuous(z in -0.01f64..0.06) {
            let m = model(700.0);
            let f = m.force(&knife(z, 0.0)).unwrap().f_z;
            let g = m.force(&knife(z + 1e-7, 0.0)).unwrap().f_z;
            prop_assert!(f >= 0.0);
            prop_assert!((f - g).abs() < 1e-2);
        }
    }
}
