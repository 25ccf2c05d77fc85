//! Two-stage identification of cutting-model parameters from force profiles:
//! a Tree-structured Parzen Estimator search followed by Adam refinement on
//! the analytic loss gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::cutsim::{
    loss_and_gradient_sum, profile_loss, simulate_trace, CutScene, FoodSpec, ForceProfile,
    KnifeTrajectory, ProfileSample, SimParams, N_PARAMS,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDim {
    pub lower: f64,
    pub upper: f64,
    /// Search `ln(value)` uniformly instead of `value`.
    pub log: bool,
}

impl ParamDim {
    fn to_unit(&self, v: f64) -> f64 {
        let u = if self.log {
            (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln())
        } else {
            (v - self.lower) / (self.upper - self.lower)
        };
        u.clamp(0.0, 1.0)
    }

    fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = if self.log {
            (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp()
        } else {
            self.lower + u * (self.upper - self.lower)
        };
        v.clamp(self.lower, self.upper)
    }

    /// `d value / d u`
    fn slope(&self, v: f64) -> f64 {
        if self.log {
            v * (self.upper.ln() - self.lower.ln())
        } else {
            self.upper - self.lower
        }
    }
}

/// Search space over the six cutting-model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub dims: [ParamDim; N_PARAMS],
}

impl Default for ParamSpace {
    /// The admissible parameter box; stiffness-like dimensions on a log scale.
    fn default() -> Self {
        let log = [true, true, true, false, true, false];
        let mut dims = [ParamDim {
            lower: 0.0,
            upper: 1.0,
            log: false,
        }; N_PARAMS];
        for ((d, (lo, hi)), l) in dims.iter_mut().zip(SimParams::RANGES).zip(log) {
            *d = ParamDim {
                lower: lo,
                upper: hi,
                log: l,
            };
        }
        Self { dims }
    }
}

impl ParamSpace {
    pub fn validate(&self) -> Result<()> {
        for (d, (name, (lo, hi))) in self.dims.iter().zip(SimParams::NAMES.iter().zip(SimParams::RANGES)) {
            if !(d.lower < d.upper) {
                return Err(Error::Config(format!("empty search interval for {name}")));
            }
            if d.lower != lo || d.upper != hi {
                return Err(Error::Config(format!(
                    "search interval for {name} must be [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn to_unit(&self, p: &SimParams) -> [f64; N_PARAMS] {
        let v = p.to_array();
        std::array::from_fn(|i| self.dims[i].to_unit(v[i]))
    }

    pub fn from_unit(&self, u: &[f64; N_PARAMS]) -> SimParams {
        SimParams::from_array(std::array::from_fn(|i| self.dims[i].from_unit(u[i])))
    }

    /// Chain-rule factor from parameter gradients to unit-cube gradients.
    pub fn unit_slopes(&self, p: &SimParams) -> [f64; N_PARAMS] {
        let v = p.to_array();
        std::array::from_fn(|i| self.dims[i].slope(v[i]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: SimParams,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Each kernel's width is the larger gap to its sorted neighbours,
    /// clipped to `[range / min(100, n + 1), range]`.
    #[default]
    NearestNeighbor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub n_trials: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    pub bandwidth: BandwidthRule,
    /// Weight of the broad prior kernel mixed into both densities.
    pub prior_weight: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 20,
            n_trials: 100,
            gamma: 0.25,
            n_candidates: 24,
            bandwidth: BandwidthRule::NearestNeighbor,
            prior_weight: 1.0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_startup == 0 || self.n_startup > self.n_trials {
            return Err(Error::Config("need 0 < n_startup <= n_trials".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("tpe gamma must lie in (0, 1)".into()));
        }
        if self.n_candidates == 0 {
            return Err(Error::Config("tpe n_candidates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 200,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("adam epsilon and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Size of the "good" split: `ceil(gamma * n)`, at least one.
pub fn good_count(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).clamp(1, n.max(1))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Truncated-Gaussian Parzen mixture on `[0, 1]`.
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    /// Per-kernel probability mass inside `[0, 1]`.
    mass: Vec<f64>,
}

impl Parzen {
    fn fit(points: &[f64], prior_weight: f64) -> Self {
        let mut mus: Vec<f64> = points.to_vec();
        let mut weights = vec![1.0; points.len()];
        mus.push(0.5);
        weights.push(prior_weight);
        let mut order: Vec<usize> = (0..mus.len()).collect();
        order.sort_by(|&a, &b| mus[a].total_cmp(&mus[b]));

        let n = mus.len();
        let min_sigma = 1.0 / (100.0f64).min(n as f64 + 1.0);
        let mut sigmas = vec![1.0; n];
        for (rank, &i) in order.iter().enumerate() {
            if i == n - 1 {
                // the prior kernel stays broad
                continue;
            }
            let left = if rank == 0 { mus[i] } else { mus[i] - mus[order[rank - 1]] };
            let right = if rank + 1 == n {
                1.0 - mus[i]
            } else {
                mus[order[rank + 1]] - mus[i]
            };
            sigmas[i] = left.max(right).clamp(min_sigma, 1.0);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mass = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| (normal_cdf((1.0 - m) / s) - normal_cdf(-m / s)).max(1e-300))
            .collect();
        Self {
            mus,
            sigmas,
            weights,
            mass,
        }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let mut p = 0.0;
        for i in 0..self.mus.len() {
            let z = (x - self.mus[i]) / self.sigmas[i];
            p += self.weights[i] * (-0.5 * z * z).exp()
                / (self.sigmas[i] * (2.0 * std::f64::consts::PI).sqrt() * self.mass[i]);
        }
        p.max(1e-300).ln()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut pick: f64 = rng.random();
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if pick < *w {
                k = i;
                break;
            }
            pick -= w;
        }
        for _ in 0..64 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let x = self.mus[k] + self.sigmas[k] * z;
            if (0.0..=1.0).contains(&x) {
                return x;
            }
        }
        self.mus[k].clamp(0.0, 1.0)
    }
}

/// TPE suggestion in the unit cube `[0, 1]^dim` from `(point, loss)` history.
pub fn tpe_suggest_unit<R: Rng + ?Sized>(
    history: &[(Vec<f64>, f64)],
    dim: usize,
    config: &TpeConfig,
    rng: &mut R,
) -> Vec<f64> {
    if history.len() < config.n_startup {
        return (0..dim).map(|_| rng.random::<f64>()).collect();
    }
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[a].1.total_cmp(&history[b].1));
    let n_good = good_count(history.len(), config.gamma);
    let (good, bad) = order.split_at(n_good);

    let models: Vec<(Parzen, Parzen)> = (0..dim)
        .map(|d| {
            let g: Vec<f64> = good.iter().map(|&i| history[i].0[d]).collect();
            let b: Vec<f64> = bad.iter().map(|&i| history[i].0[d]).collect();
            (Parzen::fit(&g, config.prior_weight), Parzen::fit(&b, config.prior_weight))
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..config.n_candidates {
        let x: Vec<f64> = models.iter().map(|(l, _)| l.sample(rng)).collect();
        let score: f64 = x
            .iter()
            .zip(&models)
            .map(|(&v, (l, g))| l.log_pdf(v) - g.log_pdf(v))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, x));
        }
    }
    best.expect("n_candidates > 0").1
}

/// Next parameter proposal given the trials evaluated so far.
pub fn tpe_suggest<R: Rng + ?Sized>(
    history: &[Trial],
    space: &ParamSpace,
    config: &TpeConfig,
    rng: &mut R,
) -> SimParams {
    let unit: Vec<(Vec<f64>, f64)> = history
        .iter()
        .map(|t| (space.to_unit(&t.params).to_vec(), t.loss))
        .collect();
    let u = tpe_suggest_unit(&unit, N_PARAMS, config, rng);
    space.from_unit(&std::array::from_fn(|i| u[i]))
}

/// Adam on unit-cube coordinates with projection back into the box after each
/// step. `grad_fn` returns `(loss, gradient)` in unit coordinates. Returns the
/// best point seen and its loss; with zero iterations `u0` is returned with
/// loss `None`.
pub fn adam_minimize_unit<F>(
    u0: &[f64],
    mut grad_fn: F,
    config: &AdamConfig,
) -> Result<(Vec<f64>, Option<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = u0.len();
    let mut u = u0.to_vec();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for step in 0..=config.iterations {
        if config.iterations == 0 {
            break;
        }
        let (loss, g) = grad_fn(&u)?;
        if g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: g.len(),
            });
        }
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        if best.as_ref().is_none_or(|(_, b)| loss < *b) {
            best = Some((u.clone(), loss));
        }
        if step == config.iterations {
            break;
        }
        let t = (step + 1) as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for i in 0..n {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            u[i] = (u[i] - config.learning_rate * mhat / (vhat.sqrt() + config.epsilon)).clamp(0.0, 1.0);
        }
    }
    Ok(match best {
        Some((u, l)) => (u, Some(l)),
        None => (u, None),
    })
}

/// Adam refinement of `params0`. `grad_fn` returns the loss and its gradient
/// with respect to the physical parameters.
pub fn adam_refine<F>(
    params0: &SimParams,
    mut grad_fn: F,
    space: &ParamSpace,
    config: &AdamConfig,
) -> Result<(SimParams, Option<f64>)>
where
    F: FnMut(&SimParams) -> Result<(f64, [f64; N_PARAMS])>,
{
    params0.validate()?;
    let u0 = space.to_unit(params0);
    let (u, loss) = adam_minimize_unit(
        &u0,
        |u| {
            let p = space.from_unit(&std::array::from_fn(|i| u[i]));
            let (loss, g) = grad_fn(&p)?;
            let s = space.unit_slopes(&p);
            Ok((loss, (0..N_PARAMS).map(|i| g[i] * s[i]).collect()))
        },
        config,
    )?;
    if loss.is_none() {
        return Ok((*params0, None));
    }
    Ok((space.from_unit(&std::array::from_fn(|i| u[i])), loss))
}

/// Linear interpolation of `profile` on `grid`.
pub fn resample_profile(profile: &ForceProfile, grid: &[f64]) -> Result<ForceProfile> {
    let (start, end) = profile.time_range().ok_or(Error::EmptyProfile)?;
    let samples: Result<Vec<ProfileSample>> = grid
        .iter()
        .map(|&t| profile.sample_at(t).ok_or(Error::OutOfRangeGrid { t, start, end }))
        .collect();
    ForceProfile::new(samples?)
}

/// Time discretization of the calibration traces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub dt: f64,
    pub duration: f64,
}

/// Everything needed to score a parameter set against recorded profiles.
pub struct CalibrationProblem<'a> {
    pub references: Vec<&'a ForceProfile>,
    pub food: &'a FoodSpec,
    pub trajectory: &'a dyn KnifeTrajectory,
    pub trace: TraceSpec,
}

impl CalibrationProblem<'_> {
    /// Unweighted sum of per-reference profile losses.
    pub fn loss(&self, params: &SimParams) -> Result<f64> {
        let mut scene = CutScene::new(self.food.clone(), *params)?;
        let sim = simulate_trace(&mut scene, self.trajectory, self.trace.dt, self.trace.duration)?;
        self.references
            .iter()
            .map(|r| profile_loss(&sim, r))
            .sum::<Result<f64>>()
    }

    pub fn loss_and_gradient(&self, params: &SimParams) -> Result<(f64, [f64; N_PARAMS])> {
        loss_and_gradient_sum(
            self.food,
            self.trajectory,
            &self.references,
            params,
            self.trace.dt,
            self.trace.duration,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub params: SimParams,
    pub loss: f64,
    /// TPE trials in evaluation order.
    pub history: Vec<Trial>,
    /// Best loss of the TPE stage alone.
    pub search_loss: f64,
}

/// TPE search followed by Adam refinement from the best trial.
pub fn calibrate<R: Rng + ?Sized>(
    problem: &CalibrationProblem<'_>,
    space: &ParamSpace,
    tpe: &TpeConfig,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<CalibrationResult> {
    if problem.references.is_empty() {
        return Err(Error::Config("calibration needs at least one reference profile".into()));
    }
    tpe.validate()?;
    adam.validate()?;
    let mut history: Vec<Trial> = Vec::with_capacity(tpe.n_trials);
    for _ in 0..tpe.n_trials {
        let params = tpe_suggest(&history, space, tpe, rng);
        let loss = problem.loss(&params)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteState(format!("loss at {params:?}")));
        }
        log::debug!("trial {}: loss {loss:.6}", history.len());
        history.push(Trial { params, loss });
    }
    let best = history
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .copied()
        .expect("n_trials >= 1");
    let (params, refined) = adam_refine(&best.params, |p| problem.loss_and_gradient(p), space, adam)?;
    let (params, loss) = match refined {
        Some(l) if l < best.loss => (params, l),
        _ => (best.params, best.loss),
    };
    Ok(CalibrationResult {
        params,
        loss,
        history,
        search_loss: best.loss,
    })
}
