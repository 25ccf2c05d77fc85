//! The five pipeline commands. Each reads the run configuration, writes its
//! outputs atomically below `output_dir`, and records them in a manifest.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ItemRole, ItemSpec, RunConfig};
use super::io::{self, OutputSet};
use crate::baseline::calibrate_baseline;
use crate::calibration::{calibrate, CalibrationProblem, TraceSpec};
use crate::cutsim::{simulate_trace, ConstantSpeedDescent, CutScene, FoodSpec, ForceProfile};
use crate::error::{Error, Result};
use crate::rl::checkpoint::{actor_from_checkpoint, sac_from_checkpoint, sac_to_checkpoint, with_actor, Checkpoint};
use crate::rl::env::{EnvItem, ItemModel, SlicingEnv, Termination};
use crate::rl::sac::Actor;
use crate::rl::train::{evaluate_schedule, train, EpisodeLog, EpisodeRecord, GreedyPolicy, Metrics, Resume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Cutsim,
    Baseline,
}

impl ModelTag {
    pub const ALL: [ModelTag; 2] = [ModelTag::Cutsim, ModelTag::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Cutsim => "cutsim",
            ModelTag::Baseline => "baseline",
        }
    }

    fn stream(self) -> u64 {
        match self {
            ModelTag::Cutsim => 1,
            ModelTag::Baseline => 2,
        }
    }
}

impl std::str::FromStr for ModelTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cutsim" => Ok(ModelTag::Cutsim),
            "baseline" => Ok(ModelTag::Baseline),
            _ => Err(Error::Config(format!("unknown model tag '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// A calibrated item, ready to be loaded into an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub name: String,
    pub tag: ModelTag,
    pub food: FoodSpec,
    pub model: ItemModel,
    /// Profile loss of the calibrated cutting model, N²; `None` for the spring baseline.
    pub calibration_loss: Option<f64>,
    /// Force-profile RMSE relative to the reference peak force.
    pub relative_rmse: Option<f64>,
    /// Source profiles, relative to the output directory where possible.
    pub profiles: Vec<PathBuf>,
    pub metadata: RecordMetadata,
}

impl ItemRecord {
    pub fn env_item(&self) -> EnvItem {
        EnvItem {
            food: self.food.clone(),
            model: self.model.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// Sidecar describing how a directory of outputs was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    pub files: Vec<ManifestEntry>,
}

fn metadata(cfg: &RunConfig) -> Result<RecordMetadata> {
    Ok(RecordMetadata {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn finish(cfg: &RunConfig, command: &str, dir: &Path, outputs: OutputSet) -> Result<()> {
    let files = outputs
        .files
        .into_iter()
        .map(|(p, sha256)| ManifestEntry {
            path: cfg.relative(&p).to_string_lossy().into_owned(),
            sha256,
        })
        .collect();
    let manifest = Manifest {
        command: command.into(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        config: cfg.resolved_toml()?,
        files,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

fn rng_for(cfg: &RunConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

fn descent(cfg: &RunConfig, item: &ItemSpec) -> ConstantSpeedDescent {
    let s = &cfg.simulate;
    ConstantSpeedDescent {
        start: [0.0, item.height + s.clearance],
        speed: s.speed,
        stop_z: -s.stop_depth,
    }
}

/// Scripted constant-speed cut through one item's hidden-parameter scene.
pub fn simulate_item(cfg: &RunConfig, item: &ItemSpec) -> Result<ForceProfile> {
    let mut scene = CutScene::new(item.food(), item.hidden)?;
    simulate_trace(
        &mut scene,
        &descent(cfg, item),
        cfg.simulate.dt,
        cfg.simulate.duration(item.height),
    )
}

/// Synthesise reference profiles, one per item (or only `simulate.scene`).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let items: Vec<&ItemSpec> = match &cfg.simulate.scene {
        Some(name) => vec![cfg.item(name)?],
        None => cfg.items.iter().collect(),
    };
    let dir = cfg.output_dir.join("profiles");
    let mut out = OutputSet::default();
    for item in items {
        let profile = simulate_item(cfg, item)?;
        log::info!("{}: {} samples, peak {:.2} N", item.name, profile.len(), profile.peak_magnitude().unwrap_or(0.0));
        out.write(dir.join(format!("{}.csv", item.name)), &io::profile_csv(&profile)?)?;
    }
    let paths = out.files.iter().map(|(p, _)| p.clone()).collect();
    finish(cfg, "simulate", &dir, out)?;
    Ok(paths)
}

fn load_profiles(cfg: &RunConfig, item: &ItemSpec) -> Result<(Vec<PathBuf>, Vec<ForceProfile>)> {
    let paths = cfg.profile_paths(item);
    let existing: Vec<PathBuf> = paths.iter().filter(|p| p.exists()).cloned().collect();
    if existing.is_empty() {
        return Err(Error::Config(format!(
            "item '{}' has no force profiles (looked for {})",
            item.name,
            paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    let profiles = existing.iter().map(|p| io::load_force_profile(p)).collect::<Result<Vec<_>>>()?;
    Ok((existing, profiles))
}

fn record_path(cfg: &RunConfig, name: &str, tag: ModelTag) -> PathBuf {
    cfg.output_dir.join("items").join(format!("{name}.{}.json", tag.as_str()))
}

/// Calibrate both contact models for every item.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Vec<ItemRecord>> {
    cfg.validate()?;
    let meta = metadata(cfg)?;
    let cal = &cfg.calibration;
    let mut out = OutputSet::default();
    let mut records = Vec::new();
    let loaded = cfg
        .items
        .iter()
        .map(|item| load_profiles(cfg, item))
        .collect::<Result<Vec<_>>>()?;
    for (k, (item, (paths, profiles))) in cfg.items.iter().zip(loaded).enumerate() {
        let paths: Vec<PathBuf> = paths.iter().map(|p| cfg.relative(p)).collect();
        let food = item.food();
        let trajectory = descent(cfg, item);
        let problem = CalibrationProblem {
            references: profiles.iter().collect(),
            food: &food,
            trajectory: &trajectory,
            trace: TraceSpec {
                dt: cfg.simulate.dt,
                duration: cfg.simulate.duration(item.height),
            },
        };
        let mut rng = rng_for(cfg, 100 + k as u64);
        let result = calibrate(&problem, &cal.space, &cal.tpe, &cal.adam, &mut rng)?;
        let peak = profiles
            .iter()
            .filter_map(|p| p.peak_magnitude())
            .fold(0.0, f64::max);
        let per_profile = result.loss / profiles.len() as f64;
        let rel = per_profile.sqrt() / peak.max(f64::MIN_POSITIVE);
        log::info!("{}: cutsim loss {:.4e}, relative RMSE {:.3}", item.name, result.loss, rel);
        out.write(
            cfg.output_dir.join("calibration").join(format!("{}_trials.csv", item.name)),
            &io::trials_csv(&result.history)?,
        )?;
        let cutsim = ItemRecord {
            name: item.name.clone(),
            tag: ModelTag::Cutsim,
            food: food.clone(),
            model: ItemModel::Cutsim { params: result.params },
            calibration_loss: Some(result.loss),
            relative_rmse: Some(rel),
            profiles: paths.clone(),
            metadata: meta.clone(),
        };

        let spring = calibrate_baseline(
            &profiles[0],
            item.height,
            item.height,
            cal.baseline_solver_step,
            cal.baseline_board,
        )?;
        let baseline = ItemRecord {
            name: item.name.clone(),
            tag: ModelTag::Baseline,
            food,
            model: ItemModel::Baseline { spring },
            calibration_loss: None,
            relative_rmse: None,
            profiles: paths,
            metadata: meta.clone(),
        };
        for r in [cutsim, baseline] {
            out.write_json(record_path(cfg, &r.name, r.tag), &r)?;
            records.push(r);
        }
    }
    finish(cfg, "calibrate", &cfg.output_dir.join("items"), out)?;
    Ok(records)
}

pub fn load_record(cfg: &RunConfig, name: &str, tag: ModelTag) -> Result<ItemRecord> {
    let path = record_path(cfg, name, tag);
    if !path.exists() {
        return Err(Error::Config(format!(
            "item '{name}' has no {} calibration ({} missing; run calibrate first)",
            tag.as_str(),
            path.display()
        )));
    }
    io::read_json(&path)
}

/// Environment items of `tag` for every item with the given role filter.
pub fn world_items(cfg: &RunConfig, tag: ModelTag, include_held_out: bool) -> Result<Vec<EnvItem>> {
    cfg.items
        .iter()
        .filter(|i| include_held_out || i.role == ItemRole::Train)
        .map(|i| load_record(cfg, &i.name, tag).map(|r| r.env_item()))
        .collect()
}

fn policy_dir(cfg: &RunConfig, tag: ModelTag) -> PathBuf {
    cfg.output_dir.join("policies").join(tag.as_str())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub tag: ModelTag,
    pub steps: usize,
    pub curve: Vec<crate::rl::train::CurvePoint>,
    pub episodes: Vec<EpisodeLog>,
}

fn load_training_episodes(path: &Path) -> Result<Vec<EpisodeLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, &e.to_string()))?;
        let field = |k: usize| rec.get(k).ok_or_else(|| bad(line, "missing field"));
        out.push(EpisodeLog {
            step: field(0)?.parse().map_err(|_| bad(line, "step"))?,
            episode_return: field(1)?.parse().map_err(|_| bad(line, "return"))?,
            length: field(2)?.parse().map_err(|_| bad(line, "length"))?,
            termination: Termination::parse(field(3)?).ok_or_else(|| bad(line, "termination"))?,
        });
    }
    Ok(out)
}

/// Train one policy per tag on the calibrated training items.
pub fn cmd_train(cfg: &RunConfig, tags: &[ModelTag]) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let mut summaries = Vec::new();
    for &tag in tags {
        let items = world_items(cfg, tag, false)?;
        if items.is_empty() {
            return Err(Error::NoCalibratedItems);
        }
        let mut env = SlicingEnv::new(cfg.env.clone(), items.clone())?;
        let mut eval_env = SlicingEnv::new(cfg.env.clone(), items)?;
        let dir = policy_dir(cfg, tag);
        let final_path = dir.join("final.ckpt");
        let resume = if cfg.train.resume && final_path.exists() {
            let ck = Checkpoint::decode(&std::fs::read(&final_path)?)?;
            let steps = ck.scalar("step")? as usize;
            log::info!("{}: resuming at step {steps}", tag.as_str());
            Some(Resume {
                sac: sac_from_checkpoint(&ck)?,
                steps,
                curve: io::load_curve(&dir.join("curve.csv"))?,
                episodes: load_training_episodes(&dir.join("episodes.csv"))?,
            })
        } else {
            None
        };
        let start = resume.as_ref().map_or(0, |r| r.steps);
        let mut rng = rng_for(cfg, tag.stream() * 1000 + start as u64);
        let outcome = train(&mut env, &mut eval_env, &cfg.sac, &mut rng, resume)?;

        let mut ck = sac_to_checkpoint(&outcome.sac)?;
        ck.meta.push(("run_config".into(), cfg.portable_toml()?));
        ck.meta.push(("config_hash".into(), cfg.hash()?));
        ck.meta.push(("model_tag".into(), tag.as_str().into()));
        ck.scalars.push(("seed".into(), cfg.seed as f64));
        ck.scalars.push(("step".into(), outcome.steps as f64));
        let mut out = OutputSet::default();
        if let Some((step, actor)) = &outcome.best {
            let mut best = with_actor(ck.clone(), actor);
            best.scalars.push(("best_step".into(), *step as f64));
            out.write(dir.join("best.ckpt"), &best.encode())?;
        }
        out.write(final_path, &ck.encode())?;
        out.write(dir.join("curve.csv"), &io::curve_csv(&outcome.curve)?)?;
        out.write(dir.join("episodes.csv"), &io::training_episodes_csv(&outcome.episodes)?)?;
        finish(cfg, "train", &dir, out)?;
        summaries.push(TrainSummary {
            tag,
            steps: outcome.steps,
            curve: outcome.curve,
            episodes: outcome.episodes,
        });
    }
    Ok(summaries)
}

pub fn load_policy(cfg: &RunConfig, tag: ModelTag) -> Result<Actor> {
    let path = policy_dir(cfg, tag).join(format!("{}.ckpt", cfg.eval.checkpoint));
    if !path.exists() {
        return Err(Error::MissingPolicy(path));
    }
    actor_from_checkpoint(&Checkpoint::decode(&std::fs::read(&path)?)?)
}

/// Run every policy over the same schedule with identical randomisation.
pub fn compare_policies(
    cfg: &RunConfig,
    world: &[EnvItem],
    policies: &[(String, &Actor)],
) -> Result<Vec<(String, Vec<EpisodeRecord>)>> {
    let mut out = Vec::new();
    for (name, actor) in policies {
        let mut env = SlicingEnv::new(cfg.env.clone(), world.to_vec())?;
        let mut rng = rng_for(cfg, 7);
        let mut policy = GreedyPolicy {
            actor,
            scale: cfg.env.observation,
        };
        out.push((name.clone(), evaluate_schedule(&mut policy, &mut env, &cfg.eval.schedule, &mut rng)?));
    }
    Ok(out)
}

fn metrics_of(records: &[EpisodeRecord]) -> Metrics {
    Metrics {
        episodes: records.iter().map(|r| r.metrics.clone()).collect(),
    }
}

fn write_traces(cfg: &RunConfig, out: &mut OutputSet, dir: &Path, records: &[EpisodeRecord]) -> Result<()> {
    if !cfg.eval.traces {
        return Ok(());
    }
    for r in records {
        let stem = format!("{}_{:02}", r.metrics.item, r.metrics.slice);
        out.write(dir.join("traces").join(format!("{stem}.csv")), &io::trace_csv(&r.trace)?)?;
        out.write(
            dir.join("series").join(format!("{stem}.csv")),
            &io::phase_series_csv(r, cfg.env.target_tolerance)?,
        )?;
    }
    Ok(())
}

fn held_out_name(cfg: &RunConfig) -> String {
    cfg.held_out().map(|i| i.name.clone()).unwrap_or_default()
}

/// Evaluate trained policies in the calibrated cutting world.
pub fn cmd_eval(cfg: &RunConfig, tags: &[ModelTag]) -> Result<Vec<(ModelTag, Metrics)>> {
    cfg.validate()?;
    let world = world_items(cfg, ModelTag::Cutsim, true)?;
    let mut results = Vec::new();
    for &tag in tags {
        let actor = load_policy(cfg, tag)?;
        let runs = compare_policies(cfg, &world, &[(tag.as_str().to_string(), &actor)])?;
        let (_, records) = runs.into_iter().next().expect("one policy");
        let dir = cfg.output_dir.join("eval").join(tag.as_str());
        let metrics = metrics_of(&records);
        let mut out = OutputSet::default();
        out.write(dir.join("episodes.csv"), &io::episode_metrics_csv(&metrics, tag.as_str())?)?;
        out.write(
            dir.join("force_stats.csv"),
            &io::force_stats_csv(&[(tag.as_str().to_string(), metrics.clone())], &held_out_name(cfg))?,
        )?;
        write_traces(cfg, &mut out, &dir, &records)?;
        finish(cfg, "eval", &dir, out)?;
        results.push((tag, metrics));
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub held_out: String,
    pub rows: Vec<(String, Metrics)>,
}

/// Both policies, same schedule, calibrated cutting world including the held-out item.
pub fn cmd_compare(cfg: &RunConfig) -> Result<CompareReport> {
    cfg.validate()?;
    let held_out = cfg.held_out()?.name.clone();
    let cutsim = load_policy(cfg, ModelTag::Cutsim)?;
    let baseline = load_policy(cfg, ModelTag::Baseline)?;
    if load_record(cfg, &held_out, ModelTag::Cutsim).is_err() {
        return Err(Error::MissingHeldOutItem);
    }
    let world = world_items(cfg, ModelTag::Cutsim, true)?;
    let runs = compare_policies(
        cfg,
        &world,
        &[("cutsim".to_string(), &cutsim), ("baseline".to_string(), &baseline)],
    )?;
    let dir = cfg.output_dir.join("compare");
    let mut out = OutputSet::default();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (name, records) in &runs {
        let m = metrics_of(records);
        all.extend(io::episode_metrics_csv(&m, name)?);
        write_traces(cfg, &mut out, &dir.join(name), records)?;
        rows.push((name.clone(), m));
    }
    out.write(dir.join("force_stats.csv"), &io::force_stats_csv(&rows, &held_out)?)?;
    let episodes: Vec<u8> = rows
        .iter()
        .enumerate()
        .map(|(i, (name, m))| {
            let bytes = io::episode_metrics_csv(m, name)?;
            // keep a single header row
            Ok(if i == 0 {
                bytes
            } else {
                bytes[bytes.iter().position(|&b| b == b'\n').map_or(0, |p| p + 1)..].to_vec()
            })
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    out.write(dir.join("episodes.csv"), &episodes)?;
    finish(cfg, "compare", &dir, out)?;
    Ok(CompareReport { held_out, rows })
}
