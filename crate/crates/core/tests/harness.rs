use std::fs;
use std::path::{Path, PathBuf};

use slicer_core::harness::commands::{load_record, world_items, ItemRecord};
use slicer_core::harness::io::{load_force_profile, PROFILE_HEADER};
use slicer_core::harness::{
    cmd_calibrate, cmd_compare, cmd_eval, cmd_simulate, cmd_train, ItemRole, Manifest, ModelTag, RunConfig,
};
use slicer_core::rl::sac::NetworkSpec;
use slicer_core::rl::train::SliceTask;
use slicer_core::Error;

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.calibration.tpe.n_startup = 4;
    cfg.calibration.tpe.n_trials = 6;
    cfg.calibration.adam.iterations = 3;
    cfg.sac.total_steps = 120;
    cfg.sac.warmup_steps = 40;
    cfg.sac.batch_size = 16;
    cfg.sac.eval_interval = 60;
    cfg.sac.eval_episodes = 1;
    cfg.sac.network = NetworkSpec {
        tcn_channels: 4,
        tcn_kernel: 2,
        tcn_dilations: vec![1, 2],
        feature_dim: 8,
        fusion_hidden: vec![16],
        critic_hidden: vec![16],
    };
    cfg.env.max_steps = 20;
    cfg.eval.schedule = vec![
        SliceTask {
            item: "tomato".into(),
            slices: 1,
            thickness: 0.005,
        },
        SliceTask {
            item: "carrot".into(),
            slices: 2,
            thickness: 0.005,
        },
    ];
    cfg
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_covers_the_full_descent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.simulate.scene = Some("cucumber".into());
    let paths = cmd_simulate(&cfg).unwrap();
    assert_eq!(paths.len(), 1);
    let text = fs::read_to_string(&paths[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), PROFILE_HEADER.join(","));
    let profile = load_force_profile(&paths[0]).unwrap();
    let (start, end) = profile.time_range().unwrap();
    // 0.04 m of food at 0.02 m/s
    assert!(end - start >= 2.0, "duration {}", end - start);
    assert!(profile.peak_magnitude().unwrap() > 0.0);
    let manifest: Manifest = serde_json::from_slice(&fs::read(tmp.path().join("profiles/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.files.len(), 1);
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
}

#[test]
fn simulate_rejects_unknown_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.simulate.scene = Some("leek".into());
    let err = cmd_simulate(&cfg).unwrap_err();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn golden_profile_is_reproduced() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_cucumber.csv");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.simulate.scene = Some("cucumber".into());
    cfg.simulate.dt = 5e-4;
    let paths = cmd_simulate(&cfg).unwrap();
    let fresh = fs::read(&paths[0]).unwrap();
    if std::env::var_os("SLICER_BLESS").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &fresh).unwrap();
    }
    let archived = fs::read(&golden).expect("golden profile missing; rerun with SLICER_BLESS=1");
    assert!(fresh == archived, "simulated profile differs from the archived golden trace");
}

#[test]
fn calibrate_writes_both_records_per_item_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for dir in [a.path(), b.path()] {
        let mut cfg = small_config(dir);
        cfg.items.retain(|i| i.role == ItemRole::Train);
        cfg.items.push(slicer_core::harness::config::default_items().pop().unwrap());
        cmd_simulate(&cfg).unwrap();
        let records = cmd_calibrate(&cfg).unwrap();
        runs.push((cfg, records));
    }
    let (cfg, records) = &runs[0];
    let train: Vec<&ItemRecord> = records
        .iter()
        .filter(|r| cfg.item(&r.name).unwrap().role == ItemRole::Train)
        .collect();
    assert_eq!(train.iter().filter(|r| r.tag == ModelTag::Cutsim).count(), 3);
    assert_eq!(train.iter().filter(|r| r.tag == ModelTag::Baseline).count(), 3);
    for r in records {
        assert_eq!(&load_record(cfg, &r.name, r.tag).unwrap(), r);
        assert_eq!(r.metadata.seed, 5);
        assert_eq!(r.metadata.config_hash, cfg.hash().unwrap());
        assert_eq!(r.relative_rmse.is_some(), r.tag == ModelTag::Cutsim);
    }
    assert_eq!(runs[0].1, runs[1].1);
    // only the manifests name the output directory
    let strip = |d: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        files_under(d)
            .into_iter()
            .filter(|(p, _)| !p.ends_with("manifest.json"))
            .collect()
    };
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn calibrate_names_item_without_profiles() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let err = cmd_calibrate(&cfg).unwrap_err();
    assert!(err.is_config_error());
    assert!(err.to_string().contains("tomato"), "{err}");
}

fn prepared(dir: &Path) -> RunConfig {
    let cfg = small_config(dir);
    cmd_simulate(&cfg).unwrap();
    cmd_calibrate(&cfg).unwrap();
    cfg
}

#[test]
fn train_eval_compare_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());

    // baseline policies are trained against spring items
    assert!(world_items(&cfg, ModelTag::Baseline, false)
        .unwrap()
        .iter()
        .all(|i| matches!(i.model, slicer_core::rl::ItemModel::Baseline { .. })));

    let summaries = cmd_train(&cfg, &[ModelTag::Cutsim]).unwrap();
    assert_eq!(summaries[0].steps, 120);
    assert_eq!(summaries[0].curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![60, 120]);
    let dir = tmp.path().join("policies/cutsim");
    for f in ["final.ckpt", "best.ckpt", "curve.csv", "episodes.csv", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }

    // resume continues the step index without a gap up to the new total
    cfg.train.resume = true;
    cfg.sac.total_steps = 240;
    let resumed = cmd_train(&cfg, &[ModelTag::Cutsim]).unwrap();
    assert_eq!(resumed[0].steps, 240);
    let steps: Vec<usize> = resumed[0].curve.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![60, 120, 180, 240]);
    assert_eq!(resumed[0].curve[..2], summaries[0].curve[..]);
    cfg.train.resume = false;
    cfg.sac.total_steps = 120;

    assert!(matches!(cmd_compare(&cfg), Err(Error::MissingPolicy(_))));

    // identical policies give identical statistics
    fs::create_dir_all(tmp.path().join("policies/baseline")).unwrap();
    fs::copy(dir.join("final.ckpt"), tmp.path().join("policies/baseline/final.ckpt")).unwrap();
    let report = cmd_compare(&cfg).unwrap();
    assert_eq!(report.held_out, "carrot");
    assert_eq!(report.rows.len(), 2);
    // NaN means (no food contact) defeat PartialEq; compare renderings
    assert_eq!(format!("{:?}", report.rows[0].1), format!("{:?}", report.rows[1].1));
    let stats = fs::read_to_string(tmp.path().join("compare/force_stats.csv")).unwrap();
    let lines: Vec<&str> = stats.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1..].iter().filter(|l| l.contains(",carrot,1,")).count() == 2);
    let series = tmp.path().join("compare/cutsim/series/carrot_01.csv");
    assert!(fs::read_to_string(series).unwrap().starts_with("t_s,force_N,z_m,phase\n"));

    let evals = cmd_eval(&cfg, &[ModelTag::Cutsim]).unwrap();
    assert_eq!(evals[0].1.episodes.len(), 3);
    assert_eq!(format!("{:?}", evals[0].1), format!("{:?}", report.rows[0].1));
}

#[test]
fn zero_step_training_keeps_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.sac.total_steps = 0;
    let s = cmd_train(&cfg, &[ModelTag::Baseline]).unwrap();
    assert!(s[0].curve.is_empty() && s[0].episodes.is_empty());
    let dir = tmp.path().join("policies/baseline");
    assert!(dir.join("final.ckpt").exists());
    assert!(!dir.join("best.ckpt").exists());
    assert_eq!(fs::read_to_string(dir.join("curve.csv")).unwrap(), "step,mean_return,success_rate\n");
}

#[test]
fn compare_requires_held_out_item() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    for item in &mut cfg.items {
        item.role = ItemRole::Train;
    }
    assert!(matches!(cmd_compare(&cfg), Err(Error::MissingHeldOutItem)));
}

#[test]
fn reruns_reproduce_training_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for dir in [a.path(), b.path()] {
        let mut cfg = prepared(dir);
        cfg.sac.total_steps = 60;
        cmd_train(&cfg, &[ModelTag::Baseline]).unwrap();
        let d = dir.join("policies/baseline");
        outs.push(
            ["final.ckpt", "best.ckpt", "curve.csv", "episodes.csv"]
                .map(|f| fs::read(d.join(f)).unwrap()),
        );
    }
    assert!(outs[0] == outs[1]);
}
