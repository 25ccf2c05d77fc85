use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slicer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_writes_profiles_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[simulate]\nscene = \"potato\"\ndt = 0.0005\n");
    let out = tmp.path().join("out");
    let o = slicer(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("profiles/potato.csv")).unwrap();
    assert!(text.starts_with("t_s,f_y_N,f_z_N,z_m\n"));
    let manifest = fs::read_to_string(out.join("profiles/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"));
}

#[test]
fn config_problems_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown_key = write_config(tmp.path(), "seeed = 1\n");
    assert_eq!(slicer(&["simulate", "--config", &unknown_key]).status.code(), Some(1));

    let missing_scene = write_config(tmp.path(), "[simulate]\nscene = \"leek\"\n");
    let o = slicer(&["simulate", "--config", &missing_scene]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("leek"));

    assert_eq!(slicer(&["simulate", "--config", "/no/such/file.toml"]).status.code(), Some(1));
    assert_eq!(slicer(&["train", "--model-tag", "gazebo"]).status.code(), Some(1));
    assert_eq!(slicer(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    // no profiles registered: configuration error naming the item
    let o = slicer(&["calibrate", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tomato"));

    // eval without a trained policy is a runtime error
    fs::create_dir_all(tmp.path().join("items")).unwrap();
    let o = slicer(&["eval", "--out", out, "--model-tag", "cutsim"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn help_exits_zero() {
    let o = slicer(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["simulate", "calibrate", "train", "eval", "compare"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
