//! CSV schemas, JSON records and atomic file output.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save → load → save cycle reproduces the original bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bridge::TraceRecord;
use crate::cutsim::{ForceProfile, ProfileSample};
use crate::error::{Error, Result};
use crate::rl::train::{CurvePoint, EpisodeLog, EpisodeRecord, Phase};
use crate::rl::Metrics;

pub const PROFILE_HEADER: [&str; 4] = ["t_s", "f_y_N", "f_z_N", "z_m"];
pub const TRACE_HEADER: [&str; 13] = [
    "t_s", "y_m", "z_m", "vy_mps", "vz_mps", "f_y_N", "f_z_N", "kc_y_Npm", "kc_z_Npm", "kp", "kd", "xd_y_m", "xd_z_m",
];
pub const CURVE_HEADER: [&str; 3] = ["step", "mean_return", "success_rate"];

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Rows of a numeric CSV with the given header, as `(line, values)`.
fn read_numeric(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => parse_err(0, format!("{other:?}")),
    })?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if i == 0 {
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(parse_err(line, format!("expected header {}, got {}", header.join(","), got.join(","))));
            }
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let mut values = Vec::with_capacity(rec.len());
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: '{field}'")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    line,
                });
            }
            values.push(v);
        }
        rows.push((line, values));
    }
    Ok(rows)
}

pub fn profile_csv(profile: &ForceProfile) -> Result<Vec<u8>> {
    csv_bytes(
        &PROFILE_HEADER,
        profile.samples().iter().map(|s| [num(s.t), num(s.f_y), num(s.f_z), num(s.z)]),
    )
}

pub fn save_force_profile(path: &Path, profile: &ForceProfile) -> Result<()> {
    write_atomic(path, &profile_csv(profile)?)
}

pub fn load_force_profile(path: &Path) -> Result<ForceProfile> {
    let rows = read_numeric(path, &PROFILE_HEADER)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut last: Option<f64> = None;
    for (line, v) in rows {
        if last.is_some_and(|t| !(v[0] > t)) {
            return Err(Error::NonMonotonicTime {
                path: path.to_path_buf(),
                line,
            });
        }
        last = Some(v[0]);
        samples.push(ProfileSample {
            t: v[0],
            f_y: v[1],
            f_z: v[2],
            z: v[3],
        });
    }
    ForceProfile::new(samples)
}

pub fn trace_csv(records: &[TraceRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &TRACE_HEADER,
        records.iter().map(|r| {
            [
                r.t,
                r.pose[0],
                r.pose[1],
                r.velocity[0],
                r.velocity[1],
                r.force.f_y,
                r.force.f_z,
                r.gains.stiffness[0],
                r.gains.stiffness[1],
                r.gains.kp,
                r.gains.kd,
                r.reference[0],
                r.reference[1],
            ]
            .map(num)
        }),
    )
}

/// Force magnitude per exchange window with its contact phase.
pub fn phase_series_csv(record: &EpisodeRecord, board_band: f64) -> Result<Vec<u8>> {
    csv_bytes(
        &["t_s", "force_N", "z_m", "phase"],
        record.trace.iter().map(|r| {
            let phase = Phase::of(r.pose[1], record.food_height, board_band);
            [num(r.t), num(r.force.magnitude()), num(r.pose[1]), phase.as_str().to_string()]
        }),
    )
}

pub fn curve_csv(curve: &[CurvePoint]) -> Result<Vec<u8>> {
    csv_bytes(
        &CURVE_HEADER,
        curve.iter().map(|p| [p.step.to_string(), num(p.mean_return), num(p.success_rate)]),
    )
}

pub fn load_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    Ok(read_numeric(path, &CURVE_HEADER)?
        .into_iter()
        .map(|(_, v)| CurvePoint {
            step: v[0] as usize,
            mean_return: v[1],
            success_rate: v[2],
        })
        .collect())
}

pub fn training_episodes_csv(episodes: &[EpisodeLog]) -> Result<Vec<u8>> {
    csv_bytes(
        &["step", "return", "length", "termination"],
        episodes.iter().map(|e| {
            [
                e.step.to_string(),
                num(e.episode_return),
                e.length.to_string(),
                e.termination.as_str().to_string(),
            ]
        }),
    )
}

pub fn episode_metrics_csv(metrics: &Metrics, policy: &str) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "policy",
            "item",
            "slice",
            "steps",
            "return",
            "peak_force_N",
            "board_peak_force_N",
            "mean_food_force_N",
            "mean_board_force_N",
            "jerk_rms_mps3",
            "success",
            "duration_s",
            "termination",
        ],
        metrics.episodes.iter().map(|e| {
            [
                policy.to_string(),
                e.item.clone(),
                e.slice.to_string(),
                e.steps.to_string(),
                num(e.episode_return),
                num(e.peak_force),
                num(e.board_peak_force),
                num(e.mean_food_force),
                num(e.mean_board_force),
                num(e.jerk_rms),
                (e.success as u8).to_string(),
                num(e.duration),
                e.termination.as_str().to_string(),
            ]
        }),
    )
}

/// Per-item median and IQR table; `held_out` names the generalisation item.
pub fn force_stats_csv(rows: &[(String, Metrics)], held_out: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (policy, metrics) in rows {
        for s in metrics.by_item() {
            let q = |x: Option<crate::rl::train::Quartiles>| match x {
                Some(q) => [num(q.median), num(q.q1), num(q.q3)],
                None => [String::new(), String::new(), String::new()],
            };
            let mut row = vec![
                policy.clone(),
                s.item.clone(),
                ((s.item == held_out) as u8).to_string(),
                s.episodes.to_string(),
                num(s.success_rate),
            ];
            for col in [s.peak_force, s.board_peak_force, s.mean_food_force, s.mean_board_force, s.jerk_rms] {
                row.extend(q(col));
            }
            out.push(row);
        }
    }
    let mut header: Vec<String> = ["policy", "item", "held_out", "episodes", "success_rate"]
        .map(String::from)
        .to_vec();
    for name in ["peak_force_N", "board_peak_force_N", "mean_food_force_N", "mean_board_force_N", "jerk_rms_mps3"] {
        for stat in ["median", "q1", "q3"] {
            header.push(format!("{name}_{stat}"));
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&header, out)
}

pub fn trials_csv(trials: &[crate::calibration::Trial]) -> Result<Vec<u8>> {
    let mut header = vec!["trial"];
    header.extend(crate::cutsim::SimParams::NAMES);
    header.push("loss");
    csv_bytes(
        &header,
        trials.iter().enumerate().map(|(i, t)| {
            let mut row = vec![i.to_string()];
            row.extend(t.params.to_array().map(num));
            row.push(num(t.loss));
            row
        }),
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Files written by one command, recorded in its manifest.
#[derive(Default)]
pub struct OutputSet {
    pub files: Vec<(PathBuf, String)>,
}

impl OutputSet {
    pub fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.files.push((path, sha256_hex(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = ForceProfile::new(vec![
            ProfileSample { t: 0.0, f_y: 0.1, f_z: 1.0 / 3.0, z: 0.045 },
            ProfileSample { t: 1e-4, f_y: -2.5e-7, f_z: 12.75, z: 0.044998 },
            ProfileSample { t: 2e-4, f_y: 0.0, f_z: 1e10, z: -0.001 },
        ])
        .unwrap();
        let path = dir.path().join("p.csv");
        save_force_profile(&path, &p).unwrap();
        let back = load_force_profile(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(profile_csv(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn header_is_exact() {
        let p = ForceProfile::new(vec![]).unwrap();
        assert_eq!(profile_csv(&p).unwrap(), b"t_s,f_y_N,f_z_N,z_m\n");
    }

    #[test]
    fn profile_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "t_s,f_y_N,f_z_N,z_m\n0,0,0,0\n0,1,1,1\n").unwrap();
        assert!(matches!(load_force_profile(&path), Err(Error::NonMonotonicTime { line: 3, .. })));
        fs::write(&path, "t_s,f_y_N,f_z_N,z_m\n0,0,x,0\n").unwrap();
        assert!(matches!(load_force_profile(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "t_s,f_y_N,f_z_N,z_m\n0,0,NaN,0\n").unwrap();
        assert!(matches!(load_force_profile(&path), Err(Error::NonFiniteValue { line: 2, .. })));
        fs::write(&path, "time,f_y_N,f_z_N,z_m\n").unwrap();
        assert!(matches!(load_force_profile(&path), Err(Error::Parse { line: 1, .. })));
    }
}
