//! On-disk session format.
//!
//! A session is a directory:
//!
//! ```text
//! <session>/manifest.json
//! <session>/trials/trial_000.csv
//! <session>/trials/trial_001.csv
//! ...
//! ```
//!
//! Trial CSVs carry the full-rate samples with the columns of
//! [`TRIAL_CSV_HEADER`]; markers and flags live in the manifest. Every file
//! is written to a temporary name and renamed into place, and the manifest is
//! rewritten only after the trial file it will reference is durable. A
//! reader therefore always sees the session up to its last complete trial.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use gripforce_core::protocol::{
    SessionPlan, SessionRecording, StimulusMarkers, TrialFlag, TrialPhase, TrialRecord,
    TrialSample,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::DeviceProfile;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIALS_DIR: &str = "trials";
pub const TRIAL_CSV_HEADER: &str =
    "t_s,f_m_N,t_m_Nm,f_grip_1_N,f_grip_2_N,f_mean_N,tactor_x_mm,tactor_y_mm,phase";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent() {
        // Make the rename itself durable where the platform allows it.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PersistError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        column: e.column() as u64,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Synthetic,
    Replay,
    Interactive,
    Hardware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Complete,
    /// Stopped early; the trials listed are still valid.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub index: usize,
    /// Relative to the session directory.
    pub file: String,
    pub samples: usize,
    pub markers: Option<StimulusMarkers>,
    pub flags: Vec<TrialFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub format_version: u32,
    pub session_id: String,
    pub participant: String,
    pub mode: Mode,
    /// Plan seed.
    pub seed: u64,
    /// Seed of the synthetic participant and virtual rig, if any.
    pub participant_seed: Option<u64>,
    pub created_at: String,
    pub sample_rate: f64,
    pub plan_digest: String,
    pub plan: SessionPlan,
    pub device_profile: DeviceProfile,
    pub status: SessionStatus,
    pub abort_reason: Option<String>,
    pub trials: Vec<TrialEntry>,
}

impl SessionManifest {
    /// Last trial index that made it to disk.
    pub fn last_complete_trial(&self) -> Option<usize> {
        self.trials.last().map(|t| t.index)
    }
}

/// Session id derived from its inputs, so reruns produce identical files.
pub fn session_id(participant: &str, plan: &SessionPlan, participant_seed: Option<u64>) -> String {
    let seed = participant_seed.map_or_else(|| "live".to_string(), |s| format!("{s:016x}"));
    format!("{participant}-{}-{seed}", &plan.digest()[..12])
}

/// Timestamp for new files: `SOURCE_DATE_EPOCH` when set, else now.
pub fn timestamp_now() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now);
    at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    t_s: f64,
    #[serde(rename = "f_m_N")]
    f_m: f64,
    #[serde(rename = "t_m_Nm")]
    t_m: f64,
    #[serde(rename = "f_grip_1_N")]
    f_grip_1: f64,
    #[serde(rename = "f_grip_2_N")]
    f_grip_2: f64,
    #[serde(rename = "f_mean_N")]
    f_mean: f64,
    tactor_x_mm: f64,
    tactor_y_mm: f64,
    phase: String,
}

pub fn write_trial_csv<W: Write>(out: W, samples: &[TrialSample]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(CsvRow {
            t_s: s.t,
            f_m: s.f_m,
            t_m: s.t_m,
            f_grip_1: s.f_grip_1,
            f_grip_2: s.f_grip_2,
            f_mean: s.f_mean,
            tactor_x_mm: s.tactor_x_mm,
            tactor_y_mm: s.tactor_y_mm,
            phase: s.phase.as_str().to_string(),
        })?;
    }
    if samples.is_empty() {
        w.write_record(TRIAL_CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trial_csv(path: &Path) -> Result<Vec<TrialSample>, PersistError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let parse_err = |line: u64, column: u64, message: String| PersistError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRIAL_CSV_HEADER {
        return Err(parse_err(1, 0, format!("unexpected header {header:?}")));
    }
    let mut samples = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field().map_or(0, |f| f + 1),
                _ => 0,
            };
            parse_err(line, column, e.to_string())
        })?;
        let phase = TrialPhase::parse(&row.phase).ok_or_else(|| {
            parse_err(
                samples.len() as u64 + 2,
                9,
                format!("unknown phase {:?}", row.phase),
            )
        })?;
        samples.push(TrialSample {
            t: row.t_s,
            f_m: row.f_m,
            t_m: row.t_m,
            f_grip_1: row.f_grip_1,
            f_grip_2: row.f_grip_2,
            f_mean: row.f_mean,
            tactor_x_mm: row.tactor_x_mm,
            tactor_y_mm: row.tactor_y_mm,
            phase,
        });
    }
    Ok(samples)
}

pub fn trial_file_name(index: usize) -> String {
    format!("{TRIALS_DIR}/trial_{index:03}.csv")
}

/// Appends trials to a session directory, keeping the manifest current.
#[derive(Debug)]
pub struct SessionWriter {
    dir: PathBuf,
    manifest: SessionManifest,
}

impl SessionWriter {
    pub fn create(dir: &Path, manifest: SessionManifest) -> Result<Self, PersistError> {
        if dir.join(MANIFEST_FILE).exists() {
            return Err(PersistError::Format {
                path: dir.to_path_buf(),
                message: "a session already exists here".into(),
            });
        }
        let trials = dir.join(TRIALS_DIR);
        fs::create_dir_all(&trials).map_err(io_err(&trials))?;
        let w = SessionWriter {
            dir: dir.to_path_buf(),
            manifest,
        };
        w.write_manifest()?;
        Ok(w)
    }

    pub fn manifest(&self) -> &SessionManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_manifest(&self) -> Result<(), PersistError> {
        let mut json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        json.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), &json)
    }

    pub fn append_trial(&mut self, record: &TrialRecord) -> Result<(), PersistError> {
        let file = trial_file_name(record.spec.index);
        let path = self.dir.join(&file);
        let mut buf = Vec::new();
        write_trial_csv(&mut buf, &record.samples).map_err(|e| PersistError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        write_atomic(&path, &buf)?;
        self.manifest.trials.push(TrialEntry {
            index: record.spec.index,
            file,
            samples: record.samples.len(),
            markers: record.markers,
            flags: record.flags.clone(),
        });
        self.write_manifest()
    }

    pub fn finish(
        mut self,
        status: SessionStatus,
        reason: Option<String>,
    ) -> Result<SessionManifest, PersistError> {
        self.manifest.status = status;
        self.manifest.abort_reason = reason;
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

/// A session read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSession {
    pub dir: PathBuf,
    pub manifest: SessionManifest,
    pub recording: SessionRecording,
}

pub fn load_session(dir: &Path) -> Result<LoadedSession, PersistError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: SessionManifest = read_json(&manifest_path)?;
    let format = |message: String| PersistError::Format {
        path: manifest_path.clone(),
        message,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.plan.digest() != manifest.plan_digest {
        return Err(format("plan digest does not match the stored plan".into()));
    }
    let specs: Vec<_> = manifest.plan.trials().copied().collect();
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for entry in &manifest.trials {
        let spec = *specs
            .get(entry.index)
            .ok_or_else(|| format(format!("trial {} is not in the plan", entry.index)))?;
        let path = dir.join(&entry.file);
        let samples = read_trial_csv(&path)?;
        if samples.len() != entry.samples {
            return Err(PersistError::Format {
                path,
                message: format!(
                    "{} samples on disk, manifest lists {}",
                    samples.len(),
                    entry.samples
                ),
            });
        }
        trials.push(TrialRecord {
            spec,
            sample_rate: manifest.sample_rate,
            samples,
            markers: entry.markers,
            flags: entry.flags.clone(),
            truth: Vec::new(),
        });
    }
    Ok(LoadedSession {
        dir: dir.to_path_buf(),
        recording: SessionRecording {
            subject: manifest.participant.clone(),
            plan: manifest.plan.clone(),
            trials,
        },
        manifest,
    })
}

/// Session directories under `paths`: each path is either a session itself
/// or a directory whose immediate children are sessions.
pub fn find_sessions(paths: &[PathBuf]) -> Result<Vec<PathBuf>, PersistError> {
    let mut found = Vec::new();
    for p in paths {
        if p.join(MANIFEST_FILE).is_file() {
            found.push(p.clone());
            continue;
        }
        if !p.is_dir() {
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(io_err(p))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(MANIFEST_FILE).is_file())
            .collect();
        children.sort();
        found.extend(children);
    }
    Ok(found)
}
