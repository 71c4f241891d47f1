//! Per-lever calibration from force sweeps, and the relative movement
//! artifact metric.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanics::{
    coefficients_from_geometry, CalibrationCoefficients, Lever, LeverGeometry, MechanicsError,
    SensorReading,
};

/// Sweeps must cover at least this much of the 0–20 N calibration range.
pub const MIN_SWEEP_SPAN_N: f64 = 10.0;
pub const MIN_SWEEP_SAMPLES: usize = 10;
pub const DEFAULT_R2_FLOOR: f64 = 0.99;
pub const INTERCEPT_WARN_N: f64 = 0.2;
pub const DEFAULT_ARTIFACT_GUARD_N: f64 = 1.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("sweep for {lever:?} rejected: {reason}")]
    InvalidSweep { lever: Lever, reason: String },
    #[error("singular design: all external forces are equal")]
    SingularDesign,
    #[error("calibration invalid: {0}")]
    Invalid(String),
    #[error("series length mismatch: external has {external} samples, device has {device}")]
    LengthMismatch { external: usize, device: usize },
    #[error("series not time-aligned at sample {index}")]
    Misaligned { index: usize },
    #[error("sweep CSV line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        /// 1-based field number, 0 when the whole row is at fault.
        column: u64,
        message: String,
    },
    #[error("sweep CSV has no samples for {0:?}")]
    MissingLever(Lever),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub external_force: f64,
    pub reading: SensorReading,
}

/// A calibration sweep: a known external force applied to one lever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lever: Lever,
    pub samples: Vec<SweepSample>,
}

impl SweepRecord {
    pub fn new(lever: Lever, samples: Vec<SweepSample>) -> Result<Self, CalibrationError> {
        let sweep = SweepRecord { lever, samples };
        sweep.validate()?;
        Ok(sweep)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let reject = |reason: String| CalibrationError::InvalidSweep {
            lever: self.lever,
            reason,
        };
        if self.samples.len() < MIN_SWEEP_SAMPLES {
            return Err(reject(format!(
                "{} samples, need at least {MIN_SWEEP_SAMPLES}",
                self.samples.len()
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let r = &s.reading;
            if ![s.external_force, r.f_m, r.t_m, r.t].iter().all(|v| v.is_finite()) {
                return Err(reject(format!("non-finite value in sample {i}")));
            }
            if s.external_force < 0.0 {
                return Err(reject(format!("negative external force in sample {i}")));
            }
        }
        let (lo, hi) = self.force_range();
        if hi - lo < MIN_SWEEP_SPAN_N {
            return Err(reject(format!(
                "external force spans {:.3} N, need at least {MIN_SWEEP_SPAN_N} N",
                hi - lo
            )));
        }
        Ok(())
    }

    fn force_range(&self) -> (f64, f64) {
        self.samples
            .iter()
            .map(|s| s.external_force)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                (lo.min(f), hi.max(f))
            })
    }
}

/// Ordinary least squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(x, y)` pairs, with intercept.
///
/// R² is `1 - SS_res / SS_tot` with mean-centered `SS_tot`; a perfectly flat
/// response (`SS_tot = 0`) fitted exactly reports 1.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit, CalibrationError> {
    if xs.len() != ys.len() {
        return Err(CalibrationError::LengthMismatch {
            external: xs.len(),
            device: ys.len(),
        });
    }
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Err(CalibrationError::SingularDesign);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CalibrationError::SingularDesign);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(LineFit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationWarning {
    LowR2 { channel: String, r2: f64, floor: f64 },
    LargeIntercept { intercept_n: f64 },
}

/// Regression of one lever's sensor output against the applied force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverFit {
    pub lever: Lever,
    /// Fitted `L_G / L_M`.
    pub slope_force: f64,
    /// Fitted `(L_G / L_M) * d`, meters, sign-folded positive.
    pub slope_torque: f64,
    pub intercept_force: f64,
    pub intercept_torque: f64,
    pub r2_force: f64,
    pub r2_torque: f64,
    pub warnings: Vec<CalibrationWarning>,
}

pub fn fit_lever(sweep: &SweepRecord) -> Result<LeverFit, CalibrationError> {
    fit_lever_with_floor(sweep, DEFAULT_R2_FLOOR)
}

pub fn fit_lever_with_floor(
    sweep: &SweepRecord,
    r2_floor: f64,
) -> Result<LeverFit, CalibrationError> {
    sweep.validate()?;
    let xs: Vec<f64> = sweep.samples.iter().map(|s| s.external_force).collect();
    let fm: Vec<f64> = sweep.samples.iter().map(|s| s.reading.f_m).collect();
    let tm: Vec<f64> = sweep.samples.iter().map(|s| s.reading.t_m).collect();
    let force = linear_fit(&xs, &fm)?;
    let mut torque = linear_fit(&xs, &tm)?;

    // Lever 2 produces negative torque; fold it so both slopes read as
    // (L_G / L_M) * d. Data that already arrives folded is left alone.
    if sweep.lever == Lever::Lever2 && torque.slope < 0.0 {
        torque.slope = -torque.slope;
        torque.intercept = -torque.intercept;
    }

    let mut warnings = Vec::new();
    for (channel, r2) in [("force", force.r2), ("torque", torque.r2)] {
        if r2 < r2_floor {
            warnings.push(CalibrationWarning::LowR2 {
                channel: channel.to_string(),
                r2,
                floor: r2_floor,
            });
        }
    }
    // Intercept expressed as grip-equivalent force at the contact.
    let intercept_n = force.intercept / force.slope;
    if intercept_n.abs() > INTERCEPT_WARN_N {
        warnings.push(CalibrationWarning::LargeIntercept { intercept_n });
    }

    Ok(LeverFit {
        lever: sweep.lever,
        slope_force: force.slope,
        slope_torque: torque.slope,
        intercept_force: force.intercept,
        intercept_torque: torque.intercept,
        r2_force: force.r2,
        r2_torque: torque.r2,
        warnings,
    })
}

/// Decomposition constants from the two lever fits.
pub fn solve_coefficients(
    fit_1: &LeverFit,
    fit_2: &LeverFit,
) -> Result<CalibrationCoefficients, CalibrationError> {
    let geometry = |fit: &LeverFit, side: Lever| -> Result<LeverGeometry, CalibrationError> {
        if !(fit.slope_force > 0.0) || !(fit.slope_torque > 0.0) {
            return Err(CalibrationError::Invalid(format!(
                "{side:?} slopes must be positive (force {}, torque {})",
                fit.slope_force, fit.slope_torque
            )));
        }
        Ok(LeverGeometry::new(
            fit.slope_force,
            fit.slope_torque / fit.slope_force,
            side,
        )?)
    };
    let g1 = geometry(fit_1, Lever::Lever1)?;
    let g2 = geometry(fit_2, Lever::Lever2)?;
    Ok(coefficients_from_geometry(&g1, &g2)?)
}

/// One sample of the relative artifact comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSample {
    pub t: f64,
    pub f_external: f64,
    pub f_device: f64,
    /// `None` where the external force is below the guard threshold.
    pub a_tm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSeries {
    pub samples: Vec<ArtifactSample>,
}

impl ArtifactSeries {
    /// Largest `|A_TM|` over the defined samples.
    pub fn max_abs(&self) -> Option<f64> {
        self.samples
            .iter()
            .filter_map(|s| s.a_tm)
            .map(f64::abs)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Pointwise relative error `(F_ext - F_dev) / F_ext` of two time-aligned
/// series of `(t, force)` pairs.
pub fn artifact_ratio(
    external: &[(f64, f64)],
    device: &[(f64, f64)],
    guard: f64,
) -> Result<ArtifactSeries, CalibrationError> {
    if external.len() != device.len() {
        return Err(CalibrationError::LengthMismatch {
            external: external.len(),
            device: device.len(),
        });
    }
    let samples = external
        .iter()
        .zip(device)
        .enumerate()
        .map(|(index, (&(t, f_external), &(td, f_device)))| {
            if (t - td).abs() > 1e-9 {
                return Err(CalibrationError::Misaligned { index });
            }
            let a_tm = (f_external >= guard).then(|| (f_external - f_device) / f_external);
            Ok(ArtifactSample {
                t,
                f_external,
                f_device,
                a_tm,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ArtifactSeries { samples })
}

#[derive(Debug, Deserialize)]
struct SweepRow {
    t_s: f64,
    #[serde(rename = "external_force_N")]
    external_force: f64,
    #[serde(rename = "f_m_N")]
    f_m: f64,
    #[serde(rename = "t_m_Nm")]
    t_m: f64,
    lever_id: u8,
}

pub const SWEEP_CSV_HEADER: &str = "t_s,external_force_N,f_m_N,t_m_Nm,lever_id";

/// Parses a sweep CSV into one record per lever present in the file.
pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepRecord>, CalibrationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut lever_1 = Vec::new();
    let mut lever_2 = Vec::new();
    for row in rdr.deserialize::<SweepRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field().map_or(0, |f| f + 1),
                _ => 0,
            };
            CalibrationError::Parse {
                line,
                column,
                message: e.to_string(),
            }
        })?;
        let sample = SweepSample {
            external_force: row.external_force,
            reading: SensorReading::new(row.f_m, row.t_m, row.t_s),
        };
        match Lever::from_id(row.lever_id) {
            Some(Lever::Lever1) => lever_1.push(sample),
            Some(Lever::Lever2) => lever_2.push(sample),
            None => {
                return Err(CalibrationError::Parse {
                    line: rdr.position().line(),
                    column: 5,
                    message: format!("lever_id must be 1 or 2, got {}", row.lever_id),
                })
            }
        }
    }
    let mut out = Vec::new();
    for (lever, samples) in [(Lever::Lever1, lever_1), (Lever::Lever2, lever_2)] {
        if !samples.is_empty() {
            out.push(SweepRecord { lever, samples });
        }
    }
    Ok(out)
}

pub fn write_sweep_csv<W: std::io::Write>(
    mut out: W,
    sweeps: &[SweepRecord],
) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for sweep in sweeps {
        for s in &sweep.samples {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.reading.t,
                s.external_force,
                s.reading.f_m,
                s.reading.t_m,
                sweep.lever.id()
            )?;
        }
    }
    Ok(())
}

/// Full calibration outcome for a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fit_1: LeverFit,
    pub fit_2: LeverFit,
    pub coefficients: CalibrationCoefficients,
}

pub fn calibrate(sweeps: &[SweepRecord]) -> Result<Calibration, CalibrationError> {
    let find = |lever: Lever| {
        sweeps
            .iter()
            .find(|s| s.lever == lever)
            .ok_or(CalibrationError::MissingLever(lever))
    };
    let fit_1 = fit_lever(find(Lever::Lever1)?)?;
    let fit_2 = fit_lever(find(Lever::Lever2)?)?;
    let coefficients = solve_coefficients(&fit_1, &fit_2)?;
    Ok(Calibration {
        fit_1,
        fit_2,
        coefficients,
    })
}

pub fn calibrate_file(path: &Path) -> Result<Calibration, CalibrationError> {
    let file = std::fs::File::open(path)?;
    calibrate(&read_sweep_csv(file)?)
}
