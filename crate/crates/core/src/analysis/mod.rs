//! Response metrics and study statistics.
//!
//! The response to a stimulus is `Δ_PS`: peak mean grip force while the
//! tactor moves minus the force at movement onset. Per-subject condition
//! means of `Δ_PS` feed a two-way repeated-measures ANOVA (target force ×
//! displacement) and Holm-corrected adjacent-displacement comparisons.

mod anova;
pub mod special;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anova::{
    holm_adjust, holm_planned_comparisons, rm_anova_2way, rm_anova_2way_with, sums_of_squares,
    AnovaOptions, AnovaResult, Comparison, ComparisonResult, EffectTest, SphericityCorrection,
    SumsOfSquares,
};

use crate::protocol::{
    Displacement, SessionRecording, TargetForce, TrialCondition, TrialRecord,
};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trial {0} has no stimulus markers")]
    MissingMarkers(usize),
    #[error("trial {index}: stimulus window holds {samples} samples, need at least 3")]
    ShortWindow { index: usize, samples: usize },
    #[error("incomplete table: subject {subject} has no data for {condition}")]
    IncompleteTable { subject: String, condition: String },
    #[error("table shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in table at subject {0}")]
    NonFinite(String),
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("need at least 2 levels per factor")]
    TooFewLevels,
    #[error("need at least 2 trials to average, got {0}")]
    TooFewTrials(usize),
    #[error("no sessions to analyze")]
    NoSessions,
}

/// Change in mean grip during tactor movement: peak inside
/// `[onset, end]` minus the value at onset.
pub fn delta_ps(trial: &TrialRecord) -> Result<f64, AnalysisError> {
    let index = trial.spec.index;
    let m = trial.markers.ok_or(AnalysisError::MissingMarkers(index))?;
    let half = 0.5 / trial.sample_rate;
    let window: Vec<f64> = trial
        .samples
        .iter()
        .filter(|s| s.t >= m.onset_t - half && s.t <= m.end_t + half)
        .map(|s| s.f_mean)
        .collect();
    if window.len() < 3 {
        return Err(AnalysisError::ShortWindow {
            index,
            samples: window.len(),
        });
    }
    let onset = trial
        .index_at(m.onset_t)
        .map(|i| trial.samples[i].f_mean)
        .ok_or(AnalysisError::MissingMarkers(index))?;
    let peak = window.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(peak - onset)
}

/// Onset-aligned mean trace with standard errors across subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageTrace {
    /// Time relative to stimulus onset, s.
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Units the SE is taken over (subjects, or trials for one subject).
    pub n_units: usize,
    pub n_trials: usize,
    /// Fraction of the requested window lost to ragged trial lengths.
    pub trimmed_fraction: f64,
    pub warning: Option<String>,
}

fn mean_and_se(cols: &[Vec<f64>], len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = cols.len() as f64;
    let mut mean = vec![0.0; len];
    let mut se = vec![0.0; len];
    for k in 0..len {
        let m = cols.iter().map(|c| c[k]).sum::<f64>() / n;
        mean[k] = m;
        se[k] = if cols.len() > 1 {
            let var = cols.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
    }
    (mean, se)
}

/// Averages the mean-grip traces of one condition, aligned on the onset
/// sample, over `[-before_s, +after_s]` around onset. Trials are first
/// averaged within subject; the SE is across subjects.
pub fn condition_average(
    trials: &[(&str, &TrialRecord)],
    before_s: f64,
    after_s: f64,
) -> Result<AverageTrace, AnalysisError> {
    if trials.len() < 2 {
        return Err(AnalysisError::TooFewTrials(trials.len()));
    }
    let rate = trials[0].1.sample_rate;
    let want_pre = (before_s * rate).round() as usize;
    let want_post = (after_s * rate).round() as usize;
    let mut pre = want_pre;
    let mut post = want_post;
    let mut onsets = Vec::with_capacity(trials.len());
    for (_, tr) in trials {
        let m = tr.markers.ok_or(AnalysisError::MissingMarkers(tr.spec.index))?;
        let i0 = tr
            .index_at(m.onset_t)
            .ok_or(AnalysisError::MissingMarkers(tr.spec.index))?;
        pre = pre.min(i0);
        post = post.min(tr.samples.len() - 1 - i0);
        onsets.push(i0);
    }
    let len = pre + post + 1;
    let trimmed_fraction = 1.0 - len as f64 / (want_pre + want_post + 1) as f64;

    let mut by_subject: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for ((subject, tr), &i0) in trials.iter().zip(&onsets) {
        let trace = tr.samples[i0 - pre..=i0 + post]
            .iter()
            .map(|s| s.f_mean)
            .collect();
        by_subject.entry(subject).or_default().push(trace);
    }
    let units: Vec<Vec<f64>> = if by_subject.len() >= 2 {
        by_subject
            .values()
            .map(|traces| mean_and_se(traces, len).0)
            .collect()
    } else {
        by_subject.into_values().flatten().collect()
    };
    let (mean, se) = mean_and_se(&units, len);
    let t = (0..len)
        .map(|k| (k as f64 - pre as f64) / rate)
        .collect();
    Ok(AverageTrace {
        t,
        mean,
        se,
        n_units: units.len(),
        n_trials: trials.len(),
        trimmed_fraction,
        warning: (trimmed_fraction > 0.2).then(|| {
            format!(
                "{:.0}% of the requested window trimmed to common support",
                trimmed_fraction * 100.0
            )
        }),
    })
}

/// Mean finger and thumb force over the second before stimulus onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideSplit {
    pub target: TargetForce,
    pub finger_mean: f64,
    pub thumb_mean: f64,
    pub n_trials: usize,
    pub skipped: Vec<usize>,
}

pub const SIDE_SPLIT_WINDOW_S: f64 = 1.0;

/// Per-target finger/thumb means over the pre-onset stable window, pooled
/// across displacements. Training and unusable trials are ignored; trials
/// whose window starts before the recording are skipped and listed.
pub fn stable_phase_side_split(session: &SessionRecording) -> Vec<SideSplit> {
    TargetForce::ALL
        .into_iter()
        .filter_map(|target| {
            let mut finger = Vec::new();
            let mut thumb = Vec::new();
            let mut skipped = Vec::new();
            for tr in session
                .trials
                .iter()
                .filter(|t| !t.spec.training && t.is_usable() && t.spec.condition.target == target)
            {
                let m = tr.markers.expect("usable trial has markers");
                let half = 0.5 / tr.sample_rate;
                let start = m.onset_t - SIDE_SPLIT_WINDOW_S;
                if tr.samples.first().is_none_or(|s| s.t > start + half) {
                    skipped.push(tr.spec.index);
                    continue;
                }
                let window: Vec<_> = tr
                    .samples
                    .iter()
                    .filter(|s| s.t >= start - half && s.t < m.onset_t - half)
                    .collect();
                let n = window.len() as f64;
                finger.push(window.iter().map(|s| s.f_grip_1).sum::<f64>() / n);
                thumb.push(window.iter().map(|s| s.f_grip_2).sum::<f64>() / n);
            }
            if finger.is_empty() {
                return None;
            }
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            Some(SideSplit {
                target,
                finger_mean: avg(&finger),
                thumb_mean: avg(&thumb),
                n_trials: finger.len(),
                skipped,
            })
        })
        .collect()
}

/// Subjects × target × displacement matrix of per-subject mean `Δ_PS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPsTable {
    pub subjects: Vec<String>,
    pub a_labels: Vec<String>,
    pub b_labels: Vec<String>,
    /// `[subject][target][displacement]`, N.
    pub values: Vec<Vec<Vec<f64>>>,
}

fn default_labels() -> (Vec<String>, Vec<String>) {
    (
        TargetForce::ALL
            .iter()
            .map(|t| format!("{} N", t.newtons()))
            .collect(),
        Displacement::ALL
            .iter()
            .map(|d| format!("{} mm", d.mm()))
            .collect(),
    )
}

impl DeltaPsTable {
    /// Table for the 2 × 3 study design with subjects labeled `S01`, ...
    pub fn from_arrays(values: Vec<[[f64; 3]; 2]>) -> Result<Self, AnalysisError> {
        let (a_labels, b_labels) = default_labels();
        let table = DeltaPsTable {
            subjects: (0..values.len()).map(crate::simulator::subject_label).collect(),
            a_labels,
            b_labels,
            values: values
                .into_iter()
                .map(|s| s.iter().map(|row| row.to_vec()).collect())
                .collect(),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.subjects.len(), self.a_labels.len(), self.b_labels.len())
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let (n, a, b) = self.shape();
        if self.values.len() != n {
            return Err(AnalysisError::Shape(format!(
                "{} subject rows for {n} subjects",
                self.values.len()
            )));
        }
        for (subject, rows) in self.subjects.iter().zip(&self.values) {
            if rows.len() != a || rows.iter().any(|r| r.len() != b) {
                return Err(AnalysisError::Shape(format!(
                    "subject {subject} is not {a} x {b}"
                )));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(AnalysisError::NonFinite(subject.clone()));
            }
        }
        Ok(())
    }

    /// Per-subject cell means of `Δ_PS` over usable main trials.
    pub fn from_sessions(sessions: &[SessionRecording]) -> Result<Self, AnalysisError> {
        if sessions.is_empty() {
            return Err(AnalysisError::NoSessions);
        }
        let (a_labels, b_labels) = default_labels();
        let mut values = Vec::with_capacity(sessions.len());
        for session in sessions {
            let mut sums = [[(0.0, 0usize); 3]; 2];
            for tr in session.trials.iter().filter(|t| !t.spec.training && t.is_usable()) {
                let c = tr.spec.condition;
                let cell = &mut sums[c.target.index()][c.displacement.index()];
                cell.0 += delta_ps(tr)?;
                cell.1 += 1;
            }
            let mut rows = vec![vec![0.0; 3]; 2];
            for c in TrialCondition::all() {
                let (sum, count) = sums[c.target.index()][c.displacement.index()];
                if count == 0 {
                    return Err(AnalysisError::IncompleteTable {
                        subject: session.subject.clone(),
                        condition: c.to_string(),
                    });
                }
                rows[c.target.index()][c.displacement.index()] = sum / count as f64;
            }
            values.push(rows);
        }
        let table = DeltaPsTable {
            subjects: sessions.iter().map(|s| s.subject.clone()).collect(),
            a_labels,
            b_labels,
            values,
        };
        table.validate()?;
        Ok(table)
    }

    /// Across-subject mean of each cell.
    pub fn cell_means(&self) -> Vec<Vec<f64>> {
        let (n, a, b) = self.shape();
        (0..a)
            .map(|i| {
                (0..b)
                    .map(|j| self.values.iter().map(|s| s[i][j]).sum::<f64>() / n as f64)
                    .collect()
            })
            .collect()
    }
}

/// Onset-aligned average for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTrace {
    pub condition: TrialCondition,
    pub trace: AverageTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSideSplit {
    pub subject: String,
    pub splits: Vec<SideSplit>,
}

/// Everything the study analysis produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAnalysis {
    pub table: DeltaPsTable,
    pub anova: AnovaResult,
    pub comparisons: ComparisonResult,
    pub averages: Vec<ConditionTrace>,
    pub side_split: Vec<SubjectSideSplit>,
}

pub const AVERAGE_WINDOW_S: (f64, f64) = (1.0, 2.0);

pub fn analyze_study(
    sessions: &[SessionRecording],
    options: AnovaOptions,
) -> Result<StudyAnalysis, AnalysisError> {
    let table = DeltaPsTable::from_sessions(sessions)?;
    let anova = rm_anova_2way_with(&table, options)?;
    let comparisons = holm_planned_comparisons(&table, &anova)?;
    let mut averages = Vec::new();
    for condition in TrialCondition::all() {
        let group: Vec<(&str, &TrialRecord)> = sessions
            .iter()
            .flat_map(|s| {
                s.trials
                    .iter()
                    .filter(move |t| {
                        !t.spec.training && t.is_usable() && t.spec.condition == condition
                    })
                    .map(move |t| (s.subject.as_str(), t))
            })
            .collect();
        if group.len() >= 2 {
            averages.push(ConditionTrace {
                condition,
                trace: condition_average(&group, AVERAGE_WINDOW_S.0, AVERAGE_WINDOW_S.1)?,
            });
        }
    }
    let side_split = sessions
        .iter()
        .map(|s| SubjectSideSplit {
            subject: s.subject.clone(),
            splits: stable_phase_side_split(s),
        })
        .collect();
    Ok(StudyAnalysis {
        table,
        anova,
        comparisons,
        averages,
        side_split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{
        StimulusMarkers, TrialPhase, TrialSample, TrialSpec,
    };

    fn spec(index: usize) -> TrialSpec {
        TrialSpec {
            condition: TrialCondition {
                displacement: Displacement::OneMm,
                target: TargetForce::FiveN,
            },
            stable_wait: 2.0,
            block: Some(0),
            index,
            training: false,
        }
    }

    fn record(f: impl Fn(f64) -> f64, onset: f64, end: f64, len: usize) -> TrialRecord {
        let samples = (0..len)
            .map(|k| {
                let t = k as f64 * 0.01;
                let v = f(t);
                TrialSample {
                    t,
                    f_m: 0.0,
                    t_m: 0.0,
                    f_grip_1: v * 1.1,
                    f_grip_2: v * 0.9,
                    f_mean: v,
                    tactor_x_mm: 0.0,
                    tactor_y_mm: 0.0,
                    phase: TrialPhase::StableGrip,
                }
            })
            .collect();
        TrialRecord {
            spec: spec(10),
            sample_rate: 100.0,
            samples,
            markers: Some(StimulusMarkers {
                onset_t: onset,
                end_t: end,
            }),
            flags: vec![],
            truth: vec![],
        }
    }

    #[test]
    fn delta_ps_cases() {
        let flat = record(|_| 5.0, 2.0, 2.4, 500);
        assert_eq!(delta_ps(&flat).unwrap(), 0.0);

        let bump = record(
            |t| if (2.2..2.3).contains(&t) { 5.15 } else { 5.0 },
            2.0,
            2.4,
            500,
        );
        assert!((delta_ps(&bump).unwrap() - 0.15).abs() < 1e-12);

        let late = record(|t| if t > 2.6 { 6.0 } else { 5.0 }, 2.0, 2.4, 500);
        assert_eq!(delta_ps(&late).unwrap(), 0.0);

        let mut none = flat.clone();
        none.markers = None;
        assert_eq!(delta_ps(&none), Err(AnalysisError::MissingMarkers(10)));

        let short = record(|_| 5.0, 2.0, 2.01, 500);
        assert!(matches!(
            delta_ps(&short),
            Err(AnalysisError::ShortWindow { samples: 2, .. })
        ));
    }

    #[test]
    fn average_of_identical_trials_has_zero_se() {
        let a = record(|t| 5.0 + t.sin(), 2.0, 2.4, 500);
        let b = a.clone();
        let avg = condition_average(&[("S01", &a), ("S02", &b)], 1.0, 2.0).unwrap();
        assert!(avg.se.iter().all(|&v| v == 0.0));
        assert_eq!(avg.t.len(), 301);
        assert_eq!(avg.t[100], 0.0);
        assert_eq!(avg.trimmed_fraction, 0.0);
    }

    #[test]
    fn offset_traces_split_the_difference() {
        let a = record(|_| 5.0, 2.0, 2.4, 500);
        let b = record(|_| 6.0, 2.0, 2.4, 500);
        let avg = condition_average(&[("S01", &a), ("S02", &b)], 1.0, 2.0).unwrap();
        for (m, se) in avg.mean.iter().zip(&avg.se) {
            assert!((m - 5.5).abs() < 1e-12);
            assert!((se - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn ragged_traces_are_trimmed_with_warning() {
        let a = record(|_| 5.0, 2.0, 2.4, 500);
        let b = record(|_| 5.0, 0.5, 0.9, 120);
        let avg = condition_average(&[("S01", &a), ("S02", &b)], 1.0, 2.0).unwrap();
        assert_eq!(avg.t.first(), Some(&-0.5));
        assert!((avg.t.last().unwrap() - 0.69).abs() < 1e-12);
        assert!(avg.trimmed_fraction > 0.2);
        assert!(avg.warning.is_some());
        assert!(condition_average(&[("S01", &a)], 1.0, 2.0).is_err());
    }

    #[test]
    fn side_split_window_is_pre_onset() {
        let mk = |bump_at: f64| {
            let mut tr = record(
                move |t| if t >= bump_at { 8.0 } else { 5.0 },
                2.0,
                2.4,
                500,
            );
            tr.spec.index = 12;
            SessionRecording {
                subject: "S01".into(),
                plan: crate::protocol::plan_session(0),
                trials: vec![tr],
            }
        };
        let a = stable_phase_side_split(&mk(2.0));
        let b = stable_phase_side_split(&mk(2.3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert!((a[0].finger_mean / a[0].thumb_mean - 1.1 / 0.9).abs() < 1e-12);
        assert!((a[0].finger_mean - 5.5).abs() < 1e-12);

        // Onset earlier than one second into the record: skipped.
        let mut early = mk(2.0);
        early.trials[0].markers = Some(StimulusMarkers {
            onset_t: 0.5,
            end_t: 0.9,
        });
        assert!(stable_phase_side_split(&early).is_empty());
    }

    #[test]
    fn incomplete_table_is_named() {
        let session = SessionRecording {
            subject: "S07".into(),
            plan: crate::protocol::plan_session(0),
            trials: vec![record(|_| 5.0, 2.0, 2.4, 500)],
        };
        match DeltaPsTable::from_sessions(&[session]) {
            Err(AnalysisError::IncompleteTable { subject, .. }) => assert_eq!(subject, "S07"),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            DeltaPsTable::from_sessions(&[]),
            Err(AnalysisError::NoSessions)
        );
    }
}
