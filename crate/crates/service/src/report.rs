//! Study report: results document, Δ_PS matrix and average traces.
//!
//! Files written to the report directory:
//!
//! - `results.json`: the full [`StudyAnalysis`] plus the sessions it used
//! - `delta_ps.csv`: `subject,target_N,displacement_mm,delta_ps_N`
//! - `average_traces.csv`: `target_N,displacement_mm,t_s,mean_N,se_N`
//!   (long format, ready for plotting)
//! - `summary.txt`: the text printed by `analyze`

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gripforce_core::analysis::{analyze_study, AnovaOptions, StudyAnalysis};
use gripforce_core::protocol::{Displacement, TargetForce};
use serde::Serialize;

use crate::error::ServiceError;
use crate::persist::{find_sessions, load_session, write_atomic};

#[derive(Debug, Serialize)]
pub struct ReportDocument<'a> {
    pub sessions: Vec<String>,
    pub excluded_trials: usize,
    pub analysis: &'a StudyAnalysis,
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

pub fn summary_text(a: &StudyAnalysis) -> String {
    let mut s = String::new();
    let (n, _, _) = a.table.shape();
    let _ = writeln!(s, "subjects: {n}");
    let _ = writeln!(s, "\nmean delta_ps (N):");
    let means = a.table.cell_means();
    let _ = writeln!(s, "{:>8} {}", "", a.table.b_labels.join("  "));
    for (label, row) in a.table.a_labels.iter().zip(&means) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(s, "{label:>8} {}", cells.join("  "));
    }
    let _ = writeln!(s, "\nrepeated-measures ANOVA:");
    for (name, e) in a.anova.effects() {
        let eps = e.epsilon.map(|v| format!(", eps={v:.3}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "  {name:<13} F({}, {}) = {:.3}, p = {}{eps}{}",
            e.df_num,
            e.df_den,
            e.f,
            fmt_p(e.p),
            if e.degenerate { " [degenerate]" } else { "" }
        );
    }
    let _ = writeln!(
        s,
        "\nplanned comparisons (pooled MS = {:.3e}, df = {:.2}, Holm):",
        a.comparisons.ms_pool, a.comparisons.df_pool
    );
    for c in &a.comparisons.pairs {
        let _ = writeln!(
            s,
            "  {:<24} delta = {:+.4} N, t({:.2}) = {:.3}, p = {}, p_holm = {}",
            c.label,
            c.delta,
            c.df,
            c.t,
            fmt_p(c.p_raw),
            fmt_p(c.p_holm)
        );
    }
    s
}

fn delta_ps_csv(a: &StudyAnalysis) -> String {
    let mut s = String::from("subject,target_N,displacement_mm,delta_ps_N\n");
    for (subject, rows) in a.table.subjects.iter().zip(&a.table.values) {
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{subject},{},{},{v}",
                    TargetForce::ALL[i].newtons(),
                    Displacement::ALL[j].mm()
                );
            }
        }
    }
    s
}

fn traces_csv(a: &StudyAnalysis) -> String {
    let mut s = String::from("target_N,displacement_mm,t_s,mean_N,se_N\n");
    for c in &a.averages {
        let tr = &c.trace;
        for ((t, m), se) in tr.t.iter().zip(&tr.mean).zip(&tr.se) {
            let _ = writeln!(
                s,
                "{},{},{t},{m},{se}",
                c.condition.target_n(),
                c.condition.displacement_mm()
            );
        }
    }
    s
}

/// Loads every session under `inputs`, analyzes them and writes the report
/// into `out`. Returns the analysis and the summary text.
pub fn analyze_dirs(
    inputs: &[PathBuf],
    out: &Path,
    options: AnovaOptions,
) -> Result<(StudyAnalysis, String), ServiceError> {
    let dirs = find_sessions(inputs)?;
    if dirs.is_empty() {
        let names: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
        return Err(ServiceError::NoSessions(names.join(", ")));
    }
    let mut sessions = Vec::with_capacity(dirs.len());
    for d in &dirs {
        sessions.push(load_session(d)?.recording);
    }
    let excluded = sessions
        .iter()
        .flat_map(|s| &s.trials)
        .filter(|t| !t.spec.training && !t.is_usable())
        .count();
    let analysis = analyze_study(&sessions, options)?;
    let summary = summary_text(&analysis);

    std::fs::create_dir_all(out).map_err(|e| ServiceError::io(out, e))?;
    let doc = ReportDocument {
        sessions: dirs.iter().map(|d| d.display().to_string()).collect(),
        excluded_trials: excluded,
        analysis: &analysis,
    };
    let json = serde_json::to_vec_pretty(&doc).expect("report serializes");
    write_atomic(&out.join("results.json"), &json)?;
    write_atomic(&out.join("delta_ps.csv"), delta_ps_csv(&analysis).as_bytes())?;
    write_atomic(&out.join("average_traces.csv"), traces_csv(&analysis).as_bytes())?;
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    Ok((analysis, summary))
}
