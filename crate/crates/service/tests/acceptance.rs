//! Acceptance run: one PASS/FAIL line per criterion, then a hard assert.
//!
//! `cargo test -p gripforce-service --test acceptance -- --nocapture`

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use gripforce_core::actuator::{
    control_step, counts_to_mm, home, mm_to_counts, ActuatorSpec, ActuatorState, Axis,
    CONTROL_DT, DEFAULT_STALL_THRESHOLD_A,
};
use gripforce_core::analysis::{
    holm_planned_comparisons, rm_anova_2way, sums_of_squares, AnovaOptions, ComparisonResult,
    DeltaPsTable,
};
use gripforce_core::calibration::{calibrate, fit_lever};
use gripforce_core::engine::RigSetup;
use gripforce_core::mechanics::{
    coefficients_from_geometry, decompose, forward_sensor, ContactState, Lever, LeverGeometry,
};
use gripforce_core::protocol::{plan_session, TrialCondition, TrialPhase};
use gripforce_core::simulator::{
    generate_sweep, rig_step, run_synthetic_session, simulate_artifact_test, sweep_forces,
    PopulationSpec, RigConfig, StudySubject, TactorKinematics,
};
use gripforce_service::commands::simulate_study;
use gripforce_service::persist::{load_session, SessionManifest, MANIFEST_FILE};
use gripforce_service::report::analyze_dirs;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

const DEVICE: [(&str, f64); 8] = [
    ("ratio_1", 6.132),
    ("ratio_2", 6.017),
    ("d_1", 7.17e-3),
    ("d_2", 5.98e-3),
    ("alpha_1", 0.074),
    ("alpha_2", 0.091),
    ("beta_1", 12.40),
    ("beta_2", 12.63),
];

fn sweeps(config: &RigConfig, seed: u64) -> Vec<gripforce_core::calibration::SweepRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forces = sweep_forces(21);
    [Lever::Lever1, Lever::Lever2]
        .into_iter()
        .map(|l| generate_sweep(l, config, &forces, Some(&mut rng)).unwrap())
        .collect()
}

fn table_one() -> Outcome {
    let start = Instant::now();
    let exact = calibrate(&sweeps(&RigConfig::noiseless(), 0)).map_err(|e| e.to_string())?;
    let noisy = calibrate(&sweeps(&RigConfig::default(), 7)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let g = RigConfig::default().geometry;
    let truth = coefficients_from_geometry(&g[0], &g[1]).unwrap();
    let fields = |c: &gripforce_core::mechanics::CalibrationCoefficients| {
        [c.ratio_1, c.ratio_2, c.d_1, c.d_2, c.alpha_1, c.alpha_2, c.beta_1, c.beta_2]
    };
    for ((name, nominal), (t, (e, n))) in DEVICE.iter().zip(
        fields(&truth)
            .into_iter()
            .zip(fields(&exact.coefficients).into_iter().zip(fields(&noisy.coefficients))),
    ) {
        check(rel(e, t) <= 1e-6, || format!("noiseless {name} = {e}, generated {t}"))?;
        let tol = if name.starts_with("beta") { 0.005 } else { 0.01 };
        check(rel(e, *nominal) <= tol, || format!("noiseless {name} = {e} vs {nominal}"))?;
        check(rel(n, *nominal) <= tol, || format!("noisy {name} = {n} vs {nominal}"))?;
    }
    check(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))
}

fn inverse() -> Outcome {
    let (g1, g2) = (LeverGeometry::device_lever_1(), LeverGeometry::device_lever_2());
    let coeffs = coefficients_from_geometry(&g1, &g2).unwrap();
    let z = ContactState::zero();
    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        for j in 0..=20 {
            let (a, b) = (i as f64, j as f64);
            let est = decompose(&forward_sensor(a, b, &z, &z, &g1, &g2).unwrap(), &coeffs).unwrap();
            worst = worst
                .max((est.f_grip_1 - a).abs() / a.max(1.0))
                .max((est.f_grip_2 - b).abs() / b.max(1.0));
        }
    }
    check(worst <= 1e-9, || format!("worst relative error {worst:e}"))
}

fn calibration_quality() -> Outcome {
    let good = (0..100u64)
        .filter(|&seed| {
            sweeps(&RigConfig::default(), 1000 + seed).iter().all(|s| {
                let f = fit_lever(s).unwrap();
                f.r2_force > 0.99 && f.r2_torque > 0.99
            })
        })
        .count();
    check(good >= 95, || format!("{good}/100 runs with R2 > 0.99"))
}

fn artifact() -> Outcome {
    let setup = RigSetup::noiseless();
    let y = simulate_artifact_test(Lever::Lever1, 15.0, 1.5, Axis::Y, &setup)
        .map_err(|e| e.to_string())?;
    let mut peak: f64 = 0.0;
    for (s, th) in y.series.samples.iter().zip(&y.theoretical) {
        let a = s.a_tm.ok_or("guarded sample at 15 N")?;
        check((a - th).abs() <= 1e-6, || format!("A_TM {a} vs closed form {th}"))?;
        peak = peak.max(a.abs());
    }
    let pct = 100.0 * peak;
    check((1.03 / 2.0..=1.03 * 2.0).contains(&pct), || format!("peak A_TM {pct}%"))?;

    // Tactor held at +1.5 mm: only the contact-migration term is left.
    let held = TactorKinematics {
        y_mm: 1.5,
        ..TactorKinematics::default()
    };
    let reading = rig_step::<ChaCha8Rng>(
        15.0,
        0.0,
        &[held, TactorKinematics::default()],
        &setup.rig,
        None,
    )
    .map_err(|e| e.to_string())?;
    let est = decompose(&reading, &setup.coefficients).map_err(|e| e.to_string())?;
    let held_a = (15.0 - est.f_grip_1) / 15.0;
    check((held_a.abs() - 0.01).abs() <= 1e-6, || format!("held A_TM {held_a}"))?;
    check((1.03 / 2.0..=1.03 * 2.0).contains(&(100.0 * held_a.abs())), || {
        format!("held A_TM {held_a}")
    })?;
    let x = simulate_artifact_test(Lever::Lever1, 15.0, 1.5, Axis::X, &setup)
        .map_err(|e| e.to_string())?;
    let worst = x.series.max_abs().unwrap_or(f64::NAN);
    check(worst <= 1e-12, || format!("x-move A_TM {worst:e}"))?;
    println!(
        "      y-move A_TM: held {:.3}%, peak while moving {pct:.3}% (reference 1.03%)",
        100.0 * held_a.abs()
    );
    Ok(())
}

fn actuator() -> Outcome {
    let spec = ActuatorSpec::default();
    check(counts_to_mm(617, &spec) == 0.7 && mm_to_counts(0.7, &spec) == 617, || {
        "617 counts != 0.7 mm".into()
    })?;
    let mm60 = counts_to_mm(60, &spec);
    check((mm60 - 0.068).abs() <= 0.0005, || format!("60 counts = {mm60} mm"))?;

    let mut s = ActuatorState::centered(Axis::X);
    let target = mm_to_counts(1.5, &spec);
    s.set_target(target);
    let mut ticks = 0;
    while (s.position_counts - target).abs() > 60 || s.duty != 0.0 {
        s = control_step(&s, &spec, CONTROL_DT).map_err(|e| e.to_string())?;
        ticks += 1;
        check(ticks <= 24, || "1.5 mm step not settled in 24 ticks".into())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zeros: Vec<f64> = (0..20)
        .map(|_| {
            let offset = rng.random_range(-spec.travel_range_mm..=spec.travel_range_mm);
            let h = home(
                &ActuatorState::power_on(Axis::Y, offset, &spec),
                &spec,
                DEFAULT_STALL_THRESHOLD_A,
            )
            .unwrap();
            h.physical_mm(&spec) - h.position_mm(&spec)
        })
        .collect();
    let lo = zeros.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = zeros.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let band = 60.0 * spec.mm_per_count();
    let center = (lo + hi) / 2.0;
    check(zeros.iter().all(|z| (z - center).abs() <= band), || {
        format!("homed zeros span {lo}..{hi} mm")
    })?;
    println!("      step settled in {ticks} ticks; homed zero spread {:.4} mm", hi - lo);
    Ok(())
}

fn protocol() -> Outcome {
    let mut all = TrialCondition::all().to_vec();
    all.sort();
    for seed in 0..20 {
        let plan = plan_session(seed);
        check(plan.len() == 70 && plan.training.len() == 10, || format!("seed {seed}: size"))?;
        let mut count = std::collections::HashMap::new();
        for block in &plan.blocks {
            let mut conds: Vec<_> = block.iter().map(|t| t.condition).collect();
            conds.sort();
            check(conds == all, || format!("seed {seed}: block is not a permutation"))?;
            for c in conds {
                *count.entry(c).or_insert(0) += 1;
            }
        }
        check(count.values().all(|&n| n == 10), || format!("seed {seed}: census {count:?}"))?;
        check(plan.trials().all(|t| (1.0..=4.0).contains(&t.stable_wait)), || {
            format!("seed {seed}: wait out of range")
        })?;
        check(plan_session(seed) == plan, || format!("seed {seed}: not deterministic"))?;
    }
    check(plan_session(1) != plan_session(2), || "seeds give identical plans".into())?;

    let subject = StudySubject::draw(&PopulationSpec::default_study(), 4, 0);
    let rec = run_synthetic_session(
        "S01",
        &plan_session(4),
        &subject.model,
        &RigSetup::default(),
        subject.seed,
    )
    .map_err(|e| e.to_string())?;
    let mut completed = 0;
    for t in &rec.trials {
        let stimuli = t
            .phase_sequence()
            .iter()
            .filter(|p| **p == TrialPhase::Stimulus)
            .count();
        let moves = t
            .samples
            .windows(2)
            .filter(|w| w[0].tactor_x_mm.abs() < 0.05 && w[1].tactor_x_mm.abs() >= 0.05)
            .count();
        if t.markers.is_some() {
            completed += 1;
            check(stimuli == 1 && moves == 1, || {
                format!("trial {}: {stimuli} stimulus phases, {moves} moves", t.spec.index)
            })?;
        } else {
            check(stimuli == 0 && moves == 0, || format!("trial {}: stray stimulus", t.spec.index))?;
        }
    }
    check(completed == 70, || format!("{completed}/70 trials completed"))
}

fn holm_monotone(c: &ComparisonResult) -> bool {
    let mut pairs: Vec<_> = c.pairs.iter().map(|p| (p.p_raw, p.p_holm)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.windows(2).all(|w| w[0].1 <= w[1].1)
        && pairs.iter().all(|&(raw, adj)| adj >= raw && adj <= 1.0)
}

fn statistics() -> Outcome {
    use common::*;
    let table = DeltaPsTable::from_arrays(ORACLE_DATA.to_vec()).map_err(|e| e.to_string())?;
    let ss = sums_of_squares(&table);
    let parts = ss.subject + ss.a + ss.b + ss.ab + ss.a_s + ss.b_s + ss.ab_s;
    check((parts - ss.total).abs() <= 1e-14 * ss.total.max(1.0), || {
        format!("SS parts {parts} vs total {}", ss.total)
    })?;
    let anova = rm_anova_2way(&table).map_err(|e| e.to_string())?;
    for ((name, e), (f, p)) in anova.effects().into_iter().zip(EFFECTS) {
        check(close(e.f, f, 1e-6) && close(e.p, p, 1e-6), || {
            format!("{name}: F {} p {} vs oracle F {f} p {p}", e.f, e.p)
        })?;
    }
    let comps = holm_planned_comparisons(&table, &anova).map_err(|e| e.to_string())?;
    for (pair, (delta, t, p, holm)) in comps.pairs.iter().zip(COMPARISONS) {
        check(
            close(pair.delta, delta, 1e-6)
                && close(pair.t, t, 1e-6)
                && close(pair.p_raw, p, 1e-6)
                && close(pair.p_holm, holm, 1e-6),
            || format!("{}: t {} p {} vs oracle t {t} p {p}", pair.label, pair.t, pair.p_raw),
        )?;
    }
    check(holm_monotone(&comps), || "oracle Holm p not monotone".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ten: Vec<[[f64; 3]; 2]> = (0..10)
        .map(|_| [[(); 3].map(|_| rng.random::<f64>()), [(); 3].map(|_| rng.random::<f64>())])
        .collect();
    let table = DeltaPsTable::from_arrays(ten).map_err(|e| e.to_string())?;
    let anova = rm_anova_2way(&table).map_err(|e| e.to_string())?;
    let dfs: Vec<_> = anova.effects().iter().map(|(_, e)| (e.df_num, e.df_den)).collect();
    check(dfs == [(1.0, 9.0), (2.0, 18.0), (2.0, 18.0)], || format!("df {dfs:?}"))?;
    let comps = holm_planned_comparisons(&table, &anova).map_err(|e| e.to_string())?;
    check(holm_monotone(&comps), || "Holm p not monotone".into())
}

fn end_to_end(dir: &Path) -> Outcome {
    let start = Instant::now();
    simulate_study(10, 1, &dir.join("study"), None).map_err(|e| e.to_string())?;
    let (a, _) = analyze_dirs(&[dir.join("study")], &dir.join("report"), AnovaOptions::default())
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for (name, e) in a.anova.effects() {
        check(e.p < 0.05, || format!("{name} p = {}", e.p))?;
    }
    let p_of = |label: &str| {
        a.comparisons
            .pairs
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.p_holm)
            .ok_or_else(|| format!("missing comparison {label}"))
    };
    let high = p_of("7.5 N: 1.5 mm vs 1 mm")?;
    let low = p_of("5 N: 1.5 mm vs 1 mm")?;
    check(high >= 0.05, || format!("7.5 N 1.5 vs 1 mm p = {high}"))?;
    check(low < 0.05, || format!("5 N 1.5 vs 1 mm p = {low}"))?;
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    println!("      study of 10 subjects simulated and analyzed in {elapsed:.2?}");
    Ok(())
}

fn gripforce(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gripforce"));
    cmd.args(args).env("SOURCE_DATE_EPOCH", "1700000000");
    cmd
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn crash_and_determinism(dir: &Path) -> Outcome {
    let session = dir.join("killed");
    let s = session.to_str().unwrap();
    let mut child = gripforce(&["run", "--mode", "synthetic", "--plan-seed", "3"])
        .args(["--seed", "8", "--pace", "20", "--out", s])
        .spawn()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        if Instant::now() > deadline {
            let _ = child.kill();
            return Err("session made no progress".into());
        }
        let m = std::fs::read(session.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<SessionManifest>(&b).ok());
        if m.is_some_and(|m| m.trials.len() >= 3) {
            break;
        }
        thread::sleep(Duration::from_millis(2));
    }
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;
    let loaded = load_session(&session).map_err(|e| e.to_string())?;
    let n = loaded.recording.trials.len();
    check(n >= 3 && n < 70, || format!("{n} trials after kill"))?;
    check(loaded.manifest.last_complete_trial() == Some(n - 1), || "gap in trials".into())?;

    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let status = gripforce(&["simulate-study", "--subjects", "2", "--seed", "5"])
            .args(["--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into())?;
        trees.push(tree(&out));
    }
    check(!trees[0].is_empty() && trees[0] == trees[1], || "reruns differ".into())?;
    println!("      killed after {n} trials; reruns byte-identical");
    Ok(())
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("table I reproduction", Box::new(table_one)),
        ("inverse identity", Box::new(inverse)),
        ("calibration quality", Box::new(calibration_quality)),
        ("artifact", Box::new(artifact)),
        ("actuator", Box::new(actuator)),
        ("protocol", Box::new(protocol)),
        ("statistics", Box::new(statistics)),
        ("end-to-end study", Box::new(|| end_to_end(dir.path()))),
        ("crash safety and determinism", Box::new(|| crash_and_determinism(dir.path()))),
    ];
    // Written to the stdout handle, not println!, so the verdicts show up
    // even when the harness captures test output.
    let mut out = std::io::stdout();
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        let line = match run() {
            Ok(()) => format!("PASS {name}"),
            Err(why) => {
                failed.push(*name);
                format!("FAIL {name}: {why}")
            }
        };
        writeln!(out, "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
