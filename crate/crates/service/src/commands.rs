//! The CLI subcommands as plain functions.

use std::path::{Path, PathBuf};
use std::time::Duration;

use gripforce_core::actuator::{self, ActuatorState, Axis, DEFAULT_STALL_THRESHOLD_A};
use gripforce_core::calibration::{calibrate_file, write_sweep_csv};
use gripforce_core::engine::{GripSource, RigSetup, ScriptedGrip};
use gripforce_core::mechanics::Lever;
use gripforce_core::protocol::plan_session;
use gripforce_core::simulator::{
    generate_sweep, sweep_forces, PopulationSpec, StudySubject,
    SyntheticParticipant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::persist::{timestamp_now, write_atomic, Mode};
use crate::profile::{DeviceProfile, ProfileStore};
use crate::runloop::{run_session, LiveSource, SessionConfig, SessionSummary, STALL_TIMEOUT};
use crate::server::{serve, Hub, InputState};

/// Fits a sweep file and appends the result to the profile store at `out`.
pub fn calibrate(sweep: &Path, out: &Path) -> Result<DeviceProfile, ServiceError> {
    let cal = calibrate_file(sweep)?;
    let profile = DeviceProfile::from_calibration(&cal, &sweep.display().to_string(), timestamp_now());
    ProfileStore::append(out, profile.clone())?;
    Ok(profile)
}

/// Writes a simulated two-lever calibration sweep. `noise` uses the default
/// sensor noise; otherwise the sweep is exact.
pub fn generate_sweep_file(
    out: &Path,
    points: usize,
    noise: bool,
    seed: u64,
) -> Result<(), ServiceError> {
    if points < 2 {
        return Err(ServiceError::Usage("a sweep needs at least 2 points".into()));
    }
    let setup = if noise { RigSetup::default() } else { RigSetup::noiseless() };
    let forces = sweep_forces(points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sweeps = Vec::new();
    for lever in [Lever::Lever1, Lever::Lever2] {
        sweeps.push(generate_sweep(lever, &setup.rig, &forces, Some(&mut rng))?);
    }
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &sweeps).map_err(|e| ServiceError::io(out, e))?;
    write_atomic(out, &buf)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HomingReport {
    pub axis: Axis,
    /// Power-on offset from mid-travel, mm.
    pub start_mm: f64,
    /// Where the encoder zero ended up, mm from mid-travel.
    pub zero_mm: f64,
    pub homed: bool,
}

/// Homes both simulated drives from random power-on positions.
pub fn home(seed: u64) -> Result<Vec<HomingReport>, ServiceError> {
    let spec = RigSetup::default().actuator;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for axis in [Axis::X, Axis::Y] {
        let offset = rng.random_range(-spec.travel_range_mm..=spec.travel_range_mm);
        let start = ActuatorState::power_on(axis, offset, &spec);
        let s = actuator::home(&start, &spec, DEFAULT_STALL_THRESHOLD_A)
            .map_err(|e| ServiceError::Engine(e.into()))?;
        out.push(HomingReport {
            axis,
            start_mm: start.physical_mm(&spec),
            zero_mm: s.physical_mm(&spec),
            homed: s.homed,
        });
    }
    Ok(out)
}

/// Device profile to run with: the newest in `path`, or the nominal one.
pub fn load_profile(path: Option<&Path>, setup: &RigSetup) -> Result<DeviceProfile, ServiceError> {
    match path {
        None => Ok(DeviceProfile::nominal(setup.coefficients)),
        Some(p) => ProfileStore::load(p)?
            .latest()
            .cloned()
            .ok_or_else(|| ServiceError::Usage(format!("{} holds no profiles", p.display()))),
    }
}

fn setup_for(profile: &DeviceProfile) -> RigSetup {
    let mut setup = RigSetup::default();
    setup.coefficients = profile.coefficients;
    setup.actuator = profile.actuator;
    setup
}

/// Simulates `subjects` participants on one plan, one session directory per
/// subject (`out/S01`, `out/S02`, ...), matching
/// [`gripforce_core::simulator::run_synthetic_study`] sample for sample.
pub fn simulate_study(
    subjects: usize,
    seed: u64,
    out: &Path,
    profile: Option<&Path>,
) -> Result<Vec<SessionSummary>, ServiceError> {
    if subjects == 0 {
        return Err(ServiceError::Usage("need at least one subject".into()));
    }
    let profile = load_profile(profile, &RigSetup::default())?;
    let setup = setup_for(&profile);
    let plan = plan_session(seed);
    let population = PopulationSpec::default_study();
    let jobs: Vec<StudySubject> = (0..subjects)
        .map(|i| StudySubject::draw(&population, seed, i))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|job| {
                let cfg = SessionConfig {
                    mode: Mode::Synthetic,
                    participant: job.label.clone(),
                    plan: plan.clone(),
                    participant_seed: Some(job.seed),
                    setup,
                    profile: profile.clone(),
                    pace: None,
                    max_trials: None,
                };
                let dir = out.join(&job.label);
                scope.spawn(move || {
                    let mut person = SyntheticParticipant::for_session(job.model, job.seed)?;
                    run_session(&cfg, &mut person, &dir, None)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("subject session panicked"))
            .collect()
    })
}

/// Reads a replay script: `trial,grip_N` rows, one per tick, in order.
pub fn read_grip_script(path: &Path) -> Result<ScriptedGrip, ServiceError> {
    #[derive(Deserialize)]
    struct Row {
        trial: usize,
        #[serde(rename = "grip_N")]
        grip: f64,
    }
    let file = std::fs::File::open(path).map_err(|e| ServiceError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut trials: Vec<Vec<f64>> = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field().map_or(0, |f| f + 1),
                _ => 0,
            };
            crate::persist::PersistError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.to_string(),
            }
        })?;
        if trials.len() <= row.trial {
            trials.resize(row.trial + 1, Vec::new());
        }
        trials[row.trial].push(row.grip);
    }
    Ok(ScriptedGrip::new(trials))
}

/// Options for `run`.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    pub plan_seed: u64,
    pub participant: String,
    /// Synthetic: seeds rig and participant. Replay/interactive: seeds the rig.
    pub seed: Option<u64>,
    pub profile: Option<PathBuf>,
    pub max_trials: Option<usize>,
    pub pace: Option<f64>,
    /// Telemetry listen address, e.g. `127.0.0.1:8080`.
    pub serve: Option<String>,
    pub script: Option<PathBuf>,
    pub out: PathBuf,
}

/// Runs one session. Interactive sessions need `serve` and start once the
/// first grip message has arrived.
pub fn run(opts: &RunOptions) -> Result<SessionSummary, ServiceError> {
    let profile = load_profile(opts.profile.as_deref(), &RigSetup::default())?;
    let cfg = SessionConfig {
        mode: opts.mode,
        participant: opts.participant.clone(),
        plan: plan_session(opts.plan_seed),
        participant_seed: opts.seed.or(match opts.mode {
            Mode::Interactive | Mode::Hardware => None,
            _ => Some(0),
        }),
        setup: setup_for(&profile),
        profile,
        pace: opts.pace,
        max_trials: opts.max_trials,
    };

    let mut source: Box<dyn GripSource> = match opts.mode {
        Mode::Synthetic => {
            let seed = cfg.participant_seed.unwrap_or(0);
            let model = PopulationSpec::default_study().draw(&mut ChaCha8Rng::seed_from_u64(seed));
            Box::new(SyntheticParticipant::for_session(model, seed)?)
        }
        Mode::Replay => {
            let script = opts
                .script
                .as_deref()
                .ok_or_else(|| ServiceError::Usage("replay needs --script".into()))?;
            Box::new(read_grip_script(script)?)
        }
        Mode::Interactive => {
            if opts.serve.is_none() {
                return Err(ServiceError::Usage("interactive mode needs --serve".into()));
            }
            Box::new(NoInput)
        }
        Mode::Hardware => {
            return Err(ServiceError::Usage(
                "hardware mode needs a device bridge; use synthetic, replay or interactive".into(),
            ))
        }
    };

    let Some(addr) = opts.serve.as_deref() else {
        return run_session(&cfg, source.as_mut(), &opts.out, None);
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Server(e.to_string()))?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(addr))
        .map_err(|e| ServiceError::Server(format!("bind {addr}: {e}")))?;
    let local = listener
        .local_addr()
        .map_err(|e| ServiceError::Server(e.to_string()))?;
    eprintln!("{}", serde_json::json!({ "listening": local.to_string() }));
    let hub = Hub::new(opts.mode == Mode::Interactive);
    runtime.spawn(serve(listener, hub.clone()));

    let result = if opts.mode == Mode::Interactive {
        wait_for_input(&hub);
        let mut live = LiveSource {
            input: hub.input.clone(),
            stall_after: STALL_TIMEOUT,
        };
        run_session(&cfg, &mut live, &opts.out, Some(&hub))
    } else {
        run_session(&cfg, source.as_mut(), &opts.out, Some(&hub))
    };
    runtime.shutdown_timeout(Duration::from_millis(200));
    result
}

/// Blocks until the console has sent its first grip.
pub fn wait_for_input(hub: &Hub) {
    while hub.input.state(STALL_TIMEOUT) == InputState::Waiting {
        std::thread::sleep(Duration::from_millis(10));
    }
}

struct NoInput;

impl GripSource for NoInput {
    fn grip(&mut self, _ctx: &gripforce_core::engine::TickContext) -> Option<(f64, f64)> {
        None
    }
}
