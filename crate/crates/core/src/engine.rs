//! Tick-level trial execution shared by synthetic, replayed and live runs.
//!
//! Each tick: take a grip from the [`GripSource`], step the tactor drive,
//! read the (virtual) sensor, decompose it, advance the protocol state
//! machine, act on its commands and append a sample. Time is tick-indexed,
//! so a run is a pure function of its inputs and seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{
    control_step, counts_to_mm, plan_stimulus, ActuatorError, ActuatorSpec, ActuatorState, Axis,
    TrajectoryPoint,
};
use crate::mechanics::{
    coefficients_from_geometry, decompose, CalibrationCoefficients, GripEstimate, MechanicsError,
    SensorReading,
};
use crate::protocol::{
    Command, ProtocolConfig, StimulusMarkers, TrialFlag, TrialInput, TrialOutcome, TrialPhase,
    TrialRecord, TrialSample, TrialSpec, TrialState,
};
use crate::simulator::{home_from_random, rig_step, RigConfig, SimulationError, TactorKinematics};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Simulation(#[from] Box<SimulationError>),
}

impl From<SimulationError> for EngineError {
    fn from(e: SimulationError) -> Self {
        EngineError::Simulation(Box::new(e))
    }
}

impl From<EngineError> for SimulationError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Mechanics(m) => SimulationError::Mechanics(m),
            EngineError::Actuator(a) => SimulationError::Actuator(a),
            EngineError::Simulation(s) => *s,
        }
    }
}

/// Everything needed to stand up a (virtual) rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigSetup {
    pub rig: RigConfig,
    /// Constants used to decompose sensor readings.
    pub coefficients: CalibrationCoefficients,
    pub actuator: ActuatorSpec,
    pub protocol: ProtocolConfig,
    /// Trials still running after this long are cut and flagged, s.
    pub max_trial_s: f64,
}

impl Default for RigSetup {
    fn default() -> Self {
        RigSetup::with_rig(RigConfig::default())
    }
}

impl RigSetup {
    pub fn with_rig(rig: RigConfig) -> Self {
        let coefficients = coefficients_from_geometry(&rig.geometry[0], &rig.geometry[1])
            .expect("rig geometry is valid");
        RigSetup {
            rig,
            coefficients,
            actuator: ActuatorSpec::default(),
            protocol: ProtocolConfig::default(),
            max_trial_s: 60.0,
        }
    }

    pub fn noiseless() -> Self {
        RigSetup::with_rig(RigConfig::noiseless())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rig.sample_rate
    }

    /// Virtual device with both finger-side drives homed from random
    /// power-on positions.
    pub fn build_device(&self, seed: u64) -> Result<SimulatedDevice, SimulationError> {
        SimulatedDevice::new(*self, seed)
    }
}

/// The gripper as seen by the loop: two tactor drives on the finger lever,
/// the lever/sensor model and sensor noise.
#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    pub setup: RigSetup,
    pub x: ActuatorState,
    pub y: ActuatorState,
    rng: ChaCha8Rng,
    last_physical: (f64, f64),
}

impl SimulatedDevice {
    pub fn new(setup: RigSetup, seed: u64) -> Result<Self, SimulationError> {
        for pad in &setup.rig.pads {
            pad.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = home_from_random(Axis::X, &setup.actuator, &mut rng)?;
        let y = home_from_random(Axis::Y, &setup.actuator, &mut rng)?;
        let spec = &setup.actuator;
        let last_physical = (x.physical_mm(spec), y.physical_mm(spec));
        Ok(SimulatedDevice {
            setup,
            x,
            y,
            rng,
            last_physical,
        })
    }

    fn drive_mut(&mut self, axis: Axis) -> &mut ActuatorState {
        match axis {
            Axis::X => &mut self.x,
            Axis::Y => &mut self.y,
        }
    }

    pub fn set_target(&mut self, axis: Axis, counts: i64) {
        self.drive_mut(axis).set_target(counts);
    }

    /// One control period for both drives; returns the finger tactor's
    /// kinematics.
    pub fn control_tick(&mut self) -> Result<TactorKinematics, ActuatorError> {
        let spec = self.setup.actuator;
        let dt = self.setup.dt();
        self.x = control_step(&self.x, &spec, dt)?;
        self.y = control_step(&self.y, &spec, dt)?;
        let now = (self.x.physical_mm(&spec), self.y.physical_mm(&spec));
        let kin = TactorKinematics {
            x_mm: now.0,
            y_mm: now.1,
            vx_mm_s: (now.0 - self.last_physical.0) / dt,
            vy_mm_s: (now.1 - self.last_physical.1) / dt,
        };
        self.last_physical = now;
        Ok(kin)
    }

    pub fn sense(
        &mut self,
        grip_1: f64,
        grip_2: f64,
        finger_tactor: TactorKinematics,
        t: f64,
    ) -> Result<SensorReading, SimulationError> {
        let tactors = [finger_tactor, TactorKinematics::default()];
        let mut r = rig_step(grip_1, grip_2, &tactors, &self.setup.rig, Some(&mut self.rng))?;
        r.t = t;
        Ok(r)
    }

    /// Encoder positions of the finger tactor, mm.
    pub fn encoder_mm(&self) -> (f64, f64) {
        let spec = &self.setup.actuator;
        (
            counts_to_mm(self.x.position_counts, spec),
            counts_to_mm(self.y.position_counts, spec),
        )
    }

    pub fn drives_idle(&self) -> bool {
        let spec = &self.setup.actuator;
        self.x.duty == 0.0 && self.y.duty == 0.0 && self.x.is_settled(spec) && self.y.is_settled(spec)
    }
}

/// What an input source can see when asked for the next grip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickContext {
    /// Trial time of this tick, s.
    pub t: f64,
    pub dt: f64,
    pub target: f64,
    pub band: f64,
    pub phase: TrialPhase,
    pub release_requested: bool,
    /// When the tactor started moving, if it has.
    pub stimulus_onset: Option<f64>,
}

/// Produces the per-side grip forces applied to the gripper.
pub trait GripSource {
    fn begin_trial(&mut self, _spec: &TrialSpec) {}

    /// `(finger, thumb)` grip in newtons, or `None` if the input has stalled.
    fn grip(&mut self, ctx: &TickContext) -> Option<(f64, f64)>;
}

/// Replays a fixed per-tick sequence of mean grips (split evenly). Runs out
/// by holding the last value.
#[derive(Debug, Clone)]
pub struct ScriptedGrip {
    pub trials: Vec<Vec<f64>>,
    trial: usize,
    tick: usize,
}

impl ScriptedGrip {
    pub fn new(trials: Vec<Vec<f64>>) -> Self {
        ScriptedGrip {
            trials,
            trial: 0,
            tick: 0,
        }
    }
}

impl GripSource for ScriptedGrip {
    fn begin_trial(&mut self, spec: &TrialSpec) {
        self.trial = spec.index;
        self.tick = 0;
    }

    fn grip(&mut self, _ctx: &TickContext) -> Option<(f64, f64)> {
        let script = self.trials.get(self.trial)?;
        let g = *script.get(self.tick).or(script.last())?;
        self.tick += 1;
        Some((g, g))
    }
}

/// What happened on one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickReport {
    pub sample: Option<TrialSample>,
    pub estimate: Option<GripEstimate>,
    pub phase_changed: bool,
    pub stimulus_started: bool,
    pub finished: bool,
}

/// Runs one trial one tick at a time.
#[derive(Debug, Clone)]
pub struct TrialRunner {
    state: TrialState,
    cfg: ProtocolConfig,
    dt: f64,
    max_trial_s: f64,
    tick: u64,
    trajectory: Option<(Vec<TrajectoryPoint>, usize)>,
    stimulus_done: bool,
    release_requested: bool,
    finished: bool,
    samples: Vec<TrialSample>,
    truth: Vec<(f64, f64)>,
    flags: Vec<TrialFlag>,
}

impl TrialRunner {
    pub fn new(spec: TrialSpec, setup: &RigSetup) -> Self {
        TrialRunner {
            state: TrialState::new(spec),
            cfg: setup.protocol,
            dt: setup.dt(),
            max_trial_s: setup.max_trial_s,
            tick: 0,
            trajectory: None,
            stimulus_done: false,
            release_requested: false,
            finished: false,
            samples: Vec::new(),
            truth: Vec::new(),
            flags: Vec::new(),
        }
    }

    pub fn state(&self) -> &TrialState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn clock(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn context(&self) -> TickContext {
        TickContext {
            t: self.clock(),
            dt: self.dt,
            target: self.state.spec.condition.target_n(),
            band: self.cfg.band_halfwidth,
            phase: self.state.phase,
            release_requested: self.release_requested,
            stimulus_onset: self.state.onset,
        }
    }

    fn flag(&mut self, flag: TrialFlag) {
        if !self.flags.contains(&flag) {
            self.flags.push(flag);
        }
    }

    /// Advances one tick. `grip` of `None` means the input stalled: the
    /// trial is paused (nothing recorded, protocol not advanced) and flagged.
    pub fn tick(
        &mut self,
        grip: Option<(f64, f64)>,
        device: &mut SimulatedDevice,
    ) -> Result<TickReport, EngineError> {
        let mut report = TickReport {
            sample: None,
            estimate: None,
            phase_changed: false,
            stimulus_started: false,
            finished: self.finished,
        };
        if self.finished {
            return Ok(report);
        }
        let t = self.clock();
        self.tick += 1;

        // Tactor targets for this period.
        if let Some((traj, next)) = &mut self.trajectory {
            let idx = (*next).min(traj.len() - 1);
            let target = traj[idx].target_counts;
            *next += 1;
            device.set_target(self.cfg.stimulus_axis, target);
        }
        let kin = device.control_tick()?;

        let Some((g1, g2)) = grip else {
            self.flag(TrialFlag::InputStall);
            return Ok(report);
        };
        let (g1, g2) = (g1.max(0.0), g2.max(0.0));

        let reading = device.sense(g1, g2, kin, t)?;
        let est = decompose(&reading, &device.setup.coefficients)?;

        if let Some((traj, next)) = &self.trajectory {
            if !self.stimulus_done && *next >= traj.len() && device.drives_idle() {
                self.stimulus_done = true;
            }
        }

        let before = self.state.phase;
        let (next_state, commands) = self.state.advance(
            TrialInput {
                f_mean: est.f_mean,
                clock: t,
                stimulus_done: self.stimulus_done,
            },
            &self.cfg,
        );
        self.state = next_state;
        if self.state.corrupt {
            self.flag(TrialFlag::Corrupt);
        }
        for cmd in commands {
            match cmd {
                Command::StartStimulus {
                    displacement_mm,
                    axis,
                } => {
                    let traj = plan_stimulus(displacement_mm, axis, &device.setup.actuator)?;
                    // Point 0 is the current rest position; motion starts next tick.
                    self.trajectory = Some((traj, 1));
                    report.stimulus_started = true;
                }
                Command::RequestRelease => self.release_requested = true,
                Command::Complete => self.finished = true,
                Command::Abort => {
                    self.flag(TrialFlag::Aborted);
                    self.finished = true;
                }
            }
        }
        if !self.finished && t >= self.max_trial_s {
            self.flag(TrialFlag::Timeout);
            self.finished = true;
        }

        let (x_mm, y_mm) = device.encoder_mm();
        let sample = TrialSample {
            t,
            f_m: reading.f_m,
            t_m: reading.t_m,
            f_grip_1: est.f_grip_1,
            f_grip_2: est.f_grip_2,
            f_mean: est.f_mean,
            tactor_x_mm: x_mm,
            tactor_y_mm: y_mm,
            phase: self.state.phase,
        };
        self.samples.push(sample);
        self.truth.push((g1, g2));
        report.sample = Some(sample);
        report.estimate = Some(est);
        report.phase_changed = self.state.phase != before;
        report.finished = self.finished;
        Ok(report)
    }

    pub fn into_record(self) -> TrialRecord {
        let markers = match (self.state.onset, self.state.stimulus_end) {
            (Some(onset_t), Some(end_t)) if self.state.outcome == TrialOutcome::Completed => {
                Some(StimulusMarkers { onset_t, end_t })
            }
            _ => None,
        };
        TrialRecord {
            spec: self.state.spec,
            sample_rate: 1.0 / self.dt,
            samples: self.samples,
            markers,
            flags: self.flags,
            truth: self.truth,
        }
    }

    /// Runs a whole trial against `source` on a virtual clock.
    pub fn run_to_end<S: GripSource + ?Sized>(
        spec: TrialSpec,
        setup: &RigSetup,
        device: &mut SimulatedDevice,
        source: &mut S,
    ) -> Result<TrialRecord, EngineError> {
        let mut runner = TrialRunner::new(spec, setup);
        source.begin_trial(&spec);
        while !runner.is_finished() {
            let grip = source.grip(&runner.context());
            runner.tick(grip, device)?;
        }
        Ok(runner.into_record())
    }
}
