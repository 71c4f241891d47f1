//! Virtual rig and synthetic participants.
//!
//! [`rig_step`] turns commanded grip forces and tactor kinematics into a
//! sensor reading through the lever model, including the tactor artifact
//! terms. [`SyntheticParticipant`] stands in for the hand: first-order
//! pursuit of the target force, slow motor noise, per-side asymmetry, and a
//! reflex bump that starts a fixed latency after the tactor begins to move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{
    home, plan_stimulus, ActuatorError, ActuatorSpec, ActuatorState, Axis, CONTROL_DT,
    DEFAULT_STALL_THRESHOLD_A,
};
use crate::calibration::{artifact_ratio, ArtifactSeries, SweepRecord, SweepSample};
use crate::engine::{GripSource, RigSetup, TickContext, TrialRunner};
use crate::mechanics::{
    decompose, forward_sensor, theoretical_artifact, ContactState, Lever, LeverGeometry,
    MechanicsError, SensorReading,
};
use crate::protocol::{SessionPlan, SessionRecording, TrialRecord, TrialSpec};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Calibration(#[from] crate::calibration::CalibrationError),
    #[error("a study needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Contact mechanics of one finger pad on its tactor and aperture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerPadModel {
    /// Kinetic friction coefficient between tactor and skin.
    pub friction_mu: f64,
    /// Fraction of the grip carried by the tactor rather than the aperture.
    pub tactor_share: f64,
    /// Below this tactor speed (mm/s) friction fades linearly to zero.
    pub slip_speed_floor: f64,
}

impl Default for FingerPadModel {
    fn default() -> Self {
        FingerPadModel {
            friction_mu: 0.1,
            tactor_share: 0.2,
            slip_speed_floor: 0.1,
        }
    }
}

impl FingerPadModel {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(0.0..=1.0).contains(&self.tactor_share) {
            return Err(SimulationError::InvalidParameter("tactor_share outside [0, 1]"));
        }
        if !(self.friction_mu >= 0.0) {
            return Err(SimulationError::InvalidParameter("friction_mu negative"));
        }
        if !(self.slip_speed_floor > 0.0) {
            return Err(SimulationError::InvalidParameter("slip_speed_floor not positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub geometry: [LeverGeometry; 2],
    pub pads: [FingerPadModel; 2],
    /// N.
    pub sensor_noise_sd_force: f64,
    /// N·m.
    pub sensor_noise_sd_torque: f64,
    pub sample_rate: f64,
    /// Grip arm length `L_G` used to normalize tactor y displacement, mm.
    pub grip_arm_mm: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            geometry: [LeverGeometry::device_lever_1(), LeverGeometry::device_lever_2()],
            pads: [FingerPadModel::default(); 2],
            sensor_noise_sd_force: 0.05,
            sensor_noise_sd_torque: 5e-4,
            sample_rate: 100.0,
            grip_arm_mm: 30.0,
        }
    }
}

impl RigConfig {
    pub fn noiseless() -> Self {
        RigConfig {
            sensor_noise_sd_force: 0.0,
            sensor_noise_sd_torque: 0.0,
            ..RigConfig::default()
        }
    }
}

/// Position and velocity of one tactor in its own x/y frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TactorKinematics {
    pub x_mm: f64,
    pub y_mm: f64,
    pub vx_mm_s: f64,
    pub vy_mm_s: f64,
}

impl TactorKinematics {
    pub fn speed(&self) -> f64 {
        self.vx_mm_s.hypot(self.vy_mm_s)
    }
}

/// Contact forces for one side given its grip and tactor motion.
pub fn contact_state(
    grip: f64,
    tactor: &TactorKinematics,
    pad: &FingerPadModel,
    grip_arm_mm: f64,
) -> ContactState {
    let f_tactor = pad.tactor_share * grip;
    let speed = tactor.speed();
    let taper = (speed / pad.slip_speed_floor).min(1.0);
    let theta = if speed > 0.0 {
        tactor.vy_mm_s.atan2(tactor.vx_mm_s)
    } else {
        0.0
    };
    ContactState {
        f_tactor,
        f_aperture: grip - f_tactor,
        f_friction: pad.friction_mu * f_tactor * taper,
        theta,
        delta_y_over_lg: tactor.y_mm / grip_arm_mm,
    }
}

/// One sensor sample from the virtual rig. With `noise` set, Gaussian sensor
/// noise is added to both channels.
pub fn rig_step<R: Rng + ?Sized>(
    grip_1: f64,
    grip_2: f64,
    tactors: &[TactorKinematics; 2],
    config: &RigConfig,
    noise: Option<&mut R>,
) -> Result<SensorReading, SimulationError> {
    let c1 = contact_state(grip_1, &tactors[0], &config.pads[0], config.grip_arm_mm);
    let c2 = contact_state(grip_2, &tactors[1], &config.pads[1], config.grip_arm_mm);
    let mut reading = forward_sensor(
        grip_1,
        grip_2,
        &c1,
        &c2,
        &config.geometry[0],
        &config.geometry[1],
    )?;
    if let Some(rng) = noise {
        reading.f_m += gaussian(rng, config.sensor_noise_sd_force);
        reading.t_m += gaussian(rng, config.sensor_noise_sd_torque);
    }
    Ok(reading)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    } else {
        0.0
    }
}

/// Calibration sweep of one lever: `forces` applied jointly on its tactor and
/// aperture, the other lever unloaded.
pub fn generate_sweep<R: Rng + ?Sized>(
    lever: Lever,
    config: &RigConfig,
    forces: &[f64],
    noise: Option<&mut R>,
) -> Result<SweepRecord, SimulationError> {
    let still = [TactorKinematics::default(); 2];
    let mut noise = noise;
    let mut samples = Vec::with_capacity(forces.len());
    for (i, &f) in forces.iter().enumerate() {
        let (g1, g2) = match lever {
            Lever::Lever1 => (f, 0.0),
            Lever::Lever2 => (0.0, f),
        };
        let mut reading = rig_step(g1, g2, &still, config, noise.as_deref_mut())?;
        reading.t = i as f64 * CONTROL_DT;
        samples.push(SweepSample {
            external_force: f,
            reading,
        });
    }
    Ok(SweepRecord { lever, samples })
}

/// Evenly spaced calibration forces over 0–20 N.
pub fn sweep_forces(n: usize) -> Vec<f64> {
    (0..n).map(|i| 20.0 * i as f64 / (n - 1) as f64).collect()
}

/// Result of driving one tactor out and back under a constant external load.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactTrace {
    pub series: ArtifactSeries,
    /// Closed-form relative artifact for the same kinematics, per sample.
    pub theoretical: Vec<f64>,
    pub tactor: Vec<TactorKinematics>,
}

/// Moves one lever's tactor back and forth by `displacement_mm` along `axis`
/// while `force` presses on that lever, and compares the decomposed force
/// with the applied one.
pub fn simulate_artifact_test(
    lever: Lever,
    force: f64,
    displacement_mm: f64,
    axis: Axis,
    setup: &RigSetup,
) -> Result<ArtifactTrace, SimulationError> {
    let spec = &setup.actuator;
    let side = match lever {
        Lever::Lever1 => 0,
        Lever::Lever2 => 1,
    };
    let traj = plan_stimulus(displacement_mm, axis, spec)?;
    let mut drive = ActuatorState::centered(axis);
    let mut tactors = [TactorKinematics::default(); 2];
    let mut external = Vec::new();
    let mut device = Vec::new();
    let mut theoretical = Vec::new();
    let mut kin = Vec::new();
    let settle_ticks = 20;
    for k in 0..traj.len() + settle_ticks {
        let target = traj[k.min(traj.len() - 1)].target_counts;
        drive.set_target(target);
        let prev = drive.physical_mm(spec);
        drive = crate::actuator::control_step(&drive, spec, CONTROL_DT)?;
        let pos = drive.physical_mm(spec);
        let vel = (pos - prev) / CONTROL_DT;
        let t = &mut tactors[side];
        match axis {
            Axis::X => {
                t.x_mm = pos;
                t.vx_mm_s = vel;
            }
            Axis::Y => {
                t.y_mm = pos;
                t.vy_mm_s = vel;
            }
        }
        let (g1, g2) = if side == 0 { (force, 0.0) } else { (0.0, force) };
        let reading = rig_step::<ChaCha8Rng>(g1, g2, &tactors, &setup.rig, None)?;
        let est = decompose(&reading, &setup.coefficients)?;
        let f_device = if side == 0 { est.f_grip_1 } else { est.f_grip_2 };
        let time = k as f64 * CONTROL_DT;
        external.push((time, force));
        device.push((time, f_device));
        let contact = contact_state(
            force,
            &tactors[side],
            &setup.rig.pads[side],
            setup.rig.grip_arm_mm,
        );
        theoretical.push(-theoretical_artifact(&contact, &setup.rig.geometry[side]) / force);
        kin.push(tactors[side]);
    }
    Ok(ArtifactTrace {
        series: artifact_ratio(&external, &device, crate::calibration::DEFAULT_ARTIFACT_GUARD_N)?,
        theoretical,
        tactor: kin,
    })
}

/// Behavioral parameters of one synthetic participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticipantModel {
    /// Rate of first-order pursuit of the target force, 1/s.
    pub tracking_gain: f64,
    /// Stationary standard deviation of the motor noise, N.
    pub motor_noise_sd: f64,
    /// Correlation time of the motor noise, s.
    pub motor_noise_tau: f64,
    /// Delay from tactor movement to the reflex, s.
    pub reflex_latency: f64,
    /// Rise time constant of the reflex bump, s.
    pub reflex_rise: f64,
    /// Reflex amplitude per mm of displacement, N/mm, indexed
    /// `[target level][displacement level]`.
    pub reflex_gain_per_mm: [[f64; 3]; 2],
    /// Decay rate of the reflex bump, 1/s.
    pub reflex_decay: f64,
    /// Trial-to-trial log-normal spread of the reflex amplitude.
    pub reflex_trial_log_sd: f64,
    /// Finger/thumb force ratio.
    pub side_bias: f64,
    /// Rate at which grip drops once release is requested, 1/s.
    pub release_gain: f64,
}

impl Default for ParticipantModel {
    fn default() -> Self {
        ParticipantModel {
            tracking_gain: 4.0,
            motor_noise_sd: 0.01,
            motor_noise_tau: 0.5,
            reflex_latency: 0.1,
            reflex_rise: 0.03,
            reflex_gain_per_mm: [[0.0; 3]; 2],
            reflex_decay: 1.0,
            reflex_trial_log_sd: 0.0,
            side_bias: 1.0,
            release_gain: 6.0,
        }
    }
}

impl ParticipantModel {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(self.reflex_latency > 0.0) {
            return Err(SimulationError::InvalidParameter("reflex_latency must be positive"));
        }
        let gains = self.reflex_gain_per_mm.iter().flatten();
        if gains.clone().any(|g| !(*g >= 0.0))
            || !(self.tracking_gain >= 0.0)
            || !(self.reflex_decay >= 0.0)
            || !(self.motor_noise_sd >= 0.0)
        {
            return Err(SimulationError::InvalidParameter("gains must be non-negative"));
        }
        if !(self.side_bias > 0.0) || !(self.reflex_rise > 0.0) || !(self.motor_noise_tau > 0.0) {
            return Err(SimulationError::InvalidParameter(
                "side_bias, reflex_rise and motor_noise_tau must be positive",
            ));
        }
        Ok(())
    }

    /// Same reflex gain in every condition.
    pub fn with_uniform_gain(mut self, gain_per_mm: f64) -> Self {
        self.reflex_gain_per_mm = [[gain_per_mm; 3]; 2];
        self
    }

    /// Reflex bump shape: rises with `reflex_rise`, decays at `reflex_decay`.
    pub fn reflex_profile(&self, amplitude: f64, since_onset: f64) -> f64 {
        let tau = since_onset - self.reflex_latency;
        if tau <= 0.0 {
            return 0.0;
        }
        amplitude * (1.0 - (-tau / self.reflex_rise).exp()) * (-self.reflex_decay * tau).exp()
    }
}

/// A [`ParticipantModel`] with state, driving the rig tick by tick.
#[derive(Debug, Clone)]
pub struct SyntheticParticipant {
    pub model: ParticipantModel,
    rng: ChaCha8Rng,
    voluntary: f64,
    noise: f64,
    reflex_amplitude: f64,
    spec: Option<TrialSpec>,
}

impl SyntheticParticipant {
    pub fn new(model: ParticipantModel, seed: u64) -> Result<Self, SimulationError> {
        model.validate()?;
        Ok(SyntheticParticipant {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            voluntary: 0.0,
            noise: 0.0,
            reflex_amplitude: 0.0,
            spec: None,
        })
    }

    /// Participant for a session whose virtual rig is seeded with `seed`;
    /// its own stream is decorrelated from the rig's.
    pub fn for_session(model: ParticipantModel, seed: u64) -> Result<Self, SimulationError> {
        SyntheticParticipant::new(model, seed ^ 0x5eed_5eed)
    }

    /// Split a mean grip into (finger, thumb) so that their ratio is the side
    /// bias and their mean is preserved.
    pub fn split(&self, mean: f64) -> (f64, f64) {
        let b = self.model.side_bias;
        (mean * 2.0 * b / (1.0 + b), mean * 2.0 / (1.0 + b))
    }
}

impl GripSource for SyntheticParticipant {
    fn begin_trial(&mut self, spec: &TrialSpec) {
        self.voluntary = 0.0;
        let c = spec.condition;
        let gain = self.model.reflex_gain_per_mm[c.target.index()][c.displacement.index()];
        let spread = if self.model.reflex_trial_log_sd > 0.0 {
            LogNormal::new(0.0, self.model.reflex_trial_log_sd)
                .expect("finite sd")
                .sample(&mut self.rng)
        } else {
            1.0
        };
        self.reflex_amplitude = gain * c.displacement_mm() * spread;
        self.spec = Some(*spec);
    }

    fn grip(&mut self, ctx: &TickContext) -> Option<(f64, f64)> {
        let m = &self.model;
        let dt = ctx.dt;
        let (goal, rate) = if ctx.release_requested {
            (0.0, m.release_gain)
        } else {
            (ctx.target, m.tracking_gain)
        };
        self.voluntary += (goal - self.voluntary) * (1.0 - (-rate * dt).exp());

        let a = (-dt / m.motor_noise_tau).exp();
        let kick = gaussian(&mut self.rng, m.motor_noise_sd * (1.0 - a * a).sqrt());
        self.noise = self.noise * a + kick;

        let reflex = ctx
            .stimulus_onset
            .map(|onset| m.reflex_profile(self.reflex_amplitude, ctx.t - onset))
            .unwrap_or(0.0);
        // Noise fades out with the voluntary grip so a released hand reads zero.
        let engaged = (self.voluntary / ctx.target.max(1e-9)).clamp(0.0, 1.0);
        let mean = (self.voluntary + reflex + self.noise * engaged).max(0.0);
        Some(self.split(mean))
    }
}

/// Drives one trial with a synthetic participant on a freshly homed rig.
pub fn run_synthetic_trial(
    spec: &TrialSpec,
    participant: &ParticipantModel,
    setup: &RigSetup,
    seed: u64,
) -> Result<TrialRecord, SimulationError> {
    let mut device = setup.build_device(seed)?;
    let mut person = SyntheticParticipant::for_session(*participant, seed)?;
    Ok(TrialRunner::run_to_end(*spec, setup, &mut device, &mut person)?)
}

/// Runs every trial of `plan` with one participant on one rig.
pub fn run_synthetic_session(
    subject: &str,
    plan: &SessionPlan,
    participant: &ParticipantModel,
    setup: &RigSetup,
    seed: u64,
) -> Result<SessionRecording, SimulationError> {
    let mut device = setup.build_device(seed)?;
    let mut person = SyntheticParticipant::for_session(*participant, seed)?;
    let trials = plan
        .trials()
        .map(|spec| TrialRunner::run_to_end(*spec, setup, &mut device, &mut person))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SessionRecording {
        subject: subject.to_string(),
        plan: plan.clone(),
        trials,
    })
}

/// Population from which synthetic subjects are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    /// Population-mean participant; its reflex gains are replaced by
    /// `reflex_amplitude_n / displacement`.
    pub base: ParticipantModel,
    /// Mean reflex amplitude per condition, N, `[target][displacement]`.
    pub reflex_amplitude_n: [[f64; 3]; 2],
    /// Log-normal spread of each subject's overall reflex scale.
    pub subject_log_sd: f64,
    /// Log-normal spread of each subject's per-condition amplitude.
    pub cell_log_sd: f64,
    /// Log-normal spread of the subject side bias around `base.side_bias`.
    pub side_bias_log_sd: f64,
    /// Log-normal spread of latency and tracking gain.
    pub timing_log_sd: f64,
}

impl PopulationSpec {
    /// Reflex grows with displacement, is larger at the lower target, and at
    /// the higher target stops growing past 1 mm.
    pub fn default_study() -> Self {
        PopulationSpec {
            base: ParticipantModel {
                reflex_trial_log_sd: 0.2,
                side_bias: 1.1,
                ..ParticipantModel::default()
            },
            reflex_amplitude_n: [[0.08, 0.14, 0.24], [0.05, 0.10, 0.10]],
            subject_log_sd: 0.25,
            cell_log_sd: 0.1,
            side_bias_log_sd: 0.05,
            timing_log_sd: 0.1,
        }
    }

    /// No reflex at all.
    pub fn null() -> Self {
        PopulationSpec {
            reflex_amplitude_n: [[0.0; 3]; 2],
            ..PopulationSpec::default_study()
        }
    }

    /// Draws one subject's parameters.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ParticipantModel {
        let ln = |sd: f64, rng: &mut R| {
            if sd > 0.0 {
                LogNormal::new(0.0, sd).expect("finite sd").sample(rng)
            } else {
                1.0
            }
        };
        let mut m = self.base;
        let scale = ln(self.subject_log_sd, rng);
        for (ti, row) in self.reflex_amplitude_n.iter().enumerate() {
            for (di, &amp) in row.iter().enumerate() {
                let disp = crate::protocol::Displacement::ALL[di].mm();
                m.reflex_gain_per_mm[ti][di] = amp / disp * scale * ln(self.cell_log_sd, rng);
            }
        }
        m.side_bias = self.base.side_bias * ln(self.side_bias_log_sd, rng);
        m.reflex_latency = self.base.reflex_latency * ln(self.timing_log_sd, rng);
        m.tracking_gain = self.base.tracking_gain * ln(self.timing_log_sd, rng);
        m
    }
}

/// Seed for subject `i` of a study seeded with `seed`.
pub fn subject_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

pub fn subject_label(i: usize) -> String {
    format!("S{:02}", i + 1)
}

/// Subject `index` of a study seeded with `study_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySubject {
    pub label: String,
    pub model: ParticipantModel,
    /// Seeds both the subject's virtual rig and the participant.
    pub seed: u64,
}

impl StudySubject {
    pub fn draw(population: &PopulationSpec, study_seed: u64, index: usize) -> Self {
        let seed = subject_seed(study_seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StudySubject {
            label: subject_label(index),
            model: population.draw(&mut rng),
            seed,
        }
    }
}

/// Simulates a full study. Every subject gets the same trial plan; subjects
/// run in parallel but results do not depend on scheduling.
pub fn run_synthetic_study(
    n_subjects: usize,
    population: &PopulationSpec,
    setup: &RigSetup,
    seed: u64,
) -> Result<Vec<SessionRecording>, SimulationError> {
    if n_subjects < 2 {
        return Err(SimulationError::TooFewSubjects(n_subjects));
    }
    let plan = crate::protocol::plan_session(seed);
    let jobs: Vec<StudySubject> = (0..n_subjects)
        .map(|i| StudySubject::draw(population, seed, i))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|job| {
                let plan = &plan;
                scope.spawn(move || {
                    run_synthetic_session(&job.label, plan, &job.model, setup, job.seed)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("subject simulation panicked"))
            .collect()
    })
}

/// Homes a drive from a random power-on position.
pub fn home_from_random<R: Rng + ?Sized>(
    axis: Axis,
    spec: &ActuatorSpec,
    rng: &mut R,
) -> Result<ActuatorState, ActuatorError> {
    let offset = rng.random_range(-spec.travel_range_mm..=spec.travel_range_mm);
    home(
        &ActuatorState::power_on(axis, offset, spec),
        spec,
        DEFAULT_STALL_THRESHOLD_A,
    )
}
