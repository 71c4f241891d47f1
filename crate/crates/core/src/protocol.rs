//! Study schedule and the per-trial phase state machine.
//!
//! A session is 10 training trials followed by 10 blocks, each block a
//! shuffled copy of the 6 displacement × target-force conditions. Every
//! trial waits a predetermined 1–4 s of stable in-band grip before the tactor
//! moves, then runs 3 s from stimulus onset before the participant releases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::actuator::Axis;

pub const N_BLOCKS: usize = 10;
pub const N_TRAINING: usize = 10;
pub const STABLE_WAIT_RANGE_S: (f64, f64) = (1.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Displacement {
    #[serde(rename = "0.5")]
    HalfMm,
    #[serde(rename = "1.0")]
    OneMm,
    #[serde(rename = "1.5")]
    OneAndHalfMm,
}

impl Displacement {
    pub const ALL: [Displacement; 3] = [
        Displacement::HalfMm,
        Displacement::OneMm,
        Displacement::OneAndHalfMm,
    ];

    pub fn mm(self) -> f64 {
        match self {
            Displacement::HalfMm => 0.5,
            Displacement::OneMm => 1.0,
            Displacement::OneAndHalfMm => 1.5,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetForce {
    #[serde(rename = "5.0")]
    FiveN,
    #[serde(rename = "7.5")]
    SevenHalfN,
}

impl TargetForce {
    pub const ALL: [TargetForce; 2] = [TargetForce::FiveN, TargetForce::SevenHalfN];

    pub fn newtons(self) -> f64 {
        match self {
            TargetForce::FiveN => 5.0,
            TargetForce::SevenHalfN => 7.5,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialCondition {
    pub displacement: Displacement,
    pub target: TargetForce,
}

impl TrialCondition {
    pub fn all() -> [TrialCondition; 6] {
        let mut out = [TrialCondition {
            displacement: Displacement::HalfMm,
            target: TargetForce::FiveN,
        }; 6];
        for (i, target) in TargetForce::ALL.into_iter().enumerate() {
            for (j, displacement) in Displacement::ALL.into_iter().enumerate() {
                out[i * 3 + j] = TrialCondition {
                    displacement,
                    target,
                };
            }
        }
        out
    }

    pub fn target_n(&self) -> f64 {
        self.target.newtons()
    }

    pub fn displacement_mm(&self) -> f64 {
        self.displacement.mm()
    }
}

impl fmt::Display for TrialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}N/{}mm",
            self.target.newtons(),
            self.displacement.mm()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub condition: TrialCondition,
    /// Predetermined stable-grip duration before the stimulus, s.
    pub stable_wait: f64,
    /// Block number, `None` for training trials.
    pub block: Option<usize>,
    /// Position in the session, 0-based over all 70 trials.
    pub index: usize,
    pub training: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub seed: u64,
    pub training: Vec<TrialSpec>,
    pub blocks: Vec<Vec<TrialSpec>>,
}

impl SessionPlan {
    /// All trials in presentation order: training first.
    pub fn trials(&self) -> impl Iterator<Item = &TrialSpec> {
        self.training.iter().chain(self.blocks.iter().flatten())
    }

    pub fn len(&self) -> usize {
        self.training.len() + self.blocks.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 of the plan's canonical JSON, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Deterministic session schedule for `seed`.
///
/// Training trials are the first 10 of two extra shuffled blocks, so every
/// condition appears at least once in training.
pub fn plan_session(seed: u64) -> SessionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conditions = TrialCondition::all();
    let mut index = 0;
    let mut spec = |rng: &mut ChaCha8Rng, condition, block, training| {
        let s = TrialSpec {
            condition,
            stable_wait: rng.random_range(STABLE_WAIT_RANGE_S.0..=STABLE_WAIT_RANGE_S.1),
            block,
            index,
            training,
        };
        index += 1;
        s
    };

    let mut pool: Vec<TrialCondition> = Vec::with_capacity(12);
    for _ in 0..2 {
        let mut block = conditions;
        block.shuffle(&mut rng);
        pool.extend(block);
    }
    pool.truncate(N_TRAINING);
    let training = pool
        .into_iter()
        .map(|c| spec(&mut rng, c, None, true))
        .collect();

    let blocks = (0..N_BLOCKS)
        .map(|b| {
            let mut block = conditions;
            block.shuffle(&mut rng);
            block
                .into_iter()
                .map(|c| spec(&mut rng, c, Some(b), false))
                .collect()
        })
        .collect();

    SessionPlan {
        seed,
        training,
        blocks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    RampUp,
    StableGrip,
    Stimulus,
    Wait,
    Released,
}

impl TrialPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialPhase::RampUp => "ramp_up",
            TrialPhase::StableGrip => "stable_grip",
            TrialPhase::Stimulus => "stimulus",
            TrialPhase::Wait => "wait",
            TrialPhase::Released => "released",
        }
    }

    pub fn parse(s: &str) -> Option<TrialPhase> {
        Some(match s {
            "ramp_up" => TrialPhase::RampUp,
            "stable_grip" => TrialPhase::StableGrip,
            "stimulus" => TrialPhase::Stimulus,
            "wait" => TrialPhase::Wait,
            "released" => TrialPhase::Released,
            _ => return None,
        })
    }

    /// Whether `self -> next` is a legal edge of the phase graph.
    pub fn can_advance_to(self, next: TrialPhase) -> bool {
        use TrialPhase::*;
        matches!(
            (self, next),
            (RampUp, StableGrip)
                | (StableGrip, RampUp)
                | (StableGrip, Stimulus)
                | (Stimulus, Wait)
                | (Stimulus, Released)
                | (Wait, Released)
        ) || self == next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandExitPolicy {
    /// Fall back to ramp-up and restart the stable timer on re-entry.
    ResetTimer,
    AbortTrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Half-width of the target band, N.
    pub band_halfwidth: f64,
    pub band_exit: BandExitPolicy,
    /// Time from stimulus onset to the release request, s.
    pub post_onset_wait: f64,
    /// Mean force below which the gripper counts as released, N.
    pub release_threshold: f64,
    /// How long the force must stay below the threshold, s.
    pub release_hold: f64,
    pub sample_period: f64,
    /// Sample gaps longer than this many periods corrupt the trial.
    pub max_gap_ticks: f64,
    pub stimulus_axis: Axis,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            band_halfwidth: 0.5,
            band_exit: BandExitPolicy::ResetTimer,
            post_onset_wait: 3.0,
            release_threshold: 0.5,
            release_hold: 0.2,
            sample_period: 0.01,
            max_gap_ticks: 3.0,
            stimulus_axis: Axis::X,
        }
    }
}

/// Per-tick observations fed to the state machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialInput {
    pub f_mean: f64,
    pub clock: f64,
    /// The tactor has completed its stimulus and come back to rest.
    pub stimulus_done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    StartStimulus { displacement_mm: f64, axis: Axis },
    RequestRelease,
    Complete,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Running,
    Completed,
    Aborted,
}

/// State of one trial. [`TrialState::advance`] is a pure transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialState {
    pub spec: TrialSpec,
    pub phase: TrialPhase,
    pub outcome: TrialOutcome,
    pub corrupt: bool,
    pub band_entered_at: Option<f64>,
    pub onset: Option<f64>,
    pub stimulus_end: Option<f64>,
    pub below_release_since: Option<f64>,
    pub last_clock: Option<f64>,
}

impl TrialState {
    pub fn new(spec: TrialSpec) -> Self {
        TrialState {
            spec,
            phase: TrialPhase::RampUp,
            outcome: TrialOutcome::Running,
            corrupt: false,
            band_entered_at: None,
            onset: None,
            stimulus_end: None,
            below_release_since: None,
            last_clock: None,
        }
    }

    pub fn in_band(&self, f_mean: f64, cfg: &ProtocolConfig) -> bool {
        (f_mean - self.spec.condition.target_n()).abs() <= cfg.band_halfwidth
    }

    pub fn advance(mut self, input: TrialInput, cfg: &ProtocolConfig) -> (TrialState, Vec<Command>) {
        let mut commands = Vec::new();
        if self.outcome != TrialOutcome::Running {
            return (self, commands);
        }
        let now = input.clock;
        if let Some(prev) = self.last_clock {
            if now - prev > cfg.max_gap_ticks * cfg.sample_period + 1e-9 {
                self.corrupt = true;
            }
        }
        self.last_clock = Some(now);
        let in_band = self.in_band(input.f_mean, cfg);

        match self.phase {
            TrialPhase::RampUp => {
                if in_band {
                    self.phase = TrialPhase::StableGrip;
                    self.band_entered_at = Some(now);
                    self = self.check_stable(now, cfg, &mut commands);
                }
            }
            TrialPhase::StableGrip => {
                if !in_band {
                    match cfg.band_exit {
                        BandExitPolicy::ResetTimer => {
                            self.phase = TrialPhase::RampUp;
                            self.band_entered_at = None;
                        }
                        BandExitPolicy::AbortTrial => {
                            self.outcome = TrialOutcome::Aborted;
                            commands.push(Command::Abort);
                        }
                    }
                } else {
                    self = self.check_stable(now, cfg, &mut commands);
                }
            }
            TrialPhase::Stimulus | TrialPhase::Wait => {
                if self.phase == TrialPhase::Stimulus && input.stimulus_done {
                    self.phase = TrialPhase::Wait;
                    self.stimulus_end = Some(now);
                }
                let onset = self.onset.expect("stimulus phase has an onset");
                if now - onset >= cfg.post_onset_wait - 1e-9 {
                    if self.stimulus_end.is_none() {
                        self.stimulus_end = Some(now);
                    }
                    self.phase = TrialPhase::Released;
                    commands.push(Command::RequestRelease);
                    self = self.check_release(input, cfg, &mut commands);
                }
            }
            TrialPhase::Released => {
                self = self.check_release(input, cfg, &mut commands);
            }
        }
        (self, commands)
    }

    fn check_stable(
        mut self,
        now: f64,
        cfg: &ProtocolConfig,
        commands: &mut Vec<Command>,
    ) -> TrialState {
        let entered = self.band_entered_at.expect("in stable grip");
        if now - entered >= self.spec.stable_wait - 1e-9 {
            self.phase = TrialPhase::Stimulus;
            self.onset = Some(now);
            commands.push(Command::StartStimulus {
                displacement_mm: self.spec.condition.displacement_mm(),
                axis: cfg.stimulus_axis,
            });
        }
        self
    }

    fn check_release(
        mut self,
        input: TrialInput,
        cfg: &ProtocolConfig,
        commands: &mut Vec<Command>,
    ) -> TrialState {
        if input.f_mean < cfg.release_threshold {
            let since = *self.below_release_since.get_or_insert(input.clock);
            if input.clock - since >= cfg.release_hold - 1e-9 {
                self.outcome = TrialOutcome::Completed;
                commands.push(Command::Complete);
            }
        } else {
            self.below_release_since = None;
        }
        self
    }
}

/// One 100 Hz sample of a trial recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSample {
    pub t: f64,
    pub f_m: f64,
    pub t_m: f64,
    pub f_grip_1: f64,
    pub f_grip_2: f64,
    pub f_mean: f64,
    pub tactor_x_mm: f64,
    pub tactor_y_mm: f64,
    pub phase: TrialPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusMarkers {
    pub onset_t: f64,
    pub end_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialFlag {
    /// Sample gap longer than the allowed number of periods.
    Corrupt,
    /// Interactive input went silent during the trial.
    InputStall,
    /// Trial never finished within the time limit.
    Timeout,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub spec: TrialSpec,
    pub sample_rate: f64,
    pub samples: Vec<TrialSample>,
    pub markers: Option<StimulusMarkers>,
    pub flags: Vec<TrialFlag>,
    /// Commanded per-side grip forces, when known (synthetic runs only).
    #[serde(skip)]
    pub truth: Vec<(f64, f64)>,
}

impl TrialRecord {
    /// Completed with markers and free of disqualifying flags.
    pub fn is_usable(&self) -> bool {
        self.markers.is_some()
            && !self
                .flags
                .iter()
                .any(|f| matches!(f, TrialFlag::Corrupt | TrialFlag::Timeout | TrialFlag::Aborted))
    }

    /// Index of the sample closest to time `t`.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        if self.samples.is_empty() {
            return None;
        }
        let idx = self.samples.partition_point(|s| s.t < t);
        let candidates = [idx.saturating_sub(1), idx.min(self.samples.len() - 1)];
        candidates
            .into_iter()
            .min_by(|&a, &b| {
                (self.samples[a].t - t)
                    .abs()
                    .total_cmp(&(self.samples[b].t - t).abs())
            })
    }

    /// Ordered phases with consecutive duplicates removed.
    pub fn phase_sequence(&self) -> Vec<TrialPhase> {
        let mut seq: Vec<TrialPhase> = Vec::new();
        for s in &self.samples {
            if seq.last() != Some(&s.phase) {
                seq.push(s.phase);
            }
        }
        seq
    }
}

/// Everything recorded for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecording {
    pub subject: String,
    pub plan: SessionPlan,
    pub trials: Vec<TrialRecord>,
}
