//! Telemetry frames and the wire messages of the console channel.
//!
//! Experimenters get [`TelemetryFrame`] in full. Participants get
//! [`ParticipantFrame`], a separate type with no tactor or stimulus fields:
//! the stimulus phase is folded into "hold" so its timing cannot leak.

use gripforce_core::protocol::{TrialPhase, TrialSample, TrialSpec};
use serde::{Deserialize, Serialize};

/// Keep every n-th tick: 100 Hz in, ~33 Hz out.
pub const DECIMATION: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub t: f64,
    pub f_mean: f64,
    pub phase: TrialPhase,
    pub target: f64,
    pub band: f64,
    pub trial: usize,
    pub block: Option<usize>,
    pub training: bool,
    pub f_grip_1: f64,
    pub f_grip_2: f64,
    pub tactor_x_mm: f64,
    pub tactor_y_mm: f64,
}

/// What the participant is asked to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Reach,
    Hold,
    Release,
}

impl From<TrialPhase> for Prompt {
    fn from(phase: TrialPhase) -> Self {
        match phase {
            TrialPhase::RampUp => Prompt::Reach,
            TrialPhase::StableGrip | TrialPhase::Stimulus | TrialPhase::Wait => Prompt::Hold,
            TrialPhase::Released => Prompt::Release,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantFrame {
    pub t: f64,
    pub f_mean: f64,
    pub prompt: Prompt,
    pub target: f64,
    pub band: f64,
    pub trial: usize,
    pub block: Option<usize>,
}

impl TelemetryFrame {
    pub fn new(sample: &TrialSample, spec: &TrialSpec, band: f64) -> Self {
        TelemetryFrame {
            t: sample.t,
            f_mean: sample.f_mean,
            phase: sample.phase,
            target: spec.condition.target_n(),
            band,
            trial: spec.index,
            block: spec.block,
            training: spec.training,
            f_grip_1: sample.f_grip_1,
            f_grip_2: sample.f_grip_2,
            tactor_x_mm: sample.tactor_x_mm,
            tactor_y_mm: sample.tactor_y_mm,
        }
    }

    pub fn participant(&self) -> ParticipantFrame {
        ParticipantFrame {
            t: self.t,
            f_mean: self.f_mean,
            prompt: self.phase.into(),
            target: self.target,
            band: self.band,
            trial: self.trial,
            block: self.block,
        }
    }
}

/// One JSON document per line.
pub fn encode_line<T: Serialize>(frame: &T) -> String {
    let mut s = serde_json::to_string(frame).expect("frame serializes");
    s.push('\n');
    s
}

/// Passes every `every`-th tick, plus any tick flagged as forced (phase
/// changes go out immediately).
#[derive(Debug, Clone)]
pub struct Decimator {
    every: u32,
    count: u32,
}

impl Decimator {
    pub fn new(every: u32) -> Self {
        Decimator {
            every: every.max(1),
            count: 0,
        }
    }

    pub fn keep(&mut self, force: bool) -> bool {
        let due = self.count % self.every == 0;
        self.count = self.count.wrapping_add(1);
        due || force
    }
}

/// Grip input from the console: `{"grip": <newtons>}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputMessage {
    pub grip: f64,
}

pub const MAX_INPUT_GRIP_N: f64 = 40.0;

impl InputMessage {
    pub fn parse(text: &str) -> Result<f64, String> {
        let msg: InputMessage = serde_json::from_str(text.trim()).map_err(|e| e.to_string())?;
        if !msg.grip.is_finite() || !(0.0..=MAX_INPUT_GRIP_N).contains(&msg.grip) {
            return Err(format!(
                "grip must be within 0..={MAX_INPUT_GRIP_N} N, got {}",
                msg.grip
            ));
        }
        Ok(msg.grip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_keeps_every_third_and_forced() {
        let mut d = Decimator::new(DECIMATION);
        let kept: Vec<bool> = (0..7).map(|i| d.keep(i == 4)).collect();
        assert_eq!(kept, [true, false, false, true, true, false, true]);
    }

    #[test]
    fn input_validation() {
        assert_eq!(InputMessage::parse(r#"{"grip": 5.5}"#), Ok(5.5));
        assert!(InputMessage::parse(r#"{"grip": -1}"#).is_err());
        assert!(InputMessage::parse(r#"{"grip": 5, "x": 1}"#).is_err());
        assert!(InputMessage::parse("5").is_err());
    }
}
