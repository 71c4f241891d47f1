//! Leadscrew tactor drive: encoder kinematics, 100 Hz min-max position
//! control, stall-detected homing and out-and-back stimulus trajectories.
//!
//! The simulated state tracks two positions: the physical one (counts from
//! the mechanical middle of the travel, known only to the simulation) and
//! the encoder reading, which is relative to wherever the drive was zeroed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONTROL_RATE_HZ: f64 = 100.0;
pub const CONTROL_DT: f64 = 1.0 / CONTROL_RATE_HZ;

#[derive(Debug, Error, PartialEq)]
pub enum ActuatorError {
    #[error("{0:?} axis is not homed")]
    NotHomed(Axis),
    #[error("homing failed on {axis:?} axis: no stall within {ticks} ticks")]
    HomingFailed { axis: Axis, ticks: usize },
    #[error("displacement {0} mm outside (0, travel range]")]
    DisplacementOutOfRange(f64),
    #[error("control period must be positive, got {0}")]
    BadPeriod(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Constants of one leadscrew drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSpec {
    pub gear_ratio: f64,
    /// Leadscrew pitch, mm per output revolution.
    pub pitch_mm: f64,
    pub counts_per_output_rev: f64,
    /// N·mm.
    pub max_torque_nmm: f64,
    /// Output shaft speed, rev/min.
    pub nominal_speed_rpm: f64,
    /// Half-range of travel about the middle, mm.
    pub travel_range_mm: f64,
    pub thrust_limit_n: f64,
    /// Deadband of the min-max controller, counts.
    pub settle_band: i64,
    /// Duty magnitude the controller switches to outside the deadband.
    pub duty_max: f64,
}

impl Default for ActuatorSpec {
    fn default() -> Self {
        ActuatorSpec {
            gear_ratio: 51.45,
            pitch_mm: 0.7,
            counts_per_output_rev: 617.0,
            max_torque_nmm: 84.37,
            nominal_speed_rpm: 590.0,
            travel_range_mm: 1.5,
            thrust_limit_n: 181.8,
            settle_band: 60,
            duty_max: 1.0,
        }
    }
}

impl ActuatorSpec {
    pub fn mm_per_count(&self) -> f64 {
        self.pitch_mm / self.counts_per_output_rev
    }

    /// Link advance per motor revolution.
    pub fn mm_per_motor_rev(&self) -> f64 {
        self.pitch_mm / self.gear_ratio
    }

    /// Link speed at full duty, mm/s.
    pub fn nominal_speed_mm_s(&self) -> f64 {
        self.nominal_speed_rpm / 60.0 * self.pitch_mm
    }

    pub fn nominal_speed_counts_s(&self) -> f64 {
        self.nominal_speed_rpm / 60.0 * self.counts_per_output_rev
    }

    pub fn travel_counts(&self) -> i64 {
        mm_to_counts(self.travel_range_mm, self)
    }
}

pub fn counts_to_mm(counts: i64, spec: &ActuatorSpec) -> f64 {
    counts as f64 * spec.pitch_mm / spec.counts_per_output_rev
}

/// Nearest encoder count to a link position.
pub fn mm_to_counts(mm: f64, spec: &ActuatorSpec) -> i64 {
    (mm * spec.counts_per_output_rev / spec.pitch_mm).round() as i64
}

/// Crude motor current model; only the stall spike matters for homing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentModel {
    pub baseline_a: f64,
    pub per_duty_a: f64,
    pub stall_a: f64,
}

impl Default for CurrentModel {
    fn default() -> Self {
        CurrentModel {
            baseline_a: 0.05,
            per_duty_a: 0.25,
            stall_a: 0.6,
        }
    }
}

impl CurrentModel {
    fn current(&self, duty: f64, blocked: bool) -> f64 {
        let stall = if blocked && duty != 0.0 {
            self.stall_a
        } else {
            0.0
        };
        self.baseline_a + self.per_duty_a * duty.abs() + stall
    }
}

/// Default stall threshold for [`home`], A.
pub const DEFAULT_STALL_THRESHOLD_A: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub axis: Axis,
    /// Encoder position relative to the current zero.
    pub position_counts: i64,
    pub target_counts: i64,
    pub duty: f64,
    /// Simulated motor current, A.
    pub current: f64,
    pub homed: bool,
    /// Set while the soft travel limit or an end-stop is holding the link.
    pub at_limit: bool,
    /// Simulation truth: link position from mechanical mid-travel, counts.
    physical_counts: f64,
    /// Physical position at which the encoder reads zero.
    encoder_zero: f64,
    current_model: CurrentModel,
}

impl ActuatorState {
    /// Power-on state: the encoder reads zero wherever the link happens to be.
    pub fn power_on(axis: Axis, physical_offset_mm: f64, spec: &ActuatorSpec) -> Self {
        let limit = spec.travel_range_mm / spec.mm_per_count();
        let physical = (physical_offset_mm / spec.mm_per_count()).clamp(-limit, limit);
        ActuatorState {
            axis,
            position_counts: 0,
            target_counts: 0,
            duty: 0.0,
            current: 0.0,
            homed: false,
            at_limit: false,
            physical_counts: physical,
            encoder_zero: physical,
            current_model: CurrentModel::default(),
        }
    }

    /// Homed and resting at the mechanical middle.
    pub fn centered(axis: Axis) -> Self {
        ActuatorState {
            homed: true,
            ..ActuatorState::power_on(axis, 0.0, &ActuatorSpec::default())
        }
    }

    pub fn with_current_model(mut self, model: CurrentModel) -> Self {
        self.current_model = model;
        self
    }

    /// Link position from mechanical mid-travel, mm (simulation truth).
    pub fn physical_mm(&self, spec: &ActuatorSpec) -> f64 {
        self.physical_counts * spec.mm_per_count()
    }

    pub fn position_mm(&self, spec: &ActuatorSpec) -> f64 {
        counts_to_mm(self.position_counts, spec)
    }

    pub fn set_target(&mut self, counts: i64) {
        self.target_counts = counts;
    }

    pub fn is_settled(&self, spec: &ActuatorSpec) -> bool {
        (self.target_counts - self.position_counts).abs() <= spec.settle_band
    }

    fn sync_encoder(&mut self) {
        self.position_counts = (self.physical_counts - self.encoder_zero).round() as i64;
    }

    /// Drives at `duty` for one period. Returns whether an end-stop blocked
    /// the motion.
    fn drive(&mut self, duty: f64, spec: &ActuatorSpec, dt: f64, soft_limit: bool) -> bool {
        let hard = spec.travel_range_mm / spec.mm_per_count();
        let step = duty * spec.nominal_speed_counts_s() * dt;
        let mut next = self.physical_counts + step;
        let mut blocked = false;
        if next > hard {
            next = hard;
            blocked = true;
        } else if next < -hard {
            next = -hard;
            blocked = true;
        }
        if soft_limit {
            let soft = spec.travel_counts() as f64;
            let rel = next - self.encoder_zero;
            if rel > soft {
                next = self.encoder_zero + soft;
                blocked = true;
            } else if rel < -soft {
                next = self.encoder_zero - soft;
                blocked = true;
            }
        }
        self.physical_counts = next;
        self.duty = duty;
        self.current = self.current_model.current(duty, blocked);
        self.at_limit = blocked && duty != 0.0;
        self.sync_encoder();
        blocked
    }
}

/// Min-max control law: full duty toward the target outside the deadband,
/// zero inside it.
pub fn min_max_duty(error_counts: i64, spec: &ActuatorSpec) -> f64 {
    if error_counts > spec.settle_band {
        spec.duty_max
    } else if error_counts < -spec.settle_band {
        -spec.duty_max
    } else {
        0.0
    }
}

/// One control period of one axis.
pub fn control_step(
    state: &ActuatorState,
    spec: &ActuatorSpec,
    dt: f64,
) -> Result<ActuatorState, ActuatorError> {
    if !state.homed {
        return Err(ActuatorError::NotHomed(state.axis));
    }
    if !(dt > 0.0) {
        return Err(ActuatorError::BadPeriod(dt));
    }
    let mut next = *state;
    let duty = min_max_duty(state.target_counts - state.position_counts, spec);
    next.drive(duty, spec, dt, true);
    Ok(next)
}

/// Stall-detected homing: push toward the negative end-stop until the current
/// spikes, then center and zero the encoder there.
pub fn home(
    state: &ActuatorState,
    spec: &ActuatorSpec,
    current_threshold: f64,
) -> Result<ActuatorState, ActuatorError> {
    let dt = CONTROL_DT;
    let full_travel = 2.0 * spec.travel_range_mm / spec.mm_per_count();
    let timeout = (full_travel / (spec.nominal_speed_counts_s() * dt)).ceil() as usize + 10;

    let mut s = *state;
    s.homed = false;
    let mut stalled = false;
    for _ in 0..timeout {
        s.drive(-spec.duty_max, spec, dt, false);
        if s.current > current_threshold {
            stalled = true;
            break;
        }
    }
    if !stalled {
        s.drive(0.0, spec, dt, false);
        return Err(ActuatorError::HomingFailed {
            axis: s.axis,
            ticks: timeout,
        });
    }

    // The end-stop sits one travel range below the middle.
    s.encoder_zero = s.physical_counts + spec.travel_range_mm / spec.mm_per_count();
    s.sync_encoder();
    s.homed = true;
    s.target_counts = 0;
    for _ in 0..timeout {
        s = control_step(&s, spec, dt)?;
        if s.duty == 0.0 {
            break;
        }
    }
    // Wherever it settled becomes the zero.
    s.encoder_zero = s.physical_counts;
    s.sync_encoder();
    s.duty = 0.0;
    s.current = s.current_model.current(0.0, false);
    s.at_limit = false;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Seconds from the start of the stimulus.
    pub t: f64,
    pub target_counts: i64,
}

/// Out-and-back stimulus sampled at the control rate: ramp to `displacement`
/// at nominal speed, then straight back to zero.
pub fn plan_stimulus(
    displacement_mm: f64,
    axis: Axis,
    spec: &ActuatorSpec,
) -> Result<Vec<TrajectoryPoint>, ActuatorError> {
    let _ = axis;
    if !(displacement_mm > 0.0) || displacement_mm > spec.travel_range_mm + 1e-12 {
        return Err(ActuatorError::DisplacementOutOfRange(displacement_mm));
    }
    let speed = spec.nominal_speed_mm_s();
    let half = displacement_mm / speed;
    let total = 2.0 * half;
    let ticks = (total / CONTROL_DT).ceil() as usize;
    let mut points = Vec::with_capacity(ticks + 2);
    let mut turnaround_done = false;
    for k in 0..=ticks {
        let t = k as f64 * CONTROL_DT;
        if !turnaround_done && t >= half {
            if t > half {
                points.push(TrajectoryPoint {
                    t: half,
                    target_counts: mm_to_counts(displacement_mm, spec),
                });
            }
            turnaround_done = true;
        }
        let mm = if t <= half {
            speed * t
        } else {
            (displacement_mm - speed * (t - half)).max(0.0)
        };
        points.push(TrajectoryPoint {
            t,
            target_counts: mm_to_counts(mm.min(displacement_mm), spec),
        });
    }
    if let Some(last) = points.last_mut() {
        last.target_counts = 0;
    }
    Ok(points)
}

/// Path length of a trajectory, mm.
pub fn path_length_mm(points: &[TrajectoryPoint], spec: &ActuatorSpec) -> f64 {
    points
        .windows(2)
        .map(|w| counts_to_mm((w[1].target_counts - w[0].target_counts).abs(), spec))
        .sum()
}

/// Text protocol spoken by the tactor drive firmware over a serial line.
pub mod bridge {
    use super::Axis;
    use std::fmt;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Command {
        Set { axis: Axis, counts: i64 },
        Get { axis: Axis },
        Home { axis: Axis },
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct PositionReport {
        pub axis: Axis,
        pub counts: i64,
        pub current_ma: i64,
    }

    #[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
    #[error("bad bridge line {line:?}: {reason}")]
    pub struct ParseError {
        pub line: String,
        pub reason: &'static str,
    }

    fn axis_str(axis: Axis) -> &'static str {
        match axis {
            Axis::X => "X",
            Axis::Y => "Y",
        }
    }

    fn parse_axis(s: &str) -> Option<Axis> {
        match s {
            "X" | "x" => Some(Axis::X),
            "Y" | "y" => Some(Axis::Y),
            _ => None,
        }
    }

    impl fmt::Display for Command {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match self {
                Command::Set { axis, counts } => write!(f, "SET {} {}", axis_str(*axis), counts),
                Command::Get { axis } => write!(f, "GET {}", axis_str(*axis)),
                Command::Home { axis } => write!(f, "HOME {}", axis_str(*axis)),
            }
        }
    }

    impl Command {
        pub fn parse(line: &str) -> Result<Command, ParseError> {
            let err = |reason| ParseError {
                line: line.to_string(),
                reason,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let axis = parts
                .get(1)
                .and_then(|a| parse_axis(a))
                .ok_or_else(|| err("missing or unknown axis"))?;
            match (parts[0], parts.len()) {
                ("SET", 3) => {
                    let counts = parts[2].parse().map_err(|_| err("counts not an integer"))?;
                    Ok(Command::Set { axis, counts })
                }
                ("GET", 2) => Ok(Command::Get { axis }),
                ("HOME", 2) => Ok(Command::Home { axis }),
                _ => Err(err("unknown command")),
            }
        }
    }

    impl fmt::Display for PositionReport {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(
                f,
                "POS {} {} CUR {}",
                axis_str(self.axis),
                self.counts,
                self.current_ma
            )
        }
    }

    impl PositionReport {
        pub fn parse(line: &str) -> Result<PositionReport, ParseError> {
            let err = |reason| ParseError {
                line: line.to_string(),
                reason,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "POS" || parts[3] != "CUR" {
                return Err(err("expected `POS <axis> <counts> CUR <mA>`"));
            }
            Ok(PositionReport {
                axis: parse_axis(parts[1]).ok_or_else(|| err("unknown axis"))?,
                counts: parts[2].parse().map_err(|_| err("counts not an integer"))?,
                current_ma: parts[4].parse().map_err(|_| err("current not an integer"))?,
            })
        }
    }

    /// Newline-delimited command channel to a drive over any byte stream.
    #[cfg(feature = "hardware")]
    pub struct SerialBridge<S> {
        reader: std::io::BufReader<S>,
    }

    #[cfg(feature = "hardware")]
    impl<S: std::io::Read + std::io::Write> SerialBridge<S> {
        pub fn new(stream: S) -> Self {
            SerialBridge {
                reader: std::io::BufReader::new(stream),
            }
        }

        pub fn send(&mut self, cmd: Command) -> std::io::Result<()> {
            use std::io::Write;
            let stream = self.reader.get_mut();
            writeln!(stream, "{cmd}")?;
            stream.flush()
        }

        pub fn query(&mut self, axis: Axis) -> std::io::Result<PositionReport> {
            use std::io::BufRead;
            self.send(Command::Get { axis })?;
            let mut line = String::new();
            self.reader.read_line(&mut line)?;
            PositionReport::parse(line.trim_end())
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        }
    }
}
