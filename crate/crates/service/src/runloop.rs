//! The 100 Hz session loop.
//!
//! One thread owns the loop: it pulls a grip from the input source, ticks
//! the trial runner and publishes telemetry. Finished trials go to a writer
//! thread over a bounded queue; the loop blocks on that queue rather than
//! drop a recording. Synthetic and replay sessions run on the virtual
//! clock; interactive sessions are paced by a monotonic wall clock.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use gripforce_core::engine::{GripSource, RigSetup, TickContext, TrialRunner};
use gripforce_core::protocol::{SessionPlan, TrialRecord, TrialSpec};

use crate::error::ServiceError;
use crate::persist::{
    session_id, timestamp_now, Mode, SessionManifest, SessionStatus, SessionWriter, FORMAT_VERSION,
};
use crate::profile::DeviceProfile;
use crate::server::{Hub, InputState, LiveInput};
use crate::telemetry::{Decimator, TelemetryFrame, DECIMATION};

pub const STALL_TIMEOUT: Duration = Duration::from_millis(200);
pub const WRITE_QUEUE: usize = 4;

/// Grip input for a live session, fed by the console.
#[derive(Debug, Clone)]
pub struct LiveSource {
    pub input: LiveInput,
    pub stall_after: Duration,
}

impl GripSource for LiveSource {
    fn grip(&mut self, _ctx: &TickContext) -> Option<(f64, f64)> {
        match self.input.state(self.stall_after) {
            InputState::Fresh(g) => Some((g, g)),
            InputState::Waiting | InputState::Stalled => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub mode: Mode,
    pub participant: String,
    pub plan: SessionPlan,
    /// Seeds the virtual rig (and the synthetic participant, if any).
    pub participant_seed: Option<u64>,
    pub setup: RigSetup,
    pub profile: DeviceProfile,
    /// Slow a virtual-clock run to `pace` × real time; `None` runs flat out.
    pub pace: Option<f64>,
    /// Stop after this many trials.
    pub max_trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub dir: PathBuf,
    pub manifest: SessionManifest,
}

enum WriterMsg {
    Trial(Box<TrialRecord>),
}

fn writer_thread(
    mut writer: SessionWriter,
    rx: Receiver<WriterMsg>,
) -> thread::JoinHandle<Result<SessionWriter, ServiceError>> {
    thread::spawn(move || {
        for msg in rx {
            match msg {
                WriterMsg::Trial(record) => writer.append_trial(&record)?,
            }
        }
        Ok(writer)
    })
}

fn manifest_for(cfg: &SessionConfig) -> SessionManifest {
    SessionManifest {
        format_version: FORMAT_VERSION,
        session_id: session_id(&cfg.participant, &cfg.plan, cfg.participant_seed),
        participant: cfg.participant.clone(),
        mode: cfg.mode,
        seed: cfg.plan.seed,
        participant_seed: cfg.participant_seed,
        created_at: timestamp_now(),
        sample_rate: cfg.setup.rig.sample_rate,
        plan_digest: cfg.plan.digest(),
        plan: cfg.plan.clone(),
        device_profile: cfg.profile.clone(),
        status: SessionStatus::Running,
        abort_reason: None,
        trials: Vec::new(),
    }
}

/// Runs a whole session into `dir`, which must not already hold one.
pub fn run_session<S: GripSource + ?Sized>(
    cfg: &SessionConfig,
    source: &mut S,
    dir: &Path,
    hub: Option<&Hub>,
) -> Result<SessionSummary, ServiceError> {
    let writer = SessionWriter::create(dir, manifest_for(cfg))?;
    let (tx, rx) = sync_channel(WRITE_QUEUE);
    let handle = writer_thread(writer, rx);

    let live = matches!(cfg.mode, Mode::Interactive | Mode::Hardware);
    let mut outcome: Result<(), ServiceError> = Ok(());
    let mut device = match cfg.setup.build_device(cfg.participant_seed.unwrap_or(0)) {
        Ok(d) => Some(d),
        Err(e) => {
            outcome = Err(e.into());
            None
        }
    };
    let specs: Vec<TrialSpec> = cfg
        .plan
        .trials()
        .take(cfg.max_trials.unwrap_or(usize::MAX))
        .copied()
        .collect();
    let dt = cfg.setup.dt();
    let mut decimator = Decimator::new(DECIMATION);

    if let Some(device) = device.as_mut() {
        'trials: for spec in specs {
            let mut runner = TrialRunner::new(spec, &cfg.setup);
            source.begin_trial(&spec);
            let start = Instant::now();
            let mut ticks: u32 = 0;
            while !runner.is_finished() {
                if live {
                    let due = start + Duration::from_secs_f64(dt) * ticks;
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        thread::sleep(wait);
                    }
                } else if let Some(pace) = cfg.pace {
                    thread::sleep(Duration::from_secs_f64(dt / pace));
                }
                ticks += 1;
                let grip = source.grip(&runner.context());
                let report = match runner.tick(grip, device) {
                    Ok(r) => r,
                    Err(e) => {
                        outcome = Err(e.into());
                        break 'trials;
                    }
                };
                if let (Some(hub), Some(sample)) = (hub, report.sample) {
                    if decimator.keep(report.phase_changed) {
                        hub.publish(TelemetryFrame::new(
                            &sample,
                            &spec,
                            cfg.setup.protocol.band_halfwidth,
                        ));
                    }
                }
            }
            if tx.send(WriterMsg::Trial(Box::new(runner.into_record()))).is_err() {
                // The writer has stopped; its error is reported below.
                break;
            }
        }
    }
    drop(tx);

    let writer = match handle.join().expect("writer thread panicked") {
        Ok(w) => w,
        Err(e) => return Err(ServiceError::Aborted(format!("recording stopped: {e}"))),
    };
    match outcome {
        Ok(()) => {
            let manifest = writer.finish(SessionStatus::Complete, None)?;
            Ok(SessionSummary {
                dir: dir.to_path_buf(),
                manifest,
            })
        }
        Err(e) => {
            let _ = writer.finish(SessionStatus::Aborted, Some(e.to_string()));
            Err(e)
        }
    }
}
