//! Live sessions over the console WebSocket.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use gripforce_core::engine::RigSetup;
use gripforce_core::protocol::{plan_session, TrialFlag};
use gripforce_service::commands::wait_for_input;
use gripforce_service::persist::{load_session, Mode};
use gripforce_service::profile::DeviceProfile;
use gripforce_service::runloop::{run_session, LiveSource, SessionConfig, STALL_TIMEOUT};
use gripforce_service::server::{serve, Hub};
use gripforce_service::telemetry::{ParticipantFrame, Prompt, TelemetryFrame};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

fn config(plan_seed: u64) -> SessionConfig {
    let setup = RigSetup::default();
    SessionConfig {
        mode: Mode::Interactive,
        participant: "P01".into(),
        plan: plan_session(plan_seed),
        participant_seed: None,
        setup,
        profile: DeviceProfile::nominal(setup.coefficients),
        pace: None,
        max_trials: Some(1),
    }
}

async fn start_server() -> (Hub, String) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let hub = Hub::new(true);
    tokio::spawn(serve(listener, hub.clone()));
    (hub, addr)
}

fn run_live(hub: Hub, plan_seed: u64, dir: PathBuf) -> tokio::task::JoinHandle<()> {
    tokio::task::spawn_blocking(move || {
        wait_for_input(&hub);
        let mut source = LiveSource {
            input: hub.input.clone(),
            stall_after: STALL_TIMEOUT,
        };
        run_session(&config(plan_seed), &mut source, &dir, Some(&hub)).unwrap();
    })
}

/// Console that follows the prompts; goes silent for `stall` once it has
/// been holding for a while.
async fn participant(addr: String, stall: Option<Duration>) -> Vec<String> {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/participant"))
        .await
        .unwrap();
    let (mut tx, mut rx) = ws.split();
    tx.send(Message::Text("{\"grip\": 0.0}".into())).await.unwrap();
    let mut lines = Vec::new();
    let mut holding = 0;
    let mut stall = stall;
    while let Ok(Some(Ok(msg))) = tokio::time::timeout(Duration::from_secs(3), rx.next()).await {
        let Message::Text(line) = msg else { continue };
        let frame: ParticipantFrame = serde_json::from_str(&line).unwrap();
        lines.push(line);
        let grip = match frame.prompt {
            Prompt::Reach | Prompt::Hold => frame.target,
            Prompt::Release => 0.0,
        };
        if frame.prompt == Prompt::Hold {
            holding += 1;
            if holding == 20 {
                if let Some(pause) = stall.take() {
                    tokio::time::sleep(pause).await;
                }
            }
        }
        tx.send(Message::Text(format!("{{\"grip\": {grip}}}"))).await.unwrap();
    }
    lines
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interactive_trial_over_websocket() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("live");
    let (hub, addr) = start_server().await;

    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/experimenter"))
        .await
        .unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    tokio::spawn(async move {
        let (_, mut rx) = ws.split();
        while let Some(Ok(Message::Text(line))) = rx.next().await {
            sink.lock().unwrap().push(line);
        }
    });

    let loop_done = run_live(hub, 5, session.clone());
    let lines = participant(addr.clone(), None).await;
    loop_done.await.unwrap();

    let loaded = load_session(&session).unwrap();
    let trial = &loaded.recording.trials[0];
    assert!(trial.markers.is_some(), "trial did not complete: {:?}", trial.flags);
    assert!(trial.is_usable(), "{:?}", trial.flags);

    let allowed: BTreeSet<&str> =
        ["t", "f_mean", "prompt", "target", "band", "trial", "block"].into();
    let mut prompts = Vec::new();
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, allowed);
        assert!(!line.contains("stimulus") && !line.contains("tactor"), "{line}");
        let p = v["prompt"].as_str().unwrap().to_string();
        if prompts.last() != Some(&p) {
            prompts.push(p);
        }
    }
    assert_eq!(prompts, ["reach", "hold", "release"]);

    // Decimated to about a third of the recorded rate.
    let n = trial.samples.len() as f64;
    assert!((lines.len() as f64) < 0.4 * n && (lines.len() as f64) > 0.3 * n);

    let full: Vec<TelemetryFrame> = seen
        .lock()
        .unwrap()
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(full.iter().any(|f| f.tactor_x_mm.abs() > 0.1));
    // Phase changes are never decimated away.
    let stimulus: Vec<_> = full.iter().filter(|f| f.phase.as_str() == "stimulus").collect();
    let onset = trial.markers.unwrap().onset_t;
    assert!((stimulus[0].t - onset).abs() < 1e-9);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn silent_console_corrupts_the_trial() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("live");
    let (hub, addr) = start_server().await;
    let loop_done = run_live(hub, 5, session.clone());
    participant(addr, Some(Duration::from_millis(500))).await;
    loop_done.await.unwrap();

    let loaded = load_session(&session).unwrap();
    let trial = &loaded.recording.trials[0];
    assert!(trial.flags.contains(&TrialFlag::InputStall), "{:?}", trial.flags);
    assert!(trial.flags.contains(&TrialFlag::Corrupt), "{:?}", trial.flags);
    assert!(!trial.is_usable());
}

#[tokio::test]
async fn endpoints_and_input_validation() {
    let (hub, addr) = start_server().await;
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/admin")).await.is_err());

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/input"))
        .await
        .unwrap();
    ws.send(Message::Text("{\"grip\": 99}".into())).await.unwrap();
    let reply = ws.next().await.unwrap().unwrap().into_text().unwrap();
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert!(v["error"].as_str().unwrap().contains("grip"));

    ws.send(Message::Text("{\"grip\": 4.5}".into())).await.unwrap();
    for _ in 0..100 {
        if let gripforce_service::server::InputState::Fresh(g) = hub.input.state(STALL_TIMEOUT) {
            assert_eq!(g, 4.5);
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("grip never arrived");
}
