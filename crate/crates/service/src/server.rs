//! WebSocket endpoints for the console.
//!
//! - `/participant`: projected frames out, grip messages in
//! - `/experimenter`: full frames out
//! - `/input`: grip messages in, nothing out
//!
//! Frames fan out through a broadcast channel; a slow client lags and loses
//! frames rather than holding up the loop.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

use crate::telemetry::{encode_line, InputMessage, TelemetryFrame};

pub const FRAME_QUEUE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Participant,
    Experimenter,
    Input,
}

impl Endpoint {
    pub fn from_path(path: &str) -> Option<Endpoint> {
        match path.trim_end_matches('/') {
            "/participant" => Some(Endpoint::Participant),
            "/experimenter" => Some(Endpoint::Experimenter),
            "/input" => Some(Endpoint::Input),
            _ => None,
        }
    }

    fn receives_frames(self) -> bool {
        self != Endpoint::Input
    }

    fn accepts_input(self) -> bool {
        self != Endpoint::Experimenter
    }
}

/// Latest grip received from the console.
#[derive(Debug, Clone, Default)]
pub struct LiveInput {
    latest: Arc<Mutex<Option<(f64, Instant)>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputState {
    /// Nothing received yet.
    Waiting,
    Fresh(f64),
    /// The last message is older than the stall timeout.
    Stalled,
}

impl LiveInput {
    pub fn set(&self, grip: f64) {
        *self.latest.lock().expect("input lock") = Some((grip, Instant::now()));
    }

    pub fn state(&self, stall_after: Duration) -> InputState {
        match *self.latest.lock().expect("input lock") {
            None => InputState::Waiting,
            Some((g, at)) if at.elapsed() <= stall_after => InputState::Fresh(g),
            Some(_) => InputState::Stalled,
        }
    }
}

/// Shared state of the telemetry server.
#[derive(Debug, Clone)]
pub struct Hub {
    pub frames: broadcast::Sender<Arc<TelemetryFrame>>,
    pub input: LiveInput,
    /// Grip messages are applied only in interactive sessions.
    pub accept_input: bool,
}

impl Hub {
    pub fn new(accept_input: bool) -> Self {
        Hub {
            frames: broadcast::channel(FRAME_QUEUE).0,
            input: LiveInput::default(),
            accept_input,
        }
    }

    /// Non-blocking; dropped when nobody listens.
    pub fn publish(&self, frame: TelemetryFrame) {
        let _ = self.frames.send(Arc::new(frame));
    }
}

pub async fn serve(listener: TcpListener, hub: Hub) {
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            continue;
        };
        let hub = hub.clone();
        tokio::spawn(async move {
            if let Err(e) = handle(stream, hub).await {
                eprintln!("telemetry connection closed: {e}");
            }
        });
    }
}

async fn handle(
    stream: TcpStream,
    hub: Hub,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut endpoint = None;
    let ws = tokio_tungstenite::accept_hdr_async(stream, |req: &Request, resp: Response| {
        endpoint = Endpoint::from_path(req.uri().path());
        if endpoint.is_some() {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some("unknown endpoint".into()));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    })
    .await?;
    let endpoint = endpoint.expect("handshake accepted a known path");
    let (mut sink, mut source) = ws.split();
    let mut frames = hub.frames.subscribe();

    loop {
        tokio::select! {
            msg = source.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    if !endpoint.accepts_input() {
                        continue;
                    }
                    match InputMessage::parse(&text) {
                        Ok(g) if hub.accept_input => hub.input.set(g),
                        Ok(_) => {}
                        Err(e) => {
                            let reply = encode_line(&serde_json::json!({ "error": e }));
                            sink.send(Message::Text(reply)).await?;
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | None => return Ok(()),
                Some(Ok(_)) => {}
                Some(Err(e)) => return Err(e),
            },
            frame = frames.recv(), if endpoint.receives_frames() => match frame {
                Ok(frame) => {
                    let line = match endpoint {
                        Endpoint::Participant => encode_line(&frame.participant()),
                        _ => encode_line(frame.as_ref()),
                    };
                    sink.send(Message::Text(line)).await?;
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = sink.send(Message::Close(None)).await;
                    return Ok(());
                }
            },
        }
    }
}
