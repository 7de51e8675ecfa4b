//! WebSocket endpoint: control connections plus a fixed-rate frame stream
//! broadcast to every subscriber.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio::task::{JoinHandle, JoinSet};
use tokio_tungstenite::tungstenite::Message;

use crate::engine::Engine;
use crate::protocol::{ControlMessage, ServerMessage};

pub const DEFAULT_FRAME_RATE: f64 = 20.0;

/// Frames a subscriber may fall behind before it starts skipping.
const FRAME_BACKLOG: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("frame rate must be positive, got {0}")]
    FrameRate(f64),
    #[error("the engine's frame reader is already in use")]
    ReaderTaken,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub frame_rate: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8765)),
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }
}

/// A running endpoint; dropping it stops accepting and closes connections.
pub struct Server {
    local_addr: SocketAddr,
    engine: Arc<Engine>,
    accept: JoinHandle<()>,
    sampler: JoinHandle<()>,
}

impl Server {
    pub async fn bind(engine: Arc<Engine>, config: ServerConfig) -> Result<Self, ServerError> {
        if !(config.frame_rate > 0.0 && config.frame_rate.is_finite()) {
            return Err(ServerError::FrameRate(config.frame_rate));
        }
        let listener = TcpListener::bind(config.addr).await.map_err(|source| ServerError::Bind {
            addr: config.addr,
            source,
        })?;
        let local_addr = listener.local_addr().map_err(|source| ServerError::Bind {
            addr: config.addr,
            source,
        })?;
        let mut reader = engine.take_frame_reader().ok_or(ServerError::ReaderTaken)?;
        let (frames, _) = broadcast::channel::<Bytes>(FRAME_BACKLOG);

        let tx = frames.clone();
        let period = Duration::from_secs_f64(1.0 / config.frame_rate);
        let sampler = tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            loop {
                tick.tick().await;
                if tx.receiver_count() > 0 {
                    let _ = tx.send(Bytes::from(reader.latest().encode()));
                }
            }
        });

        let eng = engine.clone();
        let frame_rate = config.frame_rate;
        let accept = tokio::spawn(async move {
            let mut conns = JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        if let Ok((stream, _)) = accepted {
                            let _ = stream.set_nodelay(true);
                            conns.spawn(connection(stream, eng.clone(), frames.clone(), frame_rate));
                        }
                    }
                    Some(_) = conns.join_next(), if !conns.is_empty() => {}
                }
            }
        });
        Ok(Self {
            local_addr,
            engine,
            accept,
            sampler,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// Runs until the accept loop ends (it only ends when aborted).
    pub async fn run(mut self) {
        let _ = (&mut self.accept).await;
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.accept.abort();
        self.sampler.abort();
    }
}

/// Applies one control message and produces the reply.
pub fn handle(engine: &Engine, msg: ControlMessage, frame_rate: f64) -> ServerMessage {
    match msg {
        ControlMessage::SetParam { name, value } => match engine.set_param(&name, value) {
            Ok(value) => ServerMessage::Param { name, value },
            Err(e) => ServerMessage::Error { message: e.to_string() },
        },
        ControlMessage::SelectSource { source } => {
            engine.select_source(source);
            ServerMessage::Source { source }
        }
        ControlMessage::GetState => {
            let (source, params) = engine.state();
            ServerMessage::State {
                source,
                params,
                frame_params: engine.frame_params(),
                cycle_len: engine.cycle_len(),
                sample_rate: engine.sample_rate(),
                frame_rate,
            }
        }
        ControlMessage::SubscribeFrames { enabled } => ServerMessage::Subscribed { enabled },
    }
}

fn reply_to(engine: &Engine, msg: &Message, frame_rate: f64) -> (ServerMessage, Option<bool>) {
    let parsed = match msg {
        Message::Text(t) => ControlMessage::parse(t.as_str()).map_err(|e| format!("malformed control message: {e}")),
        _ => Err("control messages must be text".to_string()),
    };
    match parsed {
        Ok(m) => {
            let sub = match m {
                ControlMessage::SubscribeFrames { enabled } => Some(enabled),
                _ => None,
            };
            (handle(engine, m, frame_rate), sub)
        }
        Err(message) => (ServerMessage::Error { message }, None),
    }
}

async fn connection(stream: TcpStream, engine: Arc<Engine>, frames: broadcast::Sender<Bytes>, frame_rate: f64) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut tx, mut rx) = ws.split();
    let mut sub: Option<broadcast::Receiver<Bytes>> = None;
    loop {
        let out = tokio::select! {
            incoming = rx.next() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(Message::Ping(_) | Message::Pong(_) | Message::Frame(_))) => continue,
                Some(Ok(msg)) => {
                    let (reply, subscribe) = reply_to(&engine, &msg, frame_rate);
                    match subscribe {
                        Some(true) if sub.is_none() => sub = Some(frames.subscribe()),
                        Some(false) => sub = None,
                        _ => {}
                    }
                    Message::Text(reply.to_json().into())
                }
            },
            frame = async { sub.as_mut().expect("guarded").recv().await }, if sub.is_some() => match frame {
                Ok(b) => Message::Binary(b),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            },
        };
        if tx.send(out).await.is_err() {
            break;
        }
    }
}
