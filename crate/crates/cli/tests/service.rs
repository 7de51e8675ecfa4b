use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use proptest::prelude::*;
use sounderfeit::dataset::build_bowed1;
use sounderfeit::experiments::{train, TrainConfig};
use sounderfeit::model::DecoderModel;
use sounderfeit_service::engine::{Engine, EngineConfig};
use sounderfeit_service::protocol::{ControlMessage, Frame, ServerMessage, Source};
use sounderfeit_service::server::{Server, ServerConfig, ServerError};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn decoder() -> DecoderModel {
    static MODEL: OnceLock<DecoderModel> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let ds = build_bowed1(32).unwrap();
            let cfg = TrainConfig {
                n_batches: 50,
                ..TrainConfig::default()
            };
            train("D1_Z2_Y".parse().unwrap(), &ds, &cfg).unwrap().0.decoder_only()
        })
        .clone()
}

async fn start(frame_rate: f64) -> Server {
    let engine = Arc::new(Engine::start(decoder(), EngineConfig::default()).unwrap());
    let cfg = ServerConfig {
        addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        frame_rate,
    };
    Server::bind(engine, cfg).await.unwrap()
}

async fn connect(server: &Server) -> Ws {
    let url = format!("ws://{}", server.local_addr());
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn send(ws: &mut Ws, msg: &ControlMessage) {
    ws.send(Message::Text(msg.to_json().into())).await.unwrap();
}

async fn next_text(ws: &mut Ws) -> ServerMessage {
    loop {
        match tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap() {
            Some(Ok(Message::Text(t))) => return ServerMessage::parse(t.as_str()).unwrap(),
            Some(Ok(Message::Binary(_))) => continue,
            other => panic!("unexpected {other:?}"),
        }
    }
}

async fn next_frame(ws: &mut Ws) -> Frame {
    loop {
        match tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap() {
            Some(Ok(Message::Binary(b))) => return Frame::decode(&b).unwrap(),
            Some(Ok(Message::Text(_))) => continue,
            other => panic!("unexpected {other:?}"),
        }
    }
}

async fn request(ws: &mut Ws, msg: ControlMessage) -> ServerMessage {
    send(ws, &msg).await;
    next_text(ws).await
}

fn state_value(state: &ServerMessage, name: &str) -> f64 {
    match state {
        ServerMessage::State { params, .. } => params.iter().find(|p| p.name == name).unwrap().value,
        other => panic!("not a state: {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn set_param_then_get_state_echoes() {
    let server = start(20.0).await;
    let mut ws = connect(&server).await;
    let ack = request(
        &mut ws,
        ControlMessage::SetParam {
            name: "pressure".into(),
            value: 100.0,
        },
    )
    .await;
    assert_eq!(
        ack,
        ServerMessage::Param {
            name: "pressure".into(),
            value: 100.0
        }
    );
    let state = request(&mut ws, ControlMessage::GetState).await;
    assert!((state_value(&state, "pressure") - 100.0).abs() < 1e-4);
    let ServerMessage::State {
        frame_params,
        cycle_len,
        frame_rate,
        ..
    } = &state
    else {
        unreachable!()
    };
    assert_eq!(frame_params, &["source", "pressure", "position", "z0"]);
    assert_eq!(*cycle_len, 200);
    assert_eq!(*frame_rate, 20.0);

    // out-of-range values are clamped to the declared range
    let ack = request(
        &mut ws,
        ControlMessage::SetParam {
            name: "z0".into(),
            value: 3.0,
        },
    )
    .await;
    assert_eq!(
        ack,
        ServerMessage::Param {
            name: "z0".into(),
            value: 1.0
        }
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_messages_get_errors_and_the_connection_survives() {
    let server = start(20.0).await;
    let mut ws = connect(&server).await;
    ws.send(Message::Text("{not json".into())).await.unwrap();
    assert!(matches!(next_text(&mut ws).await, ServerMessage::Error { .. }));
    ws.send(Message::Text(r#"{"kind":"launch"}"#.into())).await.unwrap();
    assert!(matches!(next_text(&mut ws).await, ServerMessage::Error { .. }));
    ws.send(Message::Binary(vec![1, 2, 3].into())).await.unwrap();
    assert!(matches!(next_text(&mut ws).await, ServerMessage::Error { .. }));
    let unknown = request(
        &mut ws,
        ControlMessage::SetParam {
            name: "vowel".into(),
            value: 1.0,
        },
    )
    .await;
    assert!(matches!(unknown, ServerMessage::Error { ref message } if message.contains("vowel")));
    let state = request(&mut ws, ControlMessage::GetState).await;
    assert!(matches!(state, ServerMessage::State { .. }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_follow_the_selected_source() {
    let server = start(50.0).await;
    let mut ws = connect(&server).await;
    assert_eq!(
        request(&mut ws, ControlMessage::SubscribeFrames { enabled: true }).await,
        ServerMessage::Subscribed { enabled: true }
    );
    let f = next_frame(&mut ws).await;
    assert_eq!(f.source(), Some(Source::Neural));
    assert_eq!(f.waveform.len(), 200);
    assert_eq!(f.spectrum.len(), 101);
    assert_eq!(f.params.len(), 4);

    send(
        &mut ws,
        &ControlMessage::SelectSource {
            source: Source::Waveguide,
        },
    )
    .await;
    // frames already in flight may still carry the old flag
    let mut seen = Vec::new();
    loop {
        match tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap() {
            Some(Ok(Message::Binary(b))) => {
                let f = Frame::decode(&b).unwrap();
                seen.push(f.source());
                if f.source() == Some(Source::Waveguide) {
                    break;
                }
            }
            Some(Ok(Message::Text(t))) => {
                assert_eq!(
                    ServerMessage::parse(t.as_str()).unwrap(),
                    ServerMessage::Source {
                        source: Source::Waveguide
                    }
                );
                seen.clear();
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(seen.len() <= 2, "flag switched after {} frames", seen.len());
    for _ in 0..5 {
        let f = next_frame(&mut ws).await;
        assert_eq!(f.source(), Some(Source::Waveguide));
        assert!(f.spectrum.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_subscribers_see_identical_frames() {
    let server = start(50.0).await;
    let mut a = connect(&server).await;
    let mut b = connect(&server).await;
    request(&mut a, ControlMessage::SubscribeFrames { enabled: true }).await;
    request(&mut b, ControlMessage::SubscribeFrames { enabled: true }).await;
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    for _ in 0..12 {
        fa.push(next_frame(&mut a).await);
        fb.push(next_frame(&mut b).await);
    }
    // align on the first frame both received
    let start_b = fb.iter().position(|f| f.timestamp_us == fa[2].timestamp_us).expect("overlap");
    let n = (fa.len() - 2).min(fb.len() - start_b);
    assert!(n >= 8);
    assert_eq!(&fa[2..2 + n], &fb[start_b..start_b + n]);
    assert!(fa.windows(2).all(|w| w[1].timestamp_us > w[0].timestamp_us));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn busy_port_is_a_startup_error() {
    let server = start(20.0).await;
    let engine = Arc::new(Engine::start(decoder(), EngineConfig::default()).unwrap());
    let cfg = ServerConfig {
        addr: server.local_addr(),
        frame_rate: 20.0,
    };
    assert!(matches!(Server::bind(engine, cfg).await, Err(ServerError::Bind { .. })));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stalled_subscriber_does_not_stall_audio() {
    let server = start(200.0).await;
    let engine = server.engine().clone();
    let mut stalled = connect(&server).await;
    request(&mut stalled, ControlMessage::SubscribeFrames { enabled: true }).await;
    // `stalled` is never read again; its socket buffers fill up
    let mut live = connect(&server).await;
    request(&mut live, ControlMessage::SubscribeFrames { enabled: true }).await;

    let t0 = Instant::now();
    let s0 = engine.stats();
    let mut frames = 0;
    while t0.elapsed() < Duration::from_secs(3) {
        next_frame(&mut live).await;
        frames += 1;
    }
    let ack = request(
        &mut live,
        ControlMessage::SetParam {
            name: "position".into(),
            value: 20.0,
        },
    )
    .await;
    assert!(matches!(ack, ServerMessage::Param { .. }));
    let s1 = engine.stats();
    let secs = t0.elapsed().as_secs_f64();
    let rendered = (s1.samples - s0.samples) as f64 / engine.sample_rate();
    assert_eq!(s1.underruns, 0, "max lag {} us", s1.max_lag_us);
    assert_eq!(s1.errors, 0);
    assert!((rendered / secs - 1.0).abs() < 0.1, "rendered {rendered:.3} s in {secs:.3} s");
    assert!(frames > 100, "live subscriber got {frames} frames");
    drop(stalled);
}

#[test]
fn set_param_latches_within_two_hops() {
    let engine = Engine::start(decoder(), EngineConfig::default()).unwrap();
    let mut reader = engine.take_frame_reader().unwrap();
    assert!(engine.take_frame_reader().is_none());
    let hop = engine.hop() as u64;
    let us_per_sample = 1e6 / engine.sample_rate();
    for (k, value) in [100.0, 20.0, 77.0, 5.0].into_iter().enumerate() {
        std::thread::sleep(Duration::from_millis(30));
        let at = engine.stats().samples;
        engine.set_param("pressure", value).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        let frame = loop {
            let f = reader.latest();
            if (f.params[1] - value as f32).abs() < 1e-3 {
                break f;
            }
            assert!(Instant::now() < deadline, "set {k} never latched");
            std::thread::sleep(Duration::from_micros(200));
        };
        let latched_at = (frame.timestamp_us as f64 / us_per_sample).round() as u64;
        assert!(
            latched_at <= at + 2 * hop,
            "set {k}: requested at sample {at}, first seen at {latched_at}"
        );
    }
    assert_eq!(engine.stats().errors, 0);
}

#[test]
fn frame_spectrum_matches_the_waveform() {
    let engine = Engine::start(decoder(), EngineConfig::default()).unwrap();
    let mut reader = engine.take_frame_reader().unwrap();
    std::thread::sleep(Duration::from_millis(50));
    let f = reader.latest();
    let l = f.waveform.len();
    for k in [0usize, 1, 2, 7, l / 2] {
        let (re, im) = f.waveform.iter().enumerate().fold((0.0f64, 0.0f64), |(re, im), (t, x)| {
            let ph = -std::f64::consts::TAU * (k * t) as f64 / l as f64;
            (re + *x as f64 * ph.cos(), im + *x as f64 * ph.sin())
        });
        let mag = (re * re + im * im).sqrt();
        assert!((mag - f.spectrum[k] as f64).abs() < 1e-3 * mag.max(1.0), "bin {k}");
    }
}

fn control_strategy() -> impl Strategy<Value = ControlMessage> {
    prop_oneof![
        ("[a-z][a-z0-9_]{0,12}", -1e6f64..1e6).prop_map(|(name, value)| ControlMessage::SetParam { name, value }),
        prop_oneof![Just(Source::Neural), Just(Source::Waveguide)]
            .prop_map(|source| ControlMessage::SelectSource { source }),
        Just(ControlMessage::GetState),
        any::<bool>().prop_map(|enabled| ControlMessage::SubscribeFrames { enabled }),
    ]
}

proptest! {
    #[test]
    fn control_messages_round_trip(msg in control_strategy()) {
        prop_assert_eq!(ControlMessage::parse(&msg.to_json()).unwrap(), msg);
    }

    #[test]
    fn frames_round_trip(
        ts in any::<u64>(),
        params in proptest::collection::vec(-1e3f32..1e3, 0..6),
        half in 1usize..64,
        seed in any::<u32>(),
    ) {
        let l = 2 * half;
        let f = Frame {
            timestamp_us: ts,
            params,
            waveform: (0..l).map(|i| ((i as u32).wrapping_mul(seed) % 1000) as f32 / 7.0).collect(),
            spectrum: (0..=half).map(|i| i as f32).collect(),
        };
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), f.encoded_len());
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }
}
