mod common;

use std::net::TcpStream;
use std::time::Duration;

use common::{count, json_of, Harness, WireClient};
use ride_core::sim::{tuck_pose, Side};
use ride_core::wire::{self, MsgType, WireFrame};
use serde_json::json;
use tungstenite::{stream::MaybeTlsStream, Message, WebSocket};

fn greeted(h: &Harness, channels: &[&str]) -> WireClient {
    let mut c = h.client();
    c.hello();
    if !channels.is_empty() {
        c.subscribe(channels);
    }
    c.barrier();
    c
}

fn error_code(frame: &WireFrame) -> String {
    assert_eq!(frame.kind(), Some(MsgType::Error));
    json_of(frame)["code"].as_str().unwrap().to_string()
}

/// Advances in small steps, draining the client after each, and collects
/// everything it received.
fn advance_collecting(h: &Harness, c: &mut WireClient, seconds: f64) -> Vec<WireFrame> {
    let mut frames = Vec::new();
    for _ in 0..(seconds / 0.1).round() as usize {
        h.advance(0.1);
        frames.extend(c.barrier());
    }
    frames
}

#[test]
fn welcome_reports_version_and_rates() {
    let h = Harness::start();
    let mut c = h.client();
    let welcome = c.hello();
    assert_eq!(welcome["server"], "ride-kernel");
    assert_eq!(welcome["version"], json!(wire::VERSION));
    assert_eq!(welcome["rates"]["image_hz"], json!(10));
    c.send(MsgType::Hello, "{}");
    assert_eq!(error_code(&c.recv().unwrap()), "already-greeted");
}

#[test]
fn first_frame_must_be_hello() {
    let h = Harness::start();
    let mut c = h.client();
    c.send(MsgType::Heartbeat, "x");
    assert_eq!(error_code(&c.recv().unwrap()), "handshake-required");
    assert!(c.recv().is_none());
}

#[test]
fn subscribed_client_receives_images_at_the_sensor_rate() {
    let h = Harness::start();
    let mut c = greeted(&h, &["image"]);
    let frames = advance_collecting(&h, &mut c, 5.0);
    let images: Vec<_> = frames
        .iter()
        .filter(|f| f.kind() == Some(MsgType::TelemetryImage))
        .map(|f| wire::decode_image(&f.payload).unwrap())
        .collect();
    assert!((49..=51).contains(&images.len()), "{} images", images.len());
    assert!(images.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    assert_eq!((images[0].width, images[0].height), (160, 120));
    assert_eq!(count(&frames, MsgType::TelemetryState), 0);
    let seqs: Vec<u32> = frames.iter().map(|f| f.seq).collect();
    assert!(seqs.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn unsubscribed_client_receives_no_telemetry() {
    let h = Harness::start();
    let mut c = greeted(&h, &[]);
    let frames = advance_collecting(&h, &mut c, 1.0);
    assert!(frames.is_empty(), "{} frames", frames.len());

    c.subscribe(&["state"]);
    let frames = advance_collecting(&h, &mut c, 1.0);
    assert!(count(&frames, MsgType::TelemetryState) > 0);
    c.send(MsgType::Unsubscribe, json!({ "channels": ["state"] }).to_string());
    c.barrier();
    assert!(advance_collecting(&h, &mut c, 1.0).is_empty());
}

#[test]
fn state_frames_carry_joint_and_base_state() {
    let h = Harness::start();
    let mut c = greeted(&h, &["state"]);
    let frames = advance_collecting(&h, &mut c, 0.5);
    let state = json_of(frames.iter().rev().find(|f| f.kind() == Some(MsgType::TelemetryState)).unwrap());
    assert_eq!(state["joints"].as_object().unwrap().len(), 14);
    assert_eq!(state["mode"], "Normal");
    assert_eq!(state["dropped"], json!(0));
    assert!(state["base"]["x"].is_number());
}

#[test]
fn stalled_client_loses_frames_without_slowing_others() {
    let h = Harness::start();
    let mut stalled = WireClient::connect_small_buffer(h.service.addresses().client);
    stalled.hello();
    stalled.subscribe(&["image", "state"]);
    stalled.barrier();
    let mut healthy = greeted(&h, &["image"]);

    let frames = advance_collecting(&h, &mut healthy, 5.0);
    let images = count(&frames, MsgType::TelemetryImage);
    assert!((49..=51).contains(&images), "healthy client got {images} images");

    let late = stalled.barrier();
    let last_state = late.iter().rev().find(|f| f.kind() == Some(MsgType::TelemetryState)).unwrap();
    assert!(json_of(last_state)["dropped"].as_u64().unwrap() > 0);
    let last_image = late.iter().rev().find(|f| f.kind() == Some(MsgType::TelemetryImage)).unwrap();
    assert!((wire::decode_image(&last_image.payload).unwrap().timestamp - 5.0).abs() < 1e-9);
    assert!(count(&late, MsgType::TelemetryImage) < 50);
}

#[test]
fn custom_telemetry_reaches_label_subscribers() {
    let h = Harness::start();
    let mut labelled = greeted(&h, &["custom:plan"]);
    let mut everything = greeted(&h, &["custom"]);
    let mut other = greeted(&h, &["custom:other"]);
    assert_eq!(h.value("robot.sendCustomTelemetry('plan', 'x' * 4096)"), "True");
    for c in [&mut labelled, &mut everything] {
        let frames = c.barrier();
        assert_eq!(frames.len(), 1);
        let body = json_of(&frames[0]);
        assert_eq!(body["label"], "plan");
        assert_eq!(body["payload"].as_str().unwrap(), "x".repeat(4096));
    }
    assert!(other.barrier().is_empty());
}

#[test]
fn unknown_channel_is_rejected_and_subscriptions_unchanged() {
    let h = Harness::start();
    let mut c = greeted(&h, &[]);
    c.send(MsgType::Subscribe, json!({ "channels": ["image", "sonar"] }).to_string());
    assert_eq!(error_code(&c.recv().unwrap()), "unknown-channel");
    c.send(MsgType::Subscribe, "[1,2]");
    assert_eq!(error_code(&c.recv().unwrap()), "bad-payload");
    assert!(advance_collecting(&h, &mut c, 0.5).is_empty());
}

#[test]
fn command_is_dispatched_to_the_script() {
    let h = Harness::start();
    h.script(
        "seen = []\n\
         def handle(cmd, args):\n    seen.append((cmd, args))\n    if cmd == 'tuck':\n        robot.tuckBothArms()\n\
         robot.onRemoteCommand = handle",
    );
    let mut c = greeted(&h, &[]);
    let seq = c.send(MsgType::Command, json!({ "cmd": "tuck", "speed": 1 }).to_string());
    let ack = json_of(&c.expect(MsgType::CommandAck));
    assert_eq!(ack, json!({ "seq": seq, "accepted": true }));
    assert_eq!(h.value("seen"), "[('tuck', '{\"speed\":1}')]");
    h.advance(2.1);
    let state = h.service.kernel().snapshot();
    for side in [Side::Left, Side::Right] {
        for (joint, target) in tuck_pose(side) {
            let actual = state.arm(side).positions()[&joint];
            assert!((actual - target).abs() < 1e-9, "{joint}: {actual} vs {target}");
        }
    }
}

#[test]
fn command_without_handler_is_not_accepted() {
    let h = Harness::start();
    let mut c = greeted(&h, &[]);
    let seq = c.send(MsgType::Command, json!({ "cmd": "wave" }).to_string());
    assert_eq!(json_of(&c.expect(MsgType::CommandAck)), json!({ "seq": seq, "accepted": false }));
}

#[test]
fn joy_drives_the_base_in_joystick_mode() {
    let h = Harness::start();
    assert_eq!(h.value("robot.startJoystickControl()"), "True");
    let mut c = greeted(&h, &[]);
    c.send(MsgType::Command, json!({ "cmd": "joy", "vx": 0.5, "vtheta": 0.1 }).to_string());
    c.expect(MsgType::CommandAck);
    let base = h.service.kernel().snapshot().base;
    assert_eq!((base.vx, base.vy, base.vtheta), (0.5, 0.0, 0.1));
    h.advance(1.0);
    assert!(h.service.kernel().snapshot().base.x > 0.4);

    c.send(MsgType::Command, json!({ "cmd": "joy", "vx": "fast" }).to_string());
    assert_eq!(error_code(&c.recv().unwrap()), "bad-command");
}

#[test]
fn malformed_commands_are_reported_and_connection_stays() {
    let h = Harness::start();
    let mut c = greeted(&h, &[]);
    for payload in ["not json", "[1]", "{\"cmd\": 3}", "{}"] {
        c.send(MsgType::Command, payload);
        assert_eq!(error_code(&c.recv().unwrap()), "bad-command", "{payload}");
    }
    c.send(MsgType::Welcome, "{}");
    assert_eq!(error_code(&c.recv().unwrap()), "unexpected-type");
    c.send_frame(&WireFrame { msg_type: 99, seq: 7, payload: Vec::new() });
    assert_eq!(error_code(&c.recv().unwrap()), "unknown-type");
    assert!(c.barrier().is_empty());
}

#[test]
fn framing_error_closes_the_connection() {
    let h = Harness::start();
    let mut c = greeted(&h, &[]);
    std::io::Write::write_all(&mut c.stream, b"XXXXXXXXXXXXXXXX").unwrap();
    assert_eq!(error_code(&c.recv().unwrap()), "BadMagic");
    assert!(c.recv().is_none());
}

#[test]
fn bye_closes_the_connection() {
    let h = Harness::start();
    let mut c = greeted(&h, &[]);
    c.send(MsgType::Bye, "");
    assert!(c.recv().is_none());
}

#[test]
fn silent_client_is_evicted_after_the_heartbeat_timeout() {
    let h = Harness::start();
    let mut silent = greeted(&h, &[]);
    let mut chatty = greeted(&h, &[]);
    h.advance(10.0);
    assert!(!silent.is_closed_within(Duration::from_millis(200)));
    chatty.barrier();
    h.advance(0.5);
    assert!(silent.is_closed_within(Duration::from_secs(2)));
    assert!(!chatty.is_closed_within(Duration::from_millis(200)));
    assert!(h.log_text().contains("evicted after heartbeat timeout"));
}

fn ws_connect(h: &Harness) -> WebSocket<MaybeTlsStream<TcpStream>> {
    let url = format!("ws://{}/", h.service.addresses().websocket);
    let (ws, _) = tungstenite::connect(url).expect("websocket handshake");
    ws
}

fn ws_send(ws: &mut WebSocket<MaybeTlsStream<TcpStream>>, msg_type: MsgType, seq: u32, payload: &str) {
    let bytes = wire::encode(&WireFrame::new(msg_type, seq, payload)).unwrap();
    ws.send(Message::binary(bytes)).unwrap();
}

fn ws_recv(ws: &mut WebSocket<MaybeTlsStream<TcpStream>>) -> Option<WireFrame> {
    loop {
        match ws.read() {
            Ok(Message::Binary(data)) => {
                let (mut frames, rest) = wire::decode(&data).unwrap();
                assert!(frames.len() == 1 && rest.is_empty());
                return frames.pop();
            }
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

#[test]
fn websocket_bridge_speaks_the_same_protocol() {
    let h = Harness::start();
    let mut ws = ws_connect(&h);
    ws_send(&mut ws, MsgType::Hello, 1, "{}");
    let welcome = ws_recv(&mut ws).unwrap();
    assert_eq!(welcome.kind(), Some(MsgType::Welcome));
    let mut tcp = h.client();
    assert_eq!(json_of(&welcome), tcp.hello());

    ws_send(&mut ws, MsgType::Subscribe, 2, r#"{"channels":["image"]}"#);
    ws_send(&mut ws, MsgType::Heartbeat, 3, "sync");
    assert_eq!(ws_recv(&mut ws).unwrap().payload, b"sync");
    h.advance(1.0);
    ws_send(&mut ws, MsgType::Heartbeat, 4, "done");
    let mut images = 0;
    loop {
        let f = ws_recv(&mut ws).unwrap();
        match f.kind() {
            Some(MsgType::TelemetryImage) => images += 1,
            Some(MsgType::Heartbeat) => break,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(images, 10);
}

#[test]
fn websocket_text_message_closes() {
    let h = Harness::start();
    let mut ws = ws_connect(&h);
    ws.send(Message::text("{\"hello\":1}")).unwrap();
    let f = ws_recv(&mut ws).unwrap();
    assert_eq!(error_code(&f), "text-message");
    assert!(ws_recv(&mut ws).is_none());
}

#[test]
fn websocket_message_with_two_frames_is_rejected() {
    let h = Harness::start();
    let mut ws = ws_connect(&h);
    let mut bytes = wire::encode(&WireFrame::new(MsgType::Hello, 1, "{}")).unwrap();
    bytes.extend(wire::encode(&WireFrame::new(MsgType::Heartbeat, 2, "")).unwrap());
    ws.send(Message::binary(bytes)).unwrap();
    assert_eq!(error_code(&ws_recv(&mut ws).unwrap()), "bad-message");
    assert!(ws_recv(&mut ws).is_none());
}

#[test]
fn disconnected_clients_are_unregistered() {
    let h = Harness::start();
    let c = greeted(&h, &["image"]);
    assert_eq!(h.service.kernel().telemetry().client_count(), 1);
    drop(c);
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while h.service.kernel().telemetry().client_count() > 0 {
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(10));
    }
}
