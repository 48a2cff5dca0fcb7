use super::*;
use crate::policy::{replay, Demo};

fn server(dir: &std::path::Path, max_demos: Option<usize>) -> (SocketAddr, StopHandle, std::thread::JoinHandle<Result<()>>) {
    let mut cfg = TeleopConfig::new(TaskId::Reach, dir.to_path_buf(), 3);
    cfg.tick = Duration::from_millis(15);
    cfg.max_demos = max_demos;
    let mut s = TeleopServer::bind("127.0.0.1:0", cfg).unwrap();
    let addr = s.local_addr().unwrap();
    let stop = s.stop_handle();
    (addr, stop, std::thread::spawn(move || s.serve()))
}

#[test]
fn protocol_messages_round_trip() {
    let m = ClientMessage::Command {
        session: "s".into(),
        seq: 4,
        command: Command::Nudge { dx: 0.01, dy: -0.01 },
    };
    let j = serde_json::to_string(&m).unwrap();
    assert_eq!(j, r#"{"type":"command","session":"s","seq":4,"command":{"kind":"nudge","dx":0.01,"dy":-0.01}}"#);
    assert_eq!(serde_json::from_str::<ClientMessage>(&j).unwrap(), m);
    let r: ClientMessage = serde_json::from_str(r#"{"type":"command","session":"s","seq":5,"command":{"kind":"reset","variation":null}}"#).unwrap();
    assert!(matches!(r, ClientMessage::Command { command: Command::Reset { variation: None }, .. }));
    let b = serde_json::to_string(&ServerMessage::Busy { message: BUSY_MESSAGE.into() }).unwrap();
    assert_eq!(b, r#"{"type":"busy","message":"session in use"}"#);
}

#[test]
fn nudge_moves_end_effector_toward_request() {
    let s = simworld::reset(TaskId::Reach, Variation::Grid(0), 0).unwrap();
    let dq = nudge_to_joints(&s, 0.01, 0.0).unwrap();
    assert!(dq.iter().all(|d| d.abs() <= DELTA_MAX + 1e-12));
    let mut a = dq.clone();
    a.push(0.0);
    let next = simworld::step(&s, &a).unwrap();
    let (before, after) = (s.ee(), next.ee());
    assert!(after.x - before.x > 0.005, "moved {}", after.x - before.x);
    assert!((after.y - before.y).abs() < 0.003);
    let hand = simworld::reset(TaskId::HandReach, Variation::Grid(0), 0).unwrap();
    assert!(nudge_to_joints(&hand, 0.01, 0.0).is_err());
    assert!(nudge_to_joints(&s, f64::NAN, 0.0).is_err());
}

#[test]
fn idle_session_streams_without_recording() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, stop, h) = server(dir.path(), None);
    let mut c = TeleopClient::connect(addr).unwrap();
    let first = c.next_frame().unwrap();
    let mut last = first.clone();
    for _ in 0..4 {
        last = c.next_frame().unwrap();
    }
    assert!(last.tick > first.tick);
    assert_eq!(last.state.joints, first.state.joints);
    assert!(!last.recording);
    assert_eq!(last.recorded_steps, 0);
    let img = crate::image::RgbImage::decode_png(&last.image_png).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
    c.close().unwrap();
    stop.stop();
    h.join().unwrap().unwrap();
    assert!(demo_dirs(dir.path()).unwrap().is_empty());
}

#[test]
fn second_client_is_busy_and_regressions_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, stop, h) = server(dir.path(), None);
    let mut c = TeleopClient::connect(addr).unwrap();
    c.next_frame().unwrap();
    match TeleopClient::connect(addr) {
        Err(Error::Usage(m)) => assert_eq!(m, BUSY_MESSAGE),
        other => panic!("expected busy, got {:?}", other.map(|c| c.session)),
    }
    c.send_raw(10, Command::Nudge { dx: 0.01, dy: 0.0 }).unwrap();
    c.send_raw(7, Command::Nudge { dx: -0.01, dy: 0.0 }).unwrap();
    let f = loop {
        let f = c.next_frame().unwrap();
        if f.applied_seq == Some(10) && c.events.iter().any(|e| matches!(e, ServerMessage::Error { .. })) {
            break f;
        }
    };
    assert!(matches!(c.events[0], ServerMessage::Error { errors: 1, .. }));
    assert_eq!(f.applied_seq, Some(10));
    c.close().unwrap();
    stop.stop();
    h.join().unwrap().unwrap();
}

#[test]
fn keypress_take_is_saved_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, _stop, h) = server(dir.path(), Some(1));
    let mut c = TeleopClient::connect(addr).unwrap();
    let f = scripted_reach_take(&mut c, 5, 80).unwrap();
    assert!(f.state.success);
    assert!(c.events.iter().any(|e| matches!(e, ServerMessage::Saved { success: true, .. })));
    h.join().unwrap().unwrap();
    let dirs = demo_dirs(dir.path()).unwrap();
    assert_eq!(dirs.len(), 1);
    let demo = Demo::load(&dirs[0]).unwrap();
    assert_eq!(demo.record.source, DemoSource::Teleop);
    assert_eq!(demo.record.variation, Some(5));
    assert!(replay(&demo.record).unwrap().pass);
}

#[test]
fn disconnect_discards_the_take() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, stop, h) = server(dir.path(), None);
    let mut c = TeleopClient::connect(addr).unwrap();
    c.command(Command::RecordStart).unwrap();
    let f = c.command(Command::Nudge { dx: 0.01, dy: 0.0 }).unwrap();
    assert_eq!(f.recorded_steps, 1);
    drop(c);
    std::thread::sleep(Duration::from_millis(100));
    let mut c = TeleopClient::connect(addr).unwrap();
    let f = c.next_frame().unwrap();
    assert!(!f.recording);
    c.close().unwrap();
    stop.stop();
    h.join().unwrap().unwrap();
    assert!(demo_dirs(dir.path()).unwrap().is_empty());
}
