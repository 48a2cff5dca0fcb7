//! Teleoperation server: streams camera frames over a websocket at the
//! control rate and applies operator commands to the simulated robot,
//! recording demos in the same format as scripted collection.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::error::{Error, Result};
use crate::policy::{demo_dirs, DemoRecorder, DemoSource};
use crate::simworld::{self, arm_delta, Camera, EmbodimentKind, Pose, SimState, TaskId, Variation, DELTA_MAX, DT, K};

/// Largest end-effector displacement one nudge may request, in meters.
pub const NUDGE_MAX: f64 = 0.02;
pub const BUSY_MESSAGE: &str = "session in use";

/// Operator command carried by a client message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    /// Move the end-effector by `(dx, dy)` meters.
    Nudge { dx: f64, dy: f64 },
    /// Raw joint deltas in radians.
    Joints { delta: Vec<f64> },
    ToggleGripper,
    RecordStart,
    RecordStop,
    MarkSuccess,
    MarkFailure,
    /// New episode; a grid variation, or a random one when absent.
    Reset { variation: Option<usize> },
}

impl Command {
    fn moves(&self) -> bool {
        matches!(self, Command::Nudge { .. } | Command::Joints { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Command { session: String, seq: u64, command: Command },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub task: TaskId,
    pub variation: Option<usize>,
    pub joints: Vec<f64>,
    pub gripper: Option<f64>,
    pub ee: [f64; 2],
    pub success: bool,
}

impl StateSummary {
    fn of(s: &SimState) -> Self {
        let ee = s.ee();
        StateSummary {
            task: s.task,
            variation: s.variation,
            joints: s.joints.clone(),
            gripper: (s.task.embodiment_kind() == EmbodimentKind::Arm3).then_some(s.gripper),
            ee: [ee.x, ee.y],
            success: simworld::success(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Welcome {
        session: String,
        seq: u64,
        task: TaskId,
        rate_hz: f64,
        nudge_max: f64,
    },
    Frame {
        session: String,
        seq: u64,
        tick: u64,
        /// Base64 PNG of the wrist camera.
        image: String,
        state: StateSummary,
        recording: bool,
        /// Steps recorded in the current take.
        recorded_steps: usize,
        demos_saved: usize,
        /// Highest client sequence number consumed so far.
        applied_seq: Option<u64>,
    },
    Saved {
        session: String,
        seq: u64,
        path: String,
        steps: usize,
        success: bool,
    },
    Discarded {
        session: String,
        seq: u64,
        reason: String,
    },
    Error {
        session: String,
        seq: u64,
        message: String,
        errors: u64,
    },
    Busy {
        message: String,
    },
}

impl ServerMessage {
    pub fn seq(&self) -> Option<u64> {
        match self {
            ServerMessage::Welcome { seq, .. }
            | ServerMessage::Frame { seq, .. }
            | ServerMessage::Saved { seq, .. }
            | ServerMessage::Discarded { seq, .. }
            | ServerMessage::Error { seq, .. } => Some(*seq),
            ServerMessage::Busy { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeleopConfig {
    pub task: TaskId,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Tick period; the control rate by default.
    pub tick: Duration,
    /// Stop serving once this many demos were saved.
    pub max_demos: Option<usize>,
}

impl TeleopConfig {
    pub fn new(task: TaskId, out_dir: PathBuf, seed: u64) -> Self {
        TeleopConfig {
            task,
            out_dir,
            seed,
            tick: Duration::from_secs_f64(DT),
            max_demos: None,
        }
    }
}

/// Handle for stopping a running server from another thread.
#[derive(Debug, Clone)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }
}

pub struct TeleopServer {
    listener: TcpListener,
    config: TeleopConfig,
    stop: Arc<AtomicBool>,
    busy: Arc<AtomicBool>,
    saved: Arc<AtomicUsize>,
    sessions: u64,
}

impl TeleopServer {
    pub fn bind(addr: &str, config: TeleopConfig) -> Result<Self> {
        if config.task.embodiment_kind() != EmbodimentKind::Arm3 && config.task != TaskId::HandReach {
            return Err(Error::InvalidArgument(format!("task {} cannot be teleoperated", config.task)));
        }
        std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
        listener.set_nonblocking(true).map_err(|e| Error::io(addr, e))?;
        let saved = demo_dirs(&config.out_dir)?.len();
        Ok(TeleopServer {
            listener,
            config,
            stop: Arc::new(AtomicBool::new(false)),
            busy: Arc::new(AtomicBool::new(false)),
            saved: Arc::new(AtomicUsize::new(saved)),
            sessions: 0,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(|e| Error::io("<listener>", e))
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle(self.stop.clone())
    }

    /// Demo directories in the output directory.
    pub fn demos_saved(&self) -> usize {
        self.saved.load(Ordering::SeqCst)
    }

    fn done(&self, start: usize) -> bool {
        self.stop.load(Ordering::SeqCst) || self.config.max_demos.is_some_and(|m| self.demos_saved() - start >= m)
    }

    /// Accepts connections until stopped or `max_demos` new demos exist.
    /// One session runs at a time; later clients get a busy message.
    pub fn serve(&mut self) -> Result<()> {
        let start = self.demos_saved();
        let mut workers = Vec::new();
        while !self.done(start) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false).map_err(|e| Error::io("<socket>", e))?;
                    if self.busy.swap(true, Ordering::SeqCst) {
                        log::info!("rejecting {peer}: {BUSY_MESSAGE}");
                        std::thread::spawn(move || reject(stream));
                        continue;
                    }
                    self.sessions += 1;
                    let id = format!("s{:04}-{}", self.sessions, self.config.seed);
                    let mut session = Session::new(id, &self.config, self.saved.clone(), start)?;
                    let (busy, stop) = (self.busy.clone(), self.stop.clone());
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = session.run(stream, &stop) {
                            log::warn!("session {} ended: {e}", session.id);
                        }
                        busy.store(false, Ordering::SeqCst);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(Error::io("<listener>", e)),
            }
        }
        self.stop.store(true, Ordering::SeqCst);
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

fn reject(stream: TcpStream) {
    if let Ok(mut ws) = tungstenite::accept(stream) {
        let msg = ServerMessage::Busy {
            message: BUSY_MESSAGE.into(),
        };
        if let Ok(text) = serde_json::to_string(&msg) {
            let _ = ws.send(Message::text(text));
        }
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

struct Session {
    id: String,
    task: TaskId,
    out_dir: PathBuf,
    tick: Duration,
    seed: u64,
    episodes: u64,
    state: SimState,
    recorder: Option<DemoRecorder>,
    stopped: Option<DemoRecorder>,
    saved: Arc<AtomicUsize>,
    quota: Option<(usize, usize)>,
    out_seq: u64,
    in_seq: Option<u64>,
    errors: u64,
    gripper_closed: bool,
}

/// Joint deltas for an end-effector nudge, through damped least squares.
pub fn nudge_to_joints(state: &SimState, dx: f64, dy: f64) -> Result<Vec<f64>> {
    if !(dx.is_finite() && dy.is_finite()) {
        return Err(Error::InvalidArgument("nudge must be finite".into()));
    }
    let (dx, dy) = (dx.clamp(-NUDGE_MAX, NUDGE_MAX), dy.clamp(-NUDGE_MAX, NUDGE_MAX));
    let ee = state.ee();
    match state.task.embodiment_kind() {
        EmbodimentKind::Arm3 => Ok(arm_delta(&state.joints, Pose { x: ee.x + dx, y: ee.y + dy, theta: ee.theta }, 1.0)),
        EmbodimentKind::Fingers => Err(Error::InvalidArgument("nudges drive the arm; send joint deltas for the hand".into())),
    }
}

impl Session {
    fn new(id: String, config: &TeleopConfig, saved: Arc<AtomicUsize>, start: usize) -> Result<Self> {
        let state = simworld::reset(config.task, Variation::Random, config.seed)?;
        Ok(Session {
            id,
            task: config.task,
            out_dir: config.out_dir.clone(),
            tick: config.tick,
            seed: config.seed,
            episodes: 0,
            state,
            recorder: None,
            stopped: None,
            saved,
            quota: config.max_demos.map(|m| (start, m)),
            out_seq: 0,
            in_seq: None,
            errors: 0,
            gripper_closed: false,
        })
    }

    fn next_seq(&mut self) -> u64 {
        self.out_seq += 1;
        self.out_seq
    }

    fn send(&mut self, ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> Result<()> {
        let text = serde_json::to_string(msg)?;
        ws.send(Message::text(text)).map_err(ws_err)
    }

    fn error(&mut self, ws: &mut WebSocket<TcpStream>, message: String) -> Result<()> {
        self.errors += 1;
        log::warn!("session {}: {message}", self.id);
        let seq = self.next_seq();
        let msg = ServerMessage::Error {
            session: self.id.clone(),
            seq,
            message,
            errors: self.errors,
        };
        self.send(ws, &msg)
    }

    fn frame(&mut self, tick: u64) -> Result<ServerMessage> {
        let png = simworld::render(&self.state, Camera::Wrist).encode_png()?;
        Ok(ServerMessage::Frame {
            session: self.id.clone(),
            seq: self.next_seq(),
            tick,
            image: base64::engine::general_purpose::STANDARD.encode(png),
            state: StateSummary::of(&self.state),
            recording: self.recorder.is_some(),
            recorded_steps: self.recorder.as_ref().map_or(0, |r| r.len()),
            demos_saved: self.saved.load(Ordering::SeqCst),
            applied_seq: self.in_seq,
        })
    }

    fn run(&mut self, stream: TcpStream, stop: &AtomicBool) -> Result<()> {
        let mut ws = tungstenite::accept(stream).map_err(|e| Error::InvalidArgument(format!("websocket handshake: {e}")))?;
        ws.get_ref()
            .set_read_timeout(Some(Duration::from_millis(5)))
            .map_err(|e| Error::io("<socket>", e))?;
        log::info!("session {} started on {}", self.id, self.task);
        let seq = self.next_seq();
        let welcome = ServerMessage::Welcome {
            session: self.id.clone(),
            seq,
            task: self.task,
            rate_hz: 1.0 / self.tick.as_secs_f64(),
            nudge_max: NUDGE_MAX,
        };
        self.send(&mut ws, &welcome)?;
        let mut tick = 0u64;
        let mut deadline = Instant::now() + self.tick;
        let mut pending: Vec<Command> = Vec::new();
        loop {
            if stop.load(Ordering::SeqCst) {
                self.abandon("server stopping");
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ok(());
            }
            match ws.read() {
                Ok(Message::Text(t)) => match serde_json::from_str::<ClientMessage>(t.as_str()) {
                    Ok(ClientMessage::Command { session, seq, command }) => {
                        if session != self.id {
                            self.error(&mut ws, format!("message for session `{session}`"))?;
                        } else if self.in_seq.is_some_and(|s| seq <= s) {
                            self.error(&mut ws, format!("sequence number {seq} does not increase"))?;
                        } else {
                            self.in_seq = Some(seq);
                            // Motion is latest-wins within a tick.
                            if command.moves() {
                                pending.retain(|c| !c.moves());
                            }
                            pending.push(command);
                        }
                    }
                    Err(e) => self.error(&mut ws, format!("malformed message: {e}"))?,
                },
                Ok(Message::Close(_)) => {
                    self.abandon("client disconnected");
                    let _ = ws.flush();
                    return Ok(());
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    self.abandon("client disconnected");
                    return Ok(());
                }
                Err(e) => {
                    self.abandon("connection error");
                    return Err(ws_err(e));
                }
            }
            if Instant::now() < deadline {
                continue;
            }
            deadline += self.tick;
            tick += 1;
            for cmd in std::mem::take(&mut pending) {
                if let Err(e) = self.apply(&mut ws, cmd) {
                    self.error(&mut ws, e.to_string())?;
                }
            }
            let f = self.frame(tick)?;
            self.send(&mut ws, &f)?;
            if self.quota.is_some_and(|(start, m)| self.saved.load(Ordering::SeqCst) - start >= m) {
                stop.store(true, Ordering::SeqCst);
            }
        }
    }

    fn abandon(&mut self, why: &str) {
        if self.recorder.take().is_some() || self.stopped.take().is_some() {
            log::warn!("session {}: {why}, discarding unsaved demo", self.id);
        }
    }

    fn step(&mut self, joints: Vec<f64>, gripper: Option<f64>) -> Result<()> {
        let mut a = joints;
        a.extend(gripper);
        let next = simworld::step(&self.state, &a)?;
        if let Some(r) = self.recorder.as_mut() {
            r.push(&self.state, &a)?;
        }
        self.state = next;
        Ok(())
    }

    fn gripper_cmd(&self) -> Option<f64> {
        (self.task.embodiment_kind() == EmbodimentKind::Arm3).then_some(if self.gripper_closed { 1.0 } else { 0.0 })
    }

    fn apply(&mut self, ws: &mut WebSocket<TcpStream>, cmd: Command) -> Result<()> {
        let n = self.task.embodiment().n_joints();
        match cmd {
            Command::Nudge { dx, dy } => {
                let dq = nudge_to_joints(&self.state, dx, dy)?;
                self.step(dq, self.gripper_cmd())
            }
            Command::Joints { delta } => {
                if delta.len() != n || delta.iter().any(|d| !d.is_finite()) {
                    return Err(Error::InvalidArgument(format!("expected {n} finite joint deltas")));
                }
                let dq = delta.iter().map(|d| d.clamp(-DELTA_MAX, DELTA_MAX)).collect();
                self.step(dq, self.gripper_cmd())
            }
            Command::ToggleGripper => {
                if self.gripper_cmd().is_none() {
                    return Err(Error::InvalidArgument("this robot has no gripper".into()));
                }
                self.gripper_closed = !self.gripper_closed;
                self.step(vec![0.0; n], self.gripper_cmd())
            }
            Command::RecordStart => {
                if self.recorder.is_some() {
                    return Err(Error::InvalidArgument("already recording".into()));
                }
                self.stopped = None;
                self.recorder = Some(DemoRecorder::new(&self.state, DemoSource::Teleop, self.episode_seed(), false));
                Ok(())
            }
            Command::RecordStop => {
                let r = self.recorder.take().ok_or_else(|| Error::InvalidArgument("not recording".into()))?;
                self.stopped = Some(r);
                Ok(())
            }
            Command::MarkSuccess => {
                let r = self
                    .stopped
                    .take()
                    .or_else(|| self.recorder.take())
                    .ok_or_else(|| Error::InvalidArgument("nothing recorded".into()))?;
                if r.is_empty() {
                    return self.discard(ws, "recording has no steps");
                }
                let demo = r.finish(simworld::success(&self.state));
                let index = self.saved.fetch_add(1, Ordering::SeqCst);
                let dir = self.out_dir.join(format!("demo_{index:04}"));
                demo.save(&dir)?;
                log::info!("session {}: saved {} ({} steps)", self.id, dir.display(), demo.len());
                let seq = self.next_seq();
                let msg = ServerMessage::Saved {
                    session: self.id.clone(),
                    seq,
                    path: dir.display().to_string(),
                    steps: demo.len(),
                    success: demo.record.success,
                };
                self.send(ws, &msg)
            }
            Command::MarkFailure => {
                self.recorder = None;
                if self.stopped.take().is_none() {
                    return Err(Error::InvalidArgument("nothing recorded".into()));
                }
                self.discard(ws, "marked as failure")
            }
            Command::Reset { variation } => {
                if self.recorder.is_some() || self.stopped.is_some() {
                    self.recorder = None;
                    self.stopped = None;
                    self.discard(ws, "reset while recording")?;
                }
                self.episodes += 1;
                let v = match variation {
                    Some(v) if v < K => Variation::Grid(v),
                    Some(v) => return Err(Error::InvalidArgument(format!("variation {v} outside the grid of {K}"))),
                    None => Variation::Random,
                };
                self.state = simworld::reset(self.task, v, self.episode_seed())?;
                self.gripper_closed = false;
                Ok(())
            }
        }
    }

    fn episode_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(self.episodes)
    }

    fn discard(&mut self, ws: &mut WebSocket<TcpStream>, reason: &str) -> Result<()> {
        let seq = self.next_seq();
        let msg = ServerMessage::Discarded {
            session: self.id.clone(),
            seq,
            reason: reason.into(),
        };
        self.send(ws, &msg)
    }
}

/// Minimal protocol client that waits for each command to take effect.
pub struct TeleopClient {
    ws: WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>,
    pub session: String,
    pub task: TaskId,
    seq: u64,
    last_server_seq: u64,
    /// Non-frame messages received so far.
    pub events: Vec<ServerMessage>,
}

/// Latest frame contents as seen by a client.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameView {
    pub tick: u64,
    pub image_png: Vec<u8>,
    pub state: StateSummary,
    pub recording: bool,
    pub recorded_steps: usize,
    pub demos_saved: usize,
    pub applied_seq: Option<u64>,
}

impl TeleopClient {
    /// Connects and reads the welcome; a busy server yields `Err(Usage)`.
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let (ws, _) = tungstenite::connect(format!("ws://{addr}")).map_err(ws_err)?;
        let mut c = TeleopClient {
            ws,
            session: String::new(),
            task: TaskId::Reach,
            seq: 0,
            last_server_seq: 0,
            events: Vec::new(),
        };
        match c.recv()? {
            ServerMessage::Welcome { session, task, .. } => {
                c.session = session;
                c.task = task;
                Ok(c)
            }
            ServerMessage::Busy { message } => Err(Error::Usage(message)),
            other => Err(Error::InvalidArgument(format!("expected a welcome, got {other:?}"))),
        }
    }

    /// Next server message; checks that sequence numbers increase.
    pub fn recv(&mut self) -> Result<ServerMessage> {
        loop {
            match self.ws.read().map_err(ws_err)? {
                Message::Text(t) => {
                    let msg: ServerMessage = serde_json::from_str(t.as_str())?;
                    if let Some(s) = msg.seq() {
                        if s <= self.last_server_seq {
                            return Err(Error::InvalidArgument(format!("server sequence went from {} to {s}", self.last_server_seq)));
                        }
                        self.last_server_seq = s;
                    }
                    return Ok(msg);
                }
                Message::Close(_) => return Err(Error::InvalidArgument("server closed the session".into())),
                _ => {}
            }
        }
    }

    /// Sends `command` with an explicit sequence number.
    pub fn send_raw(&mut self, seq: u64, command: Command) -> Result<()> {
        let msg = ClientMessage::Command {
            session: self.session.clone(),
            seq,
            command,
        };
        self.ws.send(Message::text(serde_json::to_string(&msg)?)).map_err(ws_err)
    }

    pub fn send(&mut self, command: Command) -> Result<u64> {
        self.seq += 1;
        self.send_raw(self.seq, command)?;
        Ok(self.seq)
    }

    /// Reads until a frame arrives; other messages go to `events`.
    pub fn next_frame(&mut self) -> Result<FrameView> {
        loop {
            match self.recv()? {
                ServerMessage::Frame {
                    tick,
                    image,
                    state,
                    recording,
                    recorded_steps,
                    demos_saved,
                    applied_seq,
                    ..
                } => {
                    let image_png = base64::engine::general_purpose::STANDARD
                        .decode(image)
                        .map_err(|e| Error::InvalidArgument(format!("frame image: {e}")))?;
                    return Ok(FrameView {
                        tick,
                        image_png,
                        state,
                        recording,
                        recorded_steps,
                        demos_saved,
                        applied_seq,
                    });
                }
                other => self.events.push(other),
            }
        }
    }

    /// Sends `command` and returns the first frame rendered after it was applied.
    pub fn command(&mut self, command: Command) -> Result<FrameView> {
        let seq = self.send(command)?;
        loop {
            let f = self.next_frame()?;
            if f.applied_seq.is_some_and(|s| s >= seq) {
                return Ok(f);
            }
        }
    }

    pub fn close(mut self) -> Result<()> {
        self.ws.close(None).map_err(ws_err)?;
        loop {
            match self.ws.read() {
                Ok(_) => {}
                Err(tungstenite::Error::ConnectionClosed)
                | Err(tungstenite::Error::AlreadyClosed)
                | Err(tungstenite::Error::Protocol(tungstenite::error::ProtocolError::ResetWithoutClosingHandshake)) => return Ok(()),
                Err(tungstenite::Error::Io(e)) if e.kind() == std::io::ErrorKind::ConnectionReset => return Ok(()),
                Err(e) => return Err(ws_err(e)),
            }
        }
    }
}

/// Arrow-key step of the scripted operator, in meters.
pub const KEY_STEP: f64 = 0.01;

/// Emulates an operator pressing arrow keys: resets to grid variation `v`,
/// records, nudges the end-effector toward the target one axis at a time
/// and marks the take successful. Works for tasks solved by reaching the
/// target object. Returns the final frame.
pub fn scripted_reach_take(client: &mut TeleopClient, v: usize, max_ticks: usize) -> Result<FrameView> {
    let target = simworld::reset(client.task, Variation::Grid(v), 0)?.target_object().pos;
    client.command(Command::Reset { variation: Some(v) })?;
    let mut f = client.command(Command::RecordStart)?;
    for _ in 0..max_ticks {
        if f.state.success {
            break;
        }
        let (ex, ey) = (target[0] - f.state.ee[0], target[1] - f.state.ee[1]);
        let cmd = if ex.abs() > ey.abs() {
            Command::Nudge { dx: ex.signum() * KEY_STEP.min(ex.abs()), dy: 0.0 }
        } else {
            Command::Nudge { dx: 0.0, dy: ey.signum() * KEY_STEP.min(ey.abs()) }
        };
        f = client.command(cmd)?;
    }
    client.command(Command::RecordStop)?;
    client.command(Command::MarkSuccess)
}

fn ws_err(e: tungstenite::Error) -> Error {
    Error::Io {
        path: "<websocket>".into(),
        source: std::io::Error::other(e.to_string()),
    }
}

#[cfg(test)]
mod tests;
