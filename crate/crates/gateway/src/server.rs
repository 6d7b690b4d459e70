//! Operator gateway.
//!
//! One session thread owns the simulation (or the trace being replayed).
//! Client threads never touch it: they forward raw request lines through an
//! inbox and receive encoded replies on their own channel. Because a client's
//! lines are handled in arrival order on the session thread, replies keep
//! per-client command order.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use convowaste_core::classifier::Classifier;
use convowaste_core::sim::{
    MetricsAccumulator, SimError, SimEvent, SimMetrics, Simulation, StatusSnapshot, StatusTracker, Trace,
};
use convowaste_core::{Config, SimTime};

use crate::wire::{parse_request, Command, ErrorCode, Reply, WireError};

const POLL: Duration = Duration::from_millis(5);

pub type LiveSim = Simulation<Box<dyn Classifier + Send>>;

/// A finished trace played back at wall-clock pace.
pub struct ReplaySession {
    events: Vec<SimEvent>,
    next: usize,
    now: SimTime,
    tracker: StatusTracker,
    metrics: MetricsAccumulator,
}

impl ReplaySession {
    pub fn new(trace: Trace, config: &Config) -> Self {
        let routing = trace.routing();
        ReplaySession {
            events: trace.events,
            next: 0,
            now: SimTime::ZERO,
            tracker: StatusTracker::new(
                &config.telemetry.machine_id,
                config.telemetry.clock(),
                config.machine.threshold_percent,
            ),
            metrics: MetricsAccumulator::new(routing),
        }
    }
}

pub enum Session {
    Live(Box<LiveSim>),
    Replay(ReplaySession),
}

impl Session {
    fn mode(&self) -> &'static str {
        match self {
            Session::Live(_) => "live",
            Session::Replay(_) => "replay",
        }
    }

    fn now(&self) -> SimTime {
        match self {
            Session::Live(sim) => sim.now(),
            Session::Replay(r) => r.now,
        }
    }

    fn is_finished(&self) -> bool {
        match self {
            Session::Live(sim) => sim.is_finished(),
            Session::Replay(r) => r.next == r.events.len(),
        }
    }

    /// Moves the clock to `to` and returns the events that happened.
    fn advance(&mut self, to: SimTime) -> Result<Vec<SimEvent>, SimError> {
        match self {
            Session::Live(sim) => {
                sim.run_until(to)?;
                Ok(sim.take_new_events().to_vec())
            }
            Session::Replay(r) => {
                let from = r.next;
                while r.next < r.events.len() && r.events[r.next].time <= to {
                    let e = &r.events[r.next];
                    r.tracker.feed(e);
                    // the trace was validated before the session started
                    let _ = r.metrics.feed(e);
                    r.next += 1;
                }
                r.now = match r.events.last() {
                    Some(last) if r.next == r.events.len() => last.time,
                    _ => to.max(r.now),
                };
                Ok(r.events[from..r.next].to_vec())
            }
        }
    }

    fn inject(&mut self, command: Command, client: &str) -> Result<u64, WireError> {
        let cmd = command.sim_command().expect("only state-changing commands are injected");
        match self {
            Session::Live(sim) => sim.inject(cmd, Some(client.to_string())).map_err(|e| match e {
                SimError::NotRunning => WireError::new(ErrorCode::NotRunning, "the simulation has ended"),
                other => WireError::new(ErrorCode::NotRunning, other.to_string()),
            }),
            Session::Replay(_) => Err(WireError::new(ErrorCode::NotRunning, "replay sessions accept no commands")),
        }
    }

    fn snapshot(&self) -> StatusSnapshot {
        match self {
            Session::Live(sim) => sim.snapshot(),
            Session::Replay(r) => {
                let mut s = r.tracker.snapshot(self.is_finished());
                s.sim_time = r.now;
                s
            }
        }
    }

    fn metrics(&self) -> SimMetrics {
        match self {
            Session::Live(sim) => sim.metrics(),
            Session::Replay(r) => r.metrics.metrics(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    /// Simulated time between pushed snapshots.
    pub snapshot_period: SimTime,
    pub machine_id: String,
    /// Stop serving once the session has finished.
    pub exit_when_finished: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            speed: 1.0,
            snapshot_period: SimTime::from_secs(1),
            machine_id: "M1".into(),
            exit_when_finished: false,
        }
    }
}

enum Inbound {
    Join { client: u64, name: String, tx: Sender<String> },
    Line { client: u64, text: String },
    Leave { client: u64 },
}

struct ClientSlot {
    name: String,
    tx: Sender<String>,
    subscribed: bool,
}

pub struct Gateway {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    session: Option<JoinHandle<Result<(), SimError>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl Gateway {
    pub fn start(listener: TcpListener, session: Session, options: ServeOptions) -> io::Result<Gateway> {
        if !(options.speed > 0.0) {
            return Err(io::Error::new(ErrorKind::InvalidInput, "speed must be positive"));
        }
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (inbox, rx) = mpsc::channel();

        let session_stop = stop.clone();
        let session = thread::Builder::new()
            .name("session".into())
            .spawn(move || run_session(session, rx, options, session_stop))?;

        let accept_stop = stop.clone();
        let acceptor = thread::Builder::new().name("accept".into()).spawn(move || {
            let mut next_id = 0;
            let mut clients = Vec::new();
            while !accept_stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        next_id += 1;
                        let (inbox, stop, id) = (inbox.clone(), accept_stop.clone(), next_id);
                        clients.retain(|h: &JoinHandle<()>| !h.is_finished());
                        clients.push(thread::spawn(move || {
                            if let Err(e) = serve_client(stream, id, format!("{peer}"), inbox, stop) {
                                eprintln!("client {peer}: {e}");
                            }
                        }));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        eprintln!("accept: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
            // let clients flush what the session already sent them
            for h in clients {
                let _ = h.join();
            }
        })?;
        Ok(Gateway { addr, stop, session: Some(session), acceptor: Some(acceptor) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the session ends by itself.
    pub fn wait(mut self) -> Result<(), SimError> {
        let result = self.session.take().map_or(Ok(()), |h| h.join().expect("session thread panicked"));
        self.shutdown_threads();
        result
    }

    pub fn shutdown(mut self) {
        self.shutdown_threads();
    }

    fn shutdown_threads(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.session.take() {
            let _ = h.join();
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown_threads();
    }
}

fn run_session(
    mut session: Session,
    inbox: Receiver<Inbound>,
    options: ServeOptions,
    stop: Arc<AtomicBool>,
) -> Result<(), SimError> {
    let mut clients: BTreeMap<u64, ClientSlot> = BTreeMap::new();
    let started = Instant::now();
    let origin = session.now();
    let mut next_snapshot = origin;
    let mut announced_finish = false;

    while !stop.load(Ordering::Relaxed) {
        match inbox.recv_timeout(POLL) {
            Ok(msg) => {
                handle(&mut session, &mut clients, msg, &options);
                while let Ok(msg) = inbox.try_recv() {
                    handle(&mut session, &mut clients, msg, &options);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }

        let target = origin + SimTime::from_secs_f64(started.elapsed().as_secs_f64() * options.speed);
        if !session.is_finished() {
            for event in session.advance(target)? {
                broadcast(&clients, &Reply::Event { event });
            }
        }
        if session.now() >= next_snapshot {
            broadcast(&clients, &Reply::Snapshot { snapshot: session.snapshot() });
            while next_snapshot <= session.now() {
                next_snapshot = next_snapshot + options.snapshot_period;
            }
        }
        if session.is_finished() && !announced_finish {
            announced_finish = true;
            broadcast(&clients, &Reply::Snapshot { snapshot: session.snapshot() });
            broadcast(&clients, &Reply::Finished { sim_time: session.now(), metrics: session.metrics() });
            if options.exit_when_finished {
                break;
            }
        }
    }
    Ok(())
}

fn broadcast(clients: &BTreeMap<u64, ClientSlot>, reply: &Reply) {
    let mut encoded = None;
    for slot in clients.values().filter(|c| c.subscribed) {
        let line = encoded.get_or_insert_with(|| reply.encode());
        let _ = slot.tx.send(line.clone());
    }
}

fn handle(session: &mut Session, clients: &mut BTreeMap<u64, ClientSlot>, msg: Inbound, options: &ServeOptions) {
    match msg {
        Inbound::Join { client, name, tx } => {
            let hello = Reply::Hello { mode: session.mode(), machine_id: options.machine_id.clone(), speed: options.speed };
            let _ = tx.send(hello.encode());
            clients.insert(client, ClientSlot { name, tx, subscribed: false });
        }
        Inbound::Leave { client } => {
            clients.remove(&client);
        }
        Inbound::Line { client, text } => {
            let Some(slot) = clients.get_mut(&client) else { return };
            let reply = match parse_request(&text) {
                Err((id, e)) => Reply::error(id, e),
                Ok(req) => match req.command {
                    Command::Status => Reply::Status { id: req.id, snapshot: session.snapshot() },
                    Command::Subscribe => {
                        slot.subscribed = true;
                        let ack = Reply::Ack {
                            id: req.id,
                            cmd: "subscribe",
                            seq: session.snapshot().last_seq,
                            sim_time: session.now(),
                        };
                        let _ = slot.tx.send(ack.encode());
                        // start the subscriber off with the current state
                        Reply::Snapshot { snapshot: session.snapshot() }
                    }
                    cmd => match session.inject(cmd, &slot.name) {
                        Ok(seq) => Reply::Ack { id: req.id, cmd: cmd.name(), seq: Some(seq), sim_time: session.now() },
                        Err(e) => Reply::error(req.id, e),
                    },
                },
            };
            let _ = slot.tx.send(reply.encode());
        }
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

/// Browsers open with an HTTP upgrade; anything else is a line client.
fn looks_like_websocket(stream: &TcpStream) -> io::Result<bool> {
    stream.set_read_timeout(Some(Duration::from_millis(250)))?;
    let mut head = [0u8; 4];
    let deadline = Instant::now() + Duration::from_millis(250);
    loop {
        match stream.peek(&mut head) {
            Ok(n) if n >= 4 || n == 0 => return Ok(n >= 4 && &head == b"GET "),
            Ok(n) => {
                if !b"GET ".starts_with(&head[..n]) || Instant::now() > deadline {
                    return Ok(false);
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) if is_timeout(&e) => return Ok(false),
            Err(e) => return Err(e),
        }
    }
}

fn serve_client(
    stream: TcpStream,
    client: u64,
    peer: String,
    inbox: Sender<Inbound>,
    stop: Arc<AtomicBool>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    let websocket = looks_like_websocket(&stream)?;
    let (tx, rx) = mpsc::channel();
    let result = if websocket {
        stream.set_read_timeout(None)?;
        let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
        let _ = inbox.send(Inbound::Join { client, name: format!("ws:{peer}"), tx });
        websocket_loop(ws, client, &inbox, rx, &stop)
    } else {
        let _ = inbox.send(Inbound::Join { client, name: format!("tcp:{peer}"), tx });
        line_loop(stream, client, &inbox, rx, &stop)
    };
    let _ = inbox.send(Inbound::Leave { client });
    result
}

fn line_loop(
    stream: TcpStream,
    client: u64,
    inbox: &Sender<Inbound>,
    rx: Receiver<String>,
    stop: &AtomicBool,
) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let writer_thread = thread::spawn(move || {
        for line in rx {
            if writer.write_all(line.as_bytes()).and_then(|_| writer.write_all(b"\n")).is_err() {
                break;
            }
        }
    });
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    let result = loop {
        if stop.load(Ordering::Relaxed) {
            break Ok(());
        }
        match reader.read_line(&mut line) {
            Ok(0) => break Ok(()),
            Ok(_) => {
                let text = line.trim_end_matches(['\r', '\n']);
                if !text.trim().is_empty() {
                    let _ = inbox.send(Inbound::Line { client, text: text.to_string() });
                }
                line.clear();
            }
            // a partial line stays in `line` until the rest arrives
            Err(e) if is_timeout(&e) => {}
            Err(e) => break Err(e),
        }
    };
    if stop.load(Ordering::Relaxed) {
        // the session is going away; its replies are already queued
        let _ = writer_thread.join();
    }
    let _ = reader.get_ref().shutdown(std::net::Shutdown::Both);
    result
}

fn websocket_loop(
    mut ws: WebSocket<TcpStream>,
    client: u64,
    inbox: &Sender<Inbound>,
    rx: Receiver<String>,
    stop: &AtomicBool,
) -> io::Result<()> {
    let to_io = |e: tungstenite::Error| io::Error::other(e.to_string());
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(10)))?;
    loop {
        let stopping = stop.load(Ordering::Relaxed);
        loop {
            match rx.try_recv() {
                Ok(line) => ws.write(Message::text(line)).map_err(to_io)?,
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) if stopping => break,
                Err(mpsc::TryRecvError::Disconnected) => return Ok(()),
            }
        }
        match ws.flush() {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
            Err(e) => return Err(to_io(e)),
        }
        if stopping {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let _ = inbox.send(Inbound::Line { client, text: text.as_str().to_string() });
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(to_io(e)),
        }
    }
}
