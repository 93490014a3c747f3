//! Distributed training over TCP.
//!
//! Every node builds its own [`InformationBook`] from the same inputs. Node 0
//! hosts the coordinator and worker 0: it sends its book bytes to every
//! other node, and any node whose book differs aborts the run. After START
//! the workers train, each syncer pushing its layer as soon as the layer's
//! gradient exists. Workers report DONE to node 0, which then tells every
//! node to FINISH.

mod worker;

use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::coordinator::{CoordinatorError, InformationBook};
use crate::engine::EngineError;
use crate::kvstore::server::ServerRole;
use crate::kvstore::{KvError, Shard};
use crate::syncer::{Peer, Route, SyncError, SyncSlot};
use crate::transport::tcp::{bind_loopback, FrameSink, TcpMesh};
use crate::transport::{Frame, MsgType, TrafficMeter, TrafficSnapshot, TransportError};

pub use worker::WorkerResult;

/// Control codes carried in `chunk_id` of control frames.
pub mod control {
    pub const BOOK: u64 = 1;
    pub const BOOK_OK: u64 = 2;
    pub const BOOK_MISMATCH: u64 = 3;
    pub const START: u64 = 4;
    pub const DONE: u64 = 5;
    pub const FINISH: u64 = 6;
    pub const ABORT: u64 = 7;
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("information book differs on nodes {0:?}")]
    BookMismatch(Vec<usize>),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("timed out: {0}")]
    Timeout(String),
}

/// One row of the per-iteration metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    /// Milliseconds since START at the end of the iteration.
    pub wall_ms: f64,
    pub loss: f32,
    pub bytes_in: u64,
    pub bytes_out: u64,
    /// Time the worker spent waiting on synchronization.
    pub stall_ms: f64,
    pub compute_ms: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Keep every layer's parameters after every synchronization.
    pub record_history: bool,
    pub connect_timeout: Duration,
    /// Limit on each control-plane wait during bootstrap.
    pub bootstrap_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            record_history: false,
            connect_timeout: Duration::from_secs(30),
            bootstrap_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeOutcome {
    pub node: usize,
    pub worker: Option<WorkerResult>,
    pub traffic: TrafficSnapshot,
    /// Completed chunk iterations summed over this node's shard.
    pub chunk_iterations: u64,
}

#[derive(Debug, Clone)]
pub struct LocalRun {
    /// Indexed by node.
    pub nodes: Vec<NodeOutcome>,
    pub traffic: TrafficSnapshot,
    pub wall: Duration,
}

impl LocalRun {
    /// Worker results in worker order.
    pub fn workers(&self) -> Vec<&WorkerResult> {
        let mut w: Vec<&WorkerResult> = self.nodes.iter().filter_map(|n| n.worker.as_ref()).collect();
        w.sort_by_key(|r| r.worker);
        w
    }
}

/// Frame router and per-node shared state.
pub(crate) struct Node {
    pub book: Arc<InformationBook>,
    pub index: usize,
    pub mesh: OnceLock<TcpMesh>,
    pub slots: Vec<Arc<SyncSlot>>,
    server: Option<Mutex<ServerRole>>,
    control: Mutex<Sender<(usize, Frame)>>,
    pub abort: Arc<AtomicBool>,
    reason: Mutex<Option<String>>,
    pub started: Instant,
    finished: AtomicBool,
    pub worker_done: AtomicBool,
}

/// Sentinel source for control messages raised locally.
const LOCAL: usize = usize::MAX;

impl Node {
    pub fn mesh(&self) -> &TcpMesh {
        self.mesh.get().expect("mesh is established before any send")
    }

    pub fn node_of(&self, peer: Peer) -> usize {
        match peer {
            Peer::Worker(w) => self.book.layout.worker_nodes[w],
            Peer::Server(s) => self.book.layout.server_nodes[s],
        }
    }

    /// Stops the node with `reason`; the first reason wins.
    pub fn fail(&self, reason: String) {
        {
            let mut r = self.reason.lock().unwrap_or_else(|e| e.into_inner());
            if r.is_none() {
                log::error!("node {}: {reason}", self.index);
                *r = Some(reason.clone());
            }
        }
        self.abort.store(true, Ordering::Release);
        for s in &self.slots {
            s.wake();
        }
        let _ = self.control.lock().unwrap_or_else(|e| e.into_inner()).send((
            LOCAL,
            Frame::control(control::ABORT, self.index as u32, reason.into_bytes()),
        ));
    }

    fn failure(&self) -> Option<String> {
        self.reason.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn on_server_frame(&self, frame: &Frame) -> Result<(), RuntimeError> {
        let server = self
            .server
            .as_ref()
            .ok_or_else(|| RuntimeError::Protocol(format!("node {} has no server role", self.index)))?;
        let out = {
            let mut s = server.lock().unwrap_or_else(|e| e.into_inner());
            s.on_frame(frame, self.started.elapsed().as_secs_f64())?
        };
        for o in out {
            self.mesh()
                .send_frame(self.book.layout.worker_nodes[o.worker], o.frame)?;
        }
        Ok(())
    }

    fn on_worker_frame(&self, frame: Frame) -> Result<(), RuntimeError> {
        let slot = self.slots.get(frame.layer as usize).ok_or_else(|| {
            RuntimeError::Protocol(format!("node {} has no syncer for layer {}", self.index, frame.layer))
        })?;
        slot.deliver(frame)?;
        Ok(())
    }

    fn send_control(&self, dest: usize, code: u64, payload: Vec<u8>) -> Result<(), TransportError> {
        self.mesh()
            .send_frame(dest, Frame::control(code, self.index as u32, payload))
    }
}

impl FrameSink for Node {
    fn deliver(&self, src: usize, frame: Frame) {
        let result = match frame.msg_type {
            MsgType::Control => {
                let _ = self
                    .control
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .send((src, frame));
                Ok(())
            }
            MsgType::PushChunk => self.on_server_frame(&frame),
            MsgType::SfBatch if self.book.routes.get(frame.layer as usize) == Some(&Route::Adam) => {
                self.on_server_frame(&frame)
            }
            MsgType::SfBatch | MsgType::BroadcastChunk => self.on_worker_frame(frame),
        };
        if let Err(e) = result {
            self.fail(format!("frame from node {src}: {e}"));
        }
    }

    fn disconnected(&self, src: usize, error: Option<TransportError>) {
        if self.finished.load(Ordering::Acquire) || src == self.index {
            return;
        }
        let training = !self.slots.is_empty() && !self.worker_done.load(Ordering::Acquire);
        if training || src == 0 {
            let why = error.map(|e| format!(": {e}")).unwrap_or_default();
            self.fail(format!("lost connection to node {src}{why}"));
        }
    }
}

fn recv_control(
    rx: &Receiver<(usize, Frame)>,
    node: &Node,
    timeout: Option<Duration>,
    what: &str,
) -> Result<(usize, Frame), RuntimeError> {
    let deadline = timeout.map(|t| Instant::now() + t);
    loop {
        let wait = match deadline {
            Some(d) => d.saturating_duration_since(Instant::now()),
            None => Duration::from_secs(3600),
        };
        match rx.recv_timeout(wait) {
            Ok((src, f)) if f.chunk_id == control::ABORT => {
                let why = String::from_utf8_lossy(&f.payload).into_owned();
                let who = if src == LOCAL {
                    "local".to_string()
                } else {
                    format!("node {src}")
                };
                return Err(RuntimeError::Aborted(format!("{who}: {why}")));
            }
            Ok(m) => return Ok(m),
            Err(RecvTimeoutError::Timeout) if deadline.is_some() => {
                return Err(RuntimeError::Timeout(format!("node {} waiting for {what}", node.index)))
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Err(RuntimeError::Protocol("control channel closed".into())),
        }
    }
}

/// Runs node `index` of `book` until FINISH or failure. `peers[i]` is the
/// address of node `i`; `listener` is bound to `peers[index]`.
pub fn run_node(
    book: InformationBook,
    index: usize,
    listener: TcpListener,
    peers: &[SocketAddr],
    meter: Arc<TrafficMeter>,
    abort: Arc<AtomicBool>,
    opts: &RunOptions,
) -> Result<NodeOutcome, RuntimeError> {
    let book = Arc::new(book);
    let layout = &book.layout;
    if peers.len() != layout.num_nodes() || index >= peers.len() {
        return Err(RuntimeError::Protocol(format!(
            "{} peer addresses for {} nodes, node index {index}",
            peers.len(),
            layout.num_nodes()
        )));
    }
    let worker = layout.worker_on(index);
    let init = worker::initial_params(&book)?;
    let slots = match worker {
        Some(w) => worker::make_slots(&book, w),
        None => Vec::new(),
    };
    let server = layout.server_on(index).map(|s| {
        let flat: Vec<f32> = init.concat();
        Mutex::new(ServerRole::new(
            Shard::new(s, &book.partition, book.num_workers(), &flat),
            &book.partition,
            book.scale(),
        ))
    });
    let (tx, rx) = mpsc::channel();
    let node = Arc::new(Node {
        book: Arc::clone(&book),
        index,
        mesh: OnceLock::new(),
        slots,
        server,
        control: Mutex::new(tx),
        abort,
        reason: Mutex::new(None),
        started: Instant::now(),
        finished: AtomicBool::new(false),
        worker_done: AtomicBool::new(false),
    });
    let mesh = TcpMesh::establish(
        index,
        listener,
        peers,
        Arc::clone(&node) as Arc<dyn FrameSink>,
        meter,
        opts.connect_timeout,
    )?;
    if node.mesh.set(mesh).is_err() {
        unreachable!("mesh set once");
    }
    let result = drive(&node, &rx, worker, init, opts);
    node.finished.store(true, Ordering::Release);
    if let Err(e) = &result {
        if index == 0 {
            for dest in 1..book.layout.num_nodes() {
                let _ = node.send_control(dest, control::ABORT, e.to_string().into_bytes());
            }
        } else if !matches!(e, RuntimeError::Aborted(_)) {
            let _ = node.send_control(0, control::ABORT, e.to_string().into_bytes());
        }
    }
    node.mesh().close();
    let worker_result = result?;
    let chunk_iterations = node
        .server
        .as_ref()
        .map(|s| {
            s.lock()
                .unwrap_or_else(|e| e.into_inner())
                .shard
                .chunks()
                .map(|c| c.iteration)
                .sum()
        })
        .unwrap_or(0);
    Ok(NodeOutcome {
        node: index,
        worker: worker_result,
        traffic: node.mesh().meter().snapshot(),
        chunk_iterations,
    })
}

fn drive(
    node: &Arc<Node>,
    rx: &Receiver<(usize, Frame)>,
    worker: Option<usize>,
    init: Vec<Vec<f32>>,
    opts: &RunOptions,
) -> Result<Option<WorkerResult>, RuntimeError> {
    let n = node.book.layout.num_nodes();
    let boot = Some(opts.bootstrap_timeout);
    if node.index == 0 {
        let bytes = node.book.to_bytes();
        for dest in 1..n {
            node.send_control(dest, control::BOOK, bytes.clone())?;
        }
        let mut replies = vec![None; n];
        replies[0] = Some(true);
        while replies.iter().any(Option::is_none) {
            let (src, f) = recv_control(rx, node, boot, "book acknowledgements")?;
            match f.chunk_id {
                control::BOOK_OK => replies[src] = Some(true),
                control::BOOK_MISMATCH => replies[src] = Some(false),
                c => {
                    return Err(RuntimeError::Protocol(format!(
                        "control {c} from node {src} during bootstrap"
                    )))
                }
            }
        }
        let bad: Vec<usize> = (0..n).filter(|&i| replies[i] == Some(false)).collect();
        if !bad.is_empty() {
            return Err(RuntimeError::BookMismatch(bad));
        }
        for dest in 1..n {
            node.send_control(dest, control::START, Vec::new())?;
        }
    } else {
        let (src, f) = recv_control(rx, node, boot, "the information book")?;
        if src != 0 || f.chunk_id != control::BOOK {
            return Err(RuntimeError::Protocol(format!(
                "expected the book from node 0, got control {} from {src}",
                f.chunk_id
            )));
        }
        if f.payload != node.book.to_bytes() {
            node.send_control(0, control::BOOK_MISMATCH, Vec::new())?;
            return Err(RuntimeError::BookMismatch(vec![node.index]));
        }
        node.send_control(0, control::BOOK_OK, Vec::new())?;
        let (_, f) = recv_control(rx, node, boot, "start")?;
        if f.chunk_id != control::START {
            return Err(RuntimeError::Protocol(format!(
                "expected start, got control {}",
                f.chunk_id
            )));
        }
    }

    let result = match worker {
        Some(w) => {
            let r = worker::train(node, w, init, opts.record_history);
            if let Some(why) = node.failure() {
                return Err(RuntimeError::Aborted(why));
            }
            let r = r?;
            node.worker_done.store(true, Ordering::Release);
            Some(r)
        }
        None => None,
    };

    if node.index == 0 {
        let worker_nodes: Vec<usize> = node.book.layout.worker_nodes.clone();
        let mut done: Vec<bool> = worker_nodes.iter().map(|&wn| wn == 0).collect();
        while done.iter().any(|d| !d) {
            let (src, f) = recv_control(rx, node, None, "workers to finish")?;
            match (f.chunk_id, worker_nodes.iter().position(|&wn| wn == src)) {
                (control::DONE, Some(w)) => done[w] = true,
                (c, _) => {
                    return Err(RuntimeError::Protocol(format!(
                        "control {c} from node {src} while training"
                    )))
                }
            }
        }
        for dest in 1..n {
            node.send_control(dest, control::FINISH, Vec::new())?;
        }
    } else {
        if worker.is_some() {
            node.send_control(0, control::DONE, Vec::new())?;
        }
        let (src, f) = recv_control(rx, node, None, "finish")?;
        if f.chunk_id != control::FINISH {
            return Err(RuntimeError::Protocol(format!(
                "expected finish, got control {} from node {src}",
                f.chunk_id
            )));
        }
    }
    Ok(result)
}

/// Runs every node of `book` as a thread over loopback TCP.
pub fn train_local(book: &InformationBook, opts: &RunOptions) -> Result<LocalRun, RuntimeError> {
    let n = book.layout.num_nodes();
    let (listeners, addrs) = bind_loopback(n)?;
    let meter = Arc::new(TrafficMeter::new(n));
    let abort = Arc::new(AtomicBool::new(false));
    let t0 = Instant::now();
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let (book, addrs, meter, abort, opts) = (
                book.clone(),
                addrs.clone(),
                Arc::clone(&meter),
                Arc::clone(&abort),
                opts.clone(),
            );
            thread::Builder::new()
                .name(format!("node-{i}"))
                .spawn(move || run_node(book, i, l, &addrs, meter, abort, &opts))
        })
        .collect::<Result<_, _>>()?;
    let results: Vec<Result<NodeOutcome, RuntimeError>> = handles
        .into_iter()
        .map(|h| h.join().expect("node thread panicked"))
        .collect();
    let wall = t0.elapsed();
    let mut nodes = Vec::with_capacity(n);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => nodes.push(o),
            Err(e) => {
                let root = !matches!(e, RuntimeError::Aborted(_));
                if first_err.is_none() || (root && matches!(first_err, Some(RuntimeError::Aborted(_)))) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(LocalRun {
        nodes,
        traffic: meter.snapshot(),
        wall,
    })
}

/// Runs node `index` as its own process, listening on the book's port.
pub fn launch_node(book: InformationBook, index: usize, opts: &RunOptions) -> Result<NodeOutcome, RuntimeError> {
    let peers: Vec<SocketAddr> = (0..book.layout.num_nodes())
        .map(|i| {
            let ep = book.endpoint(i);
            ep.to_socket_addrs()?
                .next()
                .ok_or_else(|| RuntimeError::Protocol(format!("cannot resolve {ep}")))
        })
        .collect::<Result<_, _>>()?;
    let listener = TcpListener::bind(("0.0.0.0", book.ports[index].port))?;
    let meter = Arc::new(TrafficMeter::new(peers.len()));
    run_node(
        book,
        index,
        listener,
        &peers,
        meter,
        Arc::new(AtomicBool::new(false)),
        opts,
    )
}
