//! Full-mesh TCP transport.
//!
//! Every node opens one outbound connection to every node, itself included,
//! so each directed node pair has its own stream and per-link FIFO follows
//! from TCP ordering. The first frame on a connection is a hello carrying
//! the sender's node index. Each connection gets one writer thread (fed by a
//! channel) on the sending side and one reader thread on the receiving side.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{Frame, MsgType, TrafficMeter, TransportError};

/// Control code of the connection hello.
pub const HELLO: u64 = 0;

/// Receives frames from reader threads.
pub trait FrameSink: Send + Sync + 'static {
    fn deliver(&self, src: usize, frame: Frame);
    /// Called once when the inbound stream from `src` ends.
    fn disconnected(&self, _src: usize, _error: Option<TransportError>) {}
}

struct Outbound {
    tx: Mutex<Option<Sender<Frame>>>,
    broken: Arc<AtomicBool>,
}

pub struct TcpMesh {
    node: usize,
    outbound: Vec<Outbound>,
    writers: Mutex<Vec<JoinHandle<()>>>,
    meter: Arc<TrafficMeter>,
}

impl TcpMesh {
    /// Connects `node` to every address in `peers` (indexed by node) and
    /// accepts one connection from each of them on `listener`.
    pub fn establish(
        node: usize,
        listener: TcpListener,
        peers: &[SocketAddr],
        sink: Arc<dyn FrameSink>,
        meter: Arc<TrafficMeter>,
        timeout: Duration,
    ) -> Result<TcpMesh, TransportError> {
        let n = peers.len();
        let deadline = Instant::now() + timeout;
        let acceptor = {
            let sink = Arc::clone(&sink);
            let meter = Arc::clone(&meter);
            thread::Builder::new()
                .name(format!("accept-{node}"))
                .spawn(move || accept_all(node, listener, n, deadline, sink, meter))?
        };

        let mut outbound = Vec::with_capacity(n);
        let mut writers = Vec::with_capacity(n);
        let mut unreachable = Vec::new();
        for (dst, addr) in peers.iter().enumerate() {
            match connect_retry(*addr, deadline) {
                Ok(stream) => {
                    let (tx, rx) = mpsc::channel();
                    let broken = Arc::new(AtomicBool::new(false));
                    let hello = Frame::control(HELLO, node as u32, Vec::new());
                    meter.record_send(node, dst, None, hello.wire_len() as u64);
                    tx.send(hello).expect("fresh channel");
                    let b = Arc::clone(&broken);
                    writers.push(
                        thread::Builder::new()
                            .name(format!("write-{node}-{dst}"))
                            .spawn(move || write_loop(stream, rx, b))?,
                    );
                    outbound.push(Outbound {
                        tx: Mutex::new(Some(tx)),
                        broken,
                    });
                }
                Err(_) => {
                    unreachable.push(format!("node {dst} ({addr})"));
                    outbound.push(Outbound {
                        tx: Mutex::new(None),
                        broken: Arc::new(AtomicBool::new(true)),
                    });
                }
            }
        }
        let accepted = acceptor.join().expect("acceptor thread panicked");
        if !unreachable.is_empty() {
            return Err(TransportError::Unreachable(unreachable));
        }
        accepted?;
        Ok(TcpMesh {
            node,
            outbound,
            writers: Mutex::new(writers),
            meter,
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn nodes(&self) -> usize {
        self.outbound.len()
    }

    pub fn meter(&self) -> &Arc<TrafficMeter> {
        &self.meter
    }

    /// Queues `frame` for `dest`; does not wait for the bytes to leave.
    pub fn send_frame(&self, dest: usize, frame: Frame) -> Result<(), TransportError> {
        let out = self.outbound.get(dest).ok_or(TransportError::UnknownPeer(dest))?;
        if out.broken.load(Ordering::Acquire) {
            return Err(TransportError::Closed(dest));
        }
        let guard = out.tx.lock().unwrap();
        let tx = guard.as_ref().ok_or(TransportError::Closed(dest))?;
        let bytes = frame.wire_len() as u64;
        let layer = frame.layer_index();
        tx.send(frame).map_err(|_| TransportError::Closed(dest))?;
        self.meter.record_send(self.node, dest, layer, bytes);
        Ok(())
    }

    /// Flushes and closes every outbound stream. Later sends fail.
    pub fn close(&self) {
        for out in &self.outbound {
            out.tx.lock().unwrap().take();
        }
        for w in self.writers.lock().unwrap().drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for TcpMesh {
    fn drop(&mut self) {
        self.close();
    }
}

fn connect_retry(addr: SocketAddr, deadline: Instant) -> std::io::Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn write_loop(stream: TcpStream, rx: Receiver<Frame>, broken: Arc<AtomicBool>) {
    let mut w = BufWriter::with_capacity(1 << 16, &stream);
    let mut result = Ok(());
    'outer: while let Ok(frame) = rx.recv() {
        let mut next = Some(frame);
        while let Some(f) = next {
            if let Err(e) = f.write_to(&mut w) {
                result = Err(e);
                break 'outer;
            }
            next = rx.try_recv().ok();
        }
        if let Err(e) = w.flush() {
            result = Err(e);
            break;
        }
    }
    if let Err(e) = result {
        log::warn!("writer stopped: {e}");
        broken.store(true, Ordering::Release);
    }
    drop(w);
    let _ = stream.shutdown(Shutdown::Write);
}

fn accept_all(
    node: usize,
    listener: TcpListener,
    n: usize,
    deadline: Instant,
    sink: Arc<dyn FrameSink>,
    meter: Arc<TrafficMeter>,
) -> Result<(), TransportError> {
    listener.set_nonblocking(true)?;
    let mut seen = vec![false; n];
    let mut count = 0;
    while count < n {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                let mut reader = BufReader::with_capacity(1 << 16, stream);
                stream_timeout(&reader, Some(deadline))?;
                let hello = Frame::read_from(&mut reader)?
                    .ok_or_else(|| TransportError::Handshake("closed before hello".into()))?;
                let src = hello.origin as usize;
                if hello.msg_type != MsgType::Control || hello.chunk_id != HELLO || src >= n {
                    return Err(TransportError::Handshake(format!(
                        "unexpected first frame from origin {src}"
                    )));
                }
                if std::mem::replace(&mut seen[src], true) {
                    return Err(TransportError::Handshake(format!("node {src} connected twice")));
                }
                meter.record_recv(src, node, hello.wire_len() as u64);
                stream_timeout(&reader, None)?;
                count += 1;
                let sink = Arc::clone(&sink);
                let meter = Arc::clone(&meter);
                thread::Builder::new()
                    .name(format!("read-{node}-{src}"))
                    .spawn(move || read_loop(node, src, reader, sink, meter))?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing = (0..n).filter(|&i| !seen[i]).map(|i| format!("node {i}")).collect();
                    return Err(TransportError::Unreachable(missing));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn stream_timeout(r: &BufReader<TcpStream>, deadline: Option<Instant>) -> std::io::Result<()> {
    let t = deadline.map(|d| {
        d.saturating_duration_since(Instant::now())
            .max(Duration::from_millis(1))
    });
    r.get_ref().set_read_timeout(t)
}

fn read_loop(
    node: usize,
    src: usize,
    mut reader: BufReader<TcpStream>,
    sink: Arc<dyn FrameSink>,
    meter: Arc<TrafficMeter>,
) {
    loop {
        match Frame::read_from(&mut reader) {
            Ok(Some(frame)) => {
                meter.record_recv(src, node, frame.wire_len() as u64);
                sink.deliver(src, frame);
            }
            Ok(None) => {
                sink.disconnected(src, None);
                return;
            }
            Err(e) => {
                sink.disconnected(src, Some(e));
                return;
            }
        }
    }
}

/// Binds `n` listeners on ephemeral loopback ports.
pub fn bind_loopback(n: usize) -> std::io::Result<(Vec<TcpListener>, Vec<SocketAddr>)> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<_, _>>()?;
    let addrs = listeners.iter().map(|l| l.local_addr()).collect::<Result<_, _>>()?;
    Ok((listeners, addrs))
}
