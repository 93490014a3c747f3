//! The worker loop.

use std::cell::Cell;
use std::sync::atomic::Ordering;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{MetricsRow, Node, RuntimeError};
use crate::coordinator::InformationBook;
use crate::engine::data::{make_synthetic_dataset, worker_streams};
use crate::engine::{backward, forward, EngineError, LayerGrad, Network, WeightSource};
use crate::syncer::{IterationClock, SyncSlot, Syncer};

#[derive(Debug, Clone)]
pub struct WorkerResult {
    pub worker: usize,
    /// Final parameters, per layer.
    pub params: Vec<Vec<f32>>,
    /// `history[t][l]`: layer `l` right after its iteration-`t` sync.
    pub history: Vec<Vec<Vec<f32>>>,
    pub metrics: Vec<MetricsRow>,
    /// Completed synchronizations per layer.
    pub sync_counts: Vec<u64>,
}

pub(super) fn initial_params(book: &InformationBook) -> Result<Vec<Vec<f32>>, EngineError> {
    Ok(Network::from_model(&book.model)?.init_weights(book.train.seed))
}

pub(super) fn make_slots(book: &InformationBook, worker: usize) -> Vec<Arc<SyncSlot>> {
    book.routings()
        .into_iter()
        .map(|r| Arc::new(SyncSlot::new(Syncer::new(r, worker, book.num_workers(), book.scale()))))
        .collect()
}

/// Layer weights plus how many syncs each layer has completed.
struct Weights {
    layers: Vec<RwLock<Vec<f32>>>,
    ready: Mutex<Vec<u64>>,
    cv: Condvar,
}

impl Weights {
    /// Blocks until layer `l` has completed `need` syncs. Returns the time
    /// spent waiting.
    fn wait(&self, l: usize, need: u64, node: &Node, timeout: Duration) -> Result<Duration, RuntimeError> {
        let t0 = Instant::now();
        let mut ready = self.ready.lock().unwrap_or_else(|e| e.into_inner());
        while ready[l] < need {
            if node.abort.load(Ordering::Acquire) {
                return Err(RuntimeError::Aborted(format!("worker stopped waiting for layer {l}")));
            }
            if t0.elapsed() >= timeout {
                return Err(RuntimeError::Timeout(format!(
                    "layer {l} sync for iteration {}",
                    need - 1
                )));
            }
            ready = self
                .cv
                .wait_timeout(ready, Duration::from_millis(50))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        Ok(t0.elapsed())
    }

    fn mark(&self, l: usize) {
        self.ready.lock().unwrap_or_else(|e| e.into_inner())[l] += 1;
        self.cv.notify_all();
    }
}

/// Forward-pass weight source that waits for each layer's previous sync.
struct Gated<'a> {
    weights: &'a Weights,
    node: &'a Node,
    need: u64,
    timeout: Duration,
    stall: Cell<Duration>,
    error: Cell<Option<RuntimeError>>,
}

impl WeightSource<f32> for Gated<'_> {
    fn with_layer<R>(&self, layer: usize, f: impl FnOnce(&[f32]) -> R) -> R {
        match self.weights.wait(layer, self.need, self.node, self.timeout) {
            Ok(d) => self.stall.set(self.stall.get() + d),
            Err(e) => {
                let prev = self.error.take();
                self.error.set(prev.or(Some(e)));
            }
        }
        f(&self.weights.layers[layer].read().unwrap_or_else(|e| e.into_inner()))
    }
}

impl WeightSource<f32> for Weights {
    fn with_layer<R>(&self, layer: usize, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.layers[layer].read().unwrap_or_else(|e| e.into_inner()))
    }
}

type Job = Box<dyn FnOnce() + Send>;

/// Fixed set of threads that wait for and apply layer syncs.
struct SyncPool {
    tx: Option<Sender<Job>>,
    threads: Vec<JoinHandle<()>>,
}

impl SyncPool {
    fn new(size: usize) -> std::io::Result<Self> {
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let threads = (0..size)
            .map(|i| {
                let rx = Arc::clone(&rx);
                thread::Builder::new().name(format!("sync-{i}")).spawn(move || loop {
                    let job = rx.lock().unwrap_or_else(|e| e.into_inner()).recv();
                    match job {
                        Ok(job) => job(),
                        Err(_) => return,
                    }
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(SyncPool { tx: Some(tx), threads })
    }

    fn submit(&self, job: Job) {
        self.tx
            .as_ref()
            .expect("pool is open")
            .send(job)
            .expect("pool threads alive");
    }
}

impl Drop for SyncPool {
    fn drop(&mut self) {
        self.tx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

struct Shared {
    node: Arc<Node>,
    weights: Weights,
    clock: Mutex<IterationClock>,
    history: Option<Mutex<Vec<Vec<Vec<f32>>>>>,
    timeout: Duration,
}

/// Waits for layer `l`'s sync, writes it into the weights and marks it.
fn complete_layer(sh: &Shared, l: usize) -> Result<(), RuntimeError> {
    let slot = &sh.node.slots[l];
    slot.receive(sh.timeout, &sh.node.abort)?;
    let iteration = {
        let mut w = sh.weights.layers[l].write().unwrap_or_else(|e| e.into_inner());
        let mut s = slot.lock();
        let it = s.iteration();
        s.move_in(&mut w)?;
        s.finish()?;
        if let Some(h) = &sh.history {
            let mut h = h.lock().unwrap_or_else(|e| e.into_inner());
            let layers = sh.weights.layers.len();
            while h.len() <= it as usize {
                h.push(vec![Vec::new(); layers]);
            }
            h[it as usize][l] = w.clone();
        }
        it
    };
    log::trace!("node {} layer {l} synced iteration {iteration}", sh.node.index);
    sh.clock.lock().unwrap_or_else(|e| e.into_inner()).c.set(l);
    sh.weights.mark(l);
    Ok(())
}

fn send_layer(node: &Node, g: &LayerGrad<f32>) -> Result<(), RuntimeError> {
    let out = {
        let mut s = node.slots[g.layer].lock();
        s.move_out(g)?;
        s.send()?
    };
    for o in out {
        node.mesh().send_frame(node.node_of(o.to), o.frame)?;
    }
    Ok(())
}

pub(super) fn train(
    node: &Arc<Node>,
    worker: usize,
    init: Vec<Vec<f32>>,
    record_history: bool,
) -> Result<WorkerResult, RuntimeError> {
    let book = &node.book;
    let tc = &book.train;
    let net = Network::from_model(&book.model)?;
    let ds = tc.dataset;
    if ds.dim != net.input_dim() || ds.classes != net.classes() {
        return Err(EngineError::Shape(format!(
            "dataset has {} features and {} classes, model expects {} and {}",
            ds.dim,
            ds.classes,
            net.input_dim(),
            net.classes()
        ))
        .into());
    }
    let data = make_synthetic_dataset(tc.data_seed, ds.n, ds.dim, ds.classes);
    let mut stream = worker_streams(&data, book.num_workers(), book.model.batch_size, tc.seed)?.swap_remove(worker);
    let layers = net.num_layers();
    let sh = Arc::new(Shared {
        node: Arc::clone(node),
        weights: Weights {
            layers: init.into_iter().map(RwLock::new).collect(),
            ready: Mutex::new(vec![0; layers]),
            cv: Condvar::new(),
        },
        clock: Mutex::new(IterationClock::new(layers)),
        history: record_history.then(|| Mutex::new(Vec::new())),
        timeout: Duration::from_millis(tc.receive_timeout_ms),
    });
    let pool = SyncPool::new(tc.pool_size.clamp(1, layers.max(1)))?;
    let wait_free = tc.mode.wait_free();
    let meter = Arc::clone(node.mesh().meter());
    let mut last = meter.snapshot();
    let mut metrics = Vec::with_capacity(tc.iterations);

    let submit = |l: usize| {
        let sh = Arc::clone(&sh);
        pool.submit(Box::new(move || {
            if let Err(e) = complete_layer(&sh, l) {
                sh.node.fail(format!("worker {worker}: {e}"));
                sh.weights.cv.notify_all();
            }
        }));
    };

    let mut run = || -> Result<(), RuntimeError> {
        for t in 0..tc.iterations as u64 {
            let t0 = Instant::now();
            let (x, y) = stream.next_batch(&data);
            let gated = Gated {
                weights: &sh.weights,
                node,
                need: t,
                timeout: sh.timeout,
                stall: Cell::new(Duration::ZERO),
                error: Cell::new(None),
            };
            let fwd = forward(&net, &gated, &x, &y)?;
            if let Some(e) = gated.error.take() {
                return Err(e);
            }
            let mut stall = gated.stall.get();
            if t > 0 {
                sh.clock.lock().unwrap_or_else(|e| e.into_inner()).advance()?;
            }
            let mut err: Option<RuntimeError> = None;
            let mut held: Vec<LayerGrad<f32>> = Vec::new();
            backward(&net, &sh.weights, &fwd, |g| {
                if err.is_some() {
                    return;
                }
                if wait_free {
                    let l = g.layer;
                    match send_layer(node, &g) {
                        Ok(()) => submit(l),
                        Err(e) => err = Some(e),
                    }
                } else {
                    held.push(g);
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            for g in held {
                send_layer(node, &g)?;
                submit(g.layer);
            }
            if t + 1 == tc.iterations as u64 {
                for l in 0..layers {
                    stall += sh.weights.wait(l, t + 1, node, sh.timeout)?;
                }
                sh.clock.lock().unwrap_or_else(|e| e.into_inner()).advance()?;
            }
            let now = meter.snapshot();
            let me = node.index;
            metrics.push(MetricsRow {
                iteration: t,
                wall_ms: node.started.elapsed().as_secs_f64() * 1e3,
                loss: fwd.loss,
                bytes_in: now.bytes_in[me] - last.bytes_in[me],
                bytes_out: now.bytes_out[me] - last.bytes_out[me],
                stall_ms: stall.as_secs_f64() * 1e3,
                compute_ms: t0.elapsed().saturating_sub(stall).as_secs_f64() * 1e3,
            });
            last = now;
        }
        Ok(())
    };
    let outcome = run();
    if let Err(e) = &outcome {
        node.fail(format!("worker {worker}: {e}"));
    }
    drop(pool);
    outcome?;
    let sh = Arc::try_unwrap(sh).unwrap_or_else(|_| unreachable!("pool threads have exited"));
    let sync_counts = node.slots.iter().map(|s| s.lock().sync_count).collect();
    Ok(WorkerResult {
        worker,
        params: sh
            .weights
            .layers
            .into_iter()
            .map(|w| w.into_inner().unwrap_or_else(|e| e.into_inner()))
            .collect(),
        history: sh
            .history
            .map(|h| h.into_inner().unwrap_or_else(|e| e.into_inner()))
            .unwrap_or_default(),
        metrics,
        sync_counts,
    })
}
