//! Communication cost model and per-layer scheme selection.
//!
//! Costs are counted in parameter elements moved through one node's network
//! interface per iteration (sent plus received) for an `M x N` layer, with
//! `P1` workers, `P2` server shards and per-worker batch size `K`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::modelspec::{ClusterConfig, LayerKind, LayerSpec, ModelSpec, ELEMENT_BYTES};

/// Synchronization scheme for one layer in a [`CommPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Push gradients to sharded servers, pull fresh parameters.
    Ps,
    /// Broadcast sufficient factors to all peer workers.
    Sfb,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Ps => "PS",
            Scheme::Sfb => "SFB",
        }
    }
}

/// Schemes the cost model knows about, including the push-factors /
/// pull-matrix strategy used as a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostScheme {
    Ps,
    Sfb,
    AdamPushPull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRole {
    ServerOnly,
    WorkerOnly,
    ServerAndWorker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub scheme: CostScheme,
    pub role: NodeRole,
    pub elements: u64,
}

fn ceil_div(num: u128, den: u128) -> u64 {
    num.div_ceil(den) as u64
}

/// Parameter-server cost for one node in `role`.
pub fn ps_cost(m: u64, n: u64, p1: u64, p2: u64, role: NodeRole) -> u64 {
    let mn = m as u128 * n as u128;
    let (p1, p2) = (p1 as u128, p2 as u128);
    match role {
        NodeRole::ServerOnly => ceil_div(2 * p1 * mn, p2),
        NodeRole::WorkerOnly => (2 * mn) as u64,
        NodeRole::ServerAndWorker => ceil_div(2 * mn * (p1 + p2 - 2), p2),
    }
}

/// Sufficient-factor broadcasting cost for one worker.
pub fn sfb_cost(m: u64, n: u64, k: u64, p1: u64) -> u64 {
    2 * k * (p1 - 1) * (m + n)
}

/// Cost of pushing factors to one shard and pulling back the whole matrix.
/// These are the bottleneck (max) figures for each role.
pub fn adam_cost(m: u64, n: u64, k: u64, p1: u64, role: NodeRole) -> u64 {
    match role {
        NodeRole::ServerOnly => p1 * m * n + p1 * k * (m + n),
        NodeRole::WorkerOnly => k * (m + n) + m * n,
        NodeRole::ServerAndWorker => (p1 - 1) * (m * n + k * m + k * n),
    }
}

/// Estimate for a scheme and role; `None` where the role does not exist for
/// the scheme (SFB has no server).
pub fn estimate(scheme: CostScheme, role: NodeRole, m: u64, n: u64, k: u64, p1: u64, p2: u64) -> Option<CostEstimate> {
    let elements = match scheme {
        CostScheme::Ps => ps_cost(m, n, p1, p2, role),
        CostScheme::Sfb if role == NodeRole::WorkerOnly => sfb_cost(m, n, k, p1),
        CostScheme::Sfb => return None,
        CostScheme::AdamPushPull => adam_cost(m, n, k, p1, role),
    };
    Some(CostEstimate { scheme, role, elements })
}

/// The SFB-vs-PS test, evaluated exactly in integers:
/// `2K(P1-1)(M+N) <= 2MN(P1+P2-2)/P2`, ties going to SFB.
pub fn sfb_not_worse(m: u64, n: u64, k: u64, p1: u64, p2: u64) -> bool {
    let (m, n, k, p1, p2) = (m as u128, n as u128, k as u128, p1 as u128, p2 as u128);
    2 * k * (p1 - 1) * (m + n) * p2 <= 2 * m * n * (p1 + p2 - 2)
}

pub fn best_scheme_for(kind: LayerKind, m: u64, n: u64, k: u64, p1: u64, p2: u64) -> Scheme {
    match kind {
        LayerKind::FullyConnected if sfb_not_worse(m, n, k, p1, p2) => Scheme::Sfb,
        _ => Scheme::Ps,
    }
}

/// Best scheme of one layer for the given model and cluster.
pub fn best_scheme(layer: &LayerSpec, model: &ModelSpec, cluster: &ClusterConfig) -> Scheme {
    best_scheme_for(
        layer.kind,
        layer.rows() as u64,
        layer.cols() as u64,
        model.batch_size as u64,
        cluster.num_workers() as u64,
        cluster.num_servers() as u64,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    pub scheme: Scheme,
    /// Elements through a worker-only node for this layer.
    pub worker_elements: u64,
    /// Elements through a server-only node (zero for SFB layers).
    pub server_elements: u64,
    /// Elements through a node that is both worker and server.
    pub server_and_worker_elements: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTotals {
    pub worker_only: u64,
    pub server_only: u64,
    pub server_and_worker: u64,
}

impl PlanTotals {
    pub fn bytes(&self) -> PlanTotals {
        let b = ELEMENT_BYTES as u64;
        PlanTotals {
            worker_only: self.worker_only * b,
            server_only: self.server_only * b,
            server_and_worker: self.server_and_worker * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommPlan {
    pub workers: usize,
    pub servers: usize,
    pub batch_size: usize,
    pub layers: Vec<LayerPlan>,
    pub totals: PlanTotals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanFormat {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for PlanFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(PlanFormat::Table),
            "csv" => Ok(PlanFormat::Csv),
            "json" => Ok(PlanFormat::Json),
            other => Err(format!("unknown format '{other}'")),
        }
    }
}

/// Runs [`best_scheme`] on every layer and aggregates predicted traffic.
pub fn plan(model: &ModelSpec, cluster: &ClusterConfig) -> CommPlan {
    CommPlan::build(model, cluster, |l| best_scheme(l, model, cluster))
}

impl CommPlan {
    /// Builds a plan from an arbitrary per-layer choice. Indecomposable
    /// layers are forced onto PS regardless of `choose`.
    pub fn build(model: &ModelSpec, cluster: &ClusterConfig, mut choose: impl FnMut(&LayerSpec) -> Scheme) -> CommPlan {
        let p1 = cluster.num_workers() as u64;
        let p2 = cluster.num_servers() as u64;
        let k = model.batch_size as u64;
        let mut totals = PlanTotals::default();
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let scheme = match l.kind {
                    LayerKind::Indecomposable => Scheme::Ps,
                    LayerKind::FullyConnected => choose(l),
                };
                let (m, n) = (l.rows() as u64, l.cols() as u64);
                let (worker, server, both) = match scheme {
                    Scheme::Ps => (
                        ps_cost(m, n, p1, p2, NodeRole::WorkerOnly),
                        ps_cost(m, n, p1, p2, NodeRole::ServerOnly),
                        ps_cost(m, n, p1, p2, NodeRole::ServerAndWorker),
                    ),
                    Scheme::Sfb => {
                        let c = sfb_cost(m, n, k, p1);
                        (c, 0, c)
                    }
                };
                totals.worker_only += worker;
                totals.server_only += server;
                totals.server_and_worker += both;
                LayerPlan {
                    index: l.index,
                    name: l.name.clone(),
                    kind: l.kind,
                    scheme,
                    worker_elements: worker,
                    server_elements: server,
                    server_and_worker_elements: both,
                }
            })
            .collect();
        CommPlan {
            workers: cluster.num_workers(),
            servers: cluster.num_servers(),
            batch_size: model.batch_size,
            layers,
            totals,
        }
    }

    /// Every layer on the same scheme where allowed.
    pub fn uniform(model: &ModelSpec, cluster: &ClusterConfig, scheme: Scheme) -> CommPlan {
        CommPlan::build(model, cluster, |_| scheme)
    }

    pub fn scheme(&self, layer: usize) -> Scheme {
        self.layers[layer].scheme
    }

    pub fn ps_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.scheme == Scheme::Ps)
            .map(|l| l.index)
            .collect()
    }

    pub fn render(&self, format: PlanFormat) -> String {
        match format {
            PlanFormat::Json => serde_json::to_string_pretty(self).expect("plan serializes"),
            PlanFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([
                    "layer",
                    "name",
                    "kind",
                    "scheme",
                    "worker_elements",
                    "server_elements",
                    "server_and_worker_elements",
                ])
                .expect("in-memory csv");
                for l in &self.layers {
                    w.write_record([
                        l.index.to_string(),
                        l.name.clone(),
                        l.kind.to_string(),
                        l.scheme.as_str().to_string(),
                        l.worker_elements.to_string(),
                        l.server_elements.to_string(),
                        l.server_and_worker_elements.to_string(),
                    ])
                    .expect("in-memory csv");
                }
                w.write_record([
                    "total".to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    self.totals.worker_only.to_string(),
                    self.totals.server_only.to_string(),
                    self.totals.server_and_worker.to_string(),
                ])
                .expect("in-memory csv");
                String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
            }
            PlanFormat::Table => {
                let mut out = String::new();
                let _ = writeln!(out, "P1={} P2={} K={}", self.workers, self.servers, self.batch_size);
                let _ = writeln!(
                    out,
                    "{:>5}  {:<16} {:<6} {:<6} {:>16} {:>16} {:>16}",
                    "layer", "name", "kind", "scheme", "worker", "server", "server+worker"
                );
                for l in &self.layers {
                    let _ = writeln!(
                        out,
                        "{:>5}  {:<16} {:<6} {:<6} {:>16} {:>16} {:>16}",
                        l.index,
                        l.name,
                        l.kind.as_str(),
                        l.scheme.as_str(),
                        l.worker_elements,
                        l.server_elements,
                        l.server_and_worker_elements
                    );
                }
                let b = self.totals.bytes();
                let _ = writeln!(
                    out,
                    "total elements  worker={} server={} server+worker={}",
                    self.totals.worker_only, self.totals.server_only, self.totals.server_and_worker
                );
                let _ = writeln!(
                    out,
                    "total bytes     worker={} server={} server+worker={}",
                    b.worker_only, b.server_only, b.server_and_worker
                );
                out
            }
        }
    }
}
