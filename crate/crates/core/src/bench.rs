//! Simulated scaling and load-balance experiments.
//!
//! A scenario names a model file, the cluster sizes, bandwidths and modes to
//! sweep, and how long each layer computes. Every cell is one
//! [`Timeline`] replay on the simulated network.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelspec::{ClusterConfig, ModelError, ModelSpec};
use crate::syncer::timeline::{compute_by_params, LayerCompute, Timeline, TimelineReport};
use crate::syncer::SyncMode;
use crate::transport::sim::SimConfig;
use crate::transport::HEADER_BYTES;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Server shard `s` shares a node with worker `s`.
    #[default]
    Colocated,
    /// Servers on their own nodes.
    Disjoint,
}

fn default_compute_ms() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Model file, relative to the scenario file.
    pub model: String,
    /// Worker counts to sweep.
    pub cluster_sizes: Vec<usize>,
    /// Server shards; defaults to one per worker.
    #[serde(default)]
    pub servers: Option<usize>,
    #[serde(default)]
    pub placement: Placement,
    /// Per-port bandwidths in Mbit/s; `null` is unlimited.
    pub bandwidths_mbps: Vec<Option<f64>>,
    pub modes: Vec<SyncMode>,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub latency_ms: f64,
    /// Compute per iteration, split over layers by parameter count.
    #[serde(default = "default_compute_ms")]
    pub compute_ms: f64,
    /// Explicit `[forward, backward]` milliseconds per layer.
    #[serde(default)]
    pub layer_compute_ms: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub chunk_bytes: Option<usize>,
}

/// A scenario with its model loaded.
#[derive(Debug, Clone)]
pub struct Bench {
    pub scenario: Scenario,
    pub model: ModelSpec,
}

impl Bench {
    pub fn new(scenario: Scenario, model: ModelSpec) -> Result<Self, BenchError> {
        let s = &scenario;
        if s.iterations == 0 {
            return Err(BenchError::Scenario("iterations must be at least 1".into()));
        }
        if s.modes.is_empty() {
            return Err(BenchError::Scenario("no modes".into()));
        }
        if s.cluster_sizes.is_empty() || s.cluster_sizes.contains(&0) {
            return Err(BenchError::Scenario(
                "cluster sizes must be a non-empty list of positive counts".into(),
            ));
        }
        if s.servers == Some(0) {
            return Err(BenchError::Scenario("servers must be positive".into()));
        }
        if s.bandwidths_mbps.is_empty() || s.bandwidths_mbps.iter().flatten().any(|b| b.is_nan() || *b <= 0.0) {
            return Err(BenchError::Scenario(
                "bandwidths must be a non-empty list of positive values or null".into(),
            ));
        }
        if let Some(lc) = &s.layer_compute_ms {
            if lc.len() != model.num_layers() {
                return Err(BenchError::Scenario(format!(
                    "{} layer compute entries for {} layers",
                    lc.len(),
                    model.num_layers()
                )));
            }
            if lc.iter().flatten().any(|t| t.is_nan() || *t < 0.0) {
                return Err(BenchError::Scenario("layer compute times must be non-negative".into()));
            }
        }
        model.validate()?;
        Ok(Bench { scenario, model })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.into(),
            source,
        })?;
        let scenario: Scenario = serde_json::from_str(&text)?;
        let model_path = path.parent().unwrap_or(Path::new(".")).join(&scenario.model);
        let model = ModelSpec::load(&model_path)?;
        Bench::new(scenario, model)
    }

    pub fn compute(&self) -> Vec<LayerCompute> {
        match &self.scenario.layer_compute_ms {
            Some(lc) => lc
                .iter()
                .map(|[f, b]| LayerCompute {
                    forward: f / 1e3,
                    backward: b / 1e3,
                })
                .collect(),
            None => compute_by_params(&self.model, self.scenario.compute_ms / 1e3),
        }
    }

    pub fn cluster(&self, p1: usize, placement: Placement) -> ClusterConfig {
        let p2 = self.scenario.servers.unwrap_or(p1);
        let c = match placement {
            Placement::Colocated => ClusterConfig::colocated(p1, p2),
            Placement::Disjoint => ClusterConfig::disjoint(p1, p2),
        };
        match self.scenario.chunk_bytes {
            Some(b) => c.with_chunk_bytes(b),
            None => c,
        }
    }

    pub fn sim(&self, bandwidth_mbps: Option<f64>) -> SimConfig {
        SimConfig {
            bandwidth_bits_per_sec: bandwidth_mbps.map(|m| m * 1e6),
            latency: self.scenario.latency_ms / 1e3,
            seed: self.scenario.seed,
            reorder: false,
        }
    }

    /// One replay of `mode` on `p1` workers.
    pub fn replay(
        &self,
        mode: SyncMode,
        p1: usize,
        placement: Placement,
        bandwidth_mbps: Option<f64>,
    ) -> TimelineReport {
        let cluster = self.cluster(p1, placement);
        Timeline::new(&self.model, &cluster, mode, self.compute())
            .run(self.sim(bandwidth_mbps), self.scenario.iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub mode: SyncMode,
    #[serde(rename = "P1")]
    pub p1: usize,
    /// Mbit/s; infinite when unlimited.
    pub bandwidth_mbps: f64,
    pub images_per_sec: Option<f64>,
    /// Throughput over the one-worker run of the same mode and bandwidth.
    pub speedup: Option<f64>,
    pub stall_ratio: Option<f64>,
    /// `ok`, or why the cell could not run.
    pub status: String,
}

pub fn run_scaling(bench: &Bench) -> Vec<ScalingRow> {
    let s = &bench.scenario;
    let k = bench.model.batch_size;
    let mut rows = Vec::new();
    for &mode in &s.modes {
        let infeasible = mode.check_model(&bench.model).err();
        for &bw in &s.bandwidths_mbps {
            let bandwidth_mbps = bw.unwrap_or(f64::INFINITY);
            if let Some(why) = &infeasible {
                log::warn!("{mode} skipped: {why}");
                rows.extend(s.cluster_sizes.iter().map(|&p1| ScalingRow {
                    mode,
                    p1,
                    bandwidth_mbps,
                    images_per_sec: None,
                    speedup: None,
                    stall_ratio: None,
                    status: format!("infeasible: {why}"),
                }));
                continue;
            }
            let base = bench.replay(mode, 1, s.placement, bw).samples_per_sec(1, k);
            for &p1 in &s.cluster_sizes {
                let r = bench.replay(mode, p1, s.placement, bw);
                let ips = r.samples_per_sec(p1, k);
                log::info!("{mode} P1={p1} bw={bandwidth_mbps}: {ips:.1} samples/s");
                rows.push(ScalingRow {
                    mode,
                    p1,
                    bandwidth_mbps,
                    images_per_sec: Some(ips),
                    speedup: Some(if p1 == 1 { 1.0 } else { ips / base }),
                    stall_ratio: Some(r.stall_ratio()),
                    status: "ok".into(),
                });
            }
        }
    }
    rows
}

/// Traffic of one mode in the load-balance experiment.
#[derive(Debug, Clone)]
pub struct LoadBalance {
    pub mode: SyncMode,
    pub report: TimelineReport,
    /// Bytes one full chunk moves over the run: every worker pushes it and
    /// receives it once per iteration.
    pub chunk_traffic: u64,
}

/// Runs every mode on the first cluster size and bandwidth, with servers
/// on their own nodes so that node bytes are role bytes.
pub fn run_load_balance(bench: &Bench) -> Vec<LoadBalance> {
    let s = &bench.scenario;
    let p1 = s.cluster_sizes[0];
    let bw = s.bandwidths_mbps[0];
    let cluster = bench.cluster(p1, Placement::Disjoint);
    let chunk_traffic = (s.iterations * p1 * 2 * (HEADER_BYTES + cluster.chunk_bytes)) as u64;
    s.modes
        .iter()
        .filter(|m| match m.check_model(&bench.model) {
            Ok(()) => true,
            Err(why) => {
                log::warn!("{m} skipped: {why}");
                false
            }
        })
        .map(|&mode| LoadBalance {
            mode,
            report: bench.replay(mode, p1, Placement::Disjoint, bw),
            chunk_traffic,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadRow {
    pub mode: SyncMode,
    pub node: usize,
    /// `worker3`, `server1` or both joined with `+`.
    pub roles: String,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub bytes_total: u64,
}

pub fn load_rows(runs: &[LoadBalance]) -> Vec<LoadRow> {
    let mut rows = Vec::new();
    for lb in runs {
        let r = &lb.report;
        for node in 0..r.layout.num_nodes() {
            let roles: Vec<String> = r
                .layout
                .worker_on(node)
                .map(|w| format!("worker{w}"))
                .into_iter()
                .chain(r.layout.server_on(node).map(|s| format!("server{s}")))
                .collect();
            let bytes_in = r.traffic.bytes_in.get(node).copied().unwrap_or(0);
            let bytes_out = r.traffic.bytes_out.get(node).copied().unwrap_or(0);
            rows.push(LoadRow {
                mode: lb.mode,
                node,
                roles: roles.join("+"),
                bytes_in,
                bytes_out,
                bytes_total: bytes_in + bytes_out,
            });
        }
    }
    rows
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LayerSpec;

    fn bench(modes: Vec<SyncMode>, bandwidths: Vec<Option<f64>>, model: ModelSpec) -> Bench {
        let scenario = Scenario {
            model: "inline".into(),
            cluster_sizes: vec![1, 2, 4],
            servers: None,
            placement: Placement::Colocated,
            bandwidths_mbps: bandwidths,
            modes,
            iterations: 2,
            seed: 0,
            latency_ms: 0.0,
            compute_ms: 10.0,
            layer_compute_ms: None,
            chunk_bytes: Some(1 << 12),
        };
        Bench::new(scenario, model).unwrap()
    }

    fn fc_model() -> ModelSpec {
        ModelSpec::new(
            vec![
                LayerSpec::opaque(0, "conv", 4000),
                LayerSpec::fully_connected(1, "fc", 64, 128),
            ],
            8,
        )
        .unwrap()
    }

    #[test]
    fn free_network_scales_linearly() {
        let b = bench(
            vec![SyncMode::Hybrid, SyncMode::Ps, SyncMode::SequentialPs],
            vec![None],
            fc_model(),
        );
        let rows = run_scaling(&b);
        assert_eq!(rows.len(), 9);
        for r in rows {
            assert!((r.speedup.unwrap() - r.p1 as f64).abs() < 1e-9, "{r:?}");
            assert_eq!(r.stall_ratio, Some(0.0));
        }
    }

    #[test]
    fn infeasible_cells_are_reported() {
        let opaque = ModelSpec::new(vec![LayerSpec::opaque(0, "conv", 100)], 4).unwrap();
        let b = bench(vec![SyncMode::Sfb, SyncMode::Ps], vec![Some(100.0)], opaque);
        let rows = run_scaling(&b);
        assert_eq!(rows.len(), 6);
        assert!(rows[..3]
            .iter()
            .all(|r| r.status.starts_with("infeasible") && r.speedup.is_none()));
        assert!(rows[3..].iter().all(|r| r.status == "ok"));
    }

    #[test]
    fn load_rows_reconcile_with_the_meter() {
        let b = bench(vec![SyncMode::Ps, SyncMode::Adam], vec![Some(1000.0)], fc_model());
        let runs = run_load_balance(&b);
        let rows = load_rows(&runs);
        for lb in &runs {
            let mine: Vec<&LoadRow> = rows.iter().filter(|r| r.mode == lb.mode).collect();
            let out: u64 = mine.iter().map(|r| r.bytes_out).sum();
            let inn: u64 = mine.iter().map(|r| r.bytes_in).sum();
            assert_eq!(out, lb.report.traffic.nic_bytes());
            assert_eq!(inn, lb.report.traffic.bytes_in.iter().sum::<u64>());
            assert_eq!(mine.len(), 2);
        }
        assert_eq!(rows[0].roles, "worker0");
        assert_eq!(rows[1].roles, "server0");
    }

    #[test]
    fn bad_scenarios_are_rejected() {
        let mut s = bench(vec![SyncMode::Ps], vec![None], fc_model()).scenario;
        s.iterations = 0;
        assert!(Bench::new(s.clone(), fc_model()).is_err());
        s.iterations = 1;
        s.layer_compute_ms = Some(vec![[1.0, 2.0]]);
        assert!(Bench::new(s, fc_model()).is_err());
    }
}
