//! The information book: everything a node needs to take part in a run,
//! computed once by the coordinator and replicated byte for byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::data::DataSpec;
use crate::engine::update_scale;
use crate::kvstore::{partition_with, Partition};
use crate::modelspec::{split_endpoint, ClusterConfig, ModelError, ModelSpec, NodeLayout};
use crate::planner::{best_scheme, CommPlan, Scheme};
use crate::syncer::{layer_routings, LayerRouting, Route, SyncMode};

pub const DEFAULT_POOL_SIZE: usize = 4;
pub const DEFAULT_RECEIVE_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("unknown property '{0}'")]
    UnknownKey(String),
    #[error("port assignment: {0}")]
    Ports(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("book encoding: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: SyncMode,
    pub lr: f32,
    pub seed: u64,
    pub iterations: usize,
    pub dataset: DataSpec,
    /// Seed of the synthetic dataset.
    pub data_seed: u64,
    pub pool_size: usize,
    pub receive_timeout_ms: u64,
}

impl TrainConfig {
    pub fn new(mode: SyncMode, lr: f32, seed: u64, iterations: usize, dataset: DataSpec) -> Self {
        TrainConfig {
            mode,
            lr,
            seed,
            iterations,
            dataset,
            data_seed: seed,
            pool_size: DEFAULT_POOL_SIZE,
            receive_timeout_ms: DEFAULT_RECEIVE_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortEntry {
    pub node: usize,
    pub host: String,
    pub port: u16,
}

/// Answer to one [`InformationBook::query`] key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum QueryValue {
    Count(usize),
    Layer {
        #[serde(rename = "type")]
        kind: String,
        width: Option<usize>,
        height: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationBook {
    pub model: ModelSpec,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub plan: CommPlan,
    pub routes: Vec<Route>,
    pub partition: Partition,
    pub layout: NodeLayout,
    pub ports: Vec<PortEntry>,
}

impl InformationBook {
    /// Plans the run. With `base_port`, node `i` listens on
    /// `base_port + i`; otherwise on the port of its endpoint.
    pub fn build(
        model: ModelSpec,
        cluster: ClusterConfig,
        train: TrainConfig,
        base_port: Option<u16>,
    ) -> Result<Self, CoordinatorError> {
        model.validate()?;
        cluster.validate()?;
        let plan = train.mode.plan(&model, &cluster);
        let routes = train.mode.routes(&model, &plan);
        let policies: Vec<_> = routes.iter().map(|r| r.chunk_policy()).collect();
        let partition = partition_with(&model, &cluster, &policies);
        let layout = cluster.layout();
        let ports = assign_ports(&layout, base_port)?;
        Ok(InformationBook {
            model,
            cluster,
            train,
            plan,
            routes,
            partition,
            layout,
            ports,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("book serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoordinatorError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn num_workers(&self) -> usize {
        self.cluster.num_workers()
    }

    pub fn num_servers(&self) -> usize {
        self.cluster.num_servers()
    }

    pub fn num_syncers(&self) -> usize {
        self.model.num_layers()
    }

    /// Per-worker step scale.
    pub fn scale(&self) -> f32 {
        update_scale(self.train.lr, self.model.batch_size, self.num_workers())
    }

    pub fn routings(&self) -> Vec<LayerRouting> {
        layer_routings(&self.model, &self.routes, &self.partition, self.train.mode)
    }

    /// Scheme the cost model picks for `layer`, independent of the mode.
    pub fn best_scheme(&self, layer: usize) -> Scheme {
        best_scheme(&self.model.layers[layer], &self.model, &self.cluster)
    }

    pub fn query(&self, names: &[&str]) -> Result<Vec<QueryValue>, CoordinatorError> {
        names
            .iter()
            .map(|&name| match name {
                "n_worker" => Ok(QueryValue::Count(self.num_workers())),
                "n_server" => Ok(QueryValue::Count(self.num_servers())),
                "batchsize" => Ok(QueryValue::Count(self.model.batch_size)),
                _ => self
                    .model
                    .layer_by_name(name)
                    .map(|l| QueryValue::Layer {
                        kind: l.kind.as_str().to_string(),
                        width: l.shape.map(|s| s.1),
                        height: l.shape.map(|s| s.0),
                    })
                    .ok_or_else(|| CoordinatorError::UnknownKey(name.to_string())),
            })
            .collect()
    }

    pub fn endpoint(&self, node: usize) -> String {
        let p = &self.ports[node];
        format!("{}:{}", p.host, p.port)
    }
}

fn assign_ports(layout: &NodeLayout, base_port: Option<u16>) -> Result<Vec<PortEntry>, CoordinatorError> {
    let mut out: Vec<PortEntry> = Vec::with_capacity(layout.num_nodes());
    for (node, ep) in layout.nodes.iter().enumerate() {
        let (host, own) = split_endpoint(ep)?;
        let port = match base_port {
            Some(b) => u16::try_from(b as usize + node)
                .map_err(|_| CoordinatorError::Ports(format!("base port {b} + {node} overflows")))?,
            None => own,
        };
        if let Some(other) = out.iter().find(|p| p.host == host && p.port == port) {
            return Err(CoordinatorError::Ports(format!(
                "nodes {} and {node} both use {host}:{port}",
                other.node
            )));
        }
        out.push(PortEntry {
            node,
            host: host.to_string(),
            port,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LayerSpec;

    fn train() -> TrainConfig {
        TrainConfig::new(SyncMode::Hybrid, 0.1, 0, 10, "synthetic:64:8:2".parse().unwrap())
    }

    fn two_layers() -> ModelSpec {
        ModelSpec::new(
            vec![
                LayerSpec::fully_connected(0, "fc1", 4, 8),
                LayerSpec::fully_connected(1, "fc2", 2, 4),
            ],
            4,
        )
        .unwrap()
    }

    #[test]
    fn small_book() {
        let b = InformationBook::build(two_layers(), ClusterConfig::colocated(1, 1), train(), Some(9000)).unwrap();
        assert_eq!(b.num_syncers(), 2);
        assert_eq!(b.routings().len(), 2);
        assert_eq!(b.routes, vec![Route::Sfb, Route::Sfb]);
        assert_eq!(b.partition.num_chunks(), 0);
        let ps = TrainConfig {
            mode: SyncMode::Ps,
            ..train()
        };
        let b = InformationBook::build(two_layers(), ClusterConfig::colocated(1, 1), ps, Some(9000)).unwrap();
        assert_eq!(b.partition.num_chunks(), 2);
        assert_eq!(
            b.ports,
            vec![PortEntry {
                node: 0,
                host: "node0".into(),
                port: 9000
            }]
        );
    }

    #[test]
    fn books_are_deterministic_and_roundtrip() {
        let c = ClusterConfig::colocated(3, 2);
        let a = InformationBook::build(two_layers(), c.clone(), train(), Some(7100)).unwrap();
        let b = InformationBook::build(two_layers(), c, train(), Some(7100)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = InformationBook::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), a.to_bytes());
        for l in 0..2 {
            assert_eq!(back.best_scheme(l), a.best_scheme(l));
        }
    }

    #[test]
    fn query_answers_from_the_book() {
        let model = ModelSpec::new(vec![LayerSpec::fully_connected(0, "fc6", 4096, 4096)], 32).unwrap();
        let b = InformationBook::build(model, ClusterConfig::colocated(8, 8), train(), None).unwrap();
        assert_eq!(
            b.query(&["n_worker", "n_server", "batchsize"]).unwrap(),
            vec![QueryValue::Count(8), QueryValue::Count(8), QueryValue::Count(32)]
        );
        let layer = b.query(&["fc6"]).unwrap();
        assert_eq!(
            serde_json::to_string(&layer[0]).unwrap(),
            r#"{"type":"fc","width":4096,"height":4096}"#
        );
        assert!(matches!(b.query(&["nope"]), Err(CoordinatorError::UnknownKey(_))));
        assert_eq!(b.best_scheme(0), Scheme::Sfb);
    }

    #[test]
    fn port_collisions_are_rejected() {
        let mut c = ClusterConfig::colocated(2, 1);
        c.workers = vec!["h:7000".into(), "h:7001".into()];
        c.servers = vec!["h:7001".into()];
        let lay = c.layout();
        assert_eq!(lay.num_nodes(), 2);
        assert!(assign_ports(&lay, None).is_ok());
        assert!(assign_ports(&lay, Some(7000)).is_ok());
        c.workers = vec!["h:7000".into(), "h:7000".into()];
        c.servers = vec!["h2:7000".into()];
        let lay = c.layout();
        assert!(matches!(assign_ports(&lay, None), Err(CoordinatorError::Ports(_))));
        assert_eq!(assign_ports(&lay, Some(8000)).unwrap()[1].port, 8001);
    }
}
