//! Model, layer and cluster descriptions shared by every other module.
//!
//! Both documents are JSON. A model looks like
//!
//! ```text
//! {"batch_size": 32,
//!  "layers": [{"name": "conv1", "kind": "opaque", "param_count": 1792},
//!             {"name": "fc6", "kind": "fc", "rows": 4096, "cols": 25088}]}
//! ```
//!
//! and a cluster like
//!
//! ```text
//! {"workers": ["10.0.0.1:7000", "10.0.0.2:7000"],
//!  "servers": ["10.0.0.1:7000"], "chunk_bytes": 2097152, "bandwidth_mbps": 10000}
//! ```
//!
//! `rows` is the output dimension M and `cols` the input dimension N of a
//! layer, so an FC layer maps an N-vector to an M-vector.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per parameter element. Parameters are IEEE-754 binary32.
pub const ELEMENT_BYTES: usize = 4;

/// Default KV chunk size: 2 MiB.
pub const DEFAULT_CHUNK_BYTES: usize = 2 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid model: {0}")]
    Semantic(String),
    #[error("invalid cluster: {0}")]
    Cluster(String),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    // Type errors and unknown fields land here too; serde still knows the
    // position.
    fn from_json(err: serde_json::Error) -> Self {
        ModelError::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    /// Dense layer whose per-sample weight gradient is rank one.
    FullyConnected,
    /// Any other layer (convolutions, normalization, ...); always synchronized
    /// through the parameter server.
    Indecomposable,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::FullyConnected => "fc",
            LayerKind::Indecomposable => "opaque",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    /// `(rows, cols)`; always present for FC layers, optional for opaque ones.
    pub shape: Option<(usize, usize)>,
    pub param_count: usize,
}

impl LayerSpec {
    pub fn fully_connected(index: usize, name: impl Into<String>, rows: usize, cols: usize) -> Self {
        LayerSpec {
            index,
            name: name.into(),
            kind: LayerKind::FullyConnected,
            shape: Some((rows, cols)),
            param_count: rows * cols,
        }
    }

    pub fn opaque(index: usize, name: impl Into<String>, param_count: usize) -> Self {
        LayerSpec {
            index,
            name: name.into(),
            kind: LayerKind::Indecomposable,
            shape: None,
            param_count,
        }
    }

    /// An opaque layer that still has a dense shape, so the reference engine
    /// can execute it while the planner treats it as indecomposable.
    pub fn opaque_dense(index: usize, name: impl Into<String>, rows: usize, cols: usize) -> Self {
        LayerSpec {
            index,
            name: name.into(),
            kind: LayerKind::Indecomposable,
            shape: Some((rows, cols)),
            param_count: rows * cols,
        }
    }

    pub fn is_fc(&self) -> bool {
        self.kind == LayerKind::FullyConnected
    }

    /// Output dimension M. Opaque layers without a shape report `param_count`.
    pub fn rows(&self) -> usize {
        self.shape.map(|s| s.0).unwrap_or(self.param_count)
    }

    /// Input dimension N. Opaque layers without a shape report 1.
    pub fn cols(&self) -> usize {
        self.shape.map(|s| s.1).unwrap_or(1)
    }

    pub fn bytes(&self) -> usize {
        self.param_count * ELEMENT_BYTES
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub batch_size: usize,
}

/// `(start, len)` of one layer in the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub len: usize,
}

impl LayerRange {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    batch_size: usize,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: String,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    param_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Fc,
    Opaque,
}

/// Parses and validates a model document.
pub fn parse_model(text: &str) -> Result<ModelSpec, ModelError> {
    let raw: RawModel = serde_json::from_str(text).map_err(ModelError::from_json)?;
    ModelSpec::from_raw(raw)
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>, batch_size: usize) -> Result<Self, ModelError> {
        let spec = ModelSpec { layers, batch_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_model(&text)
    }

    fn from_raw(raw: RawModel) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(raw.layers.len());
        for (index, l) in raw.layers.into_iter().enumerate() {
            let shape = match (l.rows, l.cols) {
                (Some(r), Some(c)) => Some((r, c)),
                (None, None) => None,
                _ => {
                    return Err(ModelError::Semantic(format!(
                        "layer '{}': rows and cols must be given together",
                        l.name
                    )))
                }
            };
            let layer = match l.kind {
                RawKind::Fc => {
                    let (rows, cols) = shape
                        .ok_or_else(|| ModelError::Semantic(format!("fc layer '{}' needs rows and cols", l.name)))?;
                    if let Some(pc) = l.param_count {
                        if pc != rows * cols {
                            return Err(ModelError::Semantic(format!(
                                "fc layer '{}': param_count {pc} != rows*cols {}",
                                l.name,
                                rows * cols
                            )));
                        }
                    }
                    LayerSpec::fully_connected(index, l.name, rows, cols)
                }
                RawKind::Opaque => {
                    let param_count = match (l.param_count, shape) {
                        (Some(pc), _) => pc,
                        (None, Some((r, c))) => r * c,
                        (None, None) => {
                            return Err(ModelError::Semantic(format!(
                                "opaque layer '{}' needs param_count",
                                l.name
                            )))
                        }
                    };
                    LayerSpec {
                        index,
                        name: l.name,
                        kind: LayerKind::Indecomposable,
                        shape,
                        param_count,
                    }
                }
            };
            layers.push(layer);
        }
        ModelSpec::new(layers, raw.batch_size)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Semantic("model has no layers".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Semantic("batch_size must be at least 1".into()));
        }
        let mut names = HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                return Err(ModelError::Semantic(format!(
                    "layer '{}' has index {} at position {i}",
                    l.name, l.index
                )));
            }
            if l.name.is_empty() {
                return Err(ModelError::Semantic(format!("layer {i} has an empty name")));
            }
            if !names.insert(l.name.as_str()) {
                return Err(ModelError::Semantic(format!("duplicate layer name '{}'", l.name)));
            }
            if l.param_count == 0 {
                return Err(ModelError::Semantic(format!("layer '{}' has zero parameters", l.name)));
            }
            if let Some((r, c)) = l.shape {
                if r == 0 || c == 0 {
                    return Err(ModelError::Semantic(format!("layer '{}' has a zero dimension", l.name)));
                }
                if r * c != l.param_count {
                    return Err(ModelError::Semantic(format!(
                        "layer '{}': param_count {} != rows*cols {}",
                        l.name,
                        l.param_count,
                        r * c
                    )));
                }
            } else if l.is_fc() {
                return Err(ModelError::Semantic(format!("fc layer '{}' has no shape", l.name)));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Serializes back into the document format accepted by [`parse_model`].
    pub fn to_json(&self) -> String {
        let raw = RawModel {
            batch_size: self.batch_size,
            layers: self
                .layers
                .iter()
                .map(|l| RawLayer {
                    name: l.name.clone(),
                    kind: match l.kind {
                        LayerKind::FullyConnected => RawKind::Fc,
                        LayerKind::Indecomposable => RawKind::Opaque,
                    },
                    rows: l.shape.map(|s| s.0),
                    cols: l.shape.map(|s| s.1),
                    param_count: match l.kind {
                        LayerKind::Indecomposable if l.shape.is_none() => Some(l.param_count),
                        _ => None,
                    },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("model serializes")
    }

    /// Checks that the layers form a dense chain the reference engine can run.
    pub fn check_dense_chain(&self) -> Result<(), ModelError> {
        let mut prev_rows: Option<usize> = None;
        for l in &self.layers {
            let (rows, cols) = l
                .shape
                .ok_or_else(|| ModelError::Semantic(format!("layer '{}' has no dense shape", l.name)))?;
            if let Some(p) = prev_rows {
                if p != cols {
                    return Err(ModelError::Semantic(format!(
                        "layer '{}' expects {cols} inputs but previous layer produces {p}",
                        l.name
                    )));
                }
            }
            prev_rows = Some(rows);
        }
        Ok(())
    }
}

/// Per-layer placement in the global flattened parameter vector.
pub fn flatten_offsets(model: &ModelSpec) -> Vec<LayerRange> {
    let mut start = 0;
    model
        .layers
        .iter()
        .map(|l| {
            let r = LayerRange {
                start,
                len: l.param_count,
            };
            start += l.param_count;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub workers: Vec<String>,
    pub servers: Vec<String>,
    pub bandwidth_bits_per_sec: Option<f64>,
    pub chunk_bytes: usize,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawCluster {
    workers: Vec<String>,
    servers: Vec<String>,
    #[serde(default)]
    chunk_bytes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bandwidth_mbps: Option<f64>,
}

pub fn parse_cluster(text: &str) -> Result<ClusterConfig, ModelError> {
    let raw: RawCluster = serde_json::from_str(text).map_err(ModelError::from_json)?;
    let cfg = ClusterConfig {
        workers: raw.workers,
        servers: raw.servers,
        bandwidth_bits_per_sec: raw.bandwidth_mbps.map(|m| m * 1e6),
        chunk_bytes: raw.chunk_bytes.unwrap_or(DEFAULT_CHUNK_BYTES),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ClusterConfig {
    /// A cluster with `p1` workers and `p2` servers, servers co-located on
    /// the first `p2` worker nodes when `p2 <= p1`. Endpoints are synthetic.
    pub fn colocated(p1: usize, p2: usize) -> Self {
        let workers: Vec<String> = (0..p1).map(|i| format!("node{i}:7000")).collect();
        let servers = (0..p2).map(|i| format!("node{i}:7000")).collect();
        ClusterConfig {
            workers,
            servers,
            bandwidth_bits_per_sec: None,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        }
    }

    /// `p1` worker nodes plus `p2` distinct server-only nodes.
    pub fn disjoint(p1: usize, p2: usize) -> Self {
        ClusterConfig {
            workers: (0..p1).map(|i| format!("worker{i}:7000")).collect(),
            servers: (0..p2).map(|i| format!("server{i}:7000")).collect(),
            bandwidth_bits_per_sec: None,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        }
    }

    pub fn with_chunk_bytes(mut self, chunk_bytes: usize) -> Self {
        self.chunk_bytes = chunk_bytes;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_cluster(&text)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.workers.is_empty() {
            return Err(ModelError::Cluster("at least one worker is required".into()));
        }
        if self.servers.is_empty() {
            return Err(ModelError::Cluster("at least one server is required".into()));
        }
        if self.chunk_bytes < ELEMENT_BYTES {
            return Err(ModelError::Cluster(format!(
                "chunk_bytes {} is smaller than one parameter",
                self.chunk_bytes
            )));
        }
        for list in [&self.workers, &self.servers] {
            let mut seen = HashSet::new();
            for ep in list.iter() {
                split_endpoint(ep)?;
                if !seen.insert(ep) {
                    return Err(ModelError::Cluster(format!("endpoint {ep} listed twice")));
                }
            }
        }
        if let Some(bw) = self.bandwidth_bits_per_sec {
            if bw.is_nan() || bw <= 0.0 {
                return Err(ModelError::Cluster("bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    /// Elements per full KV chunk.
    pub fn chunk_elements(&self) -> usize {
        self.chunk_bytes / ELEMENT_BYTES
    }

    /// Physical nodes: workers in order, then server endpoints that are not
    /// also workers.
    pub fn layout(&self) -> NodeLayout {
        let mut nodes: Vec<String> = self.workers.clone();
        let mut server_nodes = Vec::with_capacity(self.servers.len());
        for s in &self.servers {
            match nodes.iter().position(|n| n == s) {
                Some(i) => server_nodes.push(i),
                None => {
                    nodes.push(s.clone());
                    server_nodes.push(nodes.len() - 1);
                }
            }
        }
        NodeLayout {
            worker_nodes: (0..self.workers.len()).collect(),
            server_nodes,
            nodes,
        }
    }

    pub fn to_json(&self) -> String {
        let raw = RawCluster {
            workers: self.workers.clone(),
            servers: self.servers.clone(),
            chunk_bytes: Some(self.chunk_bytes),
            bandwidth_mbps: self.bandwidth_bits_per_sec.map(|b| b / 1e6),
        };
        serde_json::to_string_pretty(&raw).expect("cluster serializes")
    }
}

/// Splits `host:port`.
pub fn split_endpoint(ep: &str) -> Result<(&str, u16), ModelError> {
    let (host, port) = ep
        .rsplit_once(':')
        .ok_or_else(|| ModelError::Cluster(format!("endpoint '{ep}' is not host:port")))?;
    if host.is_empty() {
        return Err(ModelError::Cluster(format!("endpoint '{ep}' has no host")));
    }
    let port = port
        .parse::<u16>()
        .map_err(|_| ModelError::Cluster(format!("endpoint '{ep}' has a bad port")))?;
    Ok((host, port))
}

/// Mapping of worker and server roles onto physical nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLayout {
    pub nodes: Vec<String>,
    /// `worker_nodes[w]` is the node hosting worker `w`.
    pub worker_nodes: Vec<usize>,
    /// `server_nodes[s]` is the node hosting server shard `s`.
    pub server_nodes: Vec<usize>,
}

impl NodeLayout {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn worker_on(&self, node: usize) -> Option<usize> {
        self.worker_nodes.iter().position(|&n| n == node)
    }

    pub fn server_on(&self, node: usize) -> Option<usize> {
        self.server_nodes.iter().position(|&n| n == node)
    }
}
