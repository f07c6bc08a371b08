//! Order-flow graph data model and on-disk dataset format.
//!
//! A dataset is one shared global graph plus many per-minute samples; each
//! sample carries an ongoing graph of currently open orders, a supply and
//! environment feature vector, the oracle pressure label, and the truth
//! future adjacency for graph-learning supervision.
//!
//! Files are UTF-8 JSON lines: a header line, the global graph, then one
//! sample per line. serde_json prints f64 with round-trip precision, so a
//! load of a save is value-exact. Input-byte accounting uses a separate
//! canonical little-endian binary encoding so payload sizes do not depend
//! on the debug-friendly text format.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &str = "ACADATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {DATASET_MAGIC:?}, found {found:?}")]
    BadMagic { found: String },
    #[error("unsupported dataset version {found} (supported: {DATASET_VERSION})")]
    Version { found: u32 },
    #[error("truncated dataset file: missing {missing}")]
    Truncated { missing: &'static str },
    #[error("schema violation on line {line}: {source}")]
    Schema {
        line: usize,
        source: serde_json::Error,
    },
    #[error("unknown input representation {tag:?} (expected \"aca_two_graph\" or \"sequence_<k>_slices\")")]
    UnknownRepresentation { tag: String },
    #[error("sequence representation needs {expected} slices, got {got}")]
    SliceCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Global,
    Ongoing,
    TruthFuture,
}

/// Area-of-interest node: a geographic cell with a fixed-width feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiNode {
    pub id: u32,
    pub features: Vec<f64>,
}

/// Directed order flow between two AOIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub src: u32,
    pub dst: u32,
    pub order_count: f64,
    pub avg_delivery_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub kind: GraphKind,
    pub nodes: Vec<AoiNode>,
    pub edges: Vec<FlowEdge>,
}

impl FlowGraph {
    pub fn node_ids(&self) -> BTreeSet<u32> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }
}

/// Supply and environment features for one (district, minute) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplyEnvVector {
    pub values: Vec<f64>,
}

/// One forecasting record: the model inputs at a given minute plus the
/// oracle label and truth adjacency for that minute's five-minute window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub district_id: u32,
    pub minute_index: u32,
    pub ongoing: FlowGraph,
    pub global_ref: u32,
    pub f: SupplyEnvVector,
    pub label_pressure: f64,
    /// Dense row-major M×M matrix over global node indices:
    /// order count × mean delivery time per directed pair.
    pub a_truth: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub f_aoi: u32,
    pub n_f: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub global: FlowGraph,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(f_aoi: u32, n_f: u32, global: FlowGraph, samples: Vec<Sample>) -> Self {
        Dataset {
            header: DatasetHeader {
                magic: DATASET_MAGIC.to_string(),
                version: DATASET_VERSION,
                f_aoi,
                n_f,
            },
            global,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ── validation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FeatureLength { node: u32, got: usize, expected: usize },
    DuplicateNodeId { id: u32 },
    DanglingEdge { src: u32, dst: u32 },
    OngoingNotInGlobal { id: u32 },
    FeatureVectorLength { got: usize, expected: usize },
    NonPositiveLabel { value: f64 },
    TruthShape { rows: usize, expected: usize },
    TruthNegativeEntry { row: usize, col: usize, value: f64 },
    NegativeEdgeAttribute { src: u32, dst: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FeatureLength { node, got, expected } => {
                write!(f, "node {node}: feature length {got}, expected {expected}")
            }
            Violation::DuplicateNodeId { id } => write!(f, "duplicate node id {id}"),
            Violation::DanglingEdge { src, dst } => {
                write!(f, "edge {src}->{dst} references a missing node")
            }
            Violation::OngoingNotInGlobal { id } => {
                write!(f, "ongoing node {id} is absent from the global graph")
            }
            Violation::FeatureVectorLength { got, expected } => {
                write!(f, "supply/env vector length {got}, expected {expected}")
            }
            Violation::NonPositiveLabel { value } => {
                write!(f, "label pressure {value} is not positive")
            }
            Violation::TruthShape { rows, expected } => {
                write!(f, "truth adjacency is {rows} rows, expected {expected}")
            }
            Violation::TruthNegativeEntry { row, col, value } => {
                write!(f, "truth adjacency [{row}][{col}] = {value} is negative")
            }
            Violation::NegativeEdgeAttribute { src, dst } => {
                write!(f, "edge {src}->{dst} has a negative attribute")
            }
        }
    }
}

fn validate_graph(graph: &FlowGraph, f_aoi: usize, out: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for node in &graph.nodes {
        if node.features.len() != f_aoi {
            out.push(Violation::FeatureLength {
                node: node.id,
                got: node.features.len(),
                expected: f_aoi,
            });
        }
        if !seen.insert(node.id) {
            out.push(Violation::DuplicateNodeId { id: node.id });
        }
    }
    for edge in &graph.edges {
        if !seen.contains(&edge.src) || !seen.contains(&edge.dst) {
            out.push(Violation::DanglingEdge {
                src: edge.src,
                dst: edge.dst,
            });
        }
        if edge.order_count < 0.0 || edge.avg_delivery_time < 0.0 {
            out.push(Violation::NegativeEdgeAttribute {
                src: edge.src,
                dst: edge.dst,
            });
        }
    }
}

/// Checks every structural invariant of a sample against its dataset's
/// header and shared global graph. Reports violations instead of failing on
/// the first.
pub fn validate(sample: &Sample, global: &FlowGraph, header: &DatasetHeader) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_graph(&sample.ongoing, header.f_aoi as usize, &mut out);
    let global_ids = global.node_ids();
    for node in &sample.ongoing.nodes {
        if !global_ids.contains(&node.id) {
            out.push(Violation::OngoingNotInGlobal { id: node.id });
        }
    }
    if sample.f.values.len() != header.n_f as usize {
        out.push(Violation::FeatureVectorLength {
            got: sample.f.values.len(),
            expected: header.n_f as usize,
        });
    }
    if !(sample.label_pressure > 0.0) {
        out.push(Violation::NonPositiveLabel {
            value: sample.label_pressure,
        });
    }
    let m = global.nodes.len();
    if sample.a_truth.len() != m || sample.a_truth.iter().any(|row| row.len() != m) {
        out.push(Violation::TruthShape {
            rows: sample.a_truth.len(),
            expected: m,
        });
    }
    for (i, row) in sample.a_truth.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v < 0.0 {
                out.push(Violation::TruthNegativeEntry {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    out
}

/// Validates the shared global graph itself.
pub fn validate_global(global: &FlowGraph, header: &DatasetHeader) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_graph(global, header.f_aoi as usize, &mut out);
    out
}

// ── dataset file IO ──────────────────────────────────────────────────

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &dataset.header).map_err(io_from_json)?;
    w.write_all(b"\n")?;
    serde_json::to_writer(&mut w, &dataset.global).map_err(io_from_json)?;
    w.write_all(b"\n")?;
    for sample in &dataset.samples {
        serde_json::to_writer(&mut w, sample).map_err(io_from_json)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn io_from_json(e: serde_json::Error) -> DataError {
    DataError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header_line = lines
        .next()
        .ok_or(DataError::Truncated { missing: "header" })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|source| DataError::Schema { line: 1, source })?;
    if header.magic != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            found: header.magic,
        });
    }
    if header.version != DATASET_VERSION {
        return Err(DataError::Version {
            found: header.version,
        });
    }

    let global_line = lines.next().ok_or(DataError::Truncated {
        missing: "global graph",
    })??;
    let global: FlowGraph = serde_json::from_str(&global_line)
        .map_err(|source| DataError::Schema { line: 2, source })?;

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|source| DataError::Schema {
            line: i + 3,
            source,
        })?;
        samples.push(sample);
    }
    Ok(Dataset {
        header,
        global,
        samples,
    })
}

// ── canonical binary encoding and input-byte accounting ─────────────

/// Model-input payload representation whose serialized size is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRepr {
    /// Ongoing graph + global graph + supply/env vector.
    AcaTwoGraph,
    /// K past time-slice graphs + supply/env vector, the payload shape of
    /// sequence-based spatiotemporal baselines.
    SequenceSlices(usize),
}

impl InputRepr {
    pub fn parse(tag: &str) -> Result<Self, DataError> {
        if tag == "aca_two_graph" {
            return Ok(InputRepr::AcaTwoGraph);
        }
        if let Some(rest) = tag.strip_prefix("sequence_") {
            if let Some(k) = rest.strip_suffix("_slices") {
                if let Ok(k) = k.parse::<usize>() {
                    if k > 0 {
                        return Ok(InputRepr::SequenceSlices(k));
                    }
                }
            }
        }
        Err(DataError::UnknownRepresentation {
            tag: tag.to_string(),
        })
    }
}

impl fmt::Display for InputRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputRepr::AcaTwoGraph => write!(f, "aca_two_graph"),
            InputRepr::SequenceSlices(k) => write!(f, "sequence_{k}_slices"),
        }
    }
}

/// Fixed leading bytes of every canonical payload: representation tag and
/// encoding version, both u32.
pub const PAYLOAD_HEADER_BYTES: usize = 8;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Canonical graph encoding: u32 node count; each node as u32 id plus its
/// f64 features; u32 edge count; each edge as u32 src, u32 dst, f64 order
/// count, f64 average delivery time. Little-endian, no padding.
pub fn encode_graph(graph: &FlowGraph, buf: &mut Vec<u8>) {
    put_u32(buf, graph.nodes.len() as u32);
    for node in &graph.nodes {
        put_u32(buf, node.id);
        for &v in &node.features {
            put_f64(buf, v);
        }
    }
    put_u32(buf, graph.edges.len() as u32);
    for edge in &graph.edges {
        put_u32(buf, edge.src);
        put_u32(buf, edge.dst);
        put_f64(buf, edge.order_count);
        put_f64(buf, edge.avg_delivery_time);
    }
}

pub fn encoded_graph_len(graph: &FlowGraph) -> usize {
    let mut buf = Vec::new();
    encode_graph(graph, &mut buf);
    buf.len()
}

fn encode_features(f: &SupplyEnvVector, buf: &mut Vec<u8>) {
    put_u32(buf, f.values.len() as u32);
    for &v in &f.values {
        put_f64(buf, v);
    }
}

fn encode_aca_payload(sample: &Sample, global: &FlowGraph) -> Vec<u8> {
    let mut buf = Vec::new();
    put_u32(&mut buf, 1); // representation tag
    put_u32(&mut buf, 1); // encoding version
    encode_graph(global, &mut buf);
    encode_graph(&sample.ongoing, &mut buf);
    encode_features(&sample.f, &mut buf);
    buf
}

fn encode_sequence_payload(slices: &[FlowGraph], f: &SupplyEnvVector) -> Vec<u8> {
    let mut buf = Vec::new();
    put_u32(&mut buf, 2);
    put_u32(&mut buf, slices.len() as u32);
    for slice in slices {
        encode_graph(slice, &mut buf);
    }
    encode_features(f, &mut buf);
    buf
}

/// Exact serialized byte count of the model-input payload for `sample`
/// under the requested representation. Sequence slices are synthesized by
/// the world module and passed in; `AcaTwoGraph` ignores them.
pub fn input_bytes(
    sample: &Sample,
    global: &FlowGraph,
    repr: InputRepr,
    slices: &[FlowGraph],
) -> Result<usize, DataError> {
    match repr {
        InputRepr::AcaTwoGraph => Ok(encode_aca_payload(sample, global).len()),
        InputRepr::SequenceSlices(k) => {
            if slices.len() != k {
                return Err(DataError::SliceCount {
                    expected: k,
                    got: slices.len(),
                });
            }
            Ok(encode_sequence_payload(slices, &sample.f).len())
        }
    }
}
