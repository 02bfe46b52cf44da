//! Layered-graph data model, validation, exact path enumeration, synthetic
//! graph generation and dataset construction.
//!
//! A layered graph partitions its vertices into ordered non-empty layers
//! `1..=L`, every edge goes from layer `l` to layer `l+1`, the first layer is a
//! singleton, and a vertex below the last layer with zero out-degree must also
//! have zero in-degree (no reachable dead ends). A path picks one vertex per
//! layer with every consecutive pair an edge.
//!
//! Vertex ids are dense integers `0..V` assigned layer by layer; human-readable
//! labels are kept as metadata and used by all file formats. Adjacency lists
//! are sorted ascending by destination id, which fixes the edge order indexing
//! PALM rows and makes encodings and checkpoints portable.

use crate::seeds;
use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

/// Dense vertex id, assigned layer by layer.
pub type VertexId = usize;

/// Format tag written into graph files.
pub const GRAPH_FORMAT: &str = "layered-graph/v1";
/// Format tag written into dataset files.
pub const DATASET_FORMAT: &str = "path-dataset/v1";
/// Default guard on exact path enumeration.
pub const DEFAULT_PATH_CAP: usize = 1 << 22;

/// Errors from graph construction, synthesis and I/O.
#[derive(thiserror::Error, Debug)]
pub enum GraphError {
    #[error("candidate graph is not a layered graph:\n{0}")]
    Invalid(ValidationReport),
    #[error("path enumeration exceeded cap of {cap} (count was {reached} when aborted)")]
    PathCapExceeded { cap: usize, reached: usize },
    #[error("failed to synthesize a valid pruned graph after {attempts} attempts")]
    SynthesisFailed { attempts: u32 },
    #[error("requested {requested} distinct paths but the graph only has {available}")]
    CountTooLarge { requested: usize, available: usize },
    #[error("unknown vertex label `{0}`")]
    UnknownLabel(String),
    #[error("sequence is not a valid path: {0}")]
    InvalidPath(String),
    #[error("widths must start with a singleton layer and contain no zeros, got {0:?}")]
    BadWidths(Vec<usize>),
    #[error("dataset references graph fingerprint {expected} but got {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A single violated layered-graph condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Fewer than two layers.
    TooFewLayers { found: usize },
    /// A layer with no vertices.
    EmptyLayer { layer: usize },
    /// The first layer holds more than one vertex.
    FirstLayerNotSingleton { size: usize },
    /// The same label appears twice across layers.
    DuplicateLabel { label: String },
    /// An edge endpoint is not a declared vertex.
    UnknownEndpoint { src: String, dst: String },
    /// An edge whose endpoints are not in adjacent layers.
    CrossLayerEdge { src: String, dst: String, src_layer: usize, dst_layer: usize },
    /// The same edge listed twice.
    DuplicateEdge { src: String, dst: String },
    /// A vertex below the last layer with zero out-degree but nonzero in-degree.
    DeadEnd { label: String, layer: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewLayers { found } => write!(f, "too few layers: {found} < 2"),
            Violation::EmptyLayer { layer } => write!(f, "layer {layer} is empty"),
            Violation::FirstLayerNotSingleton { size } => {
                write!(f, "first layer must be a singleton, has {size} vertices")
            }
            Violation::DuplicateLabel { label } => write!(f, "duplicate vertex label `{label}`"),
            Violation::UnknownEndpoint { src, dst } => {
                write!(f, "edge ({src}, {dst}) references an undeclared vertex")
            }
            Violation::CrossLayerEdge { src, dst, src_layer, dst_layer } => write!(
                f,
                "edge ({src}, {dst}) crosses layers {src_layer} -> {dst_layer} (must be adjacent)"
            ),
            Violation::DuplicateEdge { src, dst } => write!(f, "duplicate edge ({src}, {dst})"),
            Violation::DeadEnd { label, layer } => write!(
                f,
                "vertex `{label}` in layer {layer} has zero out-degree but incoming edges"
            ),
        }
    }
}

/// Outcome of [`validate`]: pass, or the list of violated conditions.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "- {v}")?;
            }
            Ok(())
        }
    }
}

/// Raw candidate structure, as read from or written to a graph file.
///
/// `layers` lists vertex labels layer by layer; `edges` lists `[src, dst]`
/// label pairs. This form carries no invariants; [`validate`] checks them and
/// [`LayeredGraph::from_document`] builds the canonical in-memory graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDocument {
    pub format: String,
    pub layers: Vec<Vec<String>>,
    pub edges: Vec<(String, String)>,
}

/// Checks every layered-graph condition on a candidate; violations are
/// reported, not thrown.
pub fn validate(doc: &GraphDocument) -> ValidationReport {
    let mut report = ValidationReport::default();
    let num_layers = doc.layers.len();
    if num_layers < 2 {
        report.violations.push(Violation::TooFewLayers { found: num_layers });
    }
    for (l, layer) in doc.layers.iter().enumerate() {
        if layer.is_empty() {
            report.violations.push(Violation::EmptyLayer { layer: l + 1 });
        }
    }
    if let Some(first) = doc.layers.first() {
        if first.len() != 1 {
            report.violations.push(Violation::FirstLayerNotSingleton { size: first.len() });
        }
    }

    let mut layer_of: HashMap<&str, usize> = HashMap::new();
    for (l, layer) in doc.layers.iter().enumerate() {
        for label in layer {
            if layer_of.insert(label.as_str(), l + 1).is_some() {
                report.violations.push(Violation::DuplicateLabel { label: label.clone() });
            }
        }
    }

    let mut seen_edges: HashMap<(&str, &str), ()> = HashMap::new();
    let mut out_deg: HashMap<&str, usize> = HashMap::new();
    let mut in_deg: HashMap<&str, usize> = HashMap::new();
    for (src, dst) in &doc.edges {
        let (sl, dl) = match (layer_of.get(src.as_str()), layer_of.get(dst.as_str())) {
            (Some(&sl), Some(&dl)) => (sl, dl),
            _ => {
                report
                    .violations
                    .push(Violation::UnknownEndpoint { src: src.clone(), dst: dst.clone() });
                continue;
            }
        };
        if dl != sl + 1 {
            report.violations.push(Violation::CrossLayerEdge {
                src: src.clone(),
                dst: dst.clone(),
                src_layer: sl,
                dst_layer: dl,
            });
            continue;
        }
        if seen_edges.insert((src.as_str(), dst.as_str()), ()).is_some() {
            report.violations.push(Violation::DuplicateEdge { src: src.clone(), dst: dst.clone() });
            continue;
        }
        *out_deg.entry(src.as_str()).or_default() += 1;
        *in_deg.entry(dst.as_str()).or_default() += 1;
    }

    for (l, layer) in doc.layers.iter().enumerate() {
        if l + 1 == num_layers {
            break;
        }
        for label in layer {
            let od = out_deg.get(label.as_str()).copied().unwrap_or(0);
            let id = in_deg.get(label.as_str()).copied().unwrap_or(0);
            if od == 0 && id > 0 {
                report.violations.push(Violation::DeadEnd { label: label.clone(), layer: l + 1 });
            }
        }
    }
    report
}

/// A validated layered graph with dense ids and canonical adjacency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayeredGraph {
    layers: Vec<Vec<VertexId>>,
    adjacency: Vec<Vec<VertexId>>,
    labels: Vec<String>,
    layer_of: Vec<usize>,
}

impl LayeredGraph {
    /// Builds the canonical graph from a candidate document.
    ///
    /// Dense ids are assigned layer by layer in document order; adjacency
    /// lists are re-sorted ascending by destination id.
    pub fn from_document(doc: &GraphDocument) -> Result<Self, GraphError> {
        let report = validate(doc);
        if !report.is_valid() {
            return Err(GraphError::Invalid(report));
        }
        let mut labels = Vec::new();
        let mut layer_of = Vec::new();
        let mut layers = Vec::with_capacity(doc.layers.len());
        let mut id_of: HashMap<&str, VertexId> = HashMap::new();
        for (l, layer) in doc.layers.iter().enumerate() {
            let mut ids = Vec::with_capacity(layer.len());
            for label in layer {
                let id = labels.len();
                id_of.insert(label.as_str(), id);
                labels.push(label.clone());
                layer_of.push(l);
                ids.push(id);
            }
            layers.push(ids);
        }
        let mut adjacency = vec![Vec::new(); labels.len()];
        for (src, dst) in &doc.edges {
            adjacency[id_of[src.as_str()]].push(id_of[dst.as_str()]);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { layers, adjacency, labels, layer_of })
    }

    /// Emits the canonical document form (edges sorted by `(src, dst)` id).
    pub fn to_document(&self) -> GraphDocument {
        let layers = self
            .layers
            .iter()
            .map(|ids| ids.iter().map(|&v| self.labels[v].clone()).collect())
            .collect();
        let mut edges = Vec::new();
        for (v, dests) in self.adjacency.iter().enumerate() {
            for &u in dests {
                edges.push((self.labels[v].clone(), self.labels[u].clone()));
            }
        }
        GraphDocument { format: GRAPH_FORMAT.to_string(), layers, edges }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Vertex ids of layer `l` (0-based).
    pub fn layer(&self, l: usize) -> &[VertexId] {
        &self.layers[l]
    }

    /// 0-based layer index of a vertex.
    pub fn layer_of(&self, v: VertexId) -> usize {
        self.layer_of[v]
    }

    /// Outgoing edges of `v`, sorted ascending by destination id. The position
    /// of a destination in this slice is the edge's PALM row index.
    pub fn out_edges(&self, v: VertexId) -> &[VertexId] {
        &self.adjacency[v]
    }

    pub fn out_degree(&self, v: VertexId) -> usize {
        self.adjacency[v].len()
    }

    /// Position of edge `(src, dst)` within `out_edges(src)`, if present.
    pub fn edge_index(&self, src: VertexId, dst: VertexId) -> Option<usize> {
        self.adjacency[src].binary_search(&dst).ok()
    }

    pub fn label(&self, v: VertexId) -> &str {
        &self.labels[v]
    }

    pub fn id_of_label(&self, label: &str) -> Option<VertexId> {
        self.labels.iter().position(|l| l == label)
    }

    /// The unique start vertex in layer 1.
    pub fn start_vertex(&self) -> VertexId {
        self.layers[0][0]
    }

    /// SHA-256 of the canonical serialization; checkpoints and datasets refuse
    /// to load against a graph with a different fingerprint.
    pub fn fingerprint(&self) -> String {
        let doc = self.to_document();
        let mut hasher = Sha256::new();
        hasher.update(doc.format.as_bytes());
        for layer in &doc.layers {
            hasher.update(b"|L");
            for label in layer {
                hasher.update(b";");
                hasher.update(label.as_bytes());
            }
        }
        for (src, dst) in &doc.edges {
            hasher.update(b"|E");
            hasher.update(src.as_bytes());
            hasher.update(b">");
            hasher.update(dst.as_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// True iff `seq` has one vertex per layer, respects layer membership, and
    /// every consecutive pair is an edge.
    pub fn is_valid_path(&self, seq: &[VertexId]) -> bool {
        if seq.len() != self.num_layers() {
            return false;
        }
        for (l, &v) in seq.iter().enumerate() {
            if v >= self.num_vertices() || self.layer_of[v] != l {
                return false;
            }
        }
        seq.windows(2).all(|w| self.edge_index(w[0], w[1]).is_some())
    }

    /// All distinct paths in lexicographic vertex-id order, or an error once
    /// more than `cap` paths have been produced.
    pub fn enumerate_paths(&self, cap: usize) -> Result<Vec<Path>, GraphError> {
        let mut out = Vec::new();
        let mut stack = vec![self.start_vertex()];
        self.enumerate_rec(&mut stack, cap, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        stack: &mut Vec<VertexId>,
        cap: usize,
        out: &mut Vec<Path>,
    ) -> Result<(), GraphError> {
        let v = *stack.last().expect("stack never empty");
        if stack.len() == self.num_layers() {
            if out.len() >= cap {
                return Err(GraphError::PathCapExceeded { cap, reached: out.len() + 1 });
            }
            out.push(Path { vertices: stack.clone() });
            return Ok(());
        }
        for &u in &self.adjacency[v] {
            stack.push(u);
            self.enumerate_rec(stack, cap, out)?;
            stack.pop();
        }
        Ok(())
    }

    /// Exact number of distinct paths, by a layer DP (no enumeration).
    pub fn count_paths(&self) -> u128 {
        let mut counts = vec![0u128; self.num_vertices()];
        counts[self.start_vertex()] = 1;
        for layer in &self.layers[..self.num_layers() - 1] {
            for &v in layer {
                if counts[v] == 0 {
                    continue;
                }
                for &u in &self.adjacency[v] {
                    counts[u] += counts[v];
                }
            }
        }
        self.layers[self.num_layers() - 1].iter().map(|&v| counts[v]).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), GraphError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &self.to_document())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path)?;
        let doc: GraphDocument = serde_json::from_reader(std::io::BufReader::new(file))?;
        if doc.format != GRAPH_FORMAT {
            return Err(GraphError::Format {
                what: "graph file",
                detail: format!("unsupported format tag `{}`", doc.format),
            });
        }
        for layer in &doc.layers {
            for label in layer {
                if label.is_empty() || label.contains([',', '#']) || label.contains(char::is_whitespace) {
                    return Err(GraphError::Format {
                        what: "graph file",
                        detail: format!("label `{label}` contains a reserved character"),
                    });
                }
            }
        }
        Self::from_document(&doc)
    }
}

/// One vertex per layer with every consecutive pair an edge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path {
    vertices: Vec<VertexId>,
}

impl Path {
    /// Validates `vertices` against `g`.
    pub fn new(g: &LayeredGraph, vertices: Vec<VertexId>) -> Result<Self, GraphError> {
        if !g.is_valid_path(&vertices) {
            let labels: Vec<&str> =
                vertices.iter().map(|&v| g.labels.get(v).map_or("?", |s| s.as_str())).collect();
            return Err(GraphError::InvalidPath(labels.join(",")));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[VertexId] {
        &self.vertices
    }

    pub fn labels(&self, g: &LayeredGraph) -> String {
        self.vertices.iter().map(|&v| g.label(v)).collect::<Vec<_>>().join(",")
    }
}

/// Builds the layerwise-fully-connected graph for `widths`, removes
/// `floor(prune_fraction * |E|)` edges uniformly at random, then repairs by
/// deleting dead-end vertices to a fixpoint. Retries with derived seeds (up to
/// 64 times) whenever the repair empties a layer or disconnects the start
/// vertex; deterministic given `seed`.
pub fn synth_pruned(
    widths: &[usize],
    prune_fraction: f64,
    seed: u64,
) -> Result<LayeredGraph, GraphError> {
    if widths.len() < 2 || widths[0] != 1 || widths.contains(&0) {
        return Err(GraphError::BadWidths(widths.to_vec()));
    }
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(GraphError::Format {
            what: "prune fraction",
            detail: format!("{prune_fraction} outside [0, 1)"),
        });
    }
    const MAX_ATTEMPTS: u32 = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seeds::rng(seed, seeds::domain::SYNTH_RETRY, attempt as u64);
        if let Some(g) = synth_attempt(widths, prune_fraction, &mut rng) {
            return Ok(g);
        }
    }
    Err(GraphError::SynthesisFailed { attempts: MAX_ATTEMPTS })
}

fn synth_attempt(widths: &[usize], prune_fraction: f64, rng: &mut impl Rng) -> Option<LayeredGraph> {
    // Labels carry the position in the unpruned grid so runs are comparable
    // across prune fractions.
    let labels: Vec<Vec<String>> = widths
        .iter()
        .enumerate()
        .map(|(l, &w)| (0..w).map(|k| format!("v{}_{}", l + 1, k)).collect())
        .collect();
    let mut edges: Vec<(usize, usize, usize)> = Vec::new(); // (layer, src slot, dst slot)
    for l in 0..widths.len() - 1 {
        for a in 0..widths[l] {
            for b in 0..widths[l + 1] {
                edges.push((l, a, b));
            }
        }
    }
    let remove = ((edges.len() as f64) * prune_fraction).floor() as usize;
    edges.shuffle(rng);
    edges.truncate(edges.len() - remove);

    // Repair: drop zero-out-degree vertices below the last layer (and their
    // incoming edges) until the dead-end condition holds.
    let last = widths.len() - 1;
    let mut alive: Vec<Vec<bool>> = widths.iter().map(|&w| vec![true; w]).collect();
    loop {
        let mut changed = false;
        for l in 0..last {
            for a in 0..widths[l] {
                if !alive[l][a] {
                    continue;
                }
                let out = edges
                    .iter()
                    .any(|&(el, ea, eb)| el == l && ea == a && alive[l + 1][eb]);
                if !out {
                    alive[l][a] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    if alive.iter().any(|layer| !layer.iter().any(|&a| a)) {
        return None;
    }
    if !alive[0][0] {
        return None;
    }

    let doc_layers: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            layer.iter().enumerate().filter(|&(a, _)| alive[l][a]).map(|(_, s)| s.clone()).collect()
        })
        .collect();
    let mut doc_edges: Vec<(String, String)> = edges
        .iter()
        .filter(|&&(l, a, b)| alive[l][a] && alive[l + 1][b])
        .map(|&(l, a, b)| (labels[l][a].clone(), labels[l + 1][b].clone()))
        .collect();
    doc_edges.sort();
    let doc = GraphDocument { format: GRAPH_FORMAT.to_string(), layers: doc_layers, edges: doc_edges };
    LayeredGraph::from_document(&doc).ok()
}

/// How many copies each sampled path receives in a nonuniform dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MultiplicityLaw {
    /// Every selected path appears exactly `k` times.
    Constant { k: u32 },
    /// Path drawn at rank `i` (1-based draw order) appears
    /// `max(1, floor(cap / i^exponent))` times.
    Zipf { exponent: f64, cap: u32 },
}

impl Default for MultiplicityLaw {
    fn default() -> Self {
        MultiplicityLaw::Zipf { exponent: 1.1, cap: 64 }
    }
}

impl MultiplicityLaw {
    fn count(&self, rank: usize) -> u32 {
        match *self {
            MultiplicityLaw::Constant { k } => k.max(1),
            MultiplicityLaw::Zipf { exponent, cap } => {
                let raw = (cap as f64) / (rank as f64).powf(exponent);
                (raw.floor() as u32).clamp(1, cap)
            }
        }
    }
}

/// Dataset construction mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetMode {
    /// Every unique path exactly once.
    All,
    /// `count` unique paths drawn without replacement, each replicated per the
    /// multiplicity law.
    Sampled { count: usize, multiplicity: MultiplicityLaw },
}

/// Configuration for [`build_dataset`]; equal specs on equal graphs give
/// equal datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub mode: DatasetMode,
    pub seed: u64,
    /// Advisory train/validation split ratio recorded in the file header.
    pub val_split_hint: f64,
}

impl DatasetSpec {
    pub fn all() -> Self {
        Self { mode: DatasetMode::All, seed: 0, val_split_hint: 0.2 }
    }
}

/// A multiset of paths over a referenced graph; duplicates encode nonuniform
/// frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph_fingerprint: String,
    pub paths: Vec<Path>,
    pub spec: DatasetSpec,
}

/// Builds a dataset from the graph's unique paths.
pub fn build_dataset(g: &LayeredGraph, spec: &DatasetSpec) -> Result<Dataset, GraphError> {
    let unique = g.enumerate_paths(DEFAULT_PATH_CAP)?;
    let paths = match &spec.mode {
        DatasetMode::All => unique,
        DatasetMode::Sampled { count, multiplicity } => {
            if *count > unique.len() {
                return Err(GraphError::CountTooLarge {
                    requested: *count,
                    available: unique.len(),
                });
            }
            let mut rng = seeds::rng(spec.seed, seeds::domain::DATASET, 0);
            let chosen = unique.choose_multiple(&mut rng, *count);
            let mut out = Vec::new();
            for (i, path) in chosen.enumerate() {
                for _ in 0..multiplicity.count(i + 1) {
                    out.push(path.clone());
                }
            }
            out
        }
    };
    Ok(Dataset { graph_fingerprint: g.fingerprint(), paths, spec: spec.clone() })
}

impl Dataset {
    /// Writes one path per line as comma-separated labels, with `#` header
    /// lines carrying the format version and provenance.
    pub fn save(&self, g: &LayeredGraph, path: &std::path::Path) -> Result<(), GraphError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "# format: {DATASET_FORMAT}")?;
        writeln!(w, "# graph_fingerprint: {}", self.graph_fingerprint)?;
        writeln!(w, "# spec: {}", serde_json::to_string(&self.spec)?)?;
        writeln!(w, "# paths: {}", self.paths.len())?;
        for p in &self.paths {
            writeln!(w, "{}", p.labels(g))?;
        }
        Ok(())
    }

    /// Loads and validates a dataset against `g`, rejecting fingerprint
    /// mismatches and invalid paths.
    pub fn load(g: &LayeredGraph, path: &std::path::Path) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let mut spec = DatasetSpec::all();
        let mut fingerprint = g.fingerprint();
        // Headers first, so a fingerprint mismatch is reported before any
        // unknown-label noise from the path lines.
        for line in &lines {
            let Some(rest) = line.trim().strip_prefix('#') else { continue };
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("format:") {
                let v = v.trim();
                if v != DATASET_FORMAT {
                    return Err(GraphError::Format {
                        what: "dataset file",
                        detail: format!("unsupported format tag `{v}`"),
                    });
                }
            } else if let Some(v) = rest.strip_prefix("graph_fingerprint:") {
                fingerprint = v.trim().to_string();
            } else if let Some(v) = rest.strip_prefix("spec:") {
                spec = serde_json::from_str(v.trim())?;
            }
        }
        if fingerprint != g.fingerprint() {
            return Err(GraphError::FingerprintMismatch {
                expected: g.fingerprint(),
                found: fingerprint,
            });
        }
        let id_of: HashMap<&str, VertexId> =
            g.labels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut paths = Vec::new();
        for line in &lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut ids = Vec::new();
            for label in line.split(',') {
                let label = label.trim();
                let id = *id_of
                    .get(label)
                    .ok_or_else(|| GraphError::UnknownLabel(label.to_string()))?;
                ids.push(id);
            }
            paths.push(Path::new(g, ids)?);
        }
        Ok(Dataset { graph_fingerprint: fingerprint, paths, spec })
    }
}
