//! Path encoding as padded adjacency-list matrices.
//!
//! A PALM assigns every vertex a one-hot selection of one of its outgoing
//! edges, padded to the maximum out-degree; vertices with no outgoing edges
//! get all-zero rows. Decoding starts at the layer-1 vertex and follows the
//! selected edges, so every well-formed PALM decodes to a valid path. Rows of
//! vertices off the decoded path are free, which makes the PALM-to-path map
//! many-to-one and onto.
//!
//! Edge `j` of vertex `v` is `graph.out_edges(v)[j]` (destinations sorted
//! ascending by id), fixing which edge each PALM entry refers to.

use crate::graph::{LayeredGraph, Path, VertexId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Errors from PALM construction and reward assignment.
#[derive(thiserror::Error, Debug)]
pub enum PalmError {
    #[error("row {vertex} is not one-hot over its first {degree} entries")]
    MalformedRow { vertex: VertexId, degree: usize },
    #[error("value layout does not match the graph shape: {0}")]
    ShapeMismatch(String),
    #[error("({src}, {dst}) is not an edge of the graph")]
    UnknownEdge { src: String, dst: String },
    #[error("path is invalid for this graph")]
    InvalidPath,
}

/// Row layout shared by PALMs, PALM distributions and reward PALMs: one row
/// per vertex, row `v` has `out_degrees[v]` active entries, padded to
/// `max_out_degree` in the rectangular view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PalmShape {
    pub num_vertices: usize,
    pub max_out_degree: usize,
    pub out_degrees: Vec<usize>,
}

impl PalmShape {
    pub fn of(g: &LayeredGraph) -> Self {
        let out_degrees: Vec<usize> = (0..g.num_vertices()).map(|v| g.out_degree(v)).collect();
        let max_out_degree = out_degrees.iter().copied().max().unwrap_or(0);
        Self { num_vertices: g.num_vertices(), max_out_degree, out_degrees }
    }

    /// Flat index of entry `(v, j)` in the rectangular `V x D_max` layout.
    pub fn flat_index(&self, v: VertexId, j: usize) -> usize {
        v * self.max_out_degree + j
    }

    pub fn flat_len(&self) -> usize {
        self.num_vertices * self.max_out_degree
    }

    /// Vertices with at least one outgoing edge, in ascending id order.
    pub fn active_vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.num_vertices).filter(|&v| self.out_degrees[v] > 0)
    }
}

/// One one-hot edge selection per vertex; the diffusion state.
///
/// Stored compactly as the selected edge index per vertex (`None` for padding
/// rows); [`Palm::to_dense`] materializes the rectangular 0/1 view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palm {
    choices: Vec<Option<u32>>,
}

impl Palm {
    /// Builds a PALM from per-vertex edge choices, checking them against the
    /// shape: `None` exactly where the out-degree is zero, otherwise an index
    /// below the vertex's out-degree.
    pub fn new(shape: &PalmShape, choices: Vec<Option<u32>>) -> Result<Self, PalmError> {
        if choices.len() != shape.num_vertices {
            return Err(PalmError::ShapeMismatch(format!(
                "{} rows for {} vertices",
                choices.len(),
                shape.num_vertices
            )));
        }
        for (v, choice) in choices.iter().enumerate() {
            let d = shape.out_degrees[v];
            match choice {
                Some(j) if (*j as usize) < d => {}
                None if d == 0 => {}
                _ => return Err(PalmError::MalformedRow { vertex: v, degree: d }),
            }
        }
        Ok(Self { choices })
    }

    /// Builds a PALM from rectangular rows, requiring each active row to be
    /// one-hot over its first `D_v` entries and zero elsewhere.
    pub fn from_dense(shape: &PalmShape, rows: &[Vec<f64>]) -> Result<Self, PalmError> {
        if rows.len() != shape.num_vertices {
            return Err(PalmError::ShapeMismatch(format!(
                "{} rows for {} vertices",
                rows.len(),
                shape.num_vertices
            )));
        }
        let mut choices = Vec::with_capacity(rows.len());
        for (v, row) in rows.iter().enumerate() {
            if row.len() != shape.max_out_degree {
                return Err(PalmError::ShapeMismatch(format!(
                    "row {v} has width {} instead of {}",
                    row.len(),
                    shape.max_out_degree
                )));
            }
            let d = shape.out_degrees[v];
            let mut hot = None;
            for (j, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                if x != 1.0 || j >= d || hot.is_some() {
                    return Err(PalmError::MalformedRow { vertex: v, degree: d });
                }
                hot = Some(j as u32);
            }
            match hot {
                Some(j) => choices.push(Some(j)),
                None if d == 0 => choices.push(None),
                None => return Err(PalmError::MalformedRow { vertex: v, degree: d }),
            }
        }
        Ok(Self { choices })
    }

    /// Selected edge index of vertex `v` (`None` on padding rows).
    pub fn choice(&self, v: VertexId) -> Option<u32> {
        self.choices[v]
    }

    pub(crate) fn set_choice(&mut self, v: VertexId, j: u32) {
        self.choices[v] = Some(j);
    }

    pub fn num_rows(&self) -> usize {
        self.choices.len()
    }

    /// Rectangular `V x D_max` 0/1 view with padding zeros.
    pub fn to_dense(&self, shape: &PalmShape) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; shape.max_out_degree]; shape.num_vertices];
        for (v, choice) in self.choices.iter().enumerate() {
            if let Some(j) = choice {
                rows[v][*j as usize] = 1.0;
            }
        }
        rows
    }
}

/// Encodes a path: on-path vertices select the path edge, every other vertex
/// with outgoing edges gets a uniformly random selection drawn from `rng` (in
/// ascending vertex-id order, and only where the out-degree exceeds one, so
/// equal seeds give identical PALMs).
pub fn encode(g: &LayeredGraph, p: &Path, rng: &mut impl Rng) -> Palm {
    encode_with(g, p, |_, d| rng.random_range(0..d))
}

/// [`encode`] with an explicit off-path picker `pick(vertex, out_degree)`;
/// only called for off-path vertices with out-degree at least two.
pub fn encode_with(
    g: &LayeredGraph,
    p: &Path,
    mut pick: impl FnMut(VertexId, usize) -> usize,
) -> Palm {
    let shape = PalmShape::of(g);
    let mut on_path_choice: Vec<Option<u32>> = vec![None; g.num_vertices()];
    for w in p.vertices().windows(2) {
        let j = g.edge_index(w[0], w[1]).expect("Path invariants guarantee the edge");
        on_path_choice[w[0]] = Some(j as u32);
    }
    let mut choices = Vec::with_capacity(g.num_vertices());
    for v in 0..g.num_vertices() {
        let d = shape.out_degrees[v];
        let choice = match (on_path_choice[v], d) {
            (Some(j), _) => Some(j),
            (None, 0) => None,
            (None, 1) => Some(0),
            (None, d) => {
                let j = pick(v, d);
                assert!(j < d, "picker returned {j} for out-degree {d}");
                Some(j as u32)
            }
        };
        choices.push(choice);
    }
    Palm { choices }
}

/// Decodes a PALM to its unique path: start at the layer-1 vertex and follow
/// the selected edge once per layer. Always yields a valid path.
pub fn decode(g: &LayeredGraph, x: &Palm) -> Path {
    let mut vertices = Vec::with_capacity(g.num_layers());
    let mut v = g.start_vertex();
    vertices.push(v);
    for _ in 0..g.num_layers() - 1 {
        let j = x.choice(v).expect("on-path vertices below the last layer have out-edges");
        v = g.out_edges(v)[j as usize];
        vertices.push(v);
    }
    Path::new(g, vertices).expect("followed edges form a path by construction")
}

/// Per-vertex real-valued rows over active entries: model logits,
/// probabilities, and gradients all share this ragged layout. Padding entries
/// are not stored, so they are excluded from every reduction by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PalmDistribution {
    rows: Vec<Vec<f64>>,
}

impl PalmDistribution {
    /// All-zero rows (uniform logits).
    pub fn zeros(shape: &PalmShape) -> Self {
        Self { rows: shape.out_degrees.iter().map(|&d| vec![0.0; d]).collect() }
    }

    pub fn from_rows(shape: &PalmShape, rows: Vec<Vec<f64>>) -> Result<Self, PalmError> {
        if rows.len() != shape.num_vertices {
            return Err(PalmError::ShapeMismatch(format!(
                "{} rows for {} vertices",
                rows.len(),
                shape.num_vertices
            )));
        }
        for (v, row) in rows.iter().enumerate() {
            if row.len() != shape.out_degrees[v] {
                return Err(PalmError::ShapeMismatch(format!(
                    "row {v} has {} entries for out-degree {}",
                    row.len(),
                    shape.out_degrees[v]
                )));
            }
        }
        Ok(Self { rows })
    }

    /// The deterministic distribution selecting exactly `palm`'s edges.
    pub fn point_mass(shape: &PalmShape, palm: &Palm) -> Self {
        let mut rows: Vec<Vec<f64>> =
            shape.out_degrees.iter().map(|&d| vec![0.0; d]).collect();
        for v in 0..shape.num_vertices {
            if let Some(j) = palm.choice(v) {
                rows[v][j as usize] = 1.0;
            }
        }
        Self { rows }
    }

    /// Uniform probabilities over each active row.
    pub fn uniform(shape: &PalmShape) -> Self {
        Self {
            rows: shape
                .out_degrees
                .iter()
                .map(|&d| if d == 0 { Vec::new() } else { vec![1.0 / d as f64; d] })
                .collect(),
        }
    }

    pub fn row(&self, v: VertexId) -> &[f64] {
        &self.rows[v]
    }

    pub fn row_mut(&mut self, v: VertexId) -> &mut [f64] {
        &mut self.rows[v]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Treats rows as logits and returns per-row normalized exponentials
    /// (rows of width zero or one become empty/`[1.0]`).
    pub fn softmax(&self) -> Self {
        Self { rows: self.rows.iter().map(|row| softmax_row(row)).collect() }
    }

    /// True iff every active row is a probability vector (sum 1 within `tol`,
    /// entries non-negative).
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.rows.iter().all(|row| {
            row.is_empty()
                || (row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol)
        })
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    if row.is_empty() {
        return Vec::new();
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Per-edge scalar rewards in PALM layout; zero at padded positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardPalm {
    rows: Vec<Vec<f64>>,
}

impl RewardPalm {
    pub fn zeros(shape: &PalmShape) -> Self {
        Self { rows: shape.out_degrees.iter().map(|&d| vec![0.0; d]).collect() }
    }

    /// Places each `(src, dst, value)` at the edge's PALM position. With all
    /// values 1.0, a path's total reward is its count of preferred edges.
    pub fn from_edge_rewards(
        g: &LayeredGraph,
        edge_rewards: &[(VertexId, VertexId, f64)],
    ) -> Result<Self, PalmError> {
        let shape = PalmShape::of(g);
        let mut rows = Self::zeros(&shape).rows;
        for &(src, dst, value) in edge_rewards {
            if !value.is_finite() {
                return Err(PalmError::ShapeMismatch(format!(
                    "non-finite reward on edge ({src}, {dst})"
                )));
            }
            let j = g.edge_index(src, dst).ok_or_else(|| PalmError::UnknownEdge {
                src: g.label(src).to_string(),
                dst: g.label(dst).to_string(),
            })?;
            rows[src][j] = value;
        }
        Ok(Self { rows })
    }

    pub fn row(&self, v: VertexId) -> &[f64] {
        &self.rows[v]
    }

    /// Total reward collected along a path: the sum of its edges' entries.
    pub fn path_reward(&self, g: &LayeredGraph, p: &Path) -> f64 {
        p.vertices()
            .windows(2)
            .map(|w| {
                let j = g.edge_index(w[0], w[1]).expect("path edges exist");
                self.rows[w[0]][j]
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_fixtures::{fig1, path_by_labels};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(g: &LayeredGraph, label: &str) -> VertexId {
        g.id_of_label(label).unwrap()
    }

    #[test]
    fn shape_of_fig1() {
        let g = fig1();
        let shape = PalmShape::of(&g);
        assert_eq!(shape.num_vertices, 10);
        assert_eq!(shape.max_out_degree, 3);
        assert_eq!(shape.out_degrees, vec![3, 2, 2, 2, 2, 1, 2, 0, 0, 0]);
        assert_eq!(shape.active_vertices().count(), 7);
    }

    #[test]
    fn encode_acgh_with_pinned_offpath_picks_matches_expected_matrix() {
        let g = fig1();
        let p = path_by_labels(&g, &["A", "C", "G", "H"]);
        // Off-path picks: B->E, D->G, E->I (F has a single edge and is forced).
        let picks = [
            (v(&g, "B"), v(&g, "E")),
            (v(&g, "D"), v(&g, "G")),
            (v(&g, "E"), v(&g, "I")),
        ];
        let palm = encode_with(&g, &p, |vertex, _| {
            let (_, dst) = picks.iter().find(|&&(src, _)| src == vertex).unwrap();
            g.edge_index(vertex, *dst).unwrap()
        });
        let dense = palm.to_dense(&PalmShape::of(&g));
        let expected = [
            vec![0.0, 1.0, 0.0], // A -> C
            vec![1.0, 0.0, 0.0], // B -> E
            vec![0.0, 1.0, 0.0], // C -> G
            vec![0.0, 1.0, 0.0], // D -> G
            vec![0.0, 1.0, 0.0], // E -> I
            vec![1.0, 0.0, 0.0], // F -> I (forced)
            vec![1.0, 0.0, 0.0], // G -> H
            vec![0.0, 0.0, 0.0], // H padding
            vec![0.0, 0.0, 0.0], // I padding
            vec![0.0, 0.0, 0.0], // J padding
        ];
        assert_eq!(dense, expected);
        assert_eq!(decode(&g, &palm).labels(&g), "A,C,G,H");
    }

    #[test]
    fn encode_single_chain_consumes_no_randomness() {
        let doc = crate::graph::GraphDocument {
            format: crate::graph::GRAPH_FORMAT.to_string(),
            layers: vec![vec!["v1".into()], vec!["v2".into()], vec!["v3".into()]],
            edges: vec![("v1".into(), "v2".into()), ("v2".into(), "v3".into())],
        };
        let g = LayeredGraph::from_document(&doc).unwrap();
        let p = path_by_labels(&g, &["v1", "v2", "v3"]);
        let palm = encode_with(&g, &p, |_, _| panic!("no off-path choice exists"));
        assert_eq!(palm.choice(0), Some(0));
        assert_eq!(palm.choice(1), Some(0));
        assert_eq!(palm.choice(2), None);
    }

    #[test]
    fn different_seeds_agree_on_path_rows() {
        let g = fig1();
        let p = path_by_labels(&g, &["A", "C", "G", "H"]);
        let a = encode(&g, &p, &mut ChaCha8Rng::seed_from_u64(1));
        let b = encode(&g, &p, &mut ChaCha8Rng::seed_from_u64(2));
        for label in ["A", "C", "G", "H", "F", "I", "J"] {
            // On-path rows, the forced row F, and padding rows must agree.
            let id = v(&g, label);
            assert_eq!(a.choice(id), b.choice(id), "row {label}");
        }
        assert_eq!(decode(&g, &a), p);
        assert_eq!(decode(&g, &b), p);
    }

    #[test]
    fn decode_ignores_rows_after_divergence() {
        let g = fig1();
        let shape = PalmShape::of(&g);
        // A -> B, B -> F; rows C, D, G are arbitrary.
        for (c_pick, d_pick, g_pick) in [(0, 0, 0), (1, 1, 1), (0, 1, 0)] {
            let mut choices = vec![None; g.num_vertices()];
            choices[v(&g, "A")] = Some(0);
            choices[v(&g, "B")] = Some(1);
            choices[v(&g, "C")] = Some(c_pick);
            choices[v(&g, "D")] = Some(d_pick);
            choices[v(&g, "E")] = Some(0);
            choices[v(&g, "F")] = Some(0);
            choices[v(&g, "G")] = Some(g_pick);
            let palm = Palm::new(&shape, choices).unwrap();
            assert_eq!(decode(&g, &palm).labels(&g), "A,B,F,I");
        }
    }

    #[test]
    fn round_trip_on_all_fig1_paths() {
        let g = fig1();
        let paths = g.enumerate_paths(1 << 10).unwrap();
        for (i, p) in paths.iter().enumerate() {
            for seed in 0..8u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + i as u64);
                let palm = encode(&g, p, &mut rng);
                assert_eq!(&decode(&g, &palm), p);
            }
        }
    }

    #[test]
    fn palms_decoding_to_acgh_number_eight() {
        // Product of off-path out-degrees: B, D, E have 2 choices, F has 1.
        let g = fig1();
        let shape = PalmShape::of(&g);
        let active: Vec<VertexId> = shape.active_vertices().collect();
        let mut count = 0usize;
        let mut total = 0usize;
        let mut choices: Vec<Option<u32>> = vec![None; g.num_vertices()];
        let mut stack = vec![0u32];
        // Odometer enumeration over all assignments of active rows.
        'outer: loop {
            if stack.len() == active.len() + 1 {
                for (idx, &vtx) in active.iter().enumerate() {
                    choices[vtx] = Some(stack[idx + 1] - 1);
                }
                let palm = Palm::new(&shape, choices.clone()).unwrap();
                total += 1;
                if decode(&g, &palm).labels(&g) == "A,C,G,H" {
                    count += 1;
                }
                // Advance the odometer.
                while let Some(top) = stack.pop() {
                    if stack.is_empty() {
                        break 'outer;
                    }
                    let d = shape.out_degrees[active[stack.len() - 1]] as u32;
                    if top < d {
                        stack.push(top + 1);
                        break;
                    }
                }
                if stack.len() == 1 {
                    continue;
                }
            }
            while stack.len() < active.len() + 1 {
                stack.push(1);
            }
        }
        assert_eq!(total, 96, "product of active out-degrees 3*2*2*2*2*1*2");
        assert_eq!(count, 8);
    }

    #[test]
    fn malformed_dense_rows_are_rejected()  {
        let g = fig1();
        let shape = PalmShape::of(&g);
        let p = path_by_labels(&g, &["A", "C", "G", "H"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dense = encode(&g, &p, &mut rng).to_dense(&shape);
        assert!(Palm::from_dense(&shape, &dense).is_ok());
        // Two hots in a row.
        dense[0] = vec![1.0, 1.0, 0.0];
        assert!(matches!(
            Palm::from_dense(&shape, &dense),
            Err(PalmError::MalformedRow { vertex: 0, .. })
        ));
        // Hot in a padded slot of row B (degree 2).
        dense[0] = vec![1.0, 0.0, 0.0];
        dense[1] = vec![0.0, 0.0, 1.0];
        assert!(matches!(
            Palm::from_dense(&shape, &dense),
            Err(PalmError::MalformedRow { vertex: 1, .. })
        ));
        // All-zero row where a selection is required.
        dense[1] = vec![0.0, 0.0, 0.0];
        assert!(Palm::from_dense(&shape, &dense).is_err());
    }

    #[test]
    fn decode_never_fails_on_random_palms() {
        let g = fig1();
        let shape = PalmShape::of(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let choices: Vec<Option<u32>> = shape
                .out_degrees
                .iter()
                .map(|&d| if d == 0 { None } else { Some(rng.random_range(0..d) as u32) })
                .collect();
            let palm = Palm::new(&shape, choices).unwrap();
            let path = decode(&g, &palm);
            assert!(g.is_valid_path(path.vertices()));
        }
    }

    #[test]
    fn reward_palm_placement_and_path_rewards() {
        let g = fig1();
        let gh = (v(&g, "G"), v(&g, "H"), 1.0);
        let u = RewardPalm::from_edge_rewards(&g, &[gh]).unwrap();
        // Edge order at G is [H, J], so H sits at index 0.
        assert_eq!(u.row(v(&g, "G")), &[1.0, 0.0]);
        for vertex in 0..g.num_vertices() {
            if vertex != v(&g, "G") {
                assert!(u.row(vertex).iter().all(|&x| x == 0.0));
            }
        }

        let empty = RewardPalm::from_edge_rewards(&g, &[]).unwrap();
        for vertex in 0..g.num_vertices() {
            assert!(empty.row(vertex).iter().all(|&x| x == 0.0));
        }

        let u2 = RewardPalm::from_edge_rewards(
            &g,
            &[(v(&g, "A"), v(&g, "C"), 1.0), (v(&g, "G"), v(&g, "H"), 1.0)],
        )
        .unwrap();
        let score = |labels: &[&str]| u2.path_reward(&g, &path_by_labels(&g, labels));
        assert_eq!(score(&["A", "C", "G", "H"]), 2.0);
        assert_eq!(score(&["A", "D", "G", "H"]), 1.0);
        assert_eq!(score(&["A", "B", "E", "I"]), 0.0);

        // (B, G) is not an edge.
        assert!(matches!(
            RewardPalm::from_edge_rewards(&g, &[(v(&g, "B"), v(&g, "G"), 1.0)]),
            Err(PalmError::UnknownEdge { .. })
        ));
    }

    #[test]
    fn distribution_softmax_and_normalization() {
        let g = fig1();
        let shape = PalmShape::of(&g);
        let probs = PalmDistribution::zeros(&shape).softmax();
        assert!(probs.is_normalized(1e-12));
        for vertex in shape.active_vertices() {
            let d = shape.out_degrees[vertex] as f64;
            for &p in probs.row(vertex) {
                assert!((p - 1.0 / d).abs() < 1e-15);
            }
        }
        // Point mass on an encoded path puts 1.0 on each on-path selection.
        let p = path_by_labels(&g, &["A", "C", "G", "H"]);
        let palm = encode_with(&g, &p, |_, _| 0);
        let pm = PalmDistribution::point_mass(&shape, &palm);
        assert!(pm.is_normalized(0.0));
        assert_eq!(pm.row(v(&g, "A")), &[0.0, 1.0, 0.0][..2 + 1]);
    }
}
