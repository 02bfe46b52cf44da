//! Expected total reward over PALM distributions, its exact gradient with
//! respect to the logits, and reward-guided sampling.
//!
//! Per-vertex edge probabilities induce a distribution over paths. The
//! expected total reward is computed by one forward pass over the layers
//! (reach probabilities) and differentiated by the matching reverse pass, so
//! the gradient is exact and costs the same as the forward DP. During guided
//! sampling the gradient, scaled by the guidance strength, is added to the
//! reverse-step log-probabilities at every timestep; no retraining is needed
//! to switch reward functions.

use crate::denoiser::Denoiser;
use crate::diffusion::sample::{run_reverse_chains, ActiveGuidance};
use crate::diffusion::TransitionKernel;
use crate::graph::{LayeredGraph, Path, VertexId};
use crate::palm::{decode, PalmDistribution, PalmError, RewardPalm};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Format tag for reward files.
pub const REWARD_FORMAT: &str = "reward-spec/v1";

#[derive(thiserror::Error, Debug)]
pub enum GuidanceError {
    #[error("unknown vertex label `{0}`")]
    UnknownLabel(String),
    #[error(transparent)]
    Palm(#[from] PalmError),
    #[error("malformed reward file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the per-step base log-probabilities are formed during guided sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Default: condition on the current state through the reverse-process
    /// posterior, then add the scaled reward gradient.
    Posterior,
    /// Alternative: push the raw clean-state logits through the cumulative
    /// forward kernel for step `t` (ignoring the current state), then add the
    /// scaled reward gradient and normalize the result as logits.
    CumulativeKernel,
}

/// Guidance strength and mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub mode: GuidanceMode,
}

impl GuidanceConfig {
    pub fn posterior(lambda: f64) -> Self {
        Self { lambda, mode: GuidanceMode::Posterior }
    }
}

/// A reward assignment plus its maximum achievable path reward and a label.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub reward: RewardPalm,
    pub max_path_reward: f64,
    pub label: String,
}

#[derive(Serialize, Deserialize)]
struct RewardDocument {
    format: String,
    label: String,
    edges: Vec<(String, String, f64)>,
}

impl RewardSpec {
    pub fn new(
        g: &LayeredGraph,
        label: impl Into<String>,
        edges: &[(VertexId, VertexId, f64)],
    ) -> Result<Self, GuidanceError> {
        let reward = RewardPalm::from_edge_rewards(g, edges)?;
        let max_path_reward = max_path_reward(g, &reward);
        Ok(Self { reward, max_path_reward, label: label.into() })
    }

    pub fn save(&self, g: &LayeredGraph, path: &std::path::Path) -> Result<(), GuidanceError> {
        let mut edges = Vec::new();
        for v in 0..g.num_vertices() {
            for (j, &dst) in g.out_edges(v).iter().enumerate() {
                let value = self.reward.row(v)[j];
                if value != 0.0 {
                    edges.push((g.label(v).to_string(), g.label(dst).to_string(), value));
                }
            }
        }
        let doc =
            RewardDocument { format: REWARD_FORMAT.to_string(), label: self.label.clone(), edges };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)?;
        Ok(())
    }

    /// Loads a reward file, validating every edge against the graph.
    pub fn load(g: &LayeredGraph, path: &std::path::Path) -> Result<Self, GuidanceError> {
        let file = std::fs::File::open(path)?;
        let doc: RewardDocument = serde_json::from_reader(std::io::BufReader::new(file))?;
        if doc.format != REWARD_FORMAT {
            return Err(GuidanceError::Format(format!("unsupported format tag `{}`", doc.format)));
        }
        let mut edges = Vec::new();
        for (src, dst, value) in &doc.edges {
            let s = g.id_of_label(src).ok_or_else(|| GuidanceError::UnknownLabel(src.clone()))?;
            let d = g.id_of_label(dst).ok_or_else(|| GuidanceError::UnknownLabel(dst.clone()))?;
            edges.push((s, d, *value));
        }
        Self::new(g, doc.label, &edges)
    }
}

/// Probability of reaching each vertex under per-vertex edge probabilities,
/// computed layer by layer from the singleton first layer.
pub fn transit_probs(g: &LayeredGraph, probs: &PalmDistribution) -> Vec<f64> {
    debug_assert!(probs.is_normalized(1e-6), "transit_probs expects probability rows");
    let mut reach = vec![0.0; g.num_vertices()];
    reach[g.start_vertex()] = 1.0;
    for l in 0..g.num_layers() - 1 {
        for &v in g.layer(l) {
            if reach[v] == 0.0 {
                continue;
            }
            for (j, &u) in g.out_edges(v).iter().enumerate() {
                reach[u] += reach[v] * probs.row(v)[j];
            }
        }
    }
    reach
}

/// Expected total reward of the path distribution induced by logits `z`:
/// rows are normalized with exponentials over their active entries, reach
/// probabilities are accumulated layer by layer, and every vertex contributes
/// its reach probability times its expected edge reward.
pub fn expected_reward(g: &LayeredGraph, z: &PalmDistribution, u: &RewardPalm) -> f64 {
    expected_reward_from_probs(g, &z.softmax(), u)
}

pub(crate) fn expected_reward_from_probs(
    g: &LayeredGraph,
    probs: &PalmDistribution,
    u: &RewardPalm,
) -> f64 {
    let reach = transit_probs(g, probs);
    let mut total = 0.0;
    for v in 0..g.num_vertices() {
        let s: f64 =
            probs.row(v).iter().zip(u.row(v)).map(|(p, r)| p * r).sum();
        total += reach[v] * s;
    }
    total
}

/// Exact gradient of [`expected_reward`] with respect to every active logit:
/// the adjoint of the reach DP composed with the per-row softmax Jacobian.
/// Padded positions stay zero (their rows are empty).
pub fn reward_gradient(g: &LayeredGraph, z: &PalmDistribution, u: &RewardPalm) -> PalmDistribution {
    reward_gradient_from_probs(g, &z.softmax(), u)
}

pub(crate) fn reward_gradient_from_probs(
    g: &LayeredGraph,
    probs: &PalmDistribution,
    u: &RewardPalm,
) -> PalmDistribution {
    let reach = transit_probs(g, probs);

    // Adjoint of the reach probabilities: value collected at and below v.
    let mut downstream = vec![0.0; g.num_vertices()];
    for l in (0..g.num_layers() - 1).rev() {
        for &v in g.layer(l) {
            let mut acc = 0.0;
            for (j, &dst) in g.out_edges(v).iter().enumerate() {
                let p = probs.row(v)[j];
                acc += p * (u.row(v)[j] + downstream[dst]);
            }
            downstream[v] = acc;
        }
    }

    let mut grad = PalmDistribution::zeros(&crate::palm::PalmShape::of(g));
    for v in 0..g.num_vertices() {
        if reach[v] == 0.0 || g.out_degree(v) == 0 {
            continue;
        }
        let p_row = probs.row(v);
        // d R / d probs[v][j], then back through the softmax.
        let dp: Vec<f64> = g
            .out_edges(v)
            .iter()
            .enumerate()
            .map(|(j, &dst)| reach[v] * (u.row(v)[j] + downstream[dst]))
            .collect();
        let inner: f64 = dp.iter().zip(p_row).map(|(d, p)| d * p).sum();
        let row = grad.row_mut(v);
        for j in 0..row.len() {
            row[j] = p_row[j] * (dp[j] - inner);
        }
    }
    grad
}

/// Maximum achievable path reward: a max-plus version of the same layer DP.
/// Returns negative infinity when the graph has no path at all.
pub fn max_path_reward(g: &LayeredGraph, u: &RewardPalm) -> f64 {
    let mut best = vec![f64::NEG_INFINITY; g.num_vertices()];
    best[g.start_vertex()] = 0.0;
    for l in 0..g.num_layers() - 1 {
        for &v in g.layer(l) {
            if best[v] == f64::NEG_INFINITY {
                continue;
            }
            for (j, &dst) in g.out_edges(v).iter().enumerate() {
                let candidate = best[v] + u.row(v)[j];
                if candidate > best[dst] {
                    best[dst] = candidate;
                }
            }
        }
    }
    g.layer(g.num_layers() - 1).iter().map(|&v| best[v]).fold(f64::NEG_INFINITY, f64::max)
}

/// Reward-guided sampling: per step the predicted logits give both the
/// reverse-step base distribution and the reward gradient; the scaled
/// gradient shifts the base log-probabilities before each draw. Returns each
/// decoded path with its collected reward. Every output is a valid path for
/// any guidance scale.
pub fn guided_sample(
    model: &Denoiser,
    kernel: &TransitionKernel,
    g: &LayeredGraph,
    reward: &RewardSpec,
    config: &GuidanceConfig,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(Path, f64)> {
    assert!(config.lambda >= 0.0 && config.lambda.is_finite(), "guidance scale must be finite and non-negative");
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let guidance =
        ActiveGuidance { reward: &reward.reward, lambda: config.lambda, mode: config.mode };
    run_reverse_chains(model, kernel, g, Some(&guidance), &seeds)
        .iter()
        .map(|palm| {
            let path = decode(g, palm);
            let r = reward.reward.path_reward(g, &path);
            (path, r)
        })
        .collect()
}
