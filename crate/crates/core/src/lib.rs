//! Learning and reward-guided sampling of path distributions in layered graphs.
//!
//! A layered graph is a DAG whose vertices are partitioned into ordered layers,
//! with edges only between adjacent layers and a singleton first layer. Paths
//! (one vertex per layer) are encoded as padded adjacency-list matrices (PALMs):
//! one one-hot edge selection per vertex, padded to the maximum out-degree.
//! Every PALM decodes to a valid path, so a discrete denoising diffusion model
//! over PALM states generates valid paths by construction.
//!
//! The crates' pieces:
//! - [`graph`]: the layered-graph data model, validation, exact path
//!   enumeration, synthetic graph generation and dataset construction.
//! - [`palm`]: path <-> PALM conversion, per-vertex categorical distributions
//!   and per-edge reward assignments in PALM layout.
//! - [`diffusion`]: cosine noise schedule, per-vertex uniform transition
//!   kernels, forward noising, reverse-process parametrization, training loss,
//!   the training loop and unguided sampling.
//! - [`denoiser`]: the trainable network mapping a noisy PALM and a timestep to
//!   PALM logits, with exact reverse-mode gradients and a decoupled-weight-decay
//!   adaptive-moment optimizer.
//! - [`guidance`]: expected total reward over PALM distributions via a layer
//!   dynamic program, its exact gradient with respect to the logits, and
//!   reward-guided sampling.
//! - [`metrics`]: valid rate, path-distribution divergences, rank and layer
//!   imitation scores, feature-space Frechet distance, and the max-reward
//!   conditioned target distribution.

pub mod denoiser;
pub mod diffusion;
pub mod graph;
pub mod guidance;
pub mod metrics;
pub mod palm;
pub mod seeds;

pub use graph::{Dataset, LayeredGraph, Path, VertexId};
pub use palm::{Palm, PalmDistribution, PalmShape, RewardPalm};
