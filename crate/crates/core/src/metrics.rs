//! Sample-quality and distribution-fidelity metrics.
//!
//! Path-level metrics compare two empirical path distributions directly (KL
//! with additive smoothing, L1, sup-form total variation, and a rank-distance
//! on probability orderings). Layer imitation scores compare per-layer vertex
//! marginals instead, and the feature-space metric fits a Gaussian to
//! flattened on-path PALM features of each sample set and takes the Frechet
//! distance between the fits. The target distribution for guided-sampling
//! tradeoffs is the unguided distribution conditioned on attaining the
//! maximum achievable reward.

use crate::denoiser::Denoiser;
use crate::diffusion::{sample_unguided, TransitionKernel};
use crate::graph::{LayeredGraph, Path, VertexId};
use crate::guidance::RewardSpec;
use crate::palm::PalmShape;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(thiserror::Error, Debug)]
pub enum MetricsError {
    #[error("no samples supplied")]
    EmptySamples,
    #[error("metric undefined on a support of size {0} (need at least 2)")]
    UndefinedMetric(usize),
    #[error("need at least {needed} feature vectors per side, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("no sample attained the maximum reward {max_reward} out of {drawn} draws")]
    EmptyConditional { max_reward: f64, drawn: usize },
}

/// Distinct paths with their empirical probabilities; support is kept in
/// lexicographic vertex-id order, which also serves as the canonical path
/// index for rank tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPathDistribution {
    support: Vec<Path>,
    mass: Vec<f64>,
    sample_count: usize,
}

impl EmpiricalPathDistribution {
    pub fn from_paths(paths: &[Path]) -> Result<Self, MetricsError> {
        if paths.is_empty() {
            return Err(MetricsError::EmptySamples);
        }
        let mut counts: BTreeMap<&Path, usize> = BTreeMap::new();
        for p in paths {
            *counts.entry(p).or_default() += 1;
        }
        let n = paths.len() as f64;
        let (support, mass) = counts
            .into_iter()
            .map(|(p, c)| (p.clone(), c as f64 / n))
            .unzip();
        Ok(Self { support, mass, sample_count: paths.len() })
    }

    /// Exact distribution from weighted paths (weights need not be
    /// normalized). `sample_count` is zero: there is no sampling noise.
    pub fn from_weighted(pairs: Vec<(Path, f64)>) -> Result<Self, MetricsError> {
        if pairs.is_empty() {
            return Err(MetricsError::EmptySamples);
        }
        let mut map: BTreeMap<Path, f64> = BTreeMap::new();
        for (p, w) in pairs {
            *map.entry(p).or_default() += w;
        }
        let total: f64 = map.values().sum();
        let (support, mass) = map.into_iter().map(|(p, w)| (p, w / total)).unzip();
        Ok(Self { support, mass, sample_count: 0 })
    }

    pub fn support(&self) -> &[Path] {
        &self.support
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn prob_of(&self, path: &Path) -> f64 {
        match self.support.binary_search(path) {
            Ok(i) => self.mass[i],
            Err(_) => 0.0,
        }
    }

    /// Union support (lexicographic) with both mass vectors aligned to it.
    fn unioned(&self, other: &Self) -> (Vec<f64>, Vec<f64>, usize) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.support.len() || j < other.support.len() {
            let take_left = match (self.support.get(i), other.support.get(j)) {
                (Some(x), Some(y)) => {
                    if x == y {
                        a.push(self.mass[i]);
                        b.push(other.mass[j]);
                        i += 1;
                        j += 1;
                        continue;
                    }
                    x < y
                }
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => unreachable!(),
            };
            if take_left {
                a.push(self.mass[i]);
                b.push(0.0);
                i += 1;
            } else {
                a.push(0.0);
                b.push(other.mass[j]);
                j += 1;
            }
        }
        let n = a.len();
        (a, b, n)
    }
}

/// Path-level dissimilarity measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivergenceKind {
    Kl,
    L1,
    Tv,
}

/// Additive smoothing used by KL on empirical supports: `1 / (10 N)` with `N`
/// the larger sample count (at least one).
fn kl_epsilon(n_left: usize, n_right: usize) -> f64 {
    1.0 / (10.0 * n_left.max(n_right).max(1) as f64)
}

/// `KL = sum p ln(p/q)` (with smoothing), `L1 = sum |p - q|`,
/// `TV = max |p - q|` (the sup form, not half the L1).
pub fn divergence(
    p: &EmpiricalPathDistribution,
    q: &EmpiricalPathDistribution,
    kind: DivergenceKind,
) -> f64 {
    let (a, b, _) = p.unioned(q);
    match kind {
        DivergenceKind::L1 => a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum(),
        DivergenceKind::Tv => {
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        }
        DivergenceKind::Kl => {
            let eps = kl_epsilon(p.sample_count, q.sample_count);
            smoothed_kl(&a, &b, eps)
        }
    }
}

fn smoothed_kl(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let za: f64 = 1.0 + eps * a.len() as f64;
    let zb: f64 = 1.0 + eps * b.len() as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let pa = (x + eps) / za;
            let pb = (y + eps) / zb;
            pa * (pa / pb).ln()
        })
        .sum()
}

/// Positions `1..=n` of each element after sorting by descending mass; ties
/// broken by ascending canonical index, identically for every input.
fn rank_positions(mass: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&i, &j| {
        mass[j].partial_cmp(&mass[i]).expect("masses are finite").then(i.cmp(&j))
    });
    let mut pos = vec![0; mass.len()];
    for (rank, &i) in order.iter().enumerate() {
        pos[i] = rank + 1;
    }
    pos
}

fn footrule(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let pa = rank_positions(a);
    let pb = rank_positions(b);
    let sum: usize = pa.iter().zip(&pb).map(|(x, y)| x.abs_diff(*y)).sum();
    let max = if n % 2 == 0 { n * n / 2 } else { (n * n - 1) / 2 };
    sum as f64 / max as f64
}

/// Normalized rank-displacement distance between the two distributions'
/// probability orderings, in `[0, 1]` (1 when one ordering reverses the
/// other). Undefined on supports smaller than two.
pub fn sfd(
    p: &EmpiricalPathDistribution,
    q: &EmpiricalPathDistribution,
) -> Result<f64, MetricsError> {
    let (a, b, n) = p.unioned(q);
    if n < 2 {
        return Err(MetricsError::UndefinedMetric(n));
    }
    Ok(footrule(&a, &b))
}

/// Per-layer vertex marginal of a path distribution, over the layer's full
/// vertex set in ascending id order.
fn layer_marginal(g: &LayeredGraph, dist: &EmpiricalPathDistribution, layer: usize) -> Vec<f64> {
    let vertices = g.layer(layer);
    let index_of: BTreeMap<VertexId, usize> =
        vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut out = vec![0.0; vertices.len()];
    for (path, &mass) in dist.support.iter().zip(&dist.mass) {
        out[index_of[&path.vertices()[layer]]] += mass;
    }
    out
}

/// Per-layer contributions of the layer imitation score; the first layer is
/// always zero (both marginals are the point mass on the start vertex).
pub fn isl_per_layer(
    g: &LayeredGraph,
    target: &EmpiricalPathDistribution,
    generated: &EmpiricalPathDistribution,
    kind: IslKind,
) -> Vec<f64> {
    (0..g.num_layers())
        .map(|l| {
            let a = layer_marginal(g, target, l);
            let b = layer_marginal(g, generated, l);
            match kind {
                IslKind::L1 => a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum(),
                IslKind::Tv => a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
                IslKind::Kl => {
                    let eps = kl_epsilon(target.sample_count, generated.sample_count);
                    smoothed_kl(&a, &b, eps)
                }
                IslKind::Sf => footrule(&a, &b),
            }
        })
        .collect()
}

/// Measures available for the layer imitation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IslKind {
    L1,
    Kl,
    Tv,
    Sf,
}

/// Layer imitation score: the chosen measure applied to each layer's vertex
/// marginals and summed over layers.
pub fn isl(
    g: &LayeredGraph,
    target: &EmpiricalPathDistribution,
    generated: &EmpiricalPathDistribution,
    kind: IslKind,
) -> f64 {
    isl_per_layer(g, target, generated, kind).iter().sum()
}

/// Flattened feature vector of a path: its deterministic PALM (on-path
/// one-hots, off-path rows zero) in vertex-major order.
pub type FeatureVector = Vec<f64>;

pub fn features(g: &LayeredGraph, path: &Path) -> FeatureVector {
    let shape = PalmShape::of(g);
    let mut out = vec![0.0; shape.flat_len()];
    for w in path.vertices().windows(2) {
        let j = g.edge_index(w[0], w[1]).expect("path edges exist");
        out[shape.flat_index(w[0], j)] = 1.0;
    }
    out
}

/// Percentage of sequences that are valid paths.
pub fn valid_rate(g: &LayeredGraph, samples: &[Vec<VertexId>]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let valid = samples.iter().filter(|s| g.is_valid_path(s)).count();
    Ok(100.0 * valid as f64 / samples.len() as f64)
}

/// Ridge added to feature covariances.
const COVARIANCE_RIDGE: f64 = 1e-6;

struct GaussianFit {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn fit_gaussian(features: &[FeatureVector], weights: Option<&[f64]>) -> GaussianFit {
    let n = features.len();
    let dim = features[0].len();
    let uniform = 1.0 / n as f64;
    let weight = |i: usize| weights.map_or(uniform, |w| w[i]);
    let mut mean = DVector::zeros(dim);
    for (i, f) in features.iter().enumerate() {
        for (j, &x) in f.iter().enumerate() {
            mean[j] += weight(i) * x;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (i, f) in features.iter().enumerate() {
        let w = weight(i);
        let centered: Vec<f64> = f.iter().zip(mean.iter()).map(|(x, m)| x - m).collect();
        for r in 0..dim {
            if centered[r] == 0.0 {
                continue;
            }
            let wr = w * centered[r];
            for c in 0..dim {
                cov[(r, c)] += wr * centered[c];
            }
        }
    }
    for j in 0..dim {
        cov[(j, j)] += COVARIANCE_RIDGE;
    }
    GaussianFit { mean, cov }
}

fn sqrt_symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> f64 {
    let mean_gap = (&a.mean - &b.mean).norm_squared();
    // tr((S1 S2)^1/2) = tr((B S1 B)^1/2) with B = S2^1/2, which keeps every
    // eigendecomposition symmetric.
    let root_b = sqrt_symmetric(&b.cov);
    let inner = &root_b * &a.cov * &root_b;
    let sym = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 =
        sym.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (mean_gap + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt).max(0.0)
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn flgd(
    feats_target: &[FeatureVector],
    feats_gen: &[FeatureVector],
) -> Result<f64, MetricsError> {
    for side in [feats_target, feats_gen] {
        if side.len() < 2 {
            return Err(MetricsError::InsufficientSamples { needed: 2, got: side.len() });
        }
    }
    let a = fit_gaussian(feats_target, None);
    let b = fit_gaussian(feats_gen, None);
    Ok(frechet_distance(&a, &b))
}

fn flgd_from_distributions(
    g: &LayeredGraph,
    target: &EmpiricalPathDistribution,
    generated: &EmpiricalPathDistribution,
) -> f64 {
    let feats = |d: &EmpiricalPathDistribution| -> (Vec<FeatureVector>, Vec<f64>) {
        (d.support.iter().map(|p| features(g, p)).collect(), d.mass.clone())
    };
    let (fa, wa) = feats(target);
    let (fb, wb) = feats(generated);
    let a = fit_gaussian(&fa, Some(&wa));
    let b = fit_gaussian(&fb, Some(&wb));
    frechet_distance(&a, &b)
}

/// All scalar metrics for one (target, generated) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kl: f64,
    pub l1: f64,
    pub tv: f64,
    pub sfd: Option<f64>,
    pub isl_l1: f64,
    pub isl_kl: f64,
    pub isl_tv: f64,
    pub isl_sf: f64,
    pub flgd: f64,
    pub target_support: usize,
    pub gen_support: usize,
    pub kl_epsilon: f64,
}

impl MetricsReport {
    pub fn compute(
        g: &LayeredGraph,
        target: &EmpiricalPathDistribution,
        generated: &EmpiricalPathDistribution,
    ) -> Self {
        Self {
            kl: divergence(target, generated, DivergenceKind::Kl),
            l1: divergence(target, generated, DivergenceKind::L1),
            tv: divergence(target, generated, DivergenceKind::Tv),
            sfd: sfd(target, generated).ok(),
            isl_l1: isl(g, target, generated, IslKind::L1),
            isl_kl: isl(g, target, generated, IslKind::Kl),
            isl_tv: isl(g, target, generated, IslKind::Tv),
            isl_sf: isl(g, target, generated, IslKind::Sf),
            flgd: flgd_from_distributions(g, target, generated),
            target_support: target.support.len(),
            gen_support: generated.support.len(),
            kl_epsilon: kl_epsilon(target.sample_count, generated.sample_count),
        }
    }
}

/// The unguided sample distribution conditioned on attaining the maximum
/// achievable reward, with the fraction of samples retained.
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    pub distribution: EmpiricalPathDistribution,
    pub retention: f64,
}

/// Builds the target by filtering `n` unguided samples down to max-reward
/// paths. Fails with `EmptyConditional` when none attains the maximum —
/// raise `n` or use [`exact_conditioned_uniform`] on small graphs.
pub fn target_distribution(
    model: &Denoiser,
    kernel: &TransitionKernel,
    g: &LayeredGraph,
    reward: &RewardSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<TargetDistribution, MetricsError> {
    let samples = sample_unguided(model, kernel, g, n, rng);
    let kept: Vec<Path> = samples
        .into_iter()
        .filter(|p| reward.reward.path_reward(g, p) >= reward.max_path_reward - 1e-9)
        .collect();
    if kept.is_empty() {
        return Err(MetricsError::EmptyConditional {
            max_reward: reward.max_path_reward,
            drawn: n,
        });
    }
    let retention = kept.len() as f64 / n as f64;
    Ok(TargetDistribution { distribution: EmpiricalPathDistribution::from_paths(&kept)?, retention })
}

/// Exact small-graph counterpart of [`target_distribution`]: the
/// uniform-edge-choice path distribution (probability proportional to the
/// product of `1/D_v` along the path) conditioned on maximum reward.
pub fn exact_conditioned_uniform(
    g: &LayeredGraph,
    reward: &RewardSpec,
    path_cap: usize,
) -> Result<EmpiricalPathDistribution, MetricsError> {
    let paths = g.enumerate_paths(path_cap).map_err(|_| MetricsError::EmptySamples)?;
    let weighted: Vec<(Path, f64)> = paths
        .into_iter()
        .filter(|p| reward.reward.path_reward(g, p) >= reward.max_path_reward - 1e-9)
        .map(|p| {
            let prob: f64 = p.vertices()[..p.vertices().len() - 1]
                .iter()
                .map(|&v| 1.0 / g.out_degree(v) as f64)
                .product();
            (p, prob)
        })
        .collect();
    EmpiricalPathDistribution::from_weighted(weighted)
}
