//! Forward noising, reverse-process parametrization, training loss, training
//! orchestration and unguided sampling over PALM states.
//!
//! Every active vertex row diffuses independently under its own uniform
//! transition kernel; rows with a single edge are fixed points and
//! zero-out-degree rows are excluded from state, loss and sampling entirely.
//! The reverse process predicts clean-state logits and mixes them through the
//! forward kernels; the loss is a weighted variational bound plus
//! cross-entropy, both restricted to vertices on the encoded path.

pub mod kernel;
pub mod sample;
pub mod schedule;
pub mod train;

pub use kernel::TransitionKernel;
pub use sample::sample_unguided;
pub use schedule::NoiseSchedule;
pub use train::{train, write_loss_csv, Checkpoint, EpochStats, TrainConfig, TrainResult};

use crate::denoiser::{Denoiser, DenoiserError};
use crate::graph::{LayeredGraph, Path};
use crate::palm::{softmax_row, Palm, PalmDistribution};
use rand::Rng;

#[derive(thiserror::Error, Debug)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={timesteps}")]
    BadTimestep { t: usize, timesteps: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset or checkpoint belongs to a different graph: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, step {step} (loss = {value})")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Marks the vertices whose rows carry loss: the path's vertices except the
/// terminal-layer one (which has no edge choice).
pub fn on_path_mask(g: &LayeredGraph, path: &Path) -> Vec<bool> {
    let mut mask = vec![false; g.num_vertices()];
    for &v in &path.vertices()[..path.vertices().len() - 1] {
        mask[v] = true;
    }
    mask
}

/// Draws `x_t ~ q(x_t | x_0)` using the cumulative kernel: each active row
/// keeps its category with probability `alpha_bar_t` and otherwise resamples
/// uniformly over its active entries. Rows with at most one edge consume no
/// randomness.
pub fn q_sample(
    kernel: &TransitionKernel,
    x0: &Palm,
    t: usize,
    rng: &mut impl Rng,
) -> Result<Palm, DiffusionError> {
    check_t(kernel, t)?;
    let shape = kernel.shape();
    let alpha_bar = kernel.schedule().alpha_bar(t);
    let mut x_t = x0.clone();
    for v in 0..shape.num_vertices {
        let d = shape.out_degrees[v];
        if d < 2 {
            continue;
        }
        let u: f64 = rng.random();
        if u >= alpha_bar {
            // Conditioned on mixing, the residual draw is uniform over 0..d.
            let w = (u - alpha_bar) / (1.0 - alpha_bar);
            let j = ((w * d as f64) as usize).min(d - 1);
            x_t.set_choice(v, j as u32);
        }
    }
    Ok(x_t)
}

/// Exact per-vertex posterior `q(x_{t-1} | x_t, x_0)` for `2 <= t <= T`:
/// the transposed single-step likelihood column times the cumulative prior,
/// normalized over each row's active entries.
pub fn q_posterior(
    kernel: &TransitionKernel,
    x_t: &Palm,
    x0: &Palm,
    t: usize,
) -> Result<PalmDistribution, DiffusionError> {
    if t < 2 {
        return Err(DiffusionError::BadTimestep { t, timesteps: kernel.timesteps() });
    }
    check_t(kernel, t)?;
    let shape = kernel.shape();
    let rows = (0..shape.num_vertices)
        .map(|v| {
            let d = shape.out_degrees[v];
            if d == 0 {
                return Vec::new();
            }
            let k = x_t.choice(v).expect("active row") as usize;
            let j = x0.choice(v).expect("active row") as usize;
            let mut row: Vec<f64> = (0..d)
                .map(|i| kernel.step_prob(d, t, k, i) * kernel.cumulative_prob(d, t - 1, i, j))
                .collect();
            let sum: f64 = row.iter().sum();
            debug_assert!(sum > 0.0, "uniform kernels with beta < 1 cannot zero the posterior");
            for p in &mut row {
                *p /= sum;
            }
            row
        })
        .collect();
    Ok(PalmDistribution::from_rows(shape, rows).expect("widths match"))
}

/// Reverse-step distribution implied by clean-state probabilities `probs`:
/// per vertex, `p(x_{t-1} = i) ∝ q(x_{t-1} = i, x_t | x0 = j)` summed over
/// `j` weighted by `probs[j]`. At `t = 1` the clean-state distribution itself
/// is returned.
pub(crate) fn posterior_from_probs(
    kernel: &TransitionKernel,
    probs: &PalmDistribution,
    x_t: &Palm,
    t: usize,
) -> PalmDistribution {
    if t == 1 {
        return probs.clone();
    }
    let shape = kernel.shape();
    let alpha_prev = kernel.schedule().alpha_bar(t - 1);
    let rows = (0..shape.num_vertices)
        .map(|v| {
            let d = shape.out_degrees[v];
            if d == 0 {
                return Vec::new();
            }
            let k = x_t.choice(v).expect("active row") as usize;
            let residual = (1.0 - alpha_prev) / d as f64;
            let mut row: Vec<f64> = (0..d)
                .map(|i| {
                    kernel.step_prob(d, t, k, i) * (alpha_prev * probs.row(v)[i] + residual)
                })
                .collect();
            let sum: f64 = row.iter().sum();
            for p in &mut row {
                *p /= sum;
            }
            row
        })
        .collect();
    PalmDistribution::from_rows(shape, rows).expect("widths match")
}

/// Reverse-step distribution of the model: predicted logits are normalized
/// per vertex and mixed through the forward kernels.
pub fn model_posterior(
    model: &Denoiser,
    kernel: &TransitionKernel,
    x_t: &Palm,
    t: usize,
) -> Result<PalmDistribution, DiffusionError> {
    check_t(kernel, t)?;
    let z = model.predict(x_t, t)?;
    Ok(posterior_from_probs(kernel, &z.softmax(), x_t, t))
}

/// Loss value split into its weighted variational-bound and cross-entropy
/// parts (`total = gamma * vb + ce`).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub vb: f64,
}

/// One training example for the loss: a noisy state, its clean state, the
/// on-path mask and the timestep that produced the noise.
#[derive(Debug, Clone)]
pub struct LossExample {
    pub x_t: Palm,
    pub x0: Palm,
    pub on_path: Vec<bool>,
    pub t: usize,
}

/// Computes the masked loss for one example from predicted logits, optionally
/// accumulating `dL/dz` (ragged, zero off the mask) scaled by `grad_scale`.
pub(crate) fn loss_from_logits(
    kernel: &TransitionKernel,
    z: &PalmDistribution,
    example: &LossExample,
    gamma: f64,
    mut grad: Option<(&mut PalmDistribution, f64)>,
) -> LossTerms {
    let shape = kernel.shape();
    let t = example.t;
    let mut terms = LossTerms::default();
    for v in 0..shape.num_vertices {
        let d = shape.out_degrees[v];
        if !example.on_path[v] || d < 2 {
            // Off-path vertices contribute nothing; single-edge rows are
            // point masses with zero loss.
            continue;
        }
        let j = example.x0.choice(v).expect("masked rows are active") as usize;
        let k = example.x_t.choice(v).expect("masked rows are active") as usize;
        let probs = softmax_row(z.row(v));

        // Cross-entropy to the clean state.
        terms.ce += -probs[j].ln();
        let mut d_probs_vb = vec![0.0; d]; // dVb/dprobs
        let vb = if t == 1 {
            // Reconstruction term: the reverse step targets x0 directly.
            d_probs_vb[j] = -1.0 / probs[j];
            -probs[j].ln()
        } else {
            let alpha_prev = kernel.schedule().alpha_bar(t - 1);
            let residual = (1.0 - alpha_prev) / d as f64;
            let mut q = vec![0.0; d];
            let mut m = vec![0.0; d];
            let mut q_sum = 0.0;
            let mut m_sum = 0.0;
            for i in 0..d {
                let a = kernel.step_prob(d, t, k, i);
                q[i] = a * kernel.cumulative_prob(d, t - 1, i, j);
                m[i] = a * (alpha_prev * probs[i] + residual);
                q_sum += q[i];
                m_sum += m[i];
            }
            let mut kl = 0.0;
            for i in 0..d {
                let qi = q[i] / q_sum;
                kl += qi * (qi.ln() - (m[i] / m_sum).ln());
                // d KL / d m_i, then back through m_i = A_i (a p_i + c).
                let a = kernel.step_prob(d, t, k, i);
                d_probs_vb[i] = (1.0 / m_sum - qi / m[i]) * a * alpha_prev;
            }
            kl
        };
        terms.vb += vb;

        if let Some((g, scale)) = grad.as_mut() {
            // d total / d probs, then the softmax Jacobian back to logits.
            let mut d_probs = vec![0.0; d];
            for i in 0..d {
                d_probs[i] = gamma * d_probs_vb[i];
            }
            d_probs[j] += -1.0 / probs[j]; // cross-entropy part
            let inner: f64 = d_probs.iter().zip(&probs).map(|(dp, p)| dp * p).sum();
            let row = g.row_mut(v);
            for i in 0..d {
                row[i] += *scale * probs[i] * (d_probs[i] - inner);
            }
        }
    }
    terms.total = gamma * terms.vb + terms.ce;
    terms
}

/// Deterministic loss at a fixed noisy state (used by tests and validation).
pub fn loss_at(
    model: &Denoiser,
    kernel: &TransitionKernel,
    x_t: &Palm,
    x0: &Palm,
    on_path: &[bool],
    t: usize,
    gamma: f64,
) -> Result<LossTerms, DiffusionError> {
    check_t(kernel, t)?;
    let z = model.predict(x_t, t)?;
    let example =
        LossExample { x_t: x_t.clone(), x0: x0.clone(), on_path: on_path.to_vec(), t };
    Ok(loss_from_logits(kernel, &z, &example, gamma, None))
}

/// Draws a timestep-`t` noisy state and evaluates the masked loss.
pub fn loss(
    model: &Denoiser,
    kernel: &TransitionKernel,
    x0: &Palm,
    on_path: &[bool],
    t: usize,
    rng: &mut impl Rng,
    gamma: f64,
) -> Result<LossTerms, DiffusionError> {
    let x_t = q_sample(kernel, x0, t, rng)?;
    loss_at(model, kernel, &x_t, x0, on_path, t, gamma)
}

fn check_t(kernel: &TransitionKernel, t: usize) -> Result<(), DiffusionError> {
    if t < 1 || t > kernel.timesteps() {
        return Err(DiffusionError::BadTimestep { t, timesteps: kernel.timesteps() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::graph::test_fixtures::{fig1, path_by_labels};
    use crate::palm::{encode_with, PalmShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state_kernel(betas: Vec<f64>) -> TransitionKernel {
        // One active row of degree 2 (plus terminal padding rows).
        let shape = PalmShape { num_vertices: 3, max_out_degree: 2, out_degrees: vec![2, 0, 0] };
        TransitionKernel::new(shape, NoiseSchedule::from_betas(betas))
    }

    fn palm_with_choice(shape: &PalmShape, j: u32) -> Palm {
        let choices = shape
            .out_degrees
            .iter()
            .map(|&d| if d == 0 { None } else { Some(j) })
            .collect();
        Palm::new(shape, choices).unwrap()
    }

    #[test]
    fn q_sample_single_step_frequencies_match_the_block() {
        let kernel = two_state_kernel(vec![0.5]);
        let shape = kernel.shape().clone();
        let x0 = palm_with_choice(&shape, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut stay = 0usize;
        for _ in 0..n {
            let x1 = q_sample(&kernel, &x0, 1, &mut rng).unwrap();
            if x1.choice(0) == Some(0) {
                stay += 1;
            }
        }
        // P(stay) = 0.75; binomial sigma = sqrt(p(1-p)/n).
        let p_hat = stay as f64 / n as f64;
        let sigma = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((p_hat - 0.75).abs() < 3.0 * sigma, "p_hat = {p_hat}");
    }

    #[test]
    fn q_sample_fixed_points() {
        // Degree-1 rows never move, zero rows stay padding.
        let doc = crate::graph::GraphDocument {
            format: crate::graph::GRAPH_FORMAT.to_string(),
            layers: vec![vec!["a".into()], vec!["b".into()], vec!["c".into()]],
            edges: vec![("a".into(), "b".into()), ("b".into(), "c".into())],
        };
        let g = crate::graph::LayeredGraph::from_document(&doc).unwrap();
        let shape = PalmShape::of(&g);
        let kernel = TransitionKernel::new(shape.clone(), NoiseSchedule::cosine(16, 0.008));
        let x0 = Palm::new(&shape, vec![Some(0), Some(0), None]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=16 {
            assert_eq!(q_sample(&kernel, &x0, t, &mut rng).unwrap(), x0);
        }
    }

    #[test]
    fn q_posterior_matches_dense_block_enumeration() {
        let kernel = two_state_kernel(vec![0.5, 0.5]);
        let shape = kernel.shape().clone();
        // x_t = x0 = category 1 at t = 2.
        let x0 = palm_with_choice(&shape, 1);
        let x_t = palm_with_choice(&shape, 1);
        let post = q_posterior(&kernel, &x_t, &x0, 2).unwrap();

        // Independent oracle straight from the dense blocks.
        let step = kernel.step_block(2, 2);
        let cum = kernel.cumulative_block(2, 1);
        let raw: Vec<f64> = (0..2).map(|i| step[1][i] * cum[i][1]).collect();
        let sum: f64 = raw.iter().sum();
        for i in 0..2 {
            assert!((post.row(0)[i] - raw[i] / sum).abs() < 1e-15);
        }
        // Hand values: step col = [0.25, 0.75], prior col = [0.25, 0.75]
        // => posterior = [1/10, 9/10].
        assert!((post.row(0)[0] - 0.1).abs() < 1e-12);
        assert!((post.row(0)[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn q_posterior_is_point_mass_for_single_edge_rows() {
        let shape = PalmShape { num_vertices: 2, max_out_degree: 1, out_degrees: vec![1, 0] };
        let kernel = TransitionKernel::new(shape.clone(), NoiseSchedule::from_betas(vec![0.3; 4]));
        let x = Palm::new(&shape, vec![Some(0), None]).unwrap();
        let post = q_posterior(&kernel, &x, &x, 3).unwrap();
        assert_eq!(post.row(0), &[1.0]);
    }

    #[test]
    fn model_posterior_with_point_mass_equals_q_posterior() {
        let kernel = two_state_kernel(vec![0.4, 0.2, 0.6]);
        let shape = kernel.shape().clone();
        let x0 = palm_with_choice(&shape, 0);
        for k in 0..2u32 {
            let x_t = palm_with_choice(&shape, k);
            for t in 2..=3 {
                let exact = q_posterior(&kernel, &x_t, &x0, t).unwrap();
                let p_tilde = PalmDistribution::point_mass(&shape, &x0);
                let modeled = posterior_from_probs(&kernel, &p_tilde, &x_t, t);
                for i in 0..2 {
                    assert!((exact.row(0)[i] - modeled.row(0)[i]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn model_posterior_matches_two_term_sum_oracle() {
        let kernel = two_state_kernel(vec![0.4, 0.2, 0.6]);
        let shape = kernel.shape().clone();
        let x_t = palm_with_choice(&shape, 1);
        let t = 3;
        let uniform = PalmDistribution::uniform(&shape);
        let modeled = posterior_from_probs(&kernel, &uniform, &x_t, t);

        // Brute force over both clean states with dense blocks.
        let step = kernel.step_block(2, t);
        let cum = kernel.cumulative_block(2, t - 1);
        let k = 1usize;
        let mut raw = vec![0.0; 2];
        for j in 0..2 {
            for (i, r) in raw.iter_mut().enumerate() {
                *r += 0.5 * step[k][i] * cum[i][j];
            }
        }
        let sum: f64 = raw.iter().sum();
        for i in 0..2 {
            assert!((modeled.row(0)[i] - raw[i] / sum).abs() < 1e-15);
        }
    }

    #[test]
    fn model_posterior_rows_are_probability_vectors() {
        let g = fig1();
        let shape = PalmShape::of(&g);
        let kernel = TransitionKernel::new(shape.clone(), NoiseSchedule::cosine(64, 0.008));
        let model = Denoiser::new(
            DenoiserConfig { hidden_width: 16, residual_blocks: 1, time_embed_dim: 8, init_seed: 1 },
            shape.clone(),
        );
        let p = path_by_labels(&g, &["A", "C", "G", "H"]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = crate::palm::encode(&g, &p, &mut rng);
        for t in [1, 2, 32, 64] {
            let x_t = q_sample(&kernel, &x0, t, &mut rng).unwrap();
            let post = model_posterior(&model, &kernel, &x_t, t).unwrap();
            assert!(post.is_normalized(1e-9));
        }
    }

    #[test]
    fn loss_hand_computation_single_active_vertex() {
        let kernel = two_state_kernel(vec![0.4, 0.3]);
        let shape = kernel.shape().clone();
        let x0 = palm_with_choice(&shape, 0);
        let x_t = palm_with_choice(&shape, 1);
        let mask = vec![true, false, false];
        let z_rows = vec![vec![0.7, -0.4], Vec::new(), Vec::new()];
        let z = PalmDistribution::from_rows(&shape, z_rows).unwrap();
        let example = LossExample { x_t: x_t.clone(), x0: x0.clone(), on_path: mask, t: 2 };
        let gamma = 0.37;
        let got = loss_from_logits(&kernel, &z, &example, gamma, None);

        // Hand computation, written independently of the implementation.
        let e0 = (0.7f64).exp();
        let e1 = (-0.4f64).exp();
        let p0 = e0 / (e0 + e1);
        let p1 = 1.0 - p0;
        let ce = -p0.ln();
        // Blocks at t = 2: beta = 0.3, alpha_bar(1) = 0.6.
        let step = |i: usize, jj: usize| if i == jj { 0.85 } else { 0.15 };
        let cum = |i: usize, jj: usize| if i == jj { 0.8 } else { 0.2 };
        let (k, j) = (1usize, 0usize);
        let q: Vec<f64> = (0..2).map(|i| step(k, i) * cum(i, j)).collect();
        let qs: f64 = q.iter().sum();
        let m: Vec<f64> =
            (0..2).map(|i| step(k, i) * (0.6 * [p0, p1][i] + 0.4 / 2.0)).collect();
        let ms: f64 = m.iter().sum();
        let kl: f64 =
            (0..2).map(|i| (q[i] / qs) * ((q[i] / qs).ln() - (m[i] / ms).ln())).sum();
        assert!((got.ce - ce).abs() < 1e-12);
        assert!((got.vb - kl).abs() < 1e-12);
        assert!((got.total - (gamma * kl + ce)).abs() < 1e-12);
    }

    #[test]
    fn loss_reduces_to_ce_when_gamma_is_zero_and_vanishes_for_confident_model() {
        let kernel = two_state_kernel(vec![0.4, 0.3]);
        let shape = kernel.shape().clone();
        let x0 = palm_with_choice(&shape, 0);
        let mask = vec![true, false, false];

        let z = PalmDistribution::from_rows(&shape, vec![vec![1.3, 0.2], vec![], vec![]]).unwrap();
        let ex = LossExample { x_t: x0.clone(), x0: x0.clone(), on_path: mask.clone(), t: 2 };
        let got = loss_from_logits(&kernel, &z, &ex, 0.0, None);
        assert_eq!(got.total, got.ce);

        // Near-point-mass prediction at t = 1: both terms collapse to ~0.
        let confident =
            PalmDistribution::from_rows(&shape, vec![vec![60.0, 0.0], vec![], vec![]]).unwrap();
        let ex1 = LossExample { x_t: x0.clone(), x0, on_path: mask, t: 1 };
        let got = loss_from_logits(&kernel, &confident, &ex1, 1.0, None);
        assert!(got.total.abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_off_path_logits() {
        let g = fig1();
        let shape = PalmShape::of(&g);
        let kernel = TransitionKernel::new(shape.clone(), NoiseSchedule::cosine(16, 0.008));
        let p = path_by_labels(&g, &["A", "C", "G", "H"]);
        let x0 = encode_with(&g, &p, |_, _| 0);
        let mask = on_path_mask(&g, &p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_t = q_sample(&kernel, &x0, 9, &mut rng).unwrap();
        let ex = LossExample { x_t, x0, on_path: mask.clone(), t: 9 };

        let mut z = PalmDistribution::zeros(&shape);
        for v in 0..shape.num_vertices {
            for (i, slot) in z.row_mut(v).iter_mut().enumerate() {
                *slot = (v as f64) * 0.3 - (i as f64) * 0.7;
            }
        }
        let base = loss_from_logits(&kernel, &z, &ex, 1.0, None);
        for v in 0..shape.num_vertices {
            if mask[v] {
                continue;
            }
            for slot in z.row_mut(v).iter_mut() {
                *slot += 13.5;
            }
        }
        let perturbed = loss_from_logits(&kernel, &z, &ex, 1.0, None);
        assert_eq!(base, perturbed);
    }

    #[test]
    fn bad_timesteps_are_rejected() {
        let kernel = two_state_kernel(vec![0.5; 8]);
        let x = palm_with_choice(kernel.shape(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            q_sample(&kernel, &x, 0, &mut rng),
            Err(DiffusionError::BadTimestep { .. })
        ));
        assert!(matches!(
            q_sample(&kernel, &x, 9, &mut rng),
            Err(DiffusionError::BadTimestep { .. })
        ));
        assert!(matches!(
            q_posterior(&kernel, &x, &x, 1),
            Err(DiffusionError::BadTimestep { .. })
        ));
    }
}
