//! Per-vertex uniform transition kernels over edge choices.
//!
//! For a vertex with out-degree `d > 0` the single-step matrix restricted to
//! its `d` active entries is `(1 - beta_t) I + (beta_t / d) 11^T`; padding is
//! never touched and zero-out-degree vertices keep the identity. Products of
//! such matrices stay in the same family, giving the cumulative closed form
//! `alpha_bar_t I + ((1 - alpha_bar_t) / d) 11^T`.

use super::schedule::NoiseSchedule;
use crate::palm::PalmShape;

/// Pairs the graph's PALM shape with a noise schedule and exposes single-step
/// and cumulative transition probabilities in closed form.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    shape: PalmShape,
    schedule: NoiseSchedule,
}

impl TransitionKernel {
    pub fn new(shape: PalmShape, schedule: NoiseSchedule) -> Self {
        Self { shape, schedule }
    }

    pub fn shape(&self) -> &PalmShape {
        &self.shape
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn timesteps(&self) -> usize {
        self.schedule.timesteps()
    }

    /// Single-step probability `P(x_t = i | x_{t-1} = j)` within a degree-`d`
    /// block.
    pub fn step_prob(&self, d: usize, t: usize, i: usize, j: usize) -> f64 {
        debug_assert!(i < d && j < d);
        let beta = self.schedule.beta(t);
        let off = beta / d as f64;
        if i == j {
            1.0 - beta + off
        } else {
            off
        }
    }

    /// Cumulative probability `P(x_t = i | x_0 = j)` within a degree-`d`
    /// block.
    pub fn cumulative_prob(&self, d: usize, t: usize, i: usize, j: usize) -> f64 {
        debug_assert!(i < d && j < d);
        let bar = self.schedule.alpha_bar(t);
        let off = (1.0 - bar) / d as f64;
        if i == j {
            bar + off
        } else {
            off
        }
    }

    /// Dense single-step block (row `i`, column `j` = `step_prob(d,t,i,j)`).
    pub fn step_block(&self, d: usize, t: usize) -> Vec<Vec<f64>> {
        (0..d).map(|i| (0..d).map(|j| self.step_prob(d, t, i, j)).collect()).collect()
    }

    /// Dense cumulative block.
    pub fn cumulative_block(&self, d: usize, t: usize) -> Vec<Vec<f64>> {
        (0..d).map(|i| (0..d).map(|j| self.cumulative_prob(d, t, i, j)).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::DEFAULT_COSINE_OFFSET;

    fn kernel(timesteps: usize) -> TransitionKernel {
        let shape = PalmShape { num_vertices: 1, max_out_degree: 8, out_degrees: vec![8] };
        TransitionKernel::new(shape, NoiseSchedule::cosine(timesteps, DEFAULT_COSINE_OFFSET))
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn step_blocks_are_doubly_stochastic() {
        let k = kernel(64);
        for d in 1..=8 {
            for t in [1, 13, 64] {
                let m = k.step_block(d, t);
                for i in 0..d {
                    let row: f64 = m[i].iter().sum();
                    let col: f64 = (0..d).map(|j| m[j][i]).sum();
                    assert!((row - 1.0).abs() < 1e-12);
                    assert!((col - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_beta_two_state_block() {
        let shape = PalmShape { num_vertices: 1, max_out_degree: 2, out_degrees: vec![2] };
        let k = TransitionKernel::new(shape, NoiseSchedule::from_betas(vec![0.5]));
        let m = k.step_block(2, 1);
        assert_eq!(m, vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
    }

    #[test]
    fn cumulative_blocks_match_explicit_products() {
        let k = kernel(256);
        for d in 1..=8usize {
            let mut product: Vec<Vec<f64>> =
                (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            for t in 1..=256 {
                product = matmul(&k.step_block(d, t), &product);
                if t % 64 == 0 || t == 1 {
                    let closed = k.cumulative_block(d, t);
                    for i in 0..d {
                        for j in 0..d {
                            assert!(
                                (product[i][j] - closed[i][j]).abs() < 1e-10,
                                "d={d} t={t} ({i},{j}): {} vs {}",
                                product[i][j],
                                closed[i][j]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn terminal_state_is_nearly_uniform() {
        let k = kernel(256);
        for d in 2..=8usize {
            let uniform = 1.0 / d as f64;
            for j in 0..d {
                let tv = (0..d)
                    .map(|i| (k.cumulative_prob(d, 256, i, j) - uniform).abs())
                    .fold(0.0, f64::max);
                assert!(tv < 1e-3, "d={d} start={j} tv={tv}");
            }
        }
    }

    #[test]
    fn degree_one_blocks_are_identity() {
        let k = kernel(16);
        for t in 1..=16 {
            assert_eq!(k.step_block(1, t), vec![vec![1.0]]);
            assert_eq!(k.cumulative_block(1, t), vec![vec![1.0]]);
        }
    }
}
