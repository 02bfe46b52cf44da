//! The trainable denoising network: maps a noisy PALM and a timestep to PALM
//! logits.
//!
//! At this scale the backbone is a residual multilayer perceptron over the
//! flattened PALM (one-hot rows concatenated with the padding-mask channel,
//! so the network can tell structural zeros from category zeros), with a
//! sinusoidal timestep embedding added to the first hidden layer. Parameters
//! live in one flat `f64` buffer with a named-tensor layout, which keeps the
//! optimizer, checkpoint serialization and finite-difference probes trivial.
//! The final layer starts at zero so the untrained predictive distribution is
//! uniform over each vertex's active entries.

use crate::palm::{Palm, PalmDistribution, PalmShape};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(thiserror::Error, Debug)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in tensor `{name}`")]
    NonFiniteGradient { name: String },
    #[error("checkpoint parameters do not match the configured layout: {0}")]
    LayoutMismatch(String),
}

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden_width: usize,
    pub residual_blocks: usize,
    pub time_embed_dim: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { hidden_width: 64, residual_blocks: 2, time_embed_dim: 32, init_seed: 0 }
    }
}

/// A named parameter tensor in serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize, // 0 marks a vector of length `rows`
    offset: usize,
}

impl TensorSpec {
    fn len(&self) -> usize {
        self.rows * self.cols.max(1)
    }

    fn shape_vec(&self) -> Vec<usize> {
        if self.cols == 0 {
            vec![self.rows]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
    // Tensor indices by role.
    w_in: usize,
    w_time: usize,
    b_in: usize,
    blocks: Vec<[usize; 4]>, // w1, b1, w2, b2
    w_out: usize,
    b_out: usize,
}

impl Layout {
    fn new(config: &DenoiserConfig, input_dim: usize, output_dim: usize) -> Self {
        let h = config.hidden_width;
        let e = config.time_embed_dim;
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| -> usize {
            let spec = TensorSpec { name, rows, cols, offset };
            offset += spec.len();
            tensors.push(spec);
            tensors.len() - 1
        };
        let w_in = push("w_in".into(), h, input_dim);
        let w_time = push("w_time".into(), h, e);
        let b_in = push("b_in".into(), h, 0);
        let mut blocks = Vec::with_capacity(config.residual_blocks);
        for i in 0..config.residual_blocks {
            let w1 = push(format!("block{i}.w1"), h, h);
            let b1 = push(format!("block{i}.b1"), h, 0);
            let w2 = push(format!("block{i}.w2"), h, h);
            let b2 = push(format!("block{i}.b2"), h, 0);
            blocks.push([w1, b1, w2, b2]);
        }
        let w_out = push("w_out".into(), output_dim, h);
        let b_out = push("b_out".into(), output_dim, 0);
        Layout { total: offset, tensors, w_in, w_time, b_in, blocks, w_out, b_out }
    }
}

/// Flattened input features for a PALM state: one-hot rows then the padding
/// mask, both in the rectangular `V x D_max` layout.
pub fn palm_features(shape: &PalmShape, x: &Palm) -> Vec<f64> {
    let flat = shape.flat_len();
    let mut out = vec![0.0; 2 * flat];
    for v in 0..shape.num_vertices {
        if let Some(j) = x.choice(v) {
            out[shape.flat_index(v, j as usize)] = 1.0;
        }
        for j in 0..shape.out_degrees[v] {
            out[flat + shape.flat_index(v, j)] = 1.0;
        }
    }
    out
}

/// Sinusoidal embedding of a timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn dsilu(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Cached activations from a forward pass, consumed by [`Denoiser::backward`].
pub(crate) struct ForwardTrace {
    x: Array2<f64>,
    te: Array2<f64>,
    h0_pre: Array2<f64>,
    blocks: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>, // (h_in, u1, a1)
    h_final: Array2<f64>,
}

/// The denoising network: configuration, PALM shape, and flat parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    shape: PalmShape,
    layout: Layout,
    params: Vec<f64>,
}

impl Denoiser {
    /// Fresh network with symmetric uniform fan-in init and a zeroed final
    /// layer, seeded by `config.init_seed`.
    pub fn new(config: DenoiserConfig, shape: PalmShape) -> Self {
        let input_dim = 2 * shape.flat_len();
        let output_dim = shape.flat_len();
        let layout = Layout::new(&config, input_dim, output_dim);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        for spec in &layout.tensors {
            if spec.cols == 0 || spec.name == "w_out" {
                continue; // biases and the final layer stay zero
            }
            let bound = 1.0 / (spec.cols as f64).sqrt();
            for p in &mut params[spec.offset..spec.offset + spec.len()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { config, shape, layout, params }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn shape(&self) -> &PalmShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        2 * self.shape.flat_len()
    }

    pub fn output_dim(&self) -> usize {
        self.shape.flat_len()
    }

    fn weight(&self, idx: usize) -> ArrayView2<'_, f64> {
        let spec = &self.layout.tensors[idx];
        ArrayView2::from_shape((spec.rows, spec.cols), &self.params[spec.offset..spec.offset + spec.len()])
            .expect("layout offsets are consistent")
    }

    fn bias(&self, idx: usize) -> ArrayView1<'_, f64> {
        let spec = &self.layout.tensors[idx];
        ArrayView1::from_shape(spec.rows, &self.params[spec.offset..spec.offset + spec.len()])
            .expect("layout offsets are consistent")
    }

    /// Logits for one PALM state; a pure deterministic function of
    /// `(params, x_t, t)`.
    pub fn predict(&self, x_t: &Palm, t: usize) -> Result<PalmDistribution, DenoiserError> {
        if x_t.num_rows() != self.shape.num_vertices {
            return Err(DenoiserError::ShapeMismatch(format!(
                "palm has {} rows, shape has {} vertices",
                x_t.num_rows(),
                self.shape.num_vertices
            )));
        }
        let x = Array2::from_shape_vec((1, self.input_dim()), palm_features(&self.shape, x_t))
            .expect("feature length matches input dim");
        let te = Array2::from_shape_vec(
            (1, self.config.time_embed_dim),
            time_embedding(t, self.config.time_embed_dim),
        )
        .expect("embedding length matches dim");
        let (logits, _) = self.forward_batch(&x, &te, false);
        Ok(self.flat_logits_to_distribution(logits.row(0)))
    }

    /// Splits one flat logits row into per-vertex active entries.
    pub(crate) fn flat_logits_to_distribution(&self, flat: ArrayView1<'_, f64>) -> PalmDistribution {
        let rows: Vec<Vec<f64>> = (0..self.shape.num_vertices)
            .map(|v| {
                let base = self.shape.flat_index(v, 0);
                (0..self.shape.out_degrees[v]).map(|j| flat[base + j]).collect()
            })
            .collect();
        PalmDistribution::from_rows(&self.shape, rows).expect("widths match by construction")
    }

    pub(crate) fn forward_batch(
        &self,
        x: &Array2<f64>,
        te: &Array2<f64>,
        want_trace: bool,
    ) -> (Array2<f64>, Option<ForwardTrace>) {
        let h0_pre = x.dot(&self.weight(self.layout.w_in).t())
            + te.dot(&self.weight(self.layout.w_time).t())
            + self.bias(self.layout.b_in);
        let mut h = h0_pre.mapv(silu);
        let mut block_traces = Vec::new();
        for handles in &self.layout.blocks {
            let [w1, b1, w2, b2] = *handles;
            let u1 = h.dot(&self.weight(w1).t()) + self.bias(b1);
            let a1 = u1.mapv(silu);
            let u2 = a1.dot(&self.weight(w2).t()) + self.bias(b2);
            let h_next = &h + &u2;
            if want_trace {
                block_traces.push((h, u1, a1));
            }
            h = h_next;
        }
        let logits = h.dot(&self.weight(self.layout.w_out).t()) + self.bias(self.layout.b_out);
        let trace = want_trace.then(|| ForwardTrace {
            x: x.clone(),
            te: te.clone(),
            h0_pre,
            blocks: block_traces,
            h_final: h,
        });
        (logits, trace)
    }

    /// Exact reverse-mode gradient of `sum_n <g_logits[n], logits[n]>` with
    /// respect to the flat parameters. Callers bake any mean scaling into
    /// `g_logits`.
    pub(crate) fn backward(&self, trace: &ForwardTrace, g_logits: &Array2<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let write = |grads: &mut Vec<f64>, idx: usize, m: &Array2<f64>| {
            let spec = &self.layout.tensors[idx];
            let dst = &mut grads[spec.offset..spec.offset + spec.len()];
            for (d, s) in dst.iter_mut().zip(m.iter()) {
                *d += s;
            }
        };
        let write_vec = |grads: &mut Vec<f64>, idx: usize, v: &Array1<f64>| {
            let spec = &self.layout.tensors[idx];
            let dst = &mut grads[spec.offset..spec.offset + spec.len()];
            for (d, s) in dst.iter_mut().zip(v.iter()) {
                *d += s;
            }
        };

        write(&mut grads, self.layout.w_out, &g_logits.t().dot(&trace.h_final));
        write_vec(&mut grads, self.layout.b_out, &g_logits.sum_axis(Axis(0)));
        let mut d_h = g_logits.dot(&self.weight(self.layout.w_out));

        for (handles, (h_in, u1, a1)) in
            self.layout.blocks.iter().zip(trace.blocks.iter()).rev()
        {
            let [w1, b1, w2, b2] = *handles;
            let d_u2 = &d_h;
            write(&mut grads, w2, &d_u2.t().dot(a1));
            write_vec(&mut grads, b2, &d_u2.sum_axis(Axis(0)));
            let d_a1 = d_u2.dot(&self.weight(w2));
            let d_u1 = &d_a1 * &u1.mapv(dsilu);
            write(&mut grads, w1, &d_u1.t().dot(h_in));
            write_vec(&mut grads, b1, &d_u1.sum_axis(Axis(0)));
            d_h = d_h + d_u1.dot(&self.weight(w1));
        }

        let d_h0_pre = &d_h * &trace.h0_pre.mapv(dsilu);
        write(&mut grads, self.layout.w_in, &d_h0_pre.t().dot(&trace.x));
        write(&mut grads, self.layout.w_time, &d_h0_pre.t().dot(&trace.te));
        write_vec(&mut grads, self.layout.b_in, &d_h0_pre.sum_axis(Axis(0)));
        grads
    }

    /// Parameters and shapes as named tensors, for checkpoints.
    pub fn named_arrays(&self) -> Vec<NamedArray> {
        self.layout
            .tensors
            .iter()
            .map(|spec| NamedArray {
                name: spec.name.clone(),
                shape: spec.shape_vec(),
                data: self.params[spec.offset..spec.offset + spec.len()].to_vec(),
            })
            .collect()
    }

    /// Rebuilds a network from checkpointed tensors; names and shapes must
    /// match the layout implied by `config` and `shape` exactly.
    pub fn from_named_arrays(
        config: DenoiserConfig,
        shape: PalmShape,
        arrays: &[NamedArray],
    ) -> Result<Self, DenoiserError> {
        let mut net = Self::new(config, shape);
        if arrays.len() != net.layout.tensors.len() {
            return Err(DenoiserError::LayoutMismatch(format!(
                "expected {} tensors, found {}",
                net.layout.tensors.len(),
                arrays.len()
            )));
        }
        for (spec, array) in net.layout.tensors.iter().zip(arrays) {
            if spec.name != array.name || spec.shape_vec() != array.shape
                || spec.len() != array.data.len()
            {
                return Err(DenoiserError::LayoutMismatch(format!(
                    "tensor `{}` has shape {:?}, expected `{}` {:?}",
                    array.name,
                    array.shape,
                    spec.name,
                    spec.shape_vec()
                )));
            }
            net.params[spec.offset..spec.offset + spec.len()].copy_from_slice(&array.data);
        }
        Ok(net)
    }

    fn tensor_name_at(&self, flat_index: usize) -> &str {
        self.layout
            .tensors
            .iter()
            .find(|s| flat_index >= s.offset && flat_index < s.offset + s.len())
            .map(|s| s.name.as_str())
            .unwrap_or("?")
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer over the flat parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update: decoupled decay `p *= 1 - lr * wd`, then the
    /// bias-corrected moment step.
    pub fn step(&mut self, net: &mut Denoiser, grad: &[f64]) -> Result<(), DenoiserError> {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(DenoiserError::NonFiniteGradient { name: net.tensor_name_at(i).to_string() });
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let params = net.params_mut();
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] *= 1.0 - self.lr * self.weight_decay;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn batch_arrays(model: &Denoiser, batch: &[crate::diffusion::LossExample]) -> (Array2<f64>, Array2<f64>) {
    let n = batch.len();
    let mut x = Array2::zeros((n, model.input_dim()));
    let mut te = Array2::zeros((n, model.config().time_embed_dim));
    for (i, example) in batch.iter().enumerate() {
        let features = palm_features(model.shape(), &example.x_t);
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&features));
        let embedding = time_embedding(example.t, model.config().time_embed_dim);
        te.row_mut(i).assign(&ndarray::ArrayView1::from(&embedding));
    }
    (x, te)
}

/// Exact reverse-mode gradient of the mean masked loss over a batch of
/// `(x_t, t, x0, mask)` examples, with the mean loss terms. An empty batch
/// yields a zero gradient.
pub fn gradient_of_loss(
    model: &Denoiser,
    kernel: &crate::diffusion::TransitionKernel,
    batch: &[crate::diffusion::LossExample],
    gamma: f64,
) -> (crate::diffusion::LossTerms, Vec<f64>) {
    use crate::diffusion::{loss_from_logits, LossTerms};
    if batch.is_empty() {
        return (LossTerms::default(), vec![0.0; model.num_params()]);
    }
    let n = batch.len();
    let (x, te) = batch_arrays(model, batch);
    let (logits, trace) = model.forward_batch(&x, &te, true);
    let trace = trace.expect("trace requested");

    let scale = 1.0 / n as f64;
    let mut g_logits = Array2::zeros((n, model.output_dim()));
    let mut mean = LossTerms::default();
    for (i, example) in batch.iter().enumerate() {
        let z = model.flat_logits_to_distribution(logits.row(i));
        let mut grad_rows = crate::palm::PalmDistribution::zeros(model.shape());
        let terms = loss_from_logits(kernel, &z, example, gamma, Some((&mut grad_rows, scale)));
        mean.total += terms.total * scale;
        mean.ce += terms.ce * scale;
        mean.vb += terms.vb * scale;
        let mut out_row = g_logits.row_mut(i);
        for v in 0..model.shape().num_vertices {
            let base = model.shape().flat_index(v, 0);
            for (j, &gv) in grad_rows.row(v).iter().enumerate() {
                out_row[base + j] = gv;
            }
        }
    }
    let grads = model.backward(&trace, &g_logits);
    (mean, grads)
}

/// Mean masked loss over a batch, without gradients (validation curves).
pub fn batch_loss(
    model: &Denoiser,
    kernel: &crate::diffusion::TransitionKernel,
    batch: &[crate::diffusion::LossExample],
    gamma: f64,
) -> crate::diffusion::LossTerms {
    use crate::diffusion::{loss_from_logits, LossTerms};
    if batch.is_empty() {
        return LossTerms::default();
    }
    let (x, te) = batch_arrays(model, batch);
    let (logits, _) = model.forward_batch(&x, &te, false);
    let mut mean = LossTerms::default();
    let scale = 1.0 / batch.len() as f64;
    for (i, example) in batch.iter().enumerate() {
        let z = model.flat_logits_to_distribution(logits.row(i));
        let terms = loss_from_logits(kernel, &z, example, gamma, None);
        mean.total += terms.total * scale;
        mean.ce += terms.ce * scale;
        mean.vb += terms.vb * scale;
    }
    mean
}
