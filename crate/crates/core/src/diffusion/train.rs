//! Training orchestration and the checkpoint format.
//!
//! Each epoch re-encodes every training path to a fresh PALM (new off-path
//! randomness), draws one timestep per example uniformly in `1..=T`, and
//! applies one optimizer update per minibatch. All randomness comes from
//! streams keyed by `(seed, epoch, example index)`, so runs are bit-identical
//! for a given seed.

use super::{q_sample, DiffusionError, LossExample, TransitionKernel};
use crate::denoiser::{batch_loss, gradient_of_loss, AdamW, Denoiser, DenoiserConfig, NamedArray};
use crate::diffusion::schedule::{NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::graph::{Dataset, LayeredGraph};
use crate::palm::{encode, PalmShape};
use crate::seeds;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Format tag written into checkpoint files.
pub const CHECKPOINT_FORMAT: &str = "palm-diffusion-checkpoint/v1";

/// Optimization and schedule settings; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub timesteps: usize,
    /// Weight on the variational-bound term (cross-entropy is the anchor).
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for validation curves.
    pub val_split: f64,
    #[serde(default = "default_offset")]
    pub schedule_offset: f64,
}

fn default_offset() -> f64 {
    DEFAULT_COSINE_OFFSET
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 256,
            gamma: 1.0,
            epochs: 100,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            val_split: 0.2,
            schedule_offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

/// Losses recorded after each epoch (validation fields empty when the split
/// holds no examples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub val_loss: Option<f64>,
    pub val_ce: Option<f64>,
}

/// Versioned container for everything needed to resume or sample: graph
/// fingerprint, shapes, configs, parameters and optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub graph_fingerprint: String,
    pub palm_shape: PalmShape,
    pub denoiser_config: DenoiserConfig,
    pub train_config: TrainConfig,
    pub params: Vec<NamedArray>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    /// Refuses to pair the checkpoint with a different graph.
    pub fn ensure_graph(&self, g: &LayeredGraph) -> Result<(), DiffusionError> {
        let found = g.fingerprint();
        if self.graph_fingerprint != found {
            return Err(DiffusionError::FingerprintMismatch {
                expected: self.graph_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn denoiser(&self) -> Result<Denoiser, DiffusionError> {
        Ok(Denoiser::from_named_arrays(
            self.denoiser_config.clone(),
            self.palm_shape.clone(),
            &self.params,
        )?)
    }

    pub fn kernel(&self) -> TransitionKernel {
        TransitionKernel::new(
            self.palm_shape.clone(),
            NoiseSchedule::cosine(self.train_config.timesteps, self.train_config.schedule_offset),
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DiffusionError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DiffusionError> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(DiffusionError::Format(format!(
                "unsupported format tag `{}`",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}

/// A trained checkpoint plus its per-epoch loss curves.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub curves: Vec<EpochStats>,
}

fn make_example(
    g: &LayeredGraph,
    kernel: &TransitionKernel,
    dataset: &Dataset,
    index: usize,
    rng: &mut impl Rng,
) -> LossExample {
    let path = &dataset.paths[index];
    let x0 = encode(g, path, rng);
    let on_path = super::on_path_mask(g, path);
    let t = rng.random_range(1..=kernel.timesteps());
    let x_t = q_sample(kernel, &x0, t, rng).expect("t drawn in range");
    LossExample { x_t, x0, on_path, t }
}

/// Minibatch training with the decoupled-weight-decay adaptive-moment
/// optimizer; deterministic given `config.seed`.
pub fn train(
    g: &LayeredGraph,
    dataset: &Dataset,
    config: &TrainConfig,
    arch: &DenoiserConfig,
) -> Result<TrainResult, DiffusionError> {
    if dataset.paths.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if dataset.graph_fingerprint != g.fingerprint() {
        return Err(DiffusionError::FingerprintMismatch {
            expected: dataset.graph_fingerprint.clone(),
            found: g.fingerprint(),
        });
    }
    assert!((0.0..1.0).contains(&config.val_split), "val_split must lie in [0, 1)");
    assert!(config.gamma >= 0.0 && config.timesteps >= 1);

    let shape = PalmShape::of(g);
    let kernel = TransitionKernel::new(
        shape.clone(),
        NoiseSchedule::cosine(config.timesteps, config.schedule_offset),
    );
    let mut model = Denoiser::new(arch.clone(), shape.clone());
    let mut optimizer =
        AdamW::new(model.num_params(), config.learning_rate, config.weight_decay);

    let mut indices: Vec<usize> = (0..dataset.paths.len()).collect();
    indices.shuffle(&mut seeds::rng(config.seed, seeds::domain::SPLIT, 0));
    let val_count = (dataset.paths.len() as f64 * config.val_split).floor() as usize;
    let (val_indices, train_indices) = indices.split_at(val_count);

    let mut curves = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_indices.to_vec();
        order.shuffle(&mut seeds::rng(config.seed, seeds::domain::EPOCH_SHUFFLE, epoch as u64));

        let mut sum_loss = 0.0;
        let mut sum_ce = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let batch: Vec<LossExample> = chunk
                .iter()
                .map(|&index| {
                    let stream = ((epoch as u64) << 32) | index as u64;
                    let mut rng = seeds::rng(config.seed, seeds::domain::EXAMPLE, stream);
                    make_example(g, &kernel, dataset, index, &mut rng)
                })
                .collect();
            let (terms, grads) = gradient_of_loss(&model, &kernel, &batch, config.gamma);
            if !terms.total.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { epoch, step, value: terms.total });
            }
            optimizer.step(&mut model, &grads)?;
            sum_loss += terms.total * chunk.len() as f64;
            sum_ce += terms.ce * chunk.len() as f64;
            seen += chunk.len();
        }

        let (val_loss, val_ce) = if val_indices.is_empty() {
            (None, None)
        } else {
            let mut sum = 0.0;
            let mut sum_ce = 0.0;
            for chunk in val_indices.chunks(config.batch_size.max(1)) {
                let batch: Vec<LossExample> = chunk
                    .iter()
                    .map(|&index| {
                        let stream = ((epoch as u64) << 32) | index as u64;
                        let mut rng =
                            seeds::rng(config.seed, seeds::domain::VALIDATION, stream);
                        make_example(g, &kernel, dataset, index, &mut rng)
                    })
                    .collect();
                let terms = batch_loss(&model, &kernel, &batch, config.gamma);
                sum += terms.total * chunk.len() as f64;
                sum_ce += terms.ce * chunk.len() as f64;
            }
            let n = val_indices.len() as f64;
            (Some(sum / n), Some(sum_ce / n))
        };

        curves.push(EpochStats {
            epoch,
            train_loss: if seen == 0 { 0.0 } else { sum_loss / seen as f64 },
            train_ce: if seen == 0 { 0.0 } else { sum_ce / seen as f64 },
            val_loss,
            val_ce,
        });
    }

    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        graph_fingerprint: g.fingerprint(),
        palm_shape: shape,
        denoiser_config: arch.clone(),
        train_config: config.clone(),
        params: model.named_arrays(),
        optimizer,
    };
    Ok(TrainResult { checkpoint, curves })
}

/// One CSV row per epoch; missing validation cells stay empty.
pub fn write_loss_csv(curves: &[EpochStats], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,train_ce,val_loss,val_ce")?;
    for row in curves {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            row.epoch,
            row.train_loss,
            row.train_ce,
            opt(row.val_loss),
            opt(row.val_ce)
        )?;
    }
    Ok(())
}
