//! The training loop: deep-supervised soft-IoU loss, AdamW with poly
//! decay, and a deterministic per-epoch shuffle.

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{splitmix64, Sample};
use crate::graph::{Graph, GraphError};
use crate::loss::{deep_supervision_loss, LossError};
use crate::metrics::{self, ConfusionCounts};
use crate::model::AbcModel;
use crate::optim::{adamw_step, poly_lr, AdamConfig, AdamState, OptimError};
use crate::params::ForwardCtx;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f32,
    pub batch_size: usize,
    pub poly_power: f32,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Smoothing constant of the soft-IoU loss.
    pub loss_eps: f32,
    /// Random horizontal flip augmentation.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            base_lr: 3e-4,
            batch_size: 4,
            poly_power: 0.9,
            adam: AdamConfig::default(),
            seed: 0,
            loss_eps: 1.0,
            flip: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f32,
    pub train_iou: f64,
}

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    ResolutionMismatch { expected: (usize, usize), got: usize },
    /// Loss became NaN; training is aborted, never silently continued.
    NanLoss { epoch: usize, step: u64 },
    Graph(GraphError),
    Loss(LossError),
    Optim(OptimError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset is empty"),
            TrainError::ResolutionMismatch { expected, got } => write!(
                f,
                "sample has {got} pixels, model expects {}x{}",
                expected.0, expected.1
            ),
            TrainError::NanLoss { epoch, step } => {
                write!(f, "NaN loss at epoch {epoch}, step {step}; aborting")
            }
            TrainError::Graph(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}

fn hflip(buf: &mut [f32], h: usize, w: usize) {
    for y in 0..h {
        buf[y * w..(y + 1) * w].reverse();
    }
}

/// Runs `epochs` over the dataset. Deterministic given the seed: fixed
/// shuffle order, fixed flip draws, single-threaded accumulation.
/// `on_epoch` fires after every epoch with the freshly updated model.
pub fn fit(
    model: &mut AbcModel,
    state: &mut AdamState,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&AbcModel, &AdamState, &EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (h, w) = (model.config.height, model.config.width);
    for s in dataset {
        if s.image.len() != h * w || s.mask.len() != h * w {
            return Err(TrainError::ResolutionMismatch {
                expected: (h, w),
                got: s.image.len(),
            });
        }
    }
    assert!(cfg.epochs >= 1 && cfg.batch_size >= 1 && cfg.base_lr >= 0.0);

    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let max_iter = (cfg.epochs * batches_per_epoch) as u64;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(epoch as u64)));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0f64;
        let mut counts = ConfusionCounts::default();
        let mut last_lr = 0f32;

        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let mut images = Vec::with_capacity(n * h * w);
            let mut targets = Vec::with_capacity(n * h * w);
            for &i in batch {
                let mut img = dataset[i].image.clone();
                let mut msk = dataset[i].mask.clone();
                if cfg.flip && rng.gen_bool(0.5) {
                    hflip(&mut img, h, w);
                    hflip(&mut msk, h, w);
                }
                images.extend_from_slice(&img);
                targets.extend_from_slice(&msk);
            }

            let mut g = Graph::new();
            let mut ctx = ForwardCtx::new(&model.store);
            let input = g.constant(&[n, 1, h, w], images);
            let out = model.forward(&mut g, &mut ctx, input)?;
            let loss = deep_supervision_loss(
                &mut g,
                out.main_logits,
                &out.aux_logits,
                &targets,
                cfg.loss_eps,
            )?;
            let loss_val = g.data(loss)[0];
            if loss_val.is_nan() {
                return Err(TrainError::NanLoss { epoch, step: state.step });
            }
            g.backward(loss)?;

            let grads: Vec<Vec<f32>> = model
                .store
                .iter()
                .map(|(id, _)| ctx.grad(&g, &model.store, id))
                .collect();
            let lr = poly_lr(cfg.base_lr, state.step, max_iter, cfg.poly_power);
            adamw_step(&mut model.store, state, &grads, lr, &cfg.adam)?;
            last_lr = lr;
            loss_sum += loss_val as f64;

            // train-set confusion at threshold 0.5 (p >= 0.5 is positive,
            // i.e. logit >= 0)
            let logits = g.data(out.main_logits);
            let pred: Vec<f32> = logits.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
            let c = metrics::confusion(&pred, &targets).expect("binary by construction");
            counts.merge(&c);
        }

        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            lr: last_lr,
            train_iou: metrics::iou(&counts),
        };
        on_epoch(model, state, &record);
        log.push(record);
    }
    Ok(log)
}
