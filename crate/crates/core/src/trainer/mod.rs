//! Projection-head training over frozen base embeddings with hard negatives.

mod batch;
mod checkpoint;
mod loss;
mod model;
mod schedule;

pub use batch::{assemble_batch, BatchOptions, TrainDataset};
pub use checkpoint::{write_trace, Checkpoint, CheckpointMeta, TraceRow, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{loss_forward, loss_gradient, symmetric_contrastive, ContrastiveBatch, LossParts, Provenance};
pub use model::{Head, HeadKind, ParamBlock, ParamBlockMut, ProjectionModel, INIT_TEMPERATURE, MAX_LOGIT_SCALE};
pub use schedule::{AdamW, AdamWConfig, WarmupCosine};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embeddings::{top_k_neighbors, EmbeddingKind, EmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH: u64 = 1 << 32;
const STREAM_STEP: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Step at which the cosine schedule reaches zero; also a hard stop.
    /// Defaults to `epochs * ceil(pairs / batch_size)`.
    pub total_steps: Option<usize>,
    pub neighbor_k: usize,
    pub use_neg_captions: bool,
    pub use_neg_images: bool,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub d_out: usize,
    pub head: HeadKind,
    /// Validate every this many steps in addition to each epoch end.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 50,
            total_steps: None,
            neighbor_k: 3,
            use_neg_captions: true,
            use_neg_images: true,
            seed: 0,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            d_out: 64,
            head: HeadKind::Linear,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.d_out == 0 {
            return fail("d_out must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if let Some(total) = self.total_steps {
            if self.warmup_steps > total {
                return fail("warmup_steps exceeds total_steps");
            }
        }
        if self.use_neg_images && self.neighbor_k == 0 {
            return fail("neighbor_k must be at least 1 when use_neg_images is set");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        if let HeadKind::Mlp { hidden: 0 } = self.head {
            return fail("mlp hidden width must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> usize {
        pairs.div_ceil(self.batch_size)
    }

    pub fn resolved_total_steps(&self, pairs: usize) -> usize {
        self.total_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(pairs))
    }
}

/// Held-out aligned pairs used for model selection.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub images: Array2<f64>,
    pub captions: Array2<f64>,
    /// Image row for each caption row.
    pub pair_image: Vec<usize>,
}

impl ValidationSet {
    /// One caption per image, row-aligned.
    pub fn aligned(images: Array2<f64>, captions: Array2<f64>) -> Self {
        let pair_image = (0..captions.nrows()).collect();
        Self {
            images,
            captions,
            pair_image,
        }
    }
}

/// Recall@1 in both directions; ties resolve to the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalR1 {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

impl RetrievalR1 {
    pub fn mean(&self) -> f64 {
        0.5 * (self.image_to_text + self.text_to_image)
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn retrieval_r1(model: &ProjectionModel, val: &ValidationSet) -> Result<RetrievalR1> {
    let zi = model.embed_images(&val.images)?;
    let zt = model.embed_texts(&val.captions)?;
    let sim = zi.dot(&zt.t());
    let mut i2t = 0usize;
    for (img, row) in sim.rows().into_iter().enumerate() {
        if val.pair_image[argmax(row)] == img {
            i2t += 1;
        }
    }
    let mut t2i = 0usize;
    for (cap, col) in sim.columns().into_iter().enumerate() {
        if argmax(col) == val.pair_image[cap] {
            t2i += 1;
        }
    }
    Ok(RetrievalR1 {
        image_to_text: i2t as f64 / sim.nrows().max(1) as f64,
        text_to_image: t2i as f64 / sim.ncols().max(1) as f64,
    })
}

/// Exact `k` nearest image rows (self excluded) by cosine similarity.
pub fn neighbor_rows(images: &Array2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let width = images.nrows().to_string().len();
    let rows = images
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (format!("{i:0width$}"), r.to_vec()));
    let set = EmbeddingSet::from_rows(EmbeddingKind::Image, images.ncols(), rows)?;
    let table = top_k_neighbors(&set, k)?;
    Ok(table
        .neighbors
        .iter()
        .map(|ns| ns.iter().map(|n| n.index).collect())
        .collect())
}

/// Rows of `set` for `ids`, in order, as an `ids.len() × dim` matrix.
pub fn gather_rows(set: &EmbeddingSet, ids: &[&str]) -> Result<Array2<f64>> {
    let mut data = Vec::with_capacity(ids.len() * set.dim());
    let mut missing = Vec::new();
    for id in ids {
        match set.get(id) {
            Some(row) => data.extend(row.iter().map(|&x| f64::from(x))),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    Ok(Array2::from_shape_vec((ids.len(), set.dim()), data).expect("rows have set width"))
}

/// Passes every row through the head matching the set's kind.
pub fn project_set(model: &ProjectionModel, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != model.d_in() {
        return Err(Error::DimMismatch {
            expected: model.d_in(),
            found: set.dim(),
        });
    }
    let ids: Vec<&str> = set.ids().iter().map(String::as_str).collect();
    let x = gather_rows(set, &ids)?;
    let z = match set.kind() {
        EmbeddingKind::Image => model.embed_images(&x)?,
        EmbeddingKind::Text => model.embed_texts(&x)?,
    };
    let rows = set.ids().iter().cloned().zip(z.rows().into_iter().map(|r| r.to_vec()));
    EmbeddingSet::from_rows(set.kind(), model.d_out(), rows)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    pub best_step: usize,
    pub best_val_r1: Option<f64>,
    pub final_model: ProjectionModel,
    pub steps: usize,
    pub trace: Vec<TraceRow>,
}

/// Runs the optimizer loop.
///
/// With a validation set the returned `model` is the one with the best mean
/// R@1 over the evaluation points (epoch ends and `eval_every`); otherwise
/// it is the final model.
pub fn train(
    data: &TrainDataset,
    neighbors: Option<&[Vec<usize>]>,
    val: Option<&ValidationSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let data = if cfg.use_neg_captions {
        data.retain_with_negatives()
    } else {
        data.clone()
    };
    if data.num_pairs() == 0 {
        return Err(Error::invalid("no training pair has a negative caption"));
    }
    let computed;
    let neighbors = match (cfg.use_neg_images, neighbors) {
        (false, _) => None,
        (true, Some(t)) => Some(t),
        (true, None) => {
            computed = neighbor_rows(&data.images, cfg.neighbor_k)?;
            Some(computed.as_slice())
        }
    };
    let image_pairs = data.image_pairs();

    let n = data.num_pairs();
    let total = cfg.resolved_total_steps(n);
    let per_epoch = cfg.steps_per_epoch(n);
    let schedule = WarmupCosine {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        total_steps: total,
    };
    let mut model = ProjectionModel::init(
        cfg.head,
        data.d_in(),
        cfg.d_out,
        &mut SplitMix64::new(derive_seed(cfg.seed, STREAM_INIT)),
    );
    let mut opt = AdamW::new(cfg.adam(), &model);
    let opts = BatchOptions {
        use_neg_captions: cfg.use_neg_captions,
        neighbors,
    };

    let mut trace = Vec::with_capacity(total);
    let mut best: Option<(f64, usize, ProjectionModel)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let order = SplitMix64::new(derive_seed(cfg.seed, STREAM_EPOCH + epoch as u64)).permutation(n);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total {
                break 'epochs;
            }
            let mut rng = SplitMix64::new(derive_seed(cfg.seed, STREAM_STEP + step as u64));
            let batch = assemble_batch(&data, &image_pairs, chunk, opts, &mut rng)?;
            let (parts, grad) = loss_gradient(&model, &batch)?;
            let lr = schedule.lr(step);
            opt.step(&mut model, &grad, lr);
            step += 1;
            if !model.is_finite() {
                return Err(Error::Diverged { step });
            }
            let epoch_end = b + 1 == per_epoch;
            let periodic = cfg.eval_every.is_some_and(|e| e > 0 && step.is_multiple_of(e));
            let val_r1 = match val {
                Some(v) if epoch_end || periodic || step == total => Some(retrieval_r1(&model, v)?.mean()),
                _ => None,
            };
            if let Some(r) = val_r1 {
                if best.as_ref().is_none_or(|(b, _, _)| r >= *b) {
                    best = Some((r, step, model.clone()));
                }
            }
            trace.push(TraceRow {
                step,
                lr,
                loss: parts.loss,
                val_r1,
            });
        }
    }
    let (best_model, best_step, best_val_r1) = match best {
        Some((r, s, m)) => (m, s, Some(r)),
        None => (model.clone(), step, None),
    };
    Ok(TrainOutcome {
        model: best_model,
        best_step,
        best_val_r1,
        final_model: model,
        steps: step,
        trace,
    })
}
