//! Contrastive objective over images versus `[captions ∥ negative captions]`.
//!
//! For `n` aligned rows the logit matrix is `n × 2n` (or `n × n` without
//! negative captions). Every image row gets a cross-entropy term over all
//! columns; only true-caption columns get a column-wise term, computed over
//! the `n` image rows. The loss is the mean of the two directions.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::model::{HeadCache, ProjectionModel, MAX_LOGIT_SCALE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Base,
    MinedNeighbor,
}

/// Row-aligned image, caption and (optional) negative-caption vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub image_vecs: Array2<f64>,
    pub caption_vecs: Array2<f64>,
    pub neg_caption_vecs: Option<Array2<f64>>,
    pub provenance: Vec<Provenance>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.image_vecs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, d_in: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut blocks = vec![&self.image_vecs, &self.caption_vecs];
        blocks.extend(self.neg_caption_vecs.as_ref());
        for b in blocks {
            if b.nrows() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    found: b.nrows(),
                });
            }
            if b.ncols() != d_in {
                return Err(Error::DimMismatch {
                    expected: d_in,
                    found: b.ncols(),
                });
            }
        }
        if self.provenance.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                found: self.provenance.len(),
            });
        }
        Ok(())
    }

    /// Same rows in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            image_vecs: self.image_vecs.select(Axis(0), order),
            caption_vecs: self.caption_vecs.select(Axis(0), order),
            neg_caption_vecs: self.neg_caption_vecs.as_ref().map(|m| m.select(Axis(0), order)),
            provenance: order.iter().map(|&i| self.provenance[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

fn log_sum_exp(v: ArrayView1<f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + v.mapv(|x| (x - m).exp()).sum().ln()
}

fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(v);
    v.mapv(|x| (x - lse).exp())
}

fn normalize_rows(z: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::non_finite(format!("{what} norm")));
    }
    let unit = z / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Backpropagates through `x̂ = z / ‖z‖`: `dz = (dx̂ − x̂ (x̂·dx̂)) / ‖z‖`.
fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &Array2<f64>) -> Array2<f64> {
    let proj = (unit * d_unit).sum_axis(Axis(1)).insert_axis(Axis(1));
    (d_unit - &(unit * &proj)) / norms.view().insert_axis(Axis(1))
}

fn ensure_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

struct Forward {
    parts: LossParts,
    scale: f64,
    sim: Array2<f64>,
    d_logits: Array2<f64>,
    img_unit: Array2<f64>,
    img_norms: Array1<f64>,
    img_cache: HeadCache,
    txt_unit: Array2<f64>,
    txt_norms: Array1<f64>,
    txt_caches: Vec<HeadCache>,
}

fn forward(model: &ProjectionModel, batch: &ContrastiveBatch) -> Result<Forward> {
    batch.validate(model.d_in())?;
    let n = batch.len();
    let scale = model.scale();
    if !scale.is_finite() {
        return Err(Error::non_finite("logit scale"));
    }

    let (zi, img_cache) = model.img.forward(&batch.image_vecs);
    let (zt, cache_t) = model.txt.forward(&batch.caption_vecs);
    let mut text_blocks = vec![zt];
    let mut txt_caches = vec![cache_t];
    if let Some(neg) = &batch.neg_caption_vecs {
        let (zu, cache_u) = model.txt.forward(neg);
        text_blocks.push(zu);
        txt_caches.push(cache_u);
    }
    let zc = concatenate(Axis(0), &text_blocks.iter().map(|b| b.view()).collect::<Vec<_>>())
        .expect("text blocks share width");
    ensure_finite(&zi, "projected images")?;
    ensure_finite(&zc, "projected texts")?;
    let (img_unit, img_norms) = normalize_rows(&zi, "projected image")?;
    let (txt_unit, txt_norms) = normalize_rows(&zc, "projected text")?;

    let sim = img_unit.dot(&txt_unit.t());
    let logits = &sim * scale;
    ensure_finite(&logits, "logits")?;

    let m = logits.ncols();
    let mut d_logits = Array2::<f64>::zeros((n, m));
    let mut i2t = 0.0;
    for j in 0..n {
        let row = logits.row(j);
        i2t += log_sum_exp(row) - row[j];
        let mut g = softmax(row);
        g[j] -= 1.0;
        d_logits.row_mut(j).scaled_add(0.5 / n as f64, &g);
    }
    i2t /= n as f64;

    let mut t2i = 0.0;
    for k in 0..n {
        let col = logits.column(k);
        t2i += log_sum_exp(col) - col[k];
        let mut g = softmax(col);
        g[k] -= 1.0;
        d_logits.column_mut(k).scaled_add(0.5 / n as f64, &g);
    }
    t2i /= n as f64;

    let loss = 0.5 * (i2t + t2i);
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok(Forward {
        parts: LossParts {
            loss,
            image_to_text: i2t,
            text_to_image: t2i,
        },
        scale,
        sim,
        d_logits,
        img_unit,
        img_norms,
        img_cache,
        txt_unit,
        txt_norms,
        txt_caches,
    })
}

pub fn loss_forward(model: &ProjectionModel, batch: &ContrastiveBatch) -> Result<LossParts> {
    forward(model, batch).map(|f| f.parts)
}

/// Loss together with its exact gradient for every parameter block.
pub fn loss_gradient(model: &ProjectionModel, batch: &ContrastiveBatch) -> Result<(LossParts, ProjectionModel)> {
    let f = forward(model, batch)?;
    let n = batch.len();
    let mut grad = model.zeros_like();

    // logits = scale * sim, scale = exp(logit_scale) until the clamp engages.
    let d_scale = (&f.d_logits * &f.sim).sum();
    grad.logit_scale = if model.logit_scale.exp() < MAX_LOGIT_SCALE {
        d_scale * f.scale
    } else {
        0.0
    };

    let d_sim = &f.d_logits * f.scale;
    let d_img_unit = d_sim.dot(&f.txt_unit);
    let d_txt_unit = d_sim.t().dot(&f.img_unit);

    let dzi = normalize_backward(&f.img_unit, &f.img_norms, &d_img_unit);
    let dzc = normalize_backward(&f.txt_unit, &f.txt_norms, &d_txt_unit);

    model.img.backward_into(&batch.image_vecs, &f.img_cache, &dzi, &mut grad.img);
    let inputs: Vec<&Array2<f64>> = std::iter::once(&batch.caption_vecs)
        .chain(batch.neg_caption_vecs.as_ref())
        .collect();
    for (b, (x, cache)) in inputs.into_iter().zip(&f.txt_caches).enumerate() {
        let dz = dzc.slice(s![b * n..(b + 1) * n, ..]).to_owned();
        model.txt.backward_into(x, cache, &dz, &mut grad.txt);
    }
    if !grad.is_finite() {
        return Err(Error::non_finite("gradient"));
    }
    Ok((f.parts, grad))
}

/// Plain symmetric contrastive loss on precomputed unit embeddings.
pub fn symmetric_contrastive(img_unit: &Array2<f64>, txt_unit: &Array2<f64>, scale: f64) -> f64 {
    let logits = img_unit.dot(&txt_unit.t()) * scale;
    let n = logits.nrows();
    let rows: f64 = (0..n).map(|j| log_sum_exp(logits.row(j)) - logits[[j, j]]).sum();
    let cols: f64 = (0..n).map(|k| log_sum_exp(logits.column(k)) - logits[[k, k]]).sum();
    0.5 * (rows + cols) / n as f64
}
