use ndarray::{Array2, Axis};

use super::loss::{ContrastiveBatch, Provenance};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Frozen base embeddings for training pairs.
///
/// Pair `p` couples caption row `p` with image row `pair_image[p]`; its
/// negative captions are the rows of `neg_captions` listed in
/// `pair_negatives[p]`.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub images: Array2<f64>,
    pub captions: Array2<f64>,
    pub pair_image: Vec<usize>,
    pub neg_captions: Array2<f64>,
    pub pair_negatives: Vec<Vec<usize>>,
}

impl TrainDataset {
    pub fn num_pairs(&self) -> usize {
        self.captions.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.images.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_pairs();
        if n == 0 {
            return Err(Error::invalid("training set has no pairs"));
        }
        for m in [&self.captions, &self.neg_captions] {
            if m.ncols() != self.d_in() && m.nrows() > 0 {
                return Err(Error::DimMismatch {
                    expected: self.d_in(),
                    found: m.ncols(),
                });
            }
        }
        if self.pair_image.len() != n || self.pair_negatives.len() != n {
            return Err(Error::invalid("pair tables do not match caption count"));
        }
        if let Some(&i) = self.pair_image.iter().find(|&&i| i >= self.images.nrows()) {
            return Err(Error::invalid(format!("pair refers to missing image row {i}")));
        }
        for negs in &self.pair_negatives {
            if let Some(&r) = negs.iter().find(|&&r| r >= self.neg_captions.nrows()) {
                return Err(Error::invalid(format!("pair refers to missing negative row {r}")));
            }
        }
        Ok(())
    }

    /// Pairs grouped by image row.
    pub fn image_pairs(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.images.nrows()];
        for (p, &i) in self.pair_image.iter().enumerate() {
            out[i].push(p);
        }
        out
    }

    /// Drops pairs without any negative caption.
    pub fn retain_with_negatives(&self) -> Self {
        let keep: Vec<usize> = (0..self.num_pairs())
            .filter(|&p| !self.pair_negatives[p].is_empty())
            .collect();
        Self {
            images: self.images.clone(),
            captions: self.captions.select(Axis(0), &keep),
            pair_image: keep.iter().map(|&p| self.pair_image[p]).collect(),
            neg_captions: self.neg_captions.clone(),
            pair_negatives: keep.iter().map(|&p| self.pair_negatives[p].clone()).collect(),
        }
    }
}

/// Options for [`assemble_batch`].
#[derive(Debug, Clone, Copy)]
pub struct BatchOptions<'a> {
    pub use_neg_captions: bool,
    /// Neighbor image rows for every image row, when mining is on.
    pub neighbors: Option<&'a [Vec<usize>]>,
}

/// Builds the aligned rows for one step.
///
/// Each base pair contributes its image, caption and (optionally) one sampled
/// negative caption. With neighbors, each base image also pulls in one of its
/// neighbor images with a caption of that image; images already present in
/// the batch are not added twice. Mined rows do not mine further.
pub fn assemble_batch(
    data: &TrainDataset,
    image_pairs: &[Vec<usize>],
    base: &[usize],
    opts: BatchOptions<'_>,
    rng: &mut SplitMix64,
) -> Result<ContrastiveBatch> {
    let mut rows: Vec<(usize, Provenance)> = base.iter().map(|&p| (p, Provenance::Base)).collect();
    if let Some(table) = opts.neighbors {
        let mut present: Vec<usize> = base.iter().map(|&p| data.pair_image[p]).collect();
        for &p in base {
            let img = data.pair_image[p];
            let candidates = table
                .get(img)
                .ok_or_else(|| Error::invalid(format!("no neighbor list for image row {img}")))?;
            if candidates.is_empty() {
                return Err(Error::invalid(format!("empty neighbor list for image row {img}")));
            }
            let nb = candidates[rng.below(candidates.len())];
            if present.contains(&nb) {
                continue;
            }
            let pairs = &image_pairs[nb];
            if pairs.is_empty() {
                continue;
            }
            let q = pairs[rng.below(pairs.len())];
            present.push(nb);
            rows.push((q, Provenance::MinedNeighbor));
        }
    }

    let pair_ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let image_ids: Vec<usize> = pair_ids.iter().map(|&p| data.pair_image[p]).collect();
    let neg_caption_vecs = if opts.use_neg_captions {
        let mut picks = Vec::with_capacity(pair_ids.len());
        for &p in &pair_ids {
            let negs = &data.pair_negatives[p];
            if negs.is_empty() {
                return Err(Error::invalid(format!("caption row {p} has no negative caption")));
            }
            picks.push(negs[rng.below(negs.len())]);
        }
        Some(data.neg_captions.select(Axis(0), &picks))
    } else {
        None
    };
    Ok(ContrastiveBatch {
        image_vecs: data.images.select(Axis(0), &image_ids),
        caption_vecs: data.captions.select(Axis(0), &pair_ids),
        neg_caption_vecs,
        provenance: rows.into_iter().map(|r| r.1).collect(),
    })
}
