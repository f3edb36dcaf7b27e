use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Upper bound on the effective logit scale `exp(logit_scale)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Initial temperature of the logits (scale = 1 / 0.07).
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum HeadKind {
    Linear,
    /// One tanh hidden layer of the given width.
    Mlp { hidden: usize },
}

/// Projection applied on top of a frozen base embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear { w: Array2<f64> },
    Mlp { w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64> },
}

/// Intermediate values kept from the forward pass.
pub enum HeadCache {
    Linear,
    Mlp { hidden: Array2<f64> },
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.normal() * std)
}

impl Head {
    pub fn init(kind: HeadKind, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        match kind {
            HeadKind::Linear => Head::Linear {
                w: gaussian(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng),
            },
            HeadKind::Mlp { hidden } => Head::Mlp {
                w1: gaussian(d_in, hidden, 1.0 / (d_in as f64).sqrt(), rng),
                b1: Array1::zeros(hidden),
                w2: gaussian(hidden, d_out, 1.0 / (hidden as f64).sqrt(), rng),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear { .. } => HeadKind::Linear,
            Head::Mlp { b1, .. } => HeadKind::Mlp { hidden: b1.len() },
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Head::Linear { w } => w.nrows(),
            Head::Mlp { w1, .. } => w1.nrows(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Head::Linear { w } => w.ncols(),
            Head::Mlp { w2, .. } => w2.ncols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Head::Linear { w } => Head::Linear {
                w: Array2::zeros(w.raw_dim()),
            },
            Head::Mlp { w1, b1, w2 } => Head::Mlp {
                w1: Array2::zeros(w1.raw_dim()),
                b1: Array1::zeros(b1.raw_dim()),
                w2: Array2::zeros(w2.raw_dim()),
            },
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        match self {
            Head::Linear { w } => (x.dot(w), HeadCache::Linear),
            Head::Mlp { w1, b1, w2 } => {
                let hidden = (x.dot(w1) + b1).mapv(f64::tanh);
                (hidden.dot(w2), HeadCache::Mlp { hidden })
            }
        }
    }

    /// Adds the parameter gradient for upstream `dz` into `grad`.
    pub fn backward_into(&self, x: &Array2<f64>, cache: &HeadCache, dz: &Array2<f64>, grad: &mut Head) {
        match (self, cache, grad) {
            (Head::Linear { .. }, HeadCache::Linear, Head::Linear { w: gw }) => {
                *gw += &x.t().dot(dz);
            }
            (Head::Mlp { w2, .. }, HeadCache::Mlp { hidden }, Head::Mlp { w1: g1, b1: gb, w2: g2 }) => {
                *g2 += &hidden.t().dot(dz);
                let da = dz.dot(&w2.t()) * hidden.mapv(|h| 1.0 - h * h);
                *g1 += &x.t().dot(&da);
                *gb += &da.sum_axis(Axis(0));
            }
            _ => unreachable!("gradient head shape differs from model head"),
        }
    }

    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Head::Linear { w } => vec![("w", w.as_slice().expect("standard layout"))],
            Head::Mlp { w1, b1, w2 } => vec![
                ("w1", w1.as_slice().expect("standard layout")),
                ("b1", b1.as_slice().expect("standard layout")),
                ("w2", w2.as_slice().expect("standard layout")),
            ],
        }
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Head::Linear { w } => vec![("w", w.as_slice_mut().expect("standard layout"))],
            Head::Mlp { w1, b1, w2 } => vec![
                ("w1", w1.as_slice_mut().expect("standard layout")),
                ("b1", b1.as_slice_mut().expect("standard layout")),
                ("w2", w2.as_slice_mut().expect("standard layout")),
            ],
        }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Head::Linear { w } => vec![w.dim()],
            Head::Mlp { w1, b1, w2 } => vec![w1.dim(), (1, b1.len()), w2.dim()],
        }
    }
}

/// Image and text projection heads plus the learned logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub img: Head,
    pub txt: Head,
    /// Log of the inverse temperature.
    pub logit_scale: f64,
}

/// A named, flat view of one parameter block.
pub struct ParamBlock<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f64],
    pub decay: bool,
}

pub struct ParamBlockMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub decay: bool,
}

impl ProjectionModel {
    pub fn init(kind: HeadKind, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        Self {
            img: Head::init(kind, d_in, d_out, rng),
            txt: Head::init(kind, d_in, d_out, rng),
            logit_scale: (1.0 / INIT_TEMPERATURE).ln(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            img: self.img.zeros_like(),
            txt: self.txt.zeros_like(),
            logit_scale: 0.0,
        }
    }

    /// Effective multiplier applied to cosine similarities.
    pub fn scale(&self) -> f64 {
        self.logit_scale.exp().min(MAX_LOGIT_SCALE)
    }

    pub fn d_in(&self) -> usize {
        self.img.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.img.d_out()
    }

    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (prefix, head) in [("img", &self.img), ("txt", &self.txt)] {
            for ((name, values), (rows, cols)) in head.blocks().into_iter().zip(head.shapes()) {
                out.push(ParamBlock {
                    name: format!("{prefix}.{name}"),
                    rows,
                    cols,
                    values,
                    decay: !name.starts_with('b'),
                });
            }
        }
        out.push(ParamBlock {
            name: "logit_scale".into(),
            rows: 1,
            cols: 1,
            values: std::slice::from_ref(&self.logit_scale),
            decay: false,
        });
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = Vec::new();
        for (prefix, head) in [("img", &mut self.img), ("txt", &mut self.txt)] {
            for (name, values) in head.blocks_mut() {
                out.push(ParamBlockMut {
                    name: format!("{prefix}.{name}"),
                    values,
                    decay: !name.starts_with('b'),
                });
            }
        }
        out.push(ParamBlockMut {
            name: "logit_scale".into(),
            values: std::slice::from_mut(&mut self.logit_scale),
            decay: false,
        });
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// Projects and L2-normalizes rows with the image head.
    pub fn embed_images(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        normalized(self.img.forward(x).0, "projected image")
    }

    pub fn embed_texts(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        normalized(self.txt.forward(x).0, "projected text")
    }
}

fn normalized(mut z: Array2<f64>, what: &str) -> Result<Array2<f64>> {
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::non_finite(format!("{what} norm")));
        }
        row /= n;
    }
    Ok(z)
}
