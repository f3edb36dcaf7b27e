//! Synthetic scenes with known structure for exercising the trainer and the
//! evaluation harness without real encoders.
//!
//! A scene is `(attribute, noun, relation, attribute, noun)`, captioned as
//! "the A1 N1 is REL the A2 N2". Text features are sums of word vectors, each
//! scaled elementwise by a weight vector tied to its position, so a linear
//! map can recover word order. Closed-class words (articles, copula,
//! relations) get strongly position-dependent weights, open-class words
//! (attributes, nouns) only weakly dependent ones, so content words are
//! close to a bag of words. Image features are one block per slot holding
//! that slot's visual word vector, plus noise.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::perturb::{build_order_task, generate_negatives};
use crate::rng::{derive_seed, SplitMix64};
use crate::text::{PosTag, TaggedCaption};
use crate::trainer::{ProjectionModel, TrainDataset, ValidationSet};

pub const ATTRIBUTES: [&str; 8] = ["red", "blue", "green", "yellow", "large", "small", "wooden", "shiny"];
pub const NOUNS: [&str; 10] = [
    "cube", "ball", "cup", "box", "chair", "lamp", "book", "plate", "vase", "bottle",
];
pub const RELATIONS: [&str; 4] = ["on", "under", "behind", "beside"];
const FUNCTION_WORDS: [&str; 2] = ["the", "is"];
const SLOTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub scenes: usize,
    pub validation: usize,
    pub held_out: usize,
    /// Width of each image slot block; the shared feature width is
    /// `5 * slot_dim`.
    pub slot_dim: usize,
    pub image_noise: f64,
    /// Log-normal spread of the per-position weights for attributes and
    /// nouns; 0 makes them order-blind.
    pub content_spread: f64,
    /// Same for articles, the copula and relation words.
    pub syntax_spread: f64,
    /// Longest caption the position table covers.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            validation: 200,
            held_out: 400,
            slot_dim: 16,
            image_noise: 0.02,
            content_spread: 0.01,
            syntax_spread: 0.6,
            max_len: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub attributes: [usize; 2],
    pub nouns: [usize; 2],
    pub relation: usize,
}

impl Scene {
    pub fn random(rng: &mut SplitMix64) -> Self {
        let n0 = rng.below(NOUNS.len());
        let n1 = (n0 + 1 + rng.below(NOUNS.len() - 1)) % NOUNS.len();
        let a0 = rng.below(ATTRIBUTES.len());
        let a1 = (a0 + 1 + rng.below(ATTRIBUTES.len() - 1)) % ATTRIBUTES.len();
        Self {
            attributes: [a0, a1],
            nouns: [n0, n1],
            relation: rng.below(RELATIONS.len()),
        }
    }

    pub fn caption(&self) -> TaggedCaption {
        use PosTag::*;
        let words = [
            "the",
            ATTRIBUTES[self.attributes[0]],
            NOUNS[self.nouns[0]],
            "is",
            RELATIONS[self.relation],
            "the",
            ATTRIBUTES[self.attributes[1]],
            NOUNS[self.nouns[1]],
        ];
        TaggedCaption::from_parts(words, &[Det, Adj, Noun, Verb, Adp, Det, Adj, Noun]).expect("parallel lists")
    }

    fn slot_words(&self) -> [&'static str; SLOTS] {
        [
            ATTRIBUTES[self.attributes[0]],
            NOUNS[self.nouns[0]],
            RELATIONS[self.relation],
            ATTRIBUTES[self.attributes[1]],
            NOUNS[self.nouns[1]],
        ]
    }
}

/// Random word tables shared by every scene of one world.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SyntheticConfig,
    vocab: Vec<&'static str>,
    text_vectors: Array2<f64>,
    content_weights: Array2<f64>,
    syntax_weights: Array2<f64>,
    image_vectors: Array2<f64>,
}

impl World {
    pub fn new(config: SyntheticConfig) -> Self {
        let vocab: Vec<&'static str> = FUNCTION_WORDS
            .iter()
            .chain(&ATTRIBUTES)
            .chain(&NOUNS)
            .chain(&RELATIONS)
            .copied()
            .collect();
        let dim = SLOTS * config.slot_dim;
        let mut rng = SplitMix64::new(derive_seed(config.seed, 0));
        let text_vectors = Array2::from_shape_fn((vocab.len(), dim), |_| rng.normal() / (dim as f64).sqrt());
        let image_vectors = Array2::from_shape_fn((vocab.len(), config.slot_dim), |_| {
            rng.normal() / (config.slot_dim as f64).sqrt()
        });
        let mut weights = |spread: f64| Array2::from_shape_fn((config.max_len, dim), |_| (spread * rng.normal()).exp());
        let content_weights = weights(config.content_spread);
        let syntax_weights = weights(config.syntax_spread);
        Self {
            config,
            vocab,
            text_vectors,
            content_weights,
            syntax_weights,
            image_vectors,
        }
    }

    pub fn dim(&self) -> usize {
        SLOTS * self.config.slot_dim
    }

    pub fn vocab(&self) -> &[&'static str] {
        &self.vocab
    }

    fn is_content(&self, index: usize) -> bool {
        let start = FUNCTION_WORDS.len();
        (start..start + ATTRIBUTES.len() + NOUNS.len()).contains(&index)
    }

    fn word_index(&self, word: &str) -> usize {
        self.vocab
            .iter()
            .position(|w| *w == word)
            .unwrap_or_else(|| panic!("word {word:?} is outside the synthetic vocabulary"))
    }

    /// Order-aware text feature: `Σ_p π_p ⊙ v(word_p)`.
    pub fn embed_text<S: AsRef<str>>(&self, words: &[S]) -> Array1<f64> {
        assert!(words.len() <= self.config.max_len, "caption longer than max_len");
        let mut out = Array1::zeros(self.dim());
        for (p, w) in words.iter().enumerate() {
            let i = self.word_index(w.as_ref());
            let table = if self.is_content(i) {
                &self.content_weights
            } else {
                &self.syntax_weights
            };
            out += &(&table.row(p) * &self.text_vectors.row(i));
        }
        out
    }

    /// Order-blind text feature: mean word vector, summed in vocabulary order.
    pub fn embed_bag_of_words<S: AsRef<str>>(&self, words: &[S]) -> Array1<f64> {
        let mut counts = vec![0usize; self.vocab.len()];
        for w in words {
            counts[self.word_index(w.as_ref())] += 1;
        }
        let mut out = Array1::zeros(self.dim());
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                out.scaled_add(c as f64, &self.text_vectors.row(i));
            }
        }
        out / words.len().max(1) as f64
    }

    pub fn embed_image(&self, scene: &Scene, rng: &mut SplitMix64) -> Array1<f64> {
        let b = self.config.slot_dim;
        let mut out = Array1::zeros(self.dim());
        for (s, word) in scene.slot_words().iter().enumerate() {
            let v = self.image_vectors.row(self.word_index(word));
            for j in 0..b {
                out[s * b + j] = v[j] + self.config.image_noise * rng.normal();
            }
        }
        out
    }
}

fn split(words: &str) -> Vec<&str> {
    words.split_whitespace().collect()
}

/// One held-out order probe: the image, its true caption and the live
/// permuted alternatives, all as base features.
#[derive(Debug, Clone)]
pub struct OrderProbe {
    pub image: Array1<f64>,
    pub true_caption: Array1<f64>,
    pub alternatives: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub scenes: Vec<Scene>,
    pub train: TrainDataset,
    pub validation: ValidationSet,
    pub held_out: ValidationSet,
    pub order_probes: Vec<OrderProbe>,
}

fn stack(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    if views.is_empty() {
        return Array2::zeros((0, dim));
    }
    ndarray::concatenate(Axis(0), &views).expect("rows share width")
}

/// Generates scenes and splits them into train / validation / held-out.
///
/// Training captions get their constituent-swap negatives; held-out scenes
/// also get order probes.
pub fn generate(world: &World) -> SyntheticData {
    let cfg = world.config;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 1));
    let scenes: Vec<Scene> = (0..cfg.scenes).map(|_| Scene::random(&mut rng)).collect();
    let images: Vec<Array1<f64>> = scenes.iter().map(|s| world.embed_image(s, &mut rng)).collect();
    let captions: Vec<TaggedCaption> = scenes.iter().map(Scene::caption).collect();
    let texts: Vec<Array1<f64>> = captions.iter().map(|c| world.embed_text(&c.words())).collect();

    let n_train = cfg.scenes.saturating_sub(cfg.validation + cfg.held_out);
    let val_end = n_train + cfg.validation.min(cfg.scenes - n_train);
    let dim = world.dim();

    let mut neg_rows = Vec::new();
    let mut pair_negatives = Vec::with_capacity(n_train);
    for c in &captions[..n_train] {
        let set = generate_negatives(c);
        let mut ids = Vec::new();
        for neg in set.negatives.values() {
            ids.push(neg_rows.len());
            neg_rows.push(world.embed_text(&split(neg)));
        }
        pair_negatives.push(ids);
    }
    let train = TrainDataset {
        images: stack(&images[..n_train], dim),
        captions: stack(&texts[..n_train], dim),
        pair_image: (0..n_train).collect(),
        neg_captions: stack(&neg_rows, dim),
        pair_negatives,
    };
    let validation = ValidationSet::aligned(stack(&images[n_train..val_end], dim), stack(&texts[n_train..val_end], dim));
    let held_out = ValidationSet::aligned(stack(&images[val_end..], dim), stack(&texts[val_end..], dim));

    let order_probes = (val_end..cfg.scenes)
        .map(|i| {
            let task = build_order_task(&captions[i], derive_seed(cfg.seed, 2 + i as u64));
            let truth = captions[i].words();
            let mut alternatives: Vec<Vec<&str>> = Vec::new();
            for alt in task.live_alternatives() {
                let words = split(&alt.caption);
                if words != truth && !alternatives.contains(&words) {
                    alternatives.push(words);
                }
            }
            OrderProbe {
                image: images[i].clone(),
                true_caption: texts[i].clone(),
                alternatives: alternatives.iter().map(|w| world.embed_text(w)).collect(),
            }
        })
        .collect();

    SyntheticData {
        scenes,
        train,
        validation,
        held_out,
        order_probes,
    }
}

/// Share of probes whose true caption strictly outscores every alternative.
pub fn order_accuracy(model: &ProjectionModel, probes: &[OrderProbe]) -> Result<f64> {
    let mut correct = 0usize;
    for p in probes {
        let img = model.embed_images(&p.image.view().insert_axis(Axis(0)).to_owned())?;
        let mut rows = vec![p.true_caption.clone()];
        rows.extend(p.alternatives.iter().cloned());
        let txt = model.embed_texts(&stack(&rows, p.image.len()))?;
        let scores = txt.dot(&img.row(0));
        if scores.iter().skip(1).all(|&s| s < scores[0]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len().max(1) as f64)
}
