//! Order perturbations and composition-aware negative captions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::text::{detokenize, PosTag, Span, TaggedCaption};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationStrategy {
    ShuffleNounsAdj,
    ShuffleAllWords,
    ShuffleAllButNounsAdj,
    ShuffleTrigrams,
    ShuffleWithinTrigrams,
}

impl PerturbationStrategy {
    pub const ALL: [PerturbationStrategy; 5] = [
        PerturbationStrategy::ShuffleNounsAdj,
        PerturbationStrategy::ShuffleAllWords,
        PerturbationStrategy::ShuffleAllButNounsAdj,
        PerturbationStrategy::ShuffleTrigrams,
        PerturbationStrategy::ShuffleWithinTrigrams,
    ];

    /// The four strategies that make up an order task.
    pub const ORDER_TASK: [PerturbationStrategy; 4] = [
        PerturbationStrategy::ShuffleNounsAdj,
        PerturbationStrategy::ShuffleAllButNounsAdj,
        PerturbationStrategy::ShuffleTrigrams,
        PerturbationStrategy::ShuffleWithinTrigrams,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationStrategy::ShuffleNounsAdj => "shuffle_nouns_adj",
            PerturbationStrategy::ShuffleAllWords => "shuffle_all_words",
            PerturbationStrategy::ShuffleAllButNounsAdj => "shuffle_all_but_nouns_adj",
            PerturbationStrategy::ShuffleTrigrams => "shuffle_trigrams",
            PerturbationStrategy::ShuffleWithinTrigrams => "shuffle_within_trigrams",
        }
    }
}

impl fmt::Display for PerturbationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown perturbation strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbed {
    pub tokens: Vec<String>,
    /// Set when the caption has fewer than two movable units.
    pub degenerate: bool,
}

impl Perturbed {
    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn is_noun_or_adj(tag: PosTag) -> bool {
    matches!(tag, PosTag::Noun | PosTag::Adj)
}

fn trigram_groups(n: usize) -> Vec<Span> {
    (0..n).step_by(3).map(|s| Span::new(s, (s + 3).min(n))).collect()
}

/// Source index for every output position, or `None` when fewer than two
/// units can move.
fn source_order(tagged: &TaggedCaption, strategy: PerturbationStrategy, rng: &mut SplitMix64) -> Option<Vec<usize>> {
    use PerturbationStrategy::*;
    let n = tagged.len();
    let mut order: Vec<usize> = (0..n).collect();
    match strategy {
        ShuffleNounsAdj | ShuffleAllButNounsAdj | ShuffleAllWords => {
            let positions: Vec<usize> = tagged
                .tokens
                .iter()
                .filter(|t| match strategy {
                    ShuffleNounsAdj => is_noun_or_adj(t.tag),
                    ShuffleAllButNounsAdj => !is_noun_or_adj(t.tag),
                    _ => true,
                })
                .map(|t| t.index)
                .collect();
            if positions.len() < 2 {
                return None;
            }
            let perm = rng.permutation(positions.len());
            for (slot, &src) in positions.iter().zip(&perm) {
                order[*slot] = positions[src];
            }
        }
        ShuffleTrigrams => {
            let groups = trigram_groups(n);
            if groups.len() < 2 {
                return None;
            }
            let perm = rng.permutation(groups.len());
            order = perm
                .iter()
                .flat_map(|&g| groups[g].start..groups[g].end)
                .collect();
        }
        ShuffleWithinTrigrams => {
            let groups = trigram_groups(n);
            if groups.iter().all(|g| g.len() < 2) {
                return None;
            }
            for g in groups {
                let perm = rng.permutation(g.len());
                for (k, &src) in perm.iter().enumerate() {
                    order[g.start + k] = g.start + src;
                }
            }
        }
    }
    Some(order)
}

pub fn perturb_with(tagged: &TaggedCaption, strategy: PerturbationStrategy, rng: &mut SplitMix64) -> Perturbed {
    let words = tagged.words();
    match source_order(tagged, strategy, rng) {
        Some(order) => Perturbed {
            tokens: order.iter().map(|&i| words[i].to_string()).collect(),
            degenerate: false,
        },
        None => Perturbed {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            degenerate: true,
        },
    }
}

/// Applies `strategy` with a fresh stream seeded by `rng_seed`.
pub fn perturb(tagged: &TaggedCaption, strategy: PerturbationStrategy, rng_seed: u64) -> Perturbed {
    perturb_with(tagged, strategy, &mut SplitMix64::new(rng_seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapCategory {
    Noun,
    Adjective,
    Adverb,
    VerbPhrase,
    NounPhrase,
}

impl SwapCategory {
    pub const ALL: [SwapCategory; 5] = [
        SwapCategory::Noun,
        SwapCategory::Adjective,
        SwapCategory::Adverb,
        SwapCategory::VerbPhrase,
        SwapCategory::NounPhrase,
    ];

    /// Noun phrases shorter than this are left to the single-noun swap.
    pub const MIN_NOUN_PHRASE_LEN: usize = 3;

    fn elements(self, tagged: &TaggedCaption) -> Vec<Span> {
        let single = |tag: PosTag| {
            tagged
                .tokens
                .iter()
                .filter(|t| t.tag == tag)
                .map(|t| Span::new(t.index, t.index + 1))
                .collect()
        };
        match self {
            SwapCategory::Noun => single(PosTag::Noun),
            SwapCategory::Adjective => single(PosTag::Adj),
            SwapCategory::Adverb => single(PosTag::Adv),
            SwapCategory::VerbPhrase => tagged.verb_phrases.clone(),
            SwapCategory::NounPhrase => tagged
                .noun_phrases
                .iter()
                .copied()
                .filter(|s| s.len() >= Self::MIN_NOUN_PHRASE_LEN)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeCaptionSet {
    pub original: String,
    pub negatives: BTreeMap<SwapCategory, String>,
}

impl NegativeCaptionSet {
    /// Captions without any negative are dropped from training data.
    pub fn is_removable(&self) -> bool {
        self.negatives.is_empty()
    }
}

/// Exchanges two non-overlapping spans; the tokens in between re-flow when
/// the spans differ in length.
pub fn swap_spans<T: Clone>(tokens: &[T], a: Span, b: Span) -> Vec<T> {
    let (first, second) = if a.start <= b.start { (a, b) } else { (b, a) };
    debug_assert!(first.end <= second.start);
    let mut out = Vec::with_capacity(tokens.len());
    out.extend_from_slice(&tokens[..first.start]);
    out.extend_from_slice(&tokens[second.start..second.end]);
    out.extend_from_slice(&tokens[first.end..second.start]);
    out.extend_from_slice(&tokens[first.start..first.end]);
    out.extend_from_slice(&tokens[second.end..]);
    out
}

/// Preferred pair of element indices to swap.
///
/// When the caption is a coordination of clauses (split on `CONJ` tokens),
/// the first element of the first clause is paired with the first element
/// of the next clause that has one, so parallel roles are exchanged
/// ("the man ... and the woman ..."). Otherwise the first and last
/// elements are paired.
fn preferred_pair(tagged: &TaggedCaption, elements: &[Span]) -> (usize, usize) {
    let clause_of = |pos: usize| {
        tagged.tokens[..pos]
            .iter()
            .filter(|t| t.tag == PosTag::Conj)
            .count()
    };
    let first_clause = clause_of(elements[0].start);
    let next = elements
        .iter()
        .position(|e| clause_of(e.start) > first_clause && clause_of(e.end - 1) == clause_of(e.start));
    match next {
        Some(j) => (0, j),
        None => (0, elements.len() - 1),
    }
}

pub fn generate_negatives(tagged: &TaggedCaption) -> NegativeCaptionSet {
    let words = tagged.words();
    let mut negatives = BTreeMap::new();
    for category in SwapCategory::ALL {
        let elements = category.elements(tagged);
        if elements.len() < 2 {
            continue;
        }
        let preferred = preferred_pair(tagged, &elements);
        let fallback = (0..elements.len()).flat_map(|i| (i + 1..elements.len()).map(move |j| (i, j)));
        let swapped = std::iter::once(preferred)
            .chain(fallback)
            .map(|(i, j)| swap_spans(&words, elements[i], elements[j]))
            .find(|s| *s != words);
        if let Some(s) = swapped {
            negatives.insert(category, detokenize(&s));
        }
    }
    NegativeCaptionSet {
        original: tagged.text(),
        negatives,
    }
}

/// Uniform pick among the present categories.
pub fn sample_negative(set: &NegativeCaptionSet, rng: &mut SplitMix64) -> Result<(SwapCategory, String)> {
    if set.negatives.is_empty() {
        return Err(Error::invalid(format!(
            "no negative captions for {:?}",
            set.original
        )));
    }
    let k = rng.below(set.negatives.len());
    let (c, s) = set.negatives.iter().nth(k).expect("index within bounds");
    Ok((*c, s.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alternative {
    pub strategy: PerturbationStrategy,
    pub caption: String,
    /// No differing permutation was found; excluded when scoring.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderTask {
    #[serde(default)]
    pub caption_id: String,
    #[serde(default)]
    pub image_id: String,
    pub true_caption: String,
    pub alternatives: Vec<Alternative>,
    pub seed: u64,
}

impl OrderTask {
    pub fn live_alternatives(&self) -> impl Iterator<Item = &Alternative> {
        self.alternatives.iter().filter(|a| !a.degenerate)
    }
}

pub const ORDER_TASK_ATTEMPTS: usize = 16;

/// Perturbs with each order-task strategy; identity outputs are redrawn up
/// to [`ORDER_TASK_ATTEMPTS`] times before being flagged degenerate.
pub fn build_order_task(tagged: &TaggedCaption, rng_seed: u64) -> OrderTask {
    let words = tagged.words();
    let alternatives = PerturbationStrategy::ORDER_TASK
        .iter()
        .enumerate()
        .map(|(k, &strategy)| {
            let mut rng = SplitMix64::new(derive_seed(rng_seed, k as u64));
            let found = (0..ORDER_TASK_ATTEMPTS)
                .map(|_| perturb_with(tagged, strategy, &mut rng))
                .take_while(|p| !p.degenerate)
                .find(|p| p.tokens != words);
            match found {
                Some(p) => Alternative {
                    strategy,
                    caption: p.text(),
                    degenerate: false,
                },
                None => Alternative {
                    strategy,
                    caption: words.join(" "),
                    degenerate: true,
                },
            }
        })
        .collect();
    OrderTask {
        caption_id: String::new(),
        image_id: String::new(),
        true_caption: tagged.text(),
        alternatives,
        seed: rng_seed,
    }
}
