mod common;

use aro_core::embeddings::{top_k_neighbors, EmbeddingKind, EmbeddingSet};
use aro_core::image_shuffle::{apply_permutation, invert_permutation, GridSpec, RasterImage};
use aro_core::perturb::{generate_negatives, perturb, PerturbationStrategy, SwapCategory};
use aro_core::rng::SplitMix64;
use aro_core::scene::{smallest_enclosing_bbox, BBox};
use aro_core::text::{tokenize, PosTag, TaggedCaption};
use aro_core::trainer::{loss_forward, HeadKind};
use proptest::prelude::*;

const WORDS: [&str; 8] = ["a", "the", "dog", "red", "runs", "on", "big", "grass"];

fn caption() -> impl Strategy<Value = TaggedCaption> {
    prop::collection::vec((0..WORDS.len(), 0..PosTag::ALL.len()), 1..20).prop_map(|items| {
        let words: Vec<&str> = items.iter().map(|&(w, _)| WORDS[w]).collect();
        let tags: Vec<PosTag> = items.iter().map(|&(_, t)| PosTag::ALL[t]).collect();
        TaggedCaption::from_parts(words, &tags).unwrap()
    })
}

fn strategy() -> impl Strategy<Value = PerturbationStrategy> {
    prop::sample::select(PerturbationStrategy::ALL.to_vec())
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

fn owned(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Whether `out` can be split into all of `groups`, each used once.
fn is_group_concatenation(out: &[String], groups: &[Vec<String>], used: &mut Vec<bool>) -> bool {
    if out.is_empty() {
        return used.iter().all(|&u| u);
    }
    for i in 0..groups.len() {
        if !used[i] && out.starts_with(&groups[i]) {
            used[i] = true;
            if is_group_concatenation(&out[groups[i].len()..], groups, used) {
                return true;
            }
            used[i] = false;
        }
    }
    false
}

proptest! {
    #[test]
    fn perturbation_preserves_multiset(c in caption(), s in strategy(), seed in any::<u64>()) {
        let out = perturb(&c, s, seed);
        prop_assert_eq!(sorted(out.tokens), sorted(owned(&c.words())));
    }

    #[test]
    fn perturbation_is_deterministic(c in caption(), s in strategy(), seed in any::<u64>()) {
        prop_assert_eq!(perturb(&c, s, seed), perturb(&c, s, seed));
    }

    #[test]
    fn pos_restricted_strategies_fix_other_positions(c in caption(), seed in any::<u64>()) {
        let words = c.words();
        let tags = c.tags();
        let na = perturb(&c, PerturbationStrategy::ShuffleNounsAdj, seed).tokens;
        let rest = perturb(&c, PerturbationStrategy::ShuffleAllButNounsAdj, seed).tokens;
        for i in 0..words.len() {
            if matches!(tags[i], PosTag::Noun | PosTag::Adj) {
                prop_assert_eq!(rest[i].as_str(), words[i]);
            } else {
                prop_assert_eq!(na[i].as_str(), words[i]);
            }
        }
    }

    #[test]
    fn trigram_shuffle_moves_whole_groups(c in caption(), seed in any::<u64>()) {
        let words = owned(&c.words());
        let out = perturb(&c, PerturbationStrategy::ShuffleTrigrams, seed).tokens;
        let groups: Vec<Vec<String>> = words.chunks(3).map(<[String]>::to_vec).collect();
        prop_assert!(is_group_concatenation(&out, &groups, &mut vec![false; groups.len()]));
    }

    #[test]
    fn within_trigram_shuffle_keeps_group_contents(c in caption(), seed in any::<u64>()) {
        let words = owned(&c.words());
        let out = perturb(&c, PerturbationStrategy::ShuffleWithinTrigrams, seed).tokens;
        for (a, b) in out.chunks(3).zip(words.chunks(3)) {
            prop_assert_eq!(sorted(a.to_vec()), sorted(b.to_vec()));
        }
    }

    #[test]
    fn negatives_keep_length_and_single_swaps_touch_two_tokens(c in caption()) {
        let words = c.words();
        let set = generate_negatives(&c);
        prop_assert!(set.negatives.len() <= 5);
        for (cat, neg) in &set.negatives {
            let toks = tokenize(neg);
            prop_assert_eq!(toks.len(), words.len());
            prop_assert_ne!(&toks, &owned(&words));
            if matches!(cat, SwapCategory::Noun | SwapCategory::Adjective | SwapCategory::Adverb) {
                let diffs = toks.iter().zip(&words).filter(|(a, b)| a != *b).count();
                prop_assert_eq!(diffs, 2);
            }
        }
    }

    #[test]
    fn loss_is_invariant_to_row_order(seed in any::<u64>(), n in 1usize..7, negs in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let model = common::random_model(&mut rng, HeadKind::Linear, 6, 3);
        let batch = common::random_batch(&mut rng, n, 6, negs);
        let order = rng.permutation(n);
        let a = loss_forward(&model, &batch).unwrap().loss;
        let b = loss_forward(&model, &batch.permuted(&order)).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn neighbors_do_not_depend_on_row_order(seed in any::<u64>(), n in 2usize..40, k in 1usize..6) {
        let mut rng = SplitMix64::new(seed);
        let rows: Vec<(String, Vec<f64>)> = (0..n)
            .map(|i| (format!("r{i:03}"), (0..5).map(|_| rng.normal()).collect()))
            .collect();
        let order = rng.permutation(n);
        let shuffled: Vec<_> = order.iter().map(|&i| rows[i].clone()).collect();
        let a = top_k_neighbors(&EmbeddingSet::from_rows(EmbeddingKind::Text, 5, rows).unwrap(), k).unwrap();
        let b = top_k_neighbors(&EmbeddingSet::from_rows(EmbeddingKind::Text, 5, shuffled).unwrap(), k).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            let ids_a: Vec<&str> = a.neighbors[i].iter().map(|x| x.id.as_str()).collect();
            let ids_b: Vec<&str> = b.neighbors[pos].iter().map(|x| x.id.as_str()).collect();
            prop_assert_eq!(ids_a, ids_b);
        }
    }

    #[test]
    fn enclosing_box_contains_both(
        a in (0u32..500, 0u32..500, 1u32..300, 1u32..300),
        b in (0u32..500, 0u32..500, 1u32..300, 1u32..300),
    ) {
        let (a, b) = (BBox::new(a.0, a.1, a.2, a.3), BBox::new(b.0, b.1, b.2, b.3));
        let hull = smallest_enclosing_bbox(&a, &b);
        prop_assert!(hull.contains(&a) && hull.contains(&b));
        prop_assert_eq!(smallest_enclosing_bbox(&a, &a), a);
    }

    #[test]
    fn grid_shuffle_inverts(w in 4u32..23, h in 4u32..23, seed in any::<u64>(), preset in 0usize..3) {
        let grid = [GridSpec::ROWS_4, GridSpec::COLS_4, GridSpec::PATCHES_9][preset];
        let mut rng = SplitMix64::new(seed);
        let pixels = (0..w * h).map(|_| [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8]).collect();
        let img = RasterImage::new(w, h, pixels).unwrap();
        let perm = rng.permutation(grid.cells());
        let shuffled = apply_permutation(&img, grid, &perm).unwrap();
        prop_assert_eq!(invert_permutation(&shuffled, grid, &perm).unwrap(), img);
    }
}
