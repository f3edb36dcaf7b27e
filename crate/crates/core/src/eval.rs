//! Matching accuracy, order-task accuracy and Recall@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, norm, rank_order, EmbeddingSet, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::perturb::OrderTask;
use crate::scene::{AroTestCase, SPATIAL_RELATIONS, VERB_RELATIONS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub chance_level: Option<f64>,
    #[serde(default)]
    pub groups: BTreeMap<String, GroupAccuracy>,
    /// Unweighted mean of the group accuracies.
    #[serde(default)]
    pub macro_accuracy: Option<f64>,
    /// Total correct over total count.
    #[serde(default)]
    pub micro_accuracy: Option<f64>,
    /// Macro accuracy restricted to named subsets of groups.
    #[serde(default)]
    pub partition_macro: BTreeMap<String, f64>,
    /// Keyed `"{direction}@{k}"`.
    #[serde(default)]
    pub recall: BTreeMap<String, f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            ..Default::default()
        }
    }

    /// Fills groups, macro and micro from `(correct, count)` tallies.
    pub fn set_groups(&mut self, tallies: BTreeMap<String, (usize, usize)>) {
        self.groups = tallies
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(k, (c, n))| {
                (
                    k,
                    GroupAccuracy {
                        correct: c,
                        count: n,
                        accuracy: c as f64 / n as f64,
                    },
                )
            })
            .collect();
        self.macro_accuracy = macro_of(self.groups.values());
        let (c, n) = self
            .groups
            .values()
            .fold((0, 0), |(c, n), g| (c + g.correct, n + g.count));
        self.micro_accuracy = (n > 0).then(|| c as f64 / n as f64);
    }

    /// Copy with every float rounded to six decimals, as written to disk.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        r.chance_level = r.chance_level.map(round6);
        r.macro_accuracy = r.macro_accuracy.map(round6);
        r.micro_accuracy = r.micro_accuracy.map(round6);
        for g in r.groups.values_mut() {
            g.accuracy = round6(g.accuracy);
        }
        for map in [&mut r.partition_macro, &mut r.recall, &mut r.metrics] {
            for v in map.values_mut() {
                *v = round6(*v);
            }
        }
        r
    }
}

fn macro_of<'a>(groups: impl Iterator<Item = &'a GroupAccuracy>) -> Option<f64> {
    let accs: Vec<f64> = groups.map(|g| g.accuracy).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::non_finite("cosine of a zero-norm embedding"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Index of the best candidate (lowest index on ties) and whether the true
/// caption at index 0 wins strictly.
fn pick(image: &[f32], candidates: &[&[f32]]) -> Result<(usize, bool)> {
    let scores = candidates
        .iter()
        .map(|c| cosine(image, c))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let strict = scores[1..].iter().all(|&s| scores[0] > s);
    Ok((best, strict))
}

fn check_dims(image_embs: &EmbeddingSet, text_embs: &EmbeddingSet) -> Result<()> {
    if image_embs.dim() != text_embs.dim() {
        return Err(Error::DimMismatch {
            expected: image_embs.dim(),
            found: text_embs.dim(),
        });
    }
    Ok(())
}

/// Image row for a test case: the crop key first, the bare image id second.
fn image_row<'a>(set: &'a EmbeddingSet, case: &AroTestCase) -> Option<&'a [f32]> {
    set.get(&case.image_key()).or_else(|| set.get(&case.image_id))
}

/// Two-alternative (or n-alternative) caption matching.
///
/// A case counts as correct only when the true caption scores strictly
/// above every false caption.
pub fn match_accuracy(cases: &[AroTestCase], image_embs: &EmbeddingSet, text_embs: &EmbeddingSet) -> Result<EvalReport> {
    check_dims(image_embs, text_embs)?;
    let mut missing = BTreeSet::new();
    for case in cases {
        if image_row(image_embs, case).is_none() {
            missing.insert(case.image_key());
        }
        for c in case.candidates() {
            if text_embs.get(c).is_none() {
                missing.insert(c.to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing.into_iter().collect()));
    }

    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut chance = 0.0;
    for case in cases {
        let image = image_row(image_embs, case).expect("checked above");
        let cands: Vec<&[f32]> = case
            .candidates()
            .map(|c| text_embs.get(c).expect("checked above"))
            .collect();
        let (_, correct) = pick(image, &cands)?;
        let t = tallies.entry(case.group_key.clone()).or_default();
        t.0 += usize::from(correct);
        t.1 += 1;
        chance += 1.0 / cands.len() as f64;
    }

    let mut report = EvalReport::new("match");
    if let Some(kind) = cases.first().map(|c| c.task_kind) {
        report.task = format!("{kind:?}").to_lowercase();
    }
    report.set_groups(tallies);
    if !cases.is_empty() {
        report.chance_level = Some(chance / cases.len() as f64);
    }
    for (name, members) in [("spatial", SPATIAL_RELATIONS), ("verb", VERB_RELATIONS)] {
        if let Some(m) = macro_of(
            report
                .groups
                .iter()
                .filter(|(k, _)| members.contains(&k.as_str()))
                .map(|(_, g)| g),
        ) {
            report.partition_macro.insert(name.to_string(), m);
        }
    }
    Ok(report)
}

/// Pick-the-right-caption over the original and its live alternatives.
///
/// Alternatives flagged degenerate, or textually equal to the true caption,
/// are dropped; the recorded chance level reflects what remains.
pub fn order_task_accuracy(tasks: &[OrderTask], image_embs: &EmbeddingSet, text_embs: &EmbeddingSet) -> Result<EvalReport> {
    check_dims(image_embs, text_embs)?;
    let live = |t: &OrderTask| -> Vec<(String, String)> {
        t.live_alternatives()
            .filter(|a| a.caption != t.true_caption)
            .map(|a| (a.strategy.to_string(), a.caption.clone()))
            .collect()
    };
    let mut missing = BTreeSet::new();
    for t in tasks {
        if image_embs.get(&t.image_id).is_none() {
            missing.insert(t.image_id.clone());
        }
        for c in std::iter::once(t.true_caption.clone()).chain(live(t).into_iter().map(|a| a.1)) {
            if text_embs.get(&c).is_none() {
                missing.insert(c);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing.into_iter().collect()));
    }

    let (mut correct, mut scored, mut skipped) = (0usize, 0usize, 0usize);
    let mut chance = 0.0;
    let mut pairwise: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in tasks {
        let alts = live(t);
        if alts.is_empty() {
            skipped += 1;
            continue;
        }
        let image = image_embs.get(&t.image_id).expect("checked above");
        let truth = text_embs.get(&t.true_caption).expect("checked above");
        let mut cands = vec![truth];
        cands.extend(alts.iter().map(|(_, c)| text_embs.get(c).expect("checked above")));
        let (_, ok) = pick(image, &cands)?;
        correct += usize::from(ok);
        scored += 1;
        chance += 1.0 / cands.len() as f64;
        let true_score = cosine(image, truth)?;
        for (strategy, c) in &alts {
            let s = cosine(image, text_embs.get(c).expect("checked above"))?;
            let e = pairwise.entry(strategy.clone()).or_default();
            e.0 += usize::from(true_score > s);
            e.1 += 1;
        }
    }

    let mut report = EvalReport::new("order");
    report.set_groups(BTreeMap::from([("all".to_string(), (correct, scored))]));
    if scored > 0 {
        report.chance_level = Some(chance / scored as f64);
    }
    report.metrics.insert("skipped_tasks".into(), skipped as f64);
    for (s, (c, n)) in pairwise {
        report.metrics.insert(format!("pairwise/{s}"), c as f64 / n as f64);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDirection {
    /// Text queries ranked against images (matrix columns are queries).
    TextToImage,
    /// Image queries ranked against texts (matrix rows are queries).
    ImageToText,
}

impl RetrievalDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalDirection::TextToImage => "text_to_image",
            RetrievalDirection::ImageToText => "image_to_text",
        }
    }
}

impl fmt::Display for RetrievalDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_to_image" => Ok(Self::TextToImage),
            "image_to_text" => Ok(Self::ImageToText),
            _ => Err(Error::invalid(format!("unknown retrieval direction {s:?}"))),
        }
    }
}

/// Relevance judgements: image id → caption ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoldMapping {
    pub image_to_text: BTreeMap<String, BTreeSet<String>>,
}

impl GoldMapping {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut g = GoldMapping::default();
        for (img, txt) in pairs {
            g.image_to_text.entry(img.into()).or_default().insert(txt.into());
        }
        g
    }

    pub fn text_to_image(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (img, txts) in &self.image_to_text {
            for t in txts {
                out.entry(t.clone()).or_default().insert(img.clone());
            }
        }
        out
    }

    pub fn for_direction(&self, direction: RetrievalDirection) -> BTreeMap<String, BTreeSet<String>> {
        match direction {
            RetrievalDirection::ImageToText => self.image_to_text.clone(),
            RetrievalDirection::TextToImage => self.text_to_image(),
        }
    }
}

/// Fraction of queries with a relevant item among their top `k`.
///
/// Candidates are ranked by descending similarity with ascending id
/// breaking ties.
pub fn recall_at_k(
    sim: &SimilarityMatrix,
    k: usize,
    direction: RetrievalDirection,
    gold: &BTreeMap<String, BTreeSet<String>>,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let (queries, cands) = match direction {
        RetrievalDirection::ImageToText => (&sim.row_ids, &sim.col_ids),
        RetrievalDirection::TextToImage => (&sim.col_ids, &sim.row_ids),
    };
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !gold.contains_key(*q))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let cand_pos: HashMap<&str, usize> = cands.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let score = |q: usize, c: usize| match direction {
        RetrievalDirection::ImageToText => sim.get(q, c),
        RetrievalDirection::TextToImage => sim.get(c, q),
    };
    let mut hits = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let relevant: Vec<usize> = gold[q].iter().filter_map(|r| cand_pos.get(r.as_str()).copied()).collect();
        let hit = relevant.iter().any(|&r| {
            let (sr, idr) = (score(qi, r), cands[r].as_str());
            let ahead = (0..cands.len())
                .filter(|&c| rank_order(score(qi, c), &cands[c], sr, idr) == Ordering::Less)
                .take(k)
                .count();
            ahead < k
        });
        hits += usize::from(hit);
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Recall at every `k` in both directions.
pub fn retrieval_report(sim: &SimilarityMatrix, gold: &GoldMapping, ks: &[usize]) -> Result<EvalReport> {
    let mut report = EvalReport::new("retrieval");
    for direction in [RetrievalDirection::TextToImage, RetrievalDirection::ImageToText] {
        let g = gold.for_direction(direction);
        for &k in ks {
            report
                .recall
                .insert(format!("{direction}@{k}"), recall_at_k(sim, k, direction, &g)?);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

pub const CSV_HEADER: [&str; 4] = ["section", "key", "metric", "value"];

/// Writes the report with six-decimal floats and stable ordering.
pub fn emit_report(report: &EvalReport, mut writer: impl Write, format: ReportFormat) -> Result<()> {
    let r = report.rounded();
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut writer, &r)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<report>", e))?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(CSV_HEADER)?;
            let f = |x: f64| format!("{x:.6}");
            for (k, g) in &r.groups {
                w.write_record(["group", k, "accuracy", &f(g.accuracy)])?;
                w.write_record(["group", k, "correct", &g.correct.to_string()])?;
                w.write_record(["group", k, "count", &g.count.to_string()])?;
            }
            let summary = [
                ("macro_accuracy", r.macro_accuracy),
                ("micro_accuracy", r.micro_accuracy),
                ("chance_level", r.chance_level),
            ];
            for (name, v) in summary {
                if let Some(v) = v {
                    w.write_record(["summary", &r.task, name, &f(v)])?;
                }
            }
            for (k, v) in &r.partition_macro {
                w.write_record(["partition", k, "macro_accuracy", &f(*v)])?;
            }
            for (k, v) in &r.recall {
                w.write_record(["recall", k, "recall", &f(*v)])?;
            }
            for (k, v) in &r.metrics {
                w.write_record(["metric", k, "value", &f(*v)])?;
            }
            w.flush().map_err(|e| Error::io("<report>", e))?;
        }
    }
    Ok(())
}
