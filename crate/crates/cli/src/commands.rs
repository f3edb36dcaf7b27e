use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aro_core::embeddings::{cosine_matrix, top_k_neighbors, EmbeddingSet, Neighbor};
use aro_core::eval::{emit_report, match_accuracy, order_task_accuracy, retrieval_report, EvalReport, GoldMapping, ReportFormat};
use aro_core::image_shuffle::{split_and_shuffle, GridSpec, RasterImage};
use aro_core::io::{read_jsonl, write_jsonl};
use aro_core::perturb::{build_order_task, generate_negatives, perturb, NegativeCaptionSet, OrderTask, PerturbationStrategy};
use aro_core::rng::{derive_seed, item_seed};
use aro_core::scene::{mine_scenes, read_scenes, write_cases, AroTestCase, BBox, SymmetricBlocklist};
use aro_core::text::{analyze, Lexicon, PosTag, TaggedCaption};
use aro_core::trainer::{gather_rows, project_set, train, write_trace, Checkpoint, HeadKind, TrainDataset, ValidationSet};
use aro_core::Error;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::{MineTask, RunConfig};
use crate::error::CliError;
use crate::provenance;

type CliResult<T> = Result<T, CliError>;

pub fn run(mut command: Command, cfg: RunConfig) -> CliResult<()> {
    if let Some(dir) = &cfg.paths.output_dir {
        resolve_outputs(&mut command, dir);
    }
    match command {
        Command::Mine(a) => mine(a, cfg),
        Command::Perturb(a) => perturb_captions(a, cfg),
        Command::Negatives(a) => negatives(a, cfg),
        Command::ShuffleImages(a) => shuffle_images(a, cfg),
        Command::Neighbors(a) => neighbors(a, cfg),
        Command::EvalAro(a) => eval_aro(a, cfg),
        Command::EvalOrder(a) => eval_order(a, cfg),
        Command::EvalRetrieval(a) => eval_retrieval(a, cfg),
        Command::Train(a) => train_heads(a, cfg),
        Command::Report(a) => report(a, cfg),
    }
}

/// Relative output paths land under `paths.output_dir`.
fn resolve_outputs(command: &mut Command, dir: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    };
    let fix_opt = |p: &mut Option<PathBuf>| {
        if let Some(p) = p {
            fix(p);
        }
    };
    match command {
        Command::Mine(a) => {
            fix(&mut a.out);
            fix_opt(&mut a.image_manifest);
            fix_opt(&mut a.text_manifest);
        }
        Command::Perturb(a) => {
            fix(&mut a.out);
            fix_opt(&mut a.text_manifest);
        }
        Command::Negatives(a) => {
            fix(&mut a.out);
            fix_opt(&mut a.text_manifest);
        }
        Command::ShuffleImages(a) => fix(&mut a.out_dir),
        Command::Neighbors(a) => fix(&mut a.out),
        Command::EvalAro(a) => fix(&mut a.report.out),
        Command::EvalOrder(a) => fix(&mut a.report.out),
        Command::EvalRetrieval(a) => fix(&mut a.report.out),
        Command::Train(a) => {
            fix(&mut a.out);
            fix_opt(&mut a.trace);
        }
        Command::Report(a) => fix(&mut a.out),
    }
}

fn require(path: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let path = path.ok_or_else(|| CliError::Config(format!("{flag} is required (flag or config)")))?;
    require_file(&path)?;
    Ok(path)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("input {} does not exist", path.display())))
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e).into())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e).into())
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_records<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    Ok(read_jsonl(open(path)?)?)
}

fn write_records<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut w = create(path)?;
    write_jsonl(&mut w, items)?;
    finish(w, path)
}

#[derive(Serialize)]
struct TextManifestEntry<'a> {
    id: &'a str,
    caption: &'a str,
}

/// Unique caption strings, sorted, keyed by the string itself.
fn write_text_manifest<'a>(path: &Path, texts: impl IntoIterator<Item = &'a str>) -> CliResult<()> {
    let unique: BTreeSet<&str> = texts.into_iter().collect();
    let entries: Vec<TextManifestEntry> = unique
        .into_iter()
        .map(|t| TextManifestEntry { id: t, caption: t })
        .collect();
    write_records(path, &entries)
}

fn mine(args: MineArgs, mut cfg: RunConfig) -> CliResult<()> {
    cfg.paths.scenes = args.scenes.or(cfg.paths.scenes.take());
    if let Some(t) = args.task {
        cfg.mine.task = t;
    }
    cfg.mine.symmetric.extend(args.symmetric);
    cfg.validate()?;
    let scenes_path = require(cfg.paths.scenes.clone(), "--scenes")?;

    let scenes = read_scenes(open(&scenes_path)?)?;
    let blocklist = SymmetricBlocklist::from_config(&cfg.mine.symmetric, &cfg.mine.inverses);
    let mined = mine_scenes(&scenes, &blocklist)?;
    let cases: Vec<AroTestCase> = match cfg.mine.task {
        MineTask::Relation => mined.relation,
        MineTask::Attribution => mined.attribution,
        MineTask::Both => mined.relation.into_iter().chain(mined.attribution).collect(),
    };

    let mut w = create(&args.out)?;
    write_cases(&mut w, &cases)?;
    finish(w, &args.out)?;
    provenance::write(&args.out, "mine", &cfg, &[&scenes_path])?;

    if let Some(path) = &args.image_manifest {
        #[derive(Serialize)]
        struct Crop<'a> {
            id: String,
            image_id: &'a str,
            crop: BBox,
        }
        let mut crops: BTreeMap<String, Crop> = BTreeMap::new();
        for c in &cases {
            let id = c.image_key();
            crops.entry(id.clone()).or_insert(Crop {
                id,
                image_id: &c.image_id,
                crop: c.crop,
            });
        }
        write_records(path, &crops.into_values().collect::<Vec<_>>())?;
        provenance::write(path, "mine", &cfg, &[&scenes_path])?;
    }
    if let Some(path) = &args.text_manifest {
        write_text_manifest(path, cases.iter().flat_map(|c| c.candidates()))?;
        provenance::write(path, "mine", &cfg, &[&scenes_path])?;
    }
    eprintln!("mined {} cases from {} scenes", cases.len(), scenes.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionRecord {
    id: String,
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    tags: Option<Vec<PosTag>>,
}

struct Caption {
    id: String,
    image_id: Option<String>,
    tagged: TaggedCaption,
}

fn load_captions(input: CaptionInput, cfg: &mut RunConfig) -> CliResult<(Vec<Caption>, Vec<PathBuf>)> {
    cfg.paths.captions = input.captions.or(cfg.paths.captions.take());
    cfg.paths.lexicon = input.lexicon.or(cfg.paths.lexicon.take());
    cfg.validate()?;
    let captions_path = require(cfg.paths.captions.clone(), "--captions")?;
    let mut inputs = vec![captions_path.clone()];
    let lexicon = match &cfg.paths.lexicon {
        Some(p) => {
            require_file(p)?;
            inputs.push(p.clone());
            Lexicon::from_reader(open(p)?)?
        }
        None => Lexicon::builtin(),
    };

    let records: Vec<CaptionRecord> = read_records(&captions_path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, r) in records.into_iter().enumerate() {
        if !seen.insert(r.id.clone()) {
            return Err(Error::Parse {
                line: line + 1,
                message: format!("duplicate caption id {:?}", r.id),
            }
            .into());
        }
        let tagged = match (r.tokens, r.tags, r.caption) {
            (Some(words), Some(tags), _) => TaggedCaption::from_parts(words, &tags)?,
            (None, None, Some(text)) => analyze(&text, &lexicon),
            _ => {
                return Err(Error::Parse {
                    line: line + 1,
                    message: "expected `caption` or both `tokens` and `tags`".into(),
                }
                .into())
            }
        };
        out.push(Caption {
            id: r.id,
            image_id: r.image_id,
            tagged,
        });
    }
    Ok((out, inputs))
}

fn as_paths(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}

#[derive(Serialize)]
struct PerturbRecord<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_id: Option<&'a str>,
    strategy: PerturbationStrategy,
    seed: u64,
    original: String,
    caption: String,
    degenerate: bool,
}

fn strategy_stream(s: PerturbationStrategy) -> u64 {
    PerturbationStrategy::ALL
        .iter()
        .position(|&x| x == s)
        .expect("strategy is listed") as u64
}

fn perturb_captions(args: PerturbArgs, mut cfg: RunConfig) -> CliResult<()> {
    if !args.strategies.is_empty() {
        cfg.perturb.strategies = args.strategies;
    }
    let (captions, inputs) = load_captions(args.input, &mut cfg)?;
    let seed = cfg.seed;

    let texts: Vec<String> = if args.order_task {
        let tasks: Vec<OrderTask> = captions
            .par_iter()
            .map(|c| {
                let mut t = build_order_task(&c.tagged, item_seed(seed, &c.id));
                t.caption_id = c.id.clone();
                t.image_id = c.image_id.clone().unwrap_or_default();
                t
            })
            .collect();
        write_records(&args.out, &tasks)?;
        tasks
            .iter()
            .flat_map(|t| std::iter::once(t.true_caption.clone()).chain(t.alternatives.iter().map(|a| a.caption.clone())))
            .collect()
    } else {
        let strategies = &cfg.perturb.strategies;
        let records: Vec<PerturbRecord> = captions
            .par_iter()
            .flat_map_iter(|c| {
                let base = item_seed(seed, &c.id);
                strategies.iter().map(move |&s| {
                    let seed = derive_seed(base, strategy_stream(s));
                    let p = perturb(&c.tagged, s, seed);
                    PerturbRecord {
                        id: &c.id,
                        image_id: c.image_id.as_deref(),
                        strategy: s,
                        seed,
                        original: c.tagged.text(),
                        caption: p.text(),
                        degenerate: p.degenerate,
                    }
                })
            })
            .collect();
        write_records(&args.out, &records)?;
        records
            .iter()
            .flat_map(|r| [r.original.clone(), r.caption.clone()])
            .collect()
    };
    provenance::write(&args.out, "perturb", &cfg, &as_paths(&inputs))?;
    if let Some(path) = &args.text_manifest {
        write_text_manifest(path, texts.iter().map(String::as_str))?;
        provenance::write(path, "perturb", &cfg, &as_paths(&inputs))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct NegativeRecord<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_id: Option<&'a str>,
    #[serde(flatten)]
    set: NegativeCaptionSet,
    removable: bool,
}

fn negatives(args: NegativesArgs, mut cfg: RunConfig) -> CliResult<()> {
    let (captions, inputs) = load_captions(args.input, &mut cfg)?;
    let records: Vec<NegativeRecord> = captions
        .par_iter()
        .map(|c| {
            let set = generate_negatives(&c.tagged);
            NegativeRecord {
                id: &c.id,
                image_id: c.image_id.as_deref(),
                removable: set.is_removable(),
                set,
            }
        })
        .collect();
    write_records(&args.out, &records)?;
    provenance::write(&args.out, "negatives", &cfg, &as_paths(&inputs))?;
    if let Some(path) = &args.text_manifest {
        let texts = records
            .iter()
            .flat_map(|r| std::iter::once(r.set.original.as_str()).chain(r.set.negatives.values().map(String::as_str)));
        write_text_manifest(path, texts)?;
        provenance::write(path, "negatives", &cfg, &as_paths(&inputs))?;
    }
    let removable = records.iter().filter(|r| r.removable).count();
    eprintln!("{} captions, {removable} without any negative", records.len());
    Ok(())
}

fn parse_grid(s: &str) -> CliResult<GridSpec> {
    if let Some((r, c)) = s.split_once(['x', 'X']) {
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| CliError::Config(format!("invalid grid {s:?}")))
        };
        return GridSpec::new(parse(r)?, parse(c)?).map_err(|e| CliError::Config(e.to_string()));
    }
    GridSpec::preset(s).map_err(|e| CliError::Config(e.to_string()))
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn shuffle_images(args: ShuffleArgs, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let grid = parse_grid(&args.grid)?;
    require_file(&args.images)?;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ImageRecord {
        id: String,
        path: PathBuf,
    }
    #[derive(Serialize)]
    struct ShuffleRecord {
        id: String,
        source_id: String,
        path: String,
        grid: GridSpec,
        seed: u64,
        permutation: Vec<usize>,
    }

    let records: Vec<ImageRecord> = read_records(&args.images)?;
    let base = args.images.parent().unwrap_or(Path::new("."));
    let mut names = HashSet::new();
    let mut jobs = Vec::with_capacity(records.len());
    for r in records {
        let src = if r.path.is_absolute() { r.path } else { base.join(r.path) };
        require_file(&src)?;
        let name = format!("{}_{}x{}.png", file_stem_for(&r.id), grid.rows, grid.cols);
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!("image ids collide on output name {name}")).into());
        }
        jobs.push((r.id, src, name));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let seed = cfg.seed;
    let out_dir = &args.out_dir;
    let manifest: Vec<ShuffleRecord> = jobs
        .par_iter()
        .map(|(id, src, name)| -> CliResult<ShuffleRecord> {
            let img = RasterImage::load_png(src)?;
            let s = item_seed(seed, id);
            let shuffled = split_and_shuffle(&img, grid, s)?;
            shuffled.image.save_png(&out_dir.join(name))?;
            Ok(ShuffleRecord {
                id: format!("{id}#{}x{}", grid.rows, grid.cols),
                source_id: id.clone(),
                path: name.clone(),
                grid,
                seed: s,
                permutation: shuffled.permutation,
            })
        })
        .collect::<CliResult<_>>()?;

    let manifest_path = out_dir.join("manifest.jsonl");
    write_records(&manifest_path, &manifest)?;
    let mut inputs: Vec<&Path> = vec![&args.images];
    inputs.extend(jobs.iter().map(|(_, src, _)| src.as_path()));
    provenance::write(&manifest_path, "shuffle-images", &cfg, &inputs)?;
    Ok(())
}

fn neighbors(args: NeighborsArgs, mut cfg: RunConfig) -> CliResult<()> {
    if let Some(k) = args.k {
        cfg.neighbors.k = k;
    }
    cfg.validate()?;
    require_file(&args.embeddings)?;
    let set = EmbeddingSet::load(&args.embeddings)?;
    let table = top_k_neighbors(&set, cfg.neighbors.k)?;

    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        neighbors: &'a [Neighbor],
    }
    let rows: Vec<Row> = table
        .ids
        .iter()
        .zip(&table.neighbors)
        .map(|(id, n)| Row { id, neighbors: n })
        .collect();
    write_records(&args.out, &rows)?;
    provenance::write(&args.out, "neighbors", &cfg, &[&args.embeddings])?;
    Ok(())
}

struct LoadedEmbeddings {
    images: EmbeddingSet,
    texts: EmbeddingSet,
    inputs: Vec<PathBuf>,
}

fn load_embeddings(e: EmbeddingInput, cfg: &mut RunConfig) -> CliResult<LoadedEmbeddings> {
    cfg.paths.image_embeddings = e.image_embeddings.or(cfg.paths.image_embeddings.take());
    cfg.paths.text_embeddings = e.text_embeddings.or(cfg.paths.text_embeddings.take());
    cfg.validate()?;
    let img_path = require(cfg.paths.image_embeddings.clone(), "--image-embeddings")?;
    let txt_path = require(cfg.paths.text_embeddings.clone(), "--text-embeddings")?;
    let mut images = EmbeddingSet::load(&img_path)?;
    let mut texts = EmbeddingSet::load(&txt_path)?;
    let mut inputs = vec![img_path, txt_path];
    if let Some(ckpt) = e.checkpoint {
        require_file(&ckpt)?;
        let model = Checkpoint::load(&ckpt)?.model;
        images = project_set(&model, &images)?;
        texts = project_set(&model, &texts)?;
        inputs.push(ckpt);
    }
    Ok(LoadedEmbeddings { images, texts, inputs })
}

fn write_report(mut report: EvalReport, out: &ReportOut, default_dataset: &Path, cfg: &RunConfig) -> CliResult<()> {
    report.dataset = out.dataset.clone().unwrap_or_else(|| {
        default_dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    report.seed = Some(cfg.seed);
    let mut w = create(&out.out)?;
    emit_report(&report, &mut w, out.format.into())?;
    finish(w, &out.out)
}

fn eval_aro(args: EvalAroArgs, mut cfg: RunConfig) -> CliResult<()> {
    let emb = load_embeddings(args.embeddings, &mut cfg)?;
    require_file(&args.cases)?;
    let cases: Vec<AroTestCase> = read_records(&args.cases)?;
    let report = match_accuracy(&cases, &emb.images, &emb.texts)?;
    if let Some(m) = report.macro_accuracy {
        eprintln!("macro accuracy {m:.4} over {} groups", report.groups.len());
    }
    write_report(report, &args.report, &args.cases, &cfg)?;
    let mut inputs = as_paths(&emb.inputs);
    inputs.push(&args.cases);
    provenance::write(&args.report.out, "eval-aro", &cfg, &inputs)
}

fn eval_order(args: EvalOrderArgs, mut cfg: RunConfig) -> CliResult<()> {
    let emb = load_embeddings(args.embeddings, &mut cfg)?;
    require_file(&args.tasks)?;
    let tasks: Vec<OrderTask> = read_records(&args.tasks)?;
    let report = order_task_accuracy(&tasks, &emb.images, &emb.texts)?;
    write_report(report, &args.report, &args.tasks, &cfg)?;
    let mut inputs = as_paths(&emb.inputs);
    inputs.push(&args.tasks);
    provenance::write(&args.report.out, "eval-order", &cfg, &inputs)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    image_id: String,
    #[serde(alias = "caption")]
    text_id: String,
    #[serde(default)]
    split: Option<String>,
    /// Text ids of negative captions for this pair.
    #[serde(default)]
    negatives: Vec<String>,
}

fn select_ids(set: &EmbeddingSet, ids: &BTreeSet<&str>) -> CliResult<EmbeddingSet> {
    let mut order = Vec::with_capacity(ids.len());
    let mut missing = Vec::new();
    for id in ids {
        match set.position(id) {
            Some(i) => order.push(i),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing).into());
    }
    Ok(set.select(&order)?)
}

fn eval_retrieval(args: EvalRetrievalArgs, mut cfg: RunConfig) -> CliResult<()> {
    if !args.ks.is_empty() {
        cfg.retrieval.ks = args.ks;
    }
    let emb = load_embeddings(args.embeddings, &mut cfg)?;
    require_file(&args.pairs)?;
    let pairs: Vec<PairRecord> = read_records(&args.pairs)?;
    let pairs: Vec<&PairRecord> = pairs
        .iter()
        .filter(|p| args.split.is_none() || p.split == args.split)
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs selected for retrieval").into());
    }
    if emb.images.dim() != emb.texts.dim() {
        return Err(Error::DimMismatch {
            expected: emb.images.dim(),
            found: emb.texts.dim(),
        }
        .into());
    }
    let image_ids: BTreeSet<&str> = pairs.iter().map(|p| p.image_id.as_str()).collect();
    let text_ids: BTreeSet<&str> = pairs.iter().map(|p| p.text_id.as_str()).collect();
    let images = select_ids(&emb.images, &image_ids)?;
    let texts = select_ids(&emb.texts, &text_ids)?;
    let gold = GoldMapping::from_pairs(pairs.iter().map(|p| (p.image_id.as_str(), p.text_id.as_str())));
    let sim = cosine_matrix(&images, &texts)?;
    let report = retrieval_report(&sim, &gold, &cfg.retrieval.ks)?;
    for (k, v) in &report.recall {
        eprintln!("{k}: {v:.4}");
    }
    write_report(report, &args.report, &args.pairs, &cfg)?;
    let mut inputs = as_paths(&emb.inputs);
    inputs.push(&args.pairs);
    provenance::write(&args.report.out, "eval-retrieval", &cfg, &inputs)
}

#[derive(Debug, Deserialize)]
struct NegativeFileRecord {
    original: String,
    negatives: BTreeMap<String, String>,
}

/// Interns ids in first-seen order.
#[derive(Default)]
struct Interner<'a> {
    ids: Vec<&'a str>,
    index: HashMap<&'a str, usize>,
}

impl<'a> Interner<'a> {
    fn get(&mut self, id: &'a str) -> usize {
        *self.index.entry(id).or_insert_with(|| {
            self.ids.push(id);
            self.ids.len() - 1
        })
    }
}

fn train_heads(args: TrainArgs, mut cfg: RunConfig) -> CliResult<()> {
    let t = &mut cfg.train;
    macro_rules! set {
        ($($field:ident),*) => {$( if let Some(v) = args.$field { t.$field = v; } )*};
    }
    set!(epochs, batch_size, learning_rate, warmup_steps, neighbor_k, use_neg_captions, use_neg_images, weight_decay, d_out);
    if args.total_steps.is_some() {
        t.total_steps = args.total_steps;
    }
    if args.eval_every.is_some() {
        t.eval_every = args.eval_every;
    }
    if let Some(hidden) = args.hidden {
        t.head = HeadKind::Mlp { hidden };
    }
    t.seed = cfg.seed;
    let emb = load_embeddings(
        EmbeddingInput {
            image_embeddings: args.image_embeddings,
            text_embeddings: args.text_embeddings,
            checkpoint: None,
        },
        &mut cfg,
    )?;
    require_file(&args.pairs)?;
    let pairs: Vec<PairRecord> = read_records(&args.pairs)?;
    let mut inputs = emb.inputs.clone();
    inputs.push(args.pairs.clone());

    let mut file_negatives: HashMap<String, Vec<String>> = HashMap::new();
    if let Some(p) = &args.negatives {
        require_file(p)?;
        for r in read_records::<NegativeFileRecord>(p)? {
            file_negatives
                .entry(r.original)
                .or_default()
                .extend(r.negatives.into_values());
        }
        inputs.push(p.clone());
    }

    let mut train_images = Interner::default();
    let mut train_negs = Interner::default();
    let mut captions = Vec::new();
    let mut pair_image = Vec::new();
    let mut pair_negatives = Vec::new();
    let mut val_images = Interner::default();
    let mut val_captions = Vec::new();
    let mut val_pair_image = Vec::new();
    for p in &pairs {
        match p.split.as_deref() {
            None | Some("train") => {
                pair_image.push(train_images.get(&p.image_id));
                captions.push(p.text_id.as_str());
                let mut negs = Vec::new();
                let from_file = file_negatives.get(&p.text_id).into_iter().flatten();
                for n in p.negatives.iter().chain(from_file) {
                    let k = train_negs.get(n);
                    if !negs.contains(&k) {
                        negs.push(k);
                    }
                }
                pair_negatives.push(negs);
            }
            Some("val") => {
                val_pair_image.push(val_images.get(&p.image_id));
                val_captions.push(p.text_id.as_str());
            }
            Some(_) => {}
        }
    }
    if captions.is_empty() {
        return Err(Error::invalid("no training pairs (split absent or \"train\")").into());
    }

    let data = TrainDataset {
        images: gather_rows(&emb.images, &train_images.ids)?,
        captions: gather_rows(&emb.texts, &captions)?,
        pair_image,
        neg_captions: gather_rows(&emb.texts, &train_negs.ids)?,
        pair_negatives,
    };
    let val = if val_captions.is_empty() {
        None
    } else {
        Some(ValidationSet {
            images: gather_rows(&emb.images, &val_images.ids)?,
            captions: gather_rows(&emb.texts, &val_captions)?,
            pair_image: val_pair_image,
        })
    };

    let outcome = train(&data, None, val.as_ref(), &cfg.train)?;
    let config = serde_json::to_value(&cfg.train).map_err(Error::from)?;
    Checkpoint::new(outcome.model, outcome.best_step as u64, config).save(&args.out)?;
    let paths = as_paths(&inputs);
    provenance::write(&args.out, "train", &cfg, &paths)?;

    let trace_path = args.trace.unwrap_or_else(|| {
        let mut s = args.out.as_os_str().to_owned();
        s.push(".trace.csv");
        PathBuf::from(s)
    });
    let mut w = create(&trace_path)?;
    write_trace(&outcome.trace, &mut w)?;
    finish(w, &trace_path)?;
    provenance::write(&trace_path, "train", &cfg, &paths)?;

    match outcome.best_val_r1 {
        Some(r) => eprintln!(
            "trained {} steps; kept step {} with validation R@1 {r:.4}",
            outcome.steps, outcome.best_step
        ),
        None => eprintln!("trained {} steps", outcome.steps),
    }
    Ok(())
}

fn report(args: ReportArgs, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(args.inputs.len());
    for p in &args.inputs {
        require_file(p)?;
        let r: EvalReport = serde_json::from_reader(open(p)?).map_err(Error::from)?;
        let label = if r.dataset.is_empty() {
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            r.dataset.clone()
        };
        reports.push((label, r));
    }

    let mut w = create(&args.out)?;
    match ReportFormat::from(args.format) {
        ReportFormat::Json => {
            let rounded: Vec<EvalReport> = reports.iter().map(|(_, r)| r.rounded()).collect();
            serde_json::to_writer_pretty(&mut w, &rounded).map_err(Error::from)?;
            w.write_all(b"\n").map_err(|e| Error::io(&args.out, e))?;
        }
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(&mut w);
            out.write_record(["dataset", "task", "section", "key", "metric", "value"])
                .map_err(Error::from)?;
            for (label, r) in &reports {
                let mut buf = Vec::new();
                emit_report(r, &mut buf, ReportFormat::Csv)?;
                let mut rows = csv::Reader::from_reader(buf.as_slice());
                for row in rows.records() {
                    let row = row.map_err(Error::from)?;
                    let mut fields = vec![label.as_str(), r.task.as_str()];
                    fields.extend(row.iter());
                    out.write_record(&fields).map_err(Error::from)?;
                }
            }
            out.flush().map_err(|e| Error::io(&args.out, e))?;
        }
    }
    finish(w, &args.out)?;
    let inputs: Vec<&Path> = args.inputs.iter().map(PathBuf::as_path).collect();
    provenance::write(&args.out, "report", &cfg, &inputs)
}
