use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use depjudge::analysis::{counterfactual_replace, dump_attention, gold_span, pmi_scenarios};
use depjudge::corpus::{
    corpus_stats, generate_synthetic_corpus, load_corpus, save_corpus, split_corpus, Case, DependencyMode,
    GeneratorSpec, LabelCatalog, PenaltyRule, TemplateSet,
};
use depjudge::kv::KvConfig;
use depjudge::metrics::evaluate;
use depjudge::model::{load_checkpoint, save_checkpoint, ModelConfig};
use depjudge::prompting::{enumerate_orders, render_document, vocab_texts, OrderSpec, TaskKind, TaskPredictions};
use depjudge::textmatch::{build_matching_dataset, encode_match_pair, predict_articles_by_matching, MatchPair};
use depjudge::tokenizer::{Vocab, VocabConfig};
use depjudge::training::{
    evaluate_mode, finetune, fit_examples, gold_predictions, pretrain, run_data_size_sweep, run_order_sweep, EpochRecord,
    PretrainConfig, TrainConfig, TrainMode,
};
use depjudge::{Model, Rng};

#[derive(Parser)]
#[command(name = "depjudge", version, about = "Dependency-ordered legal judgment prediction")]
struct Cli {
    /// Flat key = value file with model and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, its catalog and a train/val/test split.
    GenCorpus(GenArgs),
    /// Build the character vocabulary for a data directory.
    BuildVocab(DataArgs),
    /// Span-corruption pretraining on rendered training documents.
    Pretrain(ModelArgs),
    /// Fine-tune in STL, MTL or dependent mode.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file on a split.
    Eval(EvalArgs),
    /// One fine-tuning run per task order.
    OrderSweep(SweepArgs),
    /// One fine-tuning run per training-set size.
    SizeSweep(SizeArgs),
    /// Fact/article text-matching baseline with timing.
    MatchBaseline(MatchArgs),
    /// Label PMI under gold, predicted and mispredicted scenarios.
    AnalyzePmi(PmiArgs),
    /// Cross-attention of one decoded case.
    DumpAttention(CaseArgs),
    /// Re-decode one case with one task's span forced.
    Counterfactual(CounterfactualArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    articles: usize,
    #[arg(long, default_value_t = 10)]
    charges: usize,
    /// independent, article_determines_charge or chained.
    #[arg(long, default_value = "article_determines_charge", value_parser = parse_snake::<DependencyMode>)]
    dependency: DependencyMode,
    #[arg(long, default_value_t = 0.3)]
    fact_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    family_cue_noise: f64,
    #[arg(long, default_value_t = 0.14)]
    multi_article_prob: f64,
    #[arg(long, default_value_t = 2)]
    noise_months: u32,
    /// english or cjk.
    #[arg(long, default_value = "english", value_parser = parse_snake::<TemplateSet>)]
    template: TemplateSet,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by gen-corpus.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Architecture preset for fresh weights: base, small or tiny.
    #[arg(long, default_value = "small")]
    model: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// dep:ACP, mtl:ACP or stl:C.
    #[arg(long)]
    mode: Option<TrainMode>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// JSONL predictions `{id, articles, charges, penalty_months}` to score.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Tasks to score; defaults to the checkpoint's mode or ACP.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Every permutation of these tasks is trained.
    #[arg(long, default_value = "ACP")]
    tasks: OrderSpec,
}

#[derive(Args)]
struct SizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "100,1000")]
    sizes: Vec<usize>,
    #[arg(long)]
    mode: Option<TrainMode>,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = depjudge::textmatch::DEFAULT_NEG_RATIO)]
    neg_ratio: usize,
    #[arg(long, default_value_t = depjudge::textmatch::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Test cases to score (the full catalog is scanned for each).
    #[arg(long, default_value_t = 50)]
    limit: usize,
    /// Generative checkpoint whose article decoding is timed on the same cases.
    #[arg(long)]
    generative: Option<PathBuf>,
}

#[derive(Args)]
struct PmiArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Case id, searched in every split.
    #[arg(long)]
    case: String,
    /// Defaults to the checkpoint's dependent order.
    #[arg(long)]
    order: Option<OrderSpec>,
}

#[derive(Args)]
struct CounterfactualArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Task code whose span is forced (A, C, P, V or A').
    #[arg(long)]
    task: String,
    /// Span text to force; defaults to the gold span.
    #[arg(long)]
    span: Option<String>,
}

fn parse_snake<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Sub-seed for one purpose, derived from the global seed.
fn sub_seed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(purpose.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

const MAX_OUT_LEN: usize = 96;

struct Ctx {
    seed: u64,
    out: PathBuf,
    kv: KvConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        log::info!("wrote {}", p.display());
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.write(name, &s)
    }
}

struct Data {
    catalog: LabelCatalog,
    train: Vec<Case>,
    val: Vec<Case>,
    test: Vec<Case>,
}

impl Data {
    fn load(dir: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            catalog: LabelCatalog::load(&dir.join("catalog.json"))?,
            train: load_corpus(&dir.join("train.jsonl"))?,
            val: load_corpus(&dir.join("val.jsonl"))?,
            test: load_corpus(&dir.join("test.jsonl"))?,
        })
    }

    fn split(&self, name: &str) -> anyhow::Result<&[Case]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => bail!(depjudge::Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }

    fn find(&self, id: &str) -> anyhow::Result<&Case> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .find(|c| c.id == id)
            .ok_or_else(|| depjudge::Error::InvalidArgument(format!("no case with id `{id}`")).into())
    }

    /// The data directory's vocab.txt, or one built from all splits.
    fn vocab(&self, dir: &Path) -> anyhow::Result<Vocab> {
        let p = dir.join("vocab.txt");
        if p.exists() {
            return Ok(Vocab::load(&p)?);
        }
        Ok(build_vocab(&self.all(), &self.catalog, 1))
    }

    fn all(&self) -> Vec<Case> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }
}

fn build_vocab(cases: &[Case], catalog: &LabelCatalog, min_count: usize) -> Vocab {
    let texts = vocab_texts(cases, catalog);
    Vocab::build(texts.iter().map(String::as_str), VocabConfig { min_count })
}

struct Loaded {
    model: Model,
    vocab: Vocab,
    meta: BTreeMap<String, String>,
}

fn load_model(path: &Path) -> anyhow::Result<Loaded> {
    let ck = load_checkpoint::<f32>(path)?;
    let text = ck
        .metadata
        .get("vocab")
        .ok_or_else(|| depjudge::Error::Checkpoint(format!("{} carries no vocabulary", path.display())))?;
    let vocab = Vocab::from_text(text)?;
    Ok(Loaded { model: ck.model, vocab, meta: ck.metadata })
}

/// Starting weights: `--init` checkpoint, or a fresh model from the preset
/// plus config overrides.
fn init_model(ctx: &mut Ctx, args: &ModelArgs, data: &Data) -> anyhow::Result<Loaded> {
    if let Some(p) = &args.init {
        return load_model(p);
    }
    let vocab = data.vocab(&args.data)?;
    let mut cfg = ModelConfig::preset(&args.model, vocab.len())?;
    cfg.rng_seed = sub_seed(ctx.seed, 2);
    cfg.apply_kv(&mut ctx.kv)?;
    Ok(Loaded { model: Model::new(cfg)?, vocab, meta: BTreeMap::new() })
}

fn save(ctx: &Ctx, name: &str, model: &Model, vocab: &Vocab, extra: &[(&str, String)]) -> anyhow::Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("vocab".to_string(), vocab.to_text());
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    save_checkpoint(&ctx.path(name), model, &meta)?;
    log::info!("wrote {}", ctx.path(name).display());
    Ok(())
}

fn train_config(ctx: &mut Ctx, mode: Option<TrainMode>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig { rng_seed: sub_seed(ctx.seed, 3), ..Default::default() };
    cfg.apply_kv(&mut ctx.kv)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn write_log(ctx: &Ctx, name: &str, history: &[EpochRecord]) -> anyhow::Result<()> {
    ctx.write_jsonl(name, history)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    articles: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    charges: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    penalty_months: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    court_view: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    article_content: Option<String>,
    #[serde(default)]
    malformed: bool,
}

impl PredictionRecord {
    fn new(id: &str, p: TaskPredictions) -> Self {
        Self {
            id: id.to_string(),
            articles: p.articles,
            charges: p.charges,
            penalty_months: p.penalty_months,
            court_view: p.court_view,
            article_content: p.article_content,
            malformed: p.malformed,
        }
    }

    fn into_predictions(self) -> TaskPredictions {
        TaskPredictions {
            articles: self.articles,
            charges: self.charges,
            penalty_months: self.penalty_months,
            court_view: self.court_view,
            article_content: self.article_content,
            malformed: self.malformed,
        }
    }
}

/// Predictions aligned with `cases` by id; cases without a record get an
/// empty prediction.
fn read_predictions(path: &Path, cases: &[Case]) -> anyhow::Result<Vec<TaskPredictions>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut by_id = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line).map_err(|e| depjudge::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        by_id.insert(r.id.clone(), r);
    }
    Ok(cases.iter().map(|c| by_id.remove(&c.id).map(PredictionRecord::into_predictions).unwrap_or_default()).collect())
}

fn checkpoint_mode(meta: &BTreeMap<String, String>) -> anyhow::Result<Option<TrainMode>> {
    meta.get("mode").map(|m| m.parse::<TrainMode>()).transpose().map_err(Into::into)
}

fn cmd_gen(ctx: &mut Ctx, a: GenArgs) -> anyhow::Result<()> {
    let fr: Vec<f64> = a
        .split
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| depjudge::Error::InvalidArgument(format!("--split `{}`: {e}", a.split)))?;
    if fr.len() != 3 {
        bail!(depjudge::Error::InvalidArgument("--split needs three fractions".into()));
    }
    let spec = GeneratorSpec {
        n_cases: a.n,
        n_articles: a.articles,
        n_charges: a.charges,
        dependency_mode: a.dependency,
        fact_noise: a.fact_noise,
        family_cue_noise: a.family_cue_noise,
        multi_article_prob: a.multi_article_prob,
        penalty_rule: PenaltyRule { noise_months: a.noise_months },
        template: a.template,
        rng_seed: ctx.seed,
    };
    let (corpus, catalog) = generate_synthetic_corpus(&spec)?;
    let split = split_corpus(&corpus, (fr[0], fr[1], fr[2]), sub_seed(ctx.seed, 1))?;
    for w in &split.warnings {
        log::warn!("{w}");
    }
    save_corpus(&corpus, &ctx.path("corpus.jsonl"))?;
    save_corpus(&split.train, &ctx.path("train.jsonl"))?;
    save_corpus(&split.val, &ctx.path("val.jsonl"))?;
    save_corpus(&split.test, &ctx.path("test.jsonl"))?;
    catalog.save(&ctx.path("catalog.json"))?;
    ctx.write_json("generator.json", &spec)?;
    ctx.write_json("stats.json", &corpus_stats(&corpus)?)?;
    println!("{} cases: {} train, {} val, {} test", corpus.len(), split.train.len(), split.val.len(), split.test.len());
    Ok(())
}

fn cmd_vocab(ctx: &mut Ctx, a: DataArgs) -> anyhow::Result<()> {
    let data = Data::load(&a.data)?;
    let vocab = build_vocab(&data.all(), &data.catalog, a.min_count);
    vocab.save(&ctx.path("vocab.txt"))?;
    println!("{} symbols", vocab.len());
    Ok(())
}

fn documents(cases: &[Case], catalog: &LabelCatalog) -> anyhow::Result<Vec<String>> {
    let order: OrderSpec = "VAA'CP".parse()?;
    let template = Default::default();
    cases.iter().map(|c| Ok(render_document(c, catalog, &order, &template)?)).collect()
}

fn cmd_pretrain(ctx: &mut Ctx, a: ModelArgs) -> anyhow::Result<()> {
    let data = Data::load(&a.data)?;
    let Loaded { mut model, vocab, .. } = init_model(ctx, &a, &data)?;
    let mut cfg = PretrainConfig { rng_seed: sub_seed(ctx.seed, 4), ..Default::default() };
    cfg.apply_kv(&mut ctx.kv)?;
    ctx.kv.finish()?;
    let train = documents(&data.train, &data.catalog)?;
    let val = documents(&data.val, &data.catalog)?;
    let history = pretrain(&mut model, &vocab, &train, &val, &cfg)?;
    write_log(ctx, "pretrain_log.jsonl", &history)?;
    save(ctx, "pretrained.ckpt", &model, &vocab, &[("stage", "pretrain".into())])?;
    let best = history.iter().filter(|r| r.best_so_far).map(|r| r.val_metric).next_back();
    println!("pretrained {} epochs, best validation loss {:.4}", history.len(), best.unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_train(ctx: &mut Ctx, a: TrainArgs) -> anyhow::Result<()> {
    let data = Data::load(&a.model.data)?;
    let Loaded { mut model, vocab, .. } = init_model(ctx, &a.model, &data)?;
    let cfg = train_config(ctx, a.mode)?;
    ctx.kv.finish()?;
    let outcome = finetune(&mut model, &vocab, &data.catalog, &data.train, &data.val, &cfg)?;
    write_log(ctx, "train_log.jsonl", &outcome.history)?;
    save(ctx, "model.ckpt", &model, &vocab, &[("stage", "finetune".into()), ("mode", cfg.mode.to_string())])?;
    let (_, report) = evaluate_mode(&model, &vocab, &data.catalog, &data.val, &cfg.mode, cfg.max_out_len)?;
    ctx.write_json("val_report.json", &report)?;
    println!("best epoch {} with validation metric {:.4}", outcome.best_epoch, outcome.best_metric);
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, a: EvalArgs) -> anyhow::Result<()> {
    ctx.kv.finish()?;
    let data = Data::load(&a.data)?;
    let cases = data.split(&a.split)?;
    let (preds, report) = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let l = load_model(ck)?;
            let mode = match a.mode {
                Some(m) => m,
                None => checkpoint_mode(&l.meta)?.ok_or_else(|| anyhow!(depjudge::Error::InvalidArgument("--mode is required".into())))?,
            };
            evaluate_mode(&l.model, &l.vocab, &data.catalog, cases, &mode, MAX_OUT_LEN)?
        }
        (None, Some(p)) => {
            let tasks = a.mode.map(|m| m.tasks()).unwrap_or_else(|| vec![TaskKind::Article, TaskKind::Charge, TaskKind::Penalty]);
            let preds = read_predictions(p, cases)?;
            let golds = gold_predictions(&data.catalog, cases, &tasks)?;
            let report = evaluate(&preds, &golds, &tasks, &data.catalog)?;
            (preds, report)
        }
        (None, None) => bail!(depjudge::Error::InvalidArgument("eval needs --checkpoint or --predictions".into())),
    };
    let records: Vec<PredictionRecord> = cases.iter().zip(preds).map(|(c, p)| PredictionRecord::new(&c.id, p)).collect();
    ctx.write_jsonl("predictions.jsonl", &records)?;
    ctx.write_json("report.json", &report)?;
    for t in &report.tasks {
        println!(
            "{}: micro_f1 {} macro_f1 {} log_distance {}",
            t.task,
            fmt_opt(t.micro_f1),
            fmt_opt(t.macro_f1),
            fmt_opt(t.log_distance)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn cmd_order_sweep(ctx: &mut Ctx, a: SweepArgs) -> anyhow::Result<()> {
    let data = Data::load(&a.model.data)?;
    let Loaded { model, vocab, .. } = init_model(ctx, &a.model, &data)?;
    let cfg = train_config(ctx, None)?;
    ctx.kv.finish()?;
    let orders = enumerate_orders(a.tasks.tasks(), &[])?;
    let report = run_order_sweep(&model, &vocab, &data.catalog, &data.train, &data.val, &data.test, &orders, &cfg)?;
    ctx.write_json("order_sweep.json", &report)?;
    ctx.write("order_sweep.csv", &report.to_csv())?;
    println!("{} orders", report.rows.len());
    Ok(())
}

fn cmd_size_sweep(ctx: &mut Ctx, a: SizeArgs) -> anyhow::Result<()> {
    let data = Data::load(&a.model.data)?;
    let Loaded { model, vocab, .. } = init_model(ctx, &a.model, &data)?;
    let cfg = train_config(ctx, a.mode)?;
    ctx.kv.finish()?;
    let rows = run_data_size_sweep(&model, &vocab, &data.catalog, &data.train, &data.val, &data.test, &a.sizes, &cfg)?;
    ctx.write_json("size_sweep.json", &rows)?;
    let mut csv = String::from("size,selection_metric\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6}\n", r.size, r.selection_metric));
        println!("{}: {:.4}", r.size, r.selection_metric);
    }
    ctx.write("size_sweep.csv", &csv)
}

#[derive(Serialize)]
struct MatchReport {
    catalog_size: usize,
    cases: usize,
    article_micro_f1: f64,
    matching_secs_per_case: f64,
    generative_secs_per_case: Option<f64>,
    generative_article_micro_f1: Option<f64>,
    fallbacks: usize,
}

fn cmd_match(ctx: &mut Ctx, a: MatchArgs) -> anyhow::Result<()> {
    let data = Data::load(&a.model.data)?;
    let Loaded { mut model, vocab, .. } = init_model(ctx, &a.model, &data)?;
    let cfg = train_config(ctx, None)?;
    ctx.kv.finish()?;
    let mut rng = Rng::seed_from_u64(sub_seed(ctx.seed, 5));
    let pairs: Vec<MatchPair> = build_matching_dataset(&data.train, &data.catalog, a.neg_ratio, &mut rng)?;
    ctx.write_jsonl("matching_pairs.jsonl", &pairs)?;
    let examples =
        pairs.iter().map(|p| encode_match_pair(&vocab, p, model.config.max_len)).collect::<depjudge::Result<Vec<_>>>()?;
    fit_examples(&mut model, &examples, &cfg, a.epochs)?;
    save(ctx, "matcher.ckpt", &model, &vocab, &[("stage", "matching".into())])?;

    let cases = &data.test[..a.limit.min(data.test.len())];
    let (mut secs, mut fallbacks, mut preds) = (0.0, 0, Vec::new());
    for c in cases {
        let m = predict_articles_by_matching(&model, &vocab, &c.fact, &data.catalog, a.threshold)?;
        secs += m.elapsed_secs;
        fallbacks += m.fallback as usize;
        preds.push(m.articles);
    }
    let golds: Vec<Vec<String>> = cases.iter().map(|c| c.articles.clone()).collect();
    let n = cases.len().max(1) as f64;
    let mut report = MatchReport {
        catalog_size: data.catalog.articles.len(),
        cases: cases.len(),
        article_micro_f1: depjudge::metrics::micro_f1(&preds, &golds)?,
        matching_secs_per_case: secs / n,
        generative_secs_per_case: None,
        generative_article_micro_f1: None,
        fallbacks,
    };
    if let Some(p) = &a.generative {
        let g = load_model(p)?;
        let mode = TrainMode::Stl(TaskKind::Article);
        let (_, r) = evaluate_mode(&g.model, &g.vocab, &data.catalog, cases, &mode, MAX_OUT_LEN)?;
        report.generative_secs_per_case = Some(r.elapsed_secs / n);
        report.generative_article_micro_f1 = r.task(TaskKind::Article).and_then(|t| t.micro_f1);
    }
    ctx.write_json("match_report.json", &report)?;
    println!("matching: {:.4} s/case, article micro-F1 {:.4}", report.matching_secs_per_case, report.article_micro_f1);
    Ok(())
}

fn cmd_pmi(ctx: &mut Ctx, a: PmiArgs) -> anyhow::Result<()> {
    ctx.kv.finish()?;
    let data = Data::load(&a.data)?;
    let cases = data.split(&a.split)?;
    let preds = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => read_predictions(p, cases)?,
        (None, Some(ck)) => {
            let l = load_model(ck)?;
            let mode = checkpoint_mode(&l.meta)?.unwrap_or(TrainMode::Dependent("ACP".parse()?));
            evaluate_mode(&l.model, &l.vocab, &data.catalog, cases, &mode, MAX_OUT_LEN)?.0
        }
        (None, None) => bail!(depjudge::Error::InvalidArgument("analyze-pmi needs --predictions or --checkpoint".into())),
    };
    let s = pmi_scenarios(cases, &preds)?;
    let scenarios = [("gold", Some(&s.ground_truth)), ("predicted", Some(&s.predicted)), ("mispredicted", s.mispredicted.as_ref())];
    for (name, set) in scenarios {
        match set {
            Some(set) => {
                for (pair, m) in set.named() {
                    ctx.write(&format!("pmi_{name}_{pair}.csv"), &m.to_csv())?;
                }
            }
            None => println!("notice: {name} scenario omitted (empty error slice)"),
        }
    }
    ctx.write_json("pmi.json", &s)?;
    println!("error slice: {} cases", s.slice_size);
    Ok(())
}

fn case_order(args: &CaseArgs, meta: &BTreeMap<String, String>) -> anyhow::Result<OrderSpec> {
    if let Some(o) = &args.order {
        return Ok(o.clone());
    }
    match checkpoint_mode(meta)? {
        Some(TrainMode::Dependent(o)) => Ok(o),
        _ => bail!(depjudge::Error::InvalidArgument("--order is required for this checkpoint".into())),
    }
}

fn cmd_attention(ctx: &mut Ctx, a: CaseArgs) -> anyhow::Result<()> {
    ctx.kv.finish()?;
    let data = Data::load(&a.data)?;
    let l = load_model(&a.checkpoint)?;
    let order = case_order(&a, &l.meta)?;
    let rec = dump_attention(&l.model, &l.vocab, &data.catalog, data.find(&a.case)?, &order, MAX_OUT_LEN)?;
    ctx.write_json("attention.json", &rec)?;
    ctx.write("attention.csv", &rec.to_csv())?;
    println!("{} x {}", rec.output_tokens.len(), rec.input_tokens.len());
    Ok(())
}

fn cmd_counterfactual(ctx: &mut Ctx, a: CounterfactualArgs) -> anyhow::Result<()> {
    ctx.kv.finish()?;
    let data = Data::load(&a.case.data)?;
    let l = load_model(&a.case.checkpoint)?;
    let order = case_order(&a.case, &l.meta)?;
    let task = OrderSpec::from_str_single(&a.task)?;
    let case = data.find(&a.case.case)?;
    let span = match a.span {
        Some(s) => s,
        None => gold_span(case, &data.catalog, task)?,
    };
    let cf = counterfactual_replace(&l.model, &l.vocab, &data.catalog, case, &order, task, &span, MAX_OUT_LEN)?;
    ctx.write_json("counterfactual.json", &cf)?;
    println!("before: {}\nafter:  {}\nchanged: {}", cf.before_text, cf.after_text, cf.changed.join(","));
    Ok(())
}

trait SingleTask {
    fn from_str_single(s: &str) -> anyhow::Result<TaskKind>;
}

impl SingleTask for OrderSpec {
    fn from_str_single(s: &str) -> anyhow::Result<TaskKind> {
        let o: OrderSpec = s.parse()?;
        match o.tasks() {
            [t] => Ok(*t),
            _ => bail!(depjudge::Error::InvalidArgument(format!("`{s}` is not a single task"))),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    let kv = match &cli.config {
        Some(p) => {
            if !p.exists() {
                bail!(MissingFile(p.clone()));
            }
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    for dir in inputs(&cli.command) {
        if !dir.exists() {
            bail!(MissingFile(dir.to_path_buf()));
        }
    }
    let mut ctx = Ctx { seed: cli.seed, out: cli.out, kv };
    match cli.command {
        Command::GenCorpus(a) => {
            ctx.kv.finish()?;
            cmd_gen(&mut ctx, a)
        }
        Command::BuildVocab(a) => {
            ctx.kv.finish()?;
            cmd_vocab(&mut ctx, a)
        }
        Command::Pretrain(a) => cmd_pretrain(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::OrderSweep(a) => cmd_order_sweep(&mut ctx, a),
        Command::SizeSweep(a) => cmd_size_sweep(&mut ctx, a),
        Command::MatchBaseline(a) => cmd_match(&mut ctx, a),
        Command::AnalyzePmi(a) => cmd_pmi(&mut ctx, a),
        Command::DumpAttention(a) => cmd_attention(&mut ctx, a),
        Command::Counterfactual(a) => cmd_counterfactual(&mut ctx, a),
    }
}

/// Input paths named on the command line, checked before any work starts.
fn inputs(c: &Command) -> Vec<&Path> {
    let mut v: Vec<&Path> = Vec::new();
    match c {
        Command::GenCorpus(_) => {}
        Command::BuildVocab(a) => v.push(&a.data),
        Command::Pretrain(a) => {
            v.push(&a.data);
            v.extend(a.init.as_deref());
        }
        Command::Train(a) => {
            v.push(&a.model.data);
            v.extend(a.model.init.as_deref());
        }
        Command::Eval(a) => {
            v.push(&a.data);
            v.extend(a.checkpoint.as_deref());
            v.extend(a.predictions.as_deref());
        }
        Command::OrderSweep(a) => {
            v.push(&a.model.data);
            v.extend(a.model.init.as_deref());
        }
        Command::SizeSweep(a) => {
            v.push(&a.model.data);
            v.extend(a.model.init.as_deref());
        }
        Command::MatchBaseline(a) => {
            v.push(&a.model.data);
            v.extend(a.model.init.as_deref());
            v.extend(a.generative.as_deref());
        }
        Command::AnalyzePmi(a) => {
            v.push(&a.data);
            v.extend(a.predictions.as_deref());
            v.extend(a.checkpoint.as_deref());
        }
        Command::DumpAttention(a) => {
            v.push(&a.data);
            v.push(&a.checkpoint);
        }
        Command::Counterfactual(a) => {
            v.push(&a.case.data);
            v.push(&a.case.checkpoint);
        }
    }
    v
}

#[derive(Debug, thiserror::Error)]
#[error("missing file {}", .0.display())]
struct MissingFile(PathBuf);

/// Exit code and short kind for an error.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    use depjudge::Error as E;
    if e.downcast_ref::<MissingFile>().is_some() {
        return (3, "missing_file");
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (3, "missing_file"),
                E::Io(_) => (7, "io"),
                E::CheckpointVersion { .. } => (4, "checkpoint_version"),
                E::Checkpoint(_) => (4, "checkpoint"),
                E::Diverged(_) => (6, "diverged"),
                E::Config(_) => (5, "config"),
                E::Parse { .. } | E::Json(_) | E::DuplicateId { .. } => (5, "parse"),
                _ => (5, "invalid_input"),
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound { (3, "missing_file") } else { (7, "io") };
        }
    }
    (1, "internal")
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("DEPJUDGE_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage code=2 msg=\"{}\"", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error kind={kind} code={code} msg=\"{}\"", one_line(&format!("{e:#}")).replace('"', "'"));
            ExitCode::from(code)
        }
    }
}
