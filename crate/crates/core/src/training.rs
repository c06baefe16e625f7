//! Span-corruption pretraining, ordered fine-tuning (single-task,
//! independent multi-task and dependent modes), early stopping, evaluation
//! and the order / data-size sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Case, LabelCatalog};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::metrics::{evaluate, MetricsReport, TaskReport};
use crate::model::{cross_entropy_sum, shift_right, token_cross_entropy, Transformer};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompting::{
    build_prompt, decoded_text, parse_decoded, span_corrupt, OrderSpec, PromptTarget, TaskKind, TaskPredictions,
};
use crate::tokenizer::Vocab;

type Model = Transformer<f32>;

/// One encoded training pair; `y` ends with the end token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

pub fn encode_example(vocab: &Vocab, pt: &PromptTarget, max_len: usize) -> Result<Example> {
    let x = vocab.encode(&pt.input_text).ids;
    let y = vocab.encode(&pt.target_text).ids;
    for len in [x.len(), y.len()] {
        if len > max_len {
            return Err(Error::TooLong { len, max: max_len });
        }
    }
    Ok(Example { x, y })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainMode {
    /// One task, one model.
    Stl(TaskKind),
    /// Shared parameters; each epoch every case contributes one uniformly
    /// sampled single-task prompt.
    MtlIndependent(Vec<TaskKind>),
    /// All tasks decoded in one sequence in the given order.
    Dependent(OrderSpec),
}

impl TrainMode {
    pub fn tasks(&self) -> Vec<TaskKind> {
        match self {
            TrainMode::Stl(t) => vec![*t],
            TrainMode::MtlIndependent(ts) => ts.clone(),
            TrainMode::Dependent(o) => o.tasks().to_vec(),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Stl(t) => write!(f, "stl:{t}"),
            TrainMode::MtlIndependent(ts) => {
                write!(f, "mtl:")?;
                ts.iter().try_for_each(|t| write!(f, "{t}"))
            }
            TrainMode::Dependent(o) => write!(f, "dep:{o}"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    /// `stl:C`, `mtl:ACP` or `dep:ACP`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, tasks) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("mode `{s}` must look like dep:ACP, mtl:ACP or stl:C")))?;
        let order: OrderSpec = tasks.parse()?;
        match kind.trim() {
            "stl" if order.len() == 1 => Ok(TrainMode::Stl(order.tasks()[0])),
            "stl" => Err(Error::InvalidArgument("stl mode takes exactly one task".into())),
            "mtl" => Ok(TrainMode::MtlIndependent(order.tasks().to_vec())),
            "dep" | "dependent" => Ok(TrainMode::Dependent(order)),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    pub mode: TrainMode,
    pub rng_seed: u64,
    /// Decoding budget during evaluation.
    pub max_out_len: usize,
    /// Evaluate early stopping on at most this many validation cases.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            micro_batch: 16,
            accumulation_steps: 8,
            max_epochs: 30,
            patience: 3,
            lr: 1e-3,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
            mode: TrainMode::Dependent("ACP".parse().expect("valid order")),
            rng_seed: 0,
            max_out_len: 96,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("micro_batch and accumulation_steps must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config("need 0 <= patience < max_epochs".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Applies recognized keys from a `key = value` config, leaving the rest.
    /// `batch_size` is accepted and split as `micro_batch * accumulation_steps`.
    pub fn apply_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take_into("micro_batch", &mut self.micro_batch)?;
        kv.take_into("accumulation_steps", &mut self.accumulation_steps)?;
        if let Some(b) = kv.take::<usize>("batch_size")? {
            if b % self.micro_batch != 0 {
                return Err(Error::Config(format!("batch_size {b} is not a multiple of micro_batch {}", self.micro_batch)));
            }
            self.accumulation_steps = b / self.micro_batch;
        }
        kv.take_into("max_epochs", &mut self.max_epochs)?;
        kv.take_into("patience", &mut self.patience)?;
        kv.take_into("lr", &mut self.lr)?;
        kv.take_into("warmup_steps", &mut self.warmup_steps)?;
        kv.take_into("weight_decay", &mut self.optimizer.weight_decay)?;
        kv.take_into("clip_norm", &mut self.optimizer.clip_norm)?;
        kv.take_into("mode", &mut self.mode)?;
        kv.take_into("seed", &mut self.rng_seed)?;
        kv.take_into("max_out_len", &mut self.max_out_len)?;
        if let Some(n) = kv.take::<usize>("eval_limit")? {
            self.eval_limit = (n > 0).then_some(n);
        }
        self.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub best_so_far: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a metric to maximize. Training stops
/// once more than `patience` consecutive epochs fail to improve.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_best: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Mean of per-task normalized scores: micro-F1 for articles and charges,
/// `exp(-log_distance)` for the penalty, token accuracy for generated text.
pub fn selection_metric(report: &MetricsReport) -> f64 {
    report.mean_score()
}

fn per_example_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Gradient of the batch loss: token cross-entropy summed over every target
/// position of every example, divided by the batch's total token count.
/// Micro-batches only group the work; the reduction is identical.
pub fn batch_gradient(model: &Model, batch: &[Example], micro_batch: usize, seed: u64, step: u64) -> Result<(Vec<f32>, f64)> {
    let total: usize = batch.iter().map(|e| e.y.len()).sum();
    if total == 0 {
        return Err(Error::Empty("batch has no target tokens"));
    }
    let scale = 1.0 / total as f32;
    let dropout = model.config.dropout > 0.0;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0f64;
    for (m, micro) in batch.chunks(micro_batch.max(1)).enumerate() {
        let parts: Vec<Result<(Vec<f32>, f64)>> = micro
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut g = model.params.zeros_like();
                let mut rng = ChaCha8Rng::seed_from_u64(per_example_seed(seed, step, m * micro_batch + i));
                let (logits, cache) =
                    model.forward_train(&ex.x, &shift_right(&ex.y), dropout.then_some(&mut rng))?;
                let mask = vec![false; ex.y.len()];
                let (sum, _, dl) = cross_entropy_sum(&logits, &ex.y, &mask, Some(scale))?;
                model.backward(&cache, &dl.expect("gradient requested"), &mut g);
                Ok((g, sum as f64))
            })
            .collect();
        for part in parts {
            let (g, l) = part?;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
            loss += l;
        }
    }
    Ok((grads, loss / total as f64))
}

/// Optimizer state plus step counter shared by pretraining and fine-tuning.
struct Trainer {
    opt: AdamW<f32>,
    micro_batch: usize,
    batch_size: usize,
    lr: f64,
    warmup: usize,
    seed: u64,
}

impl Trainer {
    fn new(model: &Model, micro_batch: usize, accumulation: usize, lr: f64, warmup: usize, opt: AdamWConfig, seed: u64) -> Self {
        Self { opt: AdamW::new(&model.params, opt), micro_batch, batch_size: micro_batch * accumulation, lr, warmup, seed }
    }

    /// One pass over `examples` (already shuffled); returns the mean
    /// per-token loss.
    fn epoch(&mut self, model: &mut Model, examples: &[Example]) -> Result<f64> {
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for batch in examples.chunks(self.batch_size) {
            let step = self.opt.steps();
            let (grads, loss) = batch_gradient(model, batch, self.micro_batch, self.seed, step)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss {loss} at step {step}")));
            }
            let lr = if self.warmup > 0 { self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0) } else { self.lr };
            self.opt.step(&mut model.params, &grads, lr);
            let n: usize = batch.iter().map(|e| e.y.len()).sum();
            loss_sum += loss * n as f64;
            tokens += n;
        }
        Ok(if tokens == 0 { 0.0 } else { loss_sum / tokens as f64 })
    }
}

/// Plain training on a fixed example list for `epochs` passes, reshuffled
/// each pass, without validation. Returns the mean loss per epoch.
pub fn fit_examples(model: &mut Model, examples: &[Example], cfg: &TrainConfig, epochs: usize) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Empty("no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trainer =
        Trainer::new(model, cfg.micro_batch, cfg.accumulation_steps, cfg.lr, cfg.warmup_steps, cfg.optimizer, cfg.rng_seed);
    let mut order = examples.to_vec();
    (0..epochs)
        .map(|_| {
            order.shuffle(&mut rng);
            trainer.epoch(model, &order)
        })
        .collect()
}

/// Mean per-token loss of `examples` without updating anything.
pub fn dataset_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ex in examples {
        let logits = model.forward(&ex.x, &shift_right(&ex.y))?;
        let l = token_cross_entropy(&logits, &ex.y, &vec![false; ex.y.len()])? as f64;
        sum += l * ex.y.len() as f64;
        n += ex.y.len();
    }
    if n == 0 {
        return Err(Error::Empty("no examples to score"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub mean_span: f64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    pub rng_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            mean_span: 3.0,
            micro_batch: 16,
            accumulation_steps: 2,
            max_epochs: 5,
            patience: 1,
            lr: 1e-3,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
            rng_seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn apply_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take_into("mask_ratio", &mut self.mask_ratio)?;
        kv.take_into("mean_span", &mut self.mean_span)?;
        kv.take_into("micro_batch", &mut self.micro_batch)?;
        kv.take_into("accumulation_steps", &mut self.accumulation_steps)?;
        kv.take_into("max_epochs", &mut self.max_epochs)?;
        kv.take_into("patience", &mut self.patience)?;
        kv.take_into("lr", &mut self.lr)?;
        kv.take_into("warmup_steps", &mut self.warmup_steps)?;
        kv.take_into("weight_decay", &mut self.optimizer.weight_decay)?;
        kv.take_into("seed", &mut self.rng_seed)?;
        if self.micro_batch == 0 || self.accumulation_steps == 0 || self.max_epochs == 0 {
            return Err(Error::Config("pretraining batch sizes and epochs must be positive".into()));
        }
        Ok(())
    }
}

fn corrupt_all(vocab: &Vocab, texts: &[String], cfg: &PretrainConfig, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    texts
        .iter()
        .map(|t| {
            // documents longer than the model window are cut; one slot is kept for the end marker
            let t = match t.char_indices().nth(max_len.saturating_sub(1)) {
                Some((i, _)) => &t[..i],
                None => t.as_str(),
            };
            encode_example(vocab, &span_corrupt(t, cfg.mask_ratio, cfg.mean_span, rng)?, max_len)
        })
        .collect()
}

/// Span-corruption pretraining on raw documents. Each epoch draws fresh
/// corruptions; validation uses one fixed corruption per held-out text.
/// The model is left at the epoch with the lowest validation loss.
pub fn pretrain(
    model: &mut Model,
    vocab: &Vocab,
    train_texts: &[String],
    val_texts: &[String],
    cfg: &PretrainConfig,
) -> Result<Vec<EpochRecord>> {
    if train_texts.is_empty() {
        return Err(Error::Empty("no pretraining texts"));
    }
    let max_len = model.config.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let val_set = if val_texts.is_empty() { train_texts } else { val_texts };
    let val = corrupt_all(vocab, val_set, cfg, max_len, &mut ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xA5A5))?;
    let mut trainer = Trainer::new(
        model,
        cfg.micro_batch,
        cfg.accumulation_steps,
        cfg.lr,
        cfg.warmup_steps,
        cfg.optimizer,
        cfg.rng_seed,
    );
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut examples = corrupt_all(vocab, train_texts, cfg, max_len, &mut rng)?;
        examples.shuffle(&mut rng);
        let train_loss = trainer.epoch(model, &examples)?;
        let val_loss = dataset_loss(model, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {val_loss} after epoch {epoch}")));
        }
        let decision = stop.observe(-val_loss);
        if decision == StopDecision::Improved {
            best = model.params.clone();
        }
        log::info!("pretrain epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.push(EpochRecord { epoch, train_loss, val_metric: val_loss, best_so_far: decision == StopDecision::Improved });
        if decision == StopDecision::Stop {
            break;
        }
    }
    model.params = best;
    Ok(history)
}

/// Training examples for one epoch under `mode`.
pub fn build_examples(
    vocab: &Vocab,
    catalog: &LabelCatalog,
    cases: &[Case],
    mode: &TrainMode,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    cases
        .iter()
        .map(|c| {
            let order = match mode {
                TrainMode::Stl(t) => OrderSpec::single(*t)?,
                TrainMode::MtlIndependent(ts) => OrderSpec::single(*ts.choose(rng).expect("nonempty task list"))?,
                TrainMode::Dependent(o) => o.clone(),
            };
            encode_example(vocab, &build_prompt(c, catalog, &order)?, max_len)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub history: Vec<EpochRecord>,
    pub best_metric: f64,
    pub best_epoch: usize,
}

/// Fine-tunes `model` in place and leaves it at the epoch with the best
/// validation [`selection_metric`].
pub fn finetune(
    model: &mut Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    train: &[Case],
    val: &[Case],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty"));
    }
    let val = match cfg.eval_limit {
        Some(n) => &val[..n.min(val.len())],
        None => val,
    };
    let max_len = model.config.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trainer = Trainer::new(
        model,
        cfg.micro_batch,
        cfg.accumulation_steps,
        cfg.lr,
        cfg.warmup_steps,
        cfg.optimizer,
        cfg.rng_seed,
    );
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    // fixed example list for modes that do not resample per epoch
    let fixed = match cfg.mode {
        TrainMode::MtlIndependent(_) => None,
        _ => Some(build_examples(vocab, catalog, train, &cfg.mode, max_len, &mut rng)?),
    };
    for epoch in 1..=cfg.max_epochs {
        let mut examples = match &fixed {
            Some(ex) => ex.clone(),
            None => build_examples(vocab, catalog, train, &cfg.mode, max_len, &mut rng)?,
        };
        examples.shuffle(&mut rng);
        let train_loss = trainer.epoch(model, &examples)?;
        let val_metric = if val.is_empty() {
            -train_loss
        } else {
            selection_metric(&evaluate_mode(model, vocab, catalog, val, &cfg.mode, cfg.max_out_len)?.1)
        };
        let decision = stop.observe(val_metric);
        if decision == StopDecision::Improved {
            best = model.params.clone();
            best_epoch = epoch;
        }
        log::info!("{} epoch {epoch}: train loss {train_loss:.4}, val metric {val_metric:.4}", cfg.mode);
        history.push(EpochRecord { epoch, train_loss, val_metric, best_so_far: decision == StopDecision::Improved });
        if decision == StopDecision::Stop {
            break;
        }
    }
    model.params = best;
    Ok(FinetuneOutcome { history, best_metric: stop.best().unwrap_or(f64::NAN), best_epoch })
}

/// Decodes one prompt (optionally forcing a target prefix) and parses it.
pub fn predict_one(
    model: &Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    case: &Case,
    order: &OrderSpec,
    forced_prefix: &str,
    max_out_len: usize,
) -> Result<TaskPredictions> {
    let pt = build_prompt(case, catalog, order)?;
    let x = vocab.encode(&pt.input_text).ids;
    let prefix = vocab.encode(forced_prefix).ids;
    let out = model.greedy_decode_with_prefix(&x, &prefix, max_out_len)?;
    Ok(parse_decoded(&decoded_text(vocab, &out), order, catalog))
}

/// Predictions for every case under `mode` (independent modes decode one
/// prompt per task and merge the results).
pub fn predict(
    model: &Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    cases: &[Case],
    mode: &TrainMode,
    max_out_len: usize,
) -> Result<Vec<TaskPredictions>> {
    let orders: Vec<OrderSpec> = match mode {
        TrainMode::Dependent(o) => vec![o.clone()],
        _ => mode.tasks().into_iter().map(OrderSpec::single).collect::<Result<_>>()?,
    };
    cases
        .par_iter()
        .map(|c| {
            let mut p = TaskPredictions::default();
            for o in &orders {
                p.merge(predict_one(model, vocab, catalog, c, o, "", max_out_len)?);
            }
            Ok(p)
        })
        .collect()
}

pub fn gold_predictions(catalog: &LabelCatalog, cases: &[Case], tasks: &[TaskKind]) -> Result<Vec<TaskPredictions>> {
    let order = OrderSpec::new(tasks.to_vec())?;
    cases.iter().map(|c| TaskPredictions::gold(c, catalog, &order)).collect()
}

/// Predicts and scores `cases` under `mode`, recording wall-clock time.
pub fn evaluate_mode(
    model: &Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    cases: &[Case],
    mode: &TrainMode,
    max_out_len: usize,
) -> Result<(Vec<TaskPredictions>, MetricsReport)> {
    let t0 = Instant::now();
    let preds = predict(model, vocab, catalog, cases, mode, max_out_len)?;
    let golds = gold_predictions(catalog, cases, &mode.tasks())?;
    let mut report = evaluate(&preds, &golds, &mode.tasks(), catalog)?;
    report.elapsed_secs = t0.elapsed().as_secs_f64();
    Ok((preds, report))
}

/// Scores each non-first task of `order` when every predecessor span is
/// forced to its ground truth.
pub fn evaluate_teacher_forced(
    model: &Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    cases: &[Case],
    order: &OrderSpec,
    max_out_len: usize,
) -> Result<Vec<TaskReport>> {
    let mut out = Vec::new();
    for (k, &task) in order.tasks().iter().enumerate().skip(1) {
        let preds: Vec<TaskPredictions> = cases
            .par_iter()
            .map(|c| {
                let prefix = build_prompt(c, catalog, order)?.target_prefix(k);
                predict_one(model, vocab, catalog, c, order, &prefix, max_out_len)
            })
            .collect::<Result<_>>()?;
        let golds = gold_predictions(catalog, cases, &[task])?;
        let report = evaluate(&preds, &golds, &[task], catalog)?;
        out.extend(report.tasks);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub order: String,
    pub self_predicted: MetricsReport,
    /// Downstream tasks scored with ground-truth predecessor spans.
    pub teacher_forced: Vec<TaskReport>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// One line per order and task: `order,task,variant,micro_f1,macro_f1,log_distance`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("order,task,variant,micro_f1,macro_f1,log_distance,token_accuracy\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for row in &self.rows {
            let variants = row
                .self_predicted
                .tasks
                .iter()
                .map(|t| ("self", t))
                .chain(row.teacher_forced.iter().map(|t| ("teacher_forced", t)));
            for (variant, t) in variants {
                s.push_str(&format!(
                    "{},{},{variant},{},{},{},{}\n",
                    row.order,
                    t.task,
                    f(t.micro_f1),
                    f(t.macro_f1),
                    f(t.log_distance),
                    f(t.token_accuracy)
                ));
            }
        }
        s
    }
}

/// Trains one model per order from the same starting weights and reports
/// test metrics, self-predicted and with teacher-forced predecessors.
#[allow(clippy::too_many_arguments)]
pub fn run_order_sweep(
    base: &Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    train: &[Case],
    val: &[Case],
    test: &[Case],
    orders: &[OrderSpec],
    cfg: &TrainConfig,
) -> Result<SweepReport> {
    if orders.is_empty() {
        return Err(Error::Empty("order sweep needs at least one order"));
    }
    let rows = orders
        .par_iter()
        .map(|order| {
            let mut model = base.clone();
            let cfg = TrainConfig { mode: TrainMode::Dependent(order.clone()), ..cfg.clone() };
            let outcome = finetune(&mut model, vocab, catalog, train, val, &cfg)?;
            let (_, self_predicted) = evaluate_mode(&model, vocab, catalog, test, &cfg.mode, cfg.max_out_len)?;
            let teacher_forced = evaluate_teacher_forced(&model, vocab, catalog, test, order, cfg.max_out_len)?;
            Ok(SweepRow { order: order.to_string(), self_predicted, teacher_forced, best_epoch: outcome.best_epoch })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub report: MetricsReport,
    pub selection_metric: f64,
}

/// Nested training subsets: one shuffle of `train`, then the first `size`
/// cases for each size. Every run starts from `base`.
#[allow(clippy::too_many_arguments)]
pub fn run_data_size_sweep(
    base: &Model,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    train: &[Case],
    val: &[Case],
    test: &[Case],
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SizeRow>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sizes must be ascending".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > train.len() || s == 0) {
        return Err(Error::InvalidArgument(format!("size {s} outside 1..={}", train.len())));
    }
    let shuffled = nested_order(train, cfg.rng_seed);
    sizes
        .par_iter()
        .map(|&size| {
            let mut model = base.clone();
            finetune(&mut model, vocab, catalog, &shuffled[..size], val, cfg)?;
            let (_, report) = evaluate_mode(&model, vocab, catalog, test, &cfg.mode, cfg.max_out_len)?;
            Ok(SizeRow { size, selection_metric: selection_metric(&report), report })
        })
        .collect()
}

/// The case order whose prefixes form the nested data-size subsets.
pub fn nested_order(train: &[Case], seed: u64) -> Vec<Case> {
    let mut v = train.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    v
}
