//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and a
//! failure count. With `DEPJUDGE_ACCEPT_STRICT` set, any failure also makes the
//! exit status non-zero. `DEPJUDGE_ACCEPT=1,3,7` runs a subset.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use depjudge::corpus::{
    article_id, charge_id, generate_synthetic_corpus, split_corpus, ArticleEntry, Case, GeneratorSpec, LabelCatalog,
    PenaltyTerm, DEATH_MONTHS, LIFE_MONTHS,
};
use depjudge::metrics::{log_distance, macro_f1, micro_f1, pmi, pmi_matrix};
use depjudge::model::{grad_check, ModelConfig, Transformer};
use depjudge::optim::{AdamW, AdamWConfig};
use depjudge::prompting::{
    build_prompt, decoded_text, parse_decoded, span_corrupt, vocab_texts, OrderSpec, TaskKind, TaskPredictions,
};
use depjudge::textmatch::{build_matching_dataset, encode_match_pair, predict_articles_by_matching};
use depjudge::tokenizer::{Vocab, VocabConfig, DELIM};
use depjudge::training::{
    batch_gradient, build_examples, evaluate_mode, evaluate_teacher_forced, finetune, fit_examples, nested_order,
    Example, TrainConfig, TrainMode,
};
use depjudge::{Model, Model64, Rng};
use rand::seq::IndexedRandom;
use rand::{Rng as _, SeedableRng};

type Outcome = (bool, String);

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn vocab_for(corpus: &[Case], catalog: &LabelCatalog) -> Vocab {
    let texts = vocab_texts(corpus, catalog);
    Vocab::build(texts.iter().map(String::as_str), VocabConfig::default())
}

fn random_text(r: &mut Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz    ,.";
    (0..len).map(|_| *ALPHABET.choose(r).unwrap() as char).collect()
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let (mut masked, mut spans, mut total) = (0usize, 0usize, 0usize);
    for _ in 0..1000 {
        let text = random_text(&mut r, 200);
        let pt = span_corrupt(&text, 0.15, 3.0, &mut r).expect("valid corruption");
        let seg = pt.segments();
        masked += seg.spans.iter().map(|(_, s)| s.chars().count()).sum::<usize>();
        spans += seg.spans.len();
        total += 200;
    }
    let frac = masked as f64 / total as f64;
    let mean = masked as f64 / spans as f64;
    let ok = (0.14..=0.16).contains(&frac) && (2.7..=3.3).contains(&mean);
    (ok, format!("masked fraction {frac:.4}, mean span {mean:.3}"))
}

fn catalog(n_articles: usize, n_charges: usize) -> LabelCatalog {
    LabelCatalog {
        articles: (0..n_articles)
            .map(|i| ArticleEntry { article_id: article_id(i), content: format!("Whoever does act {i} is punished.") })
            .collect(),
        charges: (0..n_charges).map(charge_id).collect(),
    }
}

fn random_case(r: &mut Rng, cat: &LabelCatalog, i: usize) -> Case {
    let pick = |r: &mut Rng, n: usize, max: usize| {
        let k = r.random_range(1..=max);
        (0..k).map(|_| r.random_range(0..n)).collect::<BTreeSet<_>>()
    };
    let penalty = match r.random_range(0..10) {
        0 => PenaltyTerm::Life,
        1 => PenaltyTerm::Death,
        _ => PenaltyTerm::Fixed { months: r.random_range(0..=300) },
    };
    Case {
        id: format!("c{i}"),
        fact: format!("Fact body {}", random_text(r, 40)),
        articles: pick(r, cat.articles.len(), 3).into_iter().map(|a| cat.articles[a].article_id.clone()).collect(),
        charges: pick(r, cat.charges.len(), 2).into_iter().map(|c| cat.charges[c].clone()).collect(),
        penalty,
        court_view: random_text(r, 30),
    }
}

fn random_order(r: &mut Rng) -> OrderSpec {
    loop {
        let mut tasks: Vec<TaskKind> = TaskKind::ALL.iter().copied().filter(|_| r.random_bool(0.6)).collect();
        rand::seq::SliceRandom::shuffle(&mut tasks[..], r);
        if let Ok(o) = OrderSpec::new(tasks) {
            return o;
        }
    }
}

/// The unmasked document, written field by field in document order.
fn expected_document(case: &Case, cat: &LabelCatalog, order: &OrderSpec) -> String {
    let arts: Vec<&str> =
        cat.articles.iter().filter(|a| case.articles.contains(&a.article_id)).map(|a| a.article_id.as_str()).collect();
    let charges: Vec<&str> = cat.charges.iter().filter(|c| case.charges.contains(c)).map(String::as_str).collect();
    let mut doc = format!("Fact: {}", case.fact);
    if order.contains(TaskKind::CourtView) {
        doc += &format!(" View: {}", case.court_view);
    }
    if order.contains(TaskKind::Article) {
        doc += &format!(" Articles: {}.", arts.join(DELIM));
    }
    if order.contains(TaskKind::ArticleContent) {
        let c: Vec<&str> = arts.iter().map(|a| cat.article_content(a).unwrap()).collect();
        doc += &format!(" Content: {}", c.join(DELIM));
    }
    if order.contains(TaskKind::Charge) {
        doc += &format!(" Charges: {}.", charges.join(DELIM));
    }
    if order.contains(TaskKind::Penalty) {
        let p = match case.penalty {
            PenaltyTerm::Fixed { months } => months.to_string(),
            PenaltyTerm::Life => "life".into(),
            PenaltyTerm::Death => "death".into(),
        };
        doc += &format!(" Penalty: {p} months.");
    }
    doc
}

fn criterion_2() -> Outcome {
    let cat = catalog(40, 12);
    let mut r = rng(2);
    let (mut recon, mut inverse) = (0, 0);
    for i in 0..10_000 {
        let case = random_case(&mut r, &cat, i);
        let order = random_order(&mut r);
        let pt = build_prompt(&case, &cat, &order).unwrap();
        recon += usize::from(pt.reconstruct().ok() == Some(expected_document(&case, &cat, &order)));
    }
    let full: OrderSpec = "ACP".parse().unwrap();
    for i in 0..10_000 {
        let case = random_case(&mut r, &cat, i);
        let pt = build_prompt(&case, &cat, &full).unwrap();
        let parsed = parse_decoded(&pt.target_text, &full, &cat);
        let mut want_a = case.articles.clone();
        want_a.sort_by_key(|a| cat.article_index(a));
        let mut want_c = case.charges.clone();
        want_c.sort_by_key(|c| cat.charge_index(c));
        let ok = !parsed.malformed
            && parsed.articles == Some(want_a)
            && parsed.charges == Some(want_c)
            && parsed.penalty_months == Some(case.penalty.months());
        inverse += usize::from(ok);
    }
    (recon == 10_000 && inverse == 10_000, format!("reconstruction {recon}/10000, parse inverse {inverse}/10000"))
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig::tiny(120);
    let model: Model64 = Transformer::new(cfg).unwrap();
    let batch = vec![
        (vec![110u32, 111, 112, 5, 113, 20], vec![5u32, 114, 115, 1]),
        (vec![116u32, 117, 4, 118, 119], vec![4u32, 104, 119, 105, 1]),
    ];
    let rep = grad_check(&model, &batch, 1e-3, 300, 3, true, |_| true).unwrap();
    let ok = rep.checked >= 200 && rep.max_relative_error < 1e-6 && rep.all_finite;
    (ok, format!("max relative error {:.2e} over {} parameters (worst {})", rep.max_relative_error, rep.checked, rep.worst_param))
}

fn criterion_4() -> Outcome {
    let spec = GeneratorSpec { n_cases: 8, rng_seed: 4, ..Default::default() };
    let (corpus, cat) = generate_synthetic_corpus(&spec).unwrap();
    let vocab = vocab_for(&corpus, &cat);
    let mode: TrainMode = "dep:ACP".parse().unwrap();
    let ex: Vec<Example> = build_examples(&vocab, &cat, &corpus, &mode, 256, &mut rng(4)).unwrap();
    let mcfg = ModelConfig { d_model: 32, n_heads: 2, n_enc_layers: 1, n_dec_layers: 1, d_ff: 64, max_len: 256, ..ModelConfig::tiny(vocab.len()) };
    let mut model: Model = Transformer::new(mcfg).unwrap();
    let mut opt = AdamW::new(&model.params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let (mut steps, mut loss) = (0, f64::INFINITY);
    while steps < 2000 {
        let (grads, l) = batch_gradient(&model, &ex, 8, 0, steps as u64).unwrap();
        loss = l;
        if loss < 0.05 {
            break;
        }
        opt.step(&mut model.params, &grads, 1e-2);
        steps += 1;
    }
    let exact = ex.iter().filter(|e| model.greedy_decode(&e.x, 96).map(|d| d.ids == e.y[..e.y.len() - 1]).unwrap_or(false)).count();
    (loss < 0.05 && exact == 8, format!("loss {loss:.4} after {steps} steps, {exact}/8 targets reproduced"))
}

fn corpus_split(n: usize, fact_noise: f64, seed: u64) -> (Vec<Case>, Vec<Case>, Vec<Case>, LabelCatalog, Vocab) {
    let spec = GeneratorSpec { n_cases: n, fact_noise, rng_seed: seed, ..Default::default() };
    let (corpus, cat) = generate_synthetic_corpus(&spec).unwrap();
    let vocab = vocab_for(&corpus, &cat);
    let s = split_corpus(&corpus, (0.8, 0.1, 0.1), seed).unwrap();
    (s.train, s.val, s.test, cat, vocab)
}

fn experiment_model(vocab: &Vocab, seed: u64) -> Model {
    let cfg = ModelConfig { max_len: 256, rng_seed: seed, ..ModelConfig::small(vocab.len()) };
    Transformer::new(cfg).unwrap()
}

/// Budget shared by every fine-tuning comparison.
fn experiment_config(mode: &str) -> TrainConfig {
    TrainConfig {
        micro_batch: 16,
        accumulation_steps: 2,
        max_epochs: EXPERIMENT_EPOCHS,
        patience: 2,
        lr: 2e-3,
        mode: mode.parse().unwrap(),
        max_out_len: 64,
        eval_limit: Some(300),
        ..Default::default()
    }
}

const EXPERIMENT_EPOCHS: usize = 10;

fn charge_f1(report: &depjudge::metrics::MetricsReport) -> f64 {
    report.task(TaskKind::Charge).and_then(|t| t.micro_f1).unwrap_or(0.0)
}

fn article_f1(report: &depjudge::metrics::MetricsReport) -> f64 {
    report.task(TaskKind::Article).and_then(|t| t.micro_f1).unwrap_or(0.0)
}

fn criterion_5() -> Outcome {
    let (train, val, test, cat, vocab) = corpus_split(5000, 0.3, 11);
    let base = experiment_model(&vocab, 11);
    let run = |mode: &str| {
        let mut m = base.clone();
        let cfg = experiment_config(mode);
        finetune(&mut m, &vocab, &cat, &train, &val, &cfg).unwrap();
        let (_, rep) = evaluate_mode(&m, &vocab, &cat, &test, &cfg.mode, cfg.max_out_len).unwrap();
        (m, rep)
    };
    let (dep, dep_rep) = run("dep:AC");
    let (_, mtl_rep) = run("mtl:AC");
    let order: OrderSpec = "AC".parse().unwrap();
    let tf = evaluate_teacher_forced(&dep, &vocab, &cat, &test, &order, 64).unwrap();
    let tf_charge = tf[0].micro_f1.unwrap_or(0.0);
    let (d, m) = (charge_f1(&dep_rep), charge_f1(&mtl_rep));
    let ok = d - m >= 0.05 && tf_charge >= d;
    (ok, format!("charge micro-F1 dependent {d:.4} vs independent {m:.4} (gap {:.4}); teacher-forced {tf_charge:.4}", d - m))
}

fn criterion_6() -> Outcome {
    let (train, val, test, cat, vocab) = corpus_split(5000, 0.7, 12);
    let base = experiment_model(&vocab, 12);
    let run = |mode: &str| {
        let mut m = base.clone();
        let cfg = experiment_config(mode);
        finetune(&mut m, &vocab, &cat, &train, &val, &cfg).unwrap();
        evaluate_mode(&m, &vocab, &cat, &test, &cfg.mode, cfg.max_out_len).unwrap().1
    };
    let ac = run("dep:AC");
    let ca = run("dep:CA");
    let art = article_f1(&ac);
    let ok = art < 0.6 && charge_f1(&ca) > charge_f1(&ac);
    (ok, format!("article micro-F1 {art:.4}; charge micro-F1 C->A {:.4} vs A->C {:.4}", charge_f1(&ca), charge_f1(&ac)))
}

fn brute_f1(preds: &[Vec<u8>], golds: &[Vec<u8>], labels: u8) -> (f64, f64) {
    let mut counts: HashMap<u8, (f64, f64, f64)> = HashMap::new();
    for (p, g) in preds.iter().zip(golds) {
        for l in 0..labels {
            let e = counts.entry(l).or_default();
            match (p.contains(&l), g.contains(&l)) {
                (true, true) => e.0 += 1.0,
                (true, false) => e.1 += 1.0,
                (false, true) => e.2 += 1.0,
                _ => {}
            }
        }
    }
    let f1 = |(tp, fp, fnn): (f64, f64, f64)| if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
    let sum = counts.values().fold((0.0, 0.0, 0.0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let macro_ = (0..labels).map(|l| f1(counts[&l])).sum::<f64>() / labels as f64;
    (f1(sum), macro_)
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let mut exact = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..30);
        let labels = r.random_range(1..8u8);
        let set = |r: &mut Rng, min: usize| {
            let k = r.random_range(min..=3);
            (0..k).map(|_| r.random_range(0..labels)).collect::<BTreeSet<u8>>().into_iter().collect::<Vec<_>>()
        };
        let preds: Vec<Vec<u8>> = (0..n).map(|_| set(&mut r, 0)).collect();
        let golds: Vec<Vec<u8>> = (0..n).map(|_| set(&mut r, 1)).collect();
        let (mi, ma) = brute_f1(&preds, &golds, labels);
        let all: Vec<u8> = (0..labels).collect();
        exact += usize::from(micro_f1(&preds, &golds).unwrap() == mi && macro_f1(&preds, &golds, &all).unwrap() == ma);
    }
    let d = log_distance(350.0, 36.0).unwrap();
    let ok = exact == 1000 && (d - 2.2497).abs() <= 1e-3 && LIFE_MONTHS == 350 && DEATH_MONTHS == 400;
    (ok, format!("{exact}/1000 F1 instances exact, log_distance(350, 36) = {d:.4}, life {LIFE_MONTHS}, death {DEATH_MONTHS}"))
}

fn criterion_8() -> Outcome {
    let hand = pmi(1, 1, 1, 2);
    let xs: Vec<Vec<String>> = vec![vec!["x".into()], vec![]];
    let ys: Vec<Vec<String>> = vec![vec!["y".into()], vec![]];
    let m = pmi_matrix(&xs, &ys, 1, 1).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let hand_ok = (hand - ln2).abs() < 1e-9 && (m.values[0][0] - ln2).abs() < 1e-9;

    let mut r = rng(8);
    let n = 50_000;
    let xs: Vec<Vec<String>> = (0..n).map(|_| vec![format!("a{}", r.random_range(0..3))]).collect();
    let ys: Vec<Vec<String>> = (0..n).map(|_| vec![format!("b{}", r.random_range(0..3))]).collect();
    let m = pmi_matrix(&xs, &ys, 10, 10).unwrap();
    let worst = m.values.iter().flatten().fold(0f64, |w, v| w.max(v.abs()));
    (hand_ok && worst < 0.05, format!("hand case {hand:.12}, independent max |PMI| {worst:.4} over {} cells", m.values.len() * m.col_labels.len()))
}

fn criterion_9() -> Outcome {
    let spec = GeneratorSpec { n_cases: 600, n_articles: 50, rng_seed: 9, ..Default::default() };
    let (corpus, cat) = generate_synthetic_corpus(&spec).unwrap();
    let vocab = vocab_for(&corpus, &cat);
    let (train, test) = corpus.split_at(560);
    let cases = &test[..20];

    let mut gen = experiment_model(&vocab, 9);
    let gen_cfg = TrainConfig { max_epochs: 3, patience: 1, ..experiment_config("stl:A") };
    finetune(&mut gen, &vocab, &cat, train, &[], &gen_cfg).unwrap();
    let t0 = Instant::now();
    let (_, gen_f1) = evaluate_mode_sequential(&gen, &vocab, &cat, cases);
    let gen_latency = t0.elapsed().as_secs_f64() / cases.len() as f64;

    let mut matcher = experiment_model(&vocab, 9);
    let pairs = build_matching_dataset(&train[..100], &cat, 31, &mut rng(9)).unwrap();
    let ex: Vec<Example> = pairs.iter().map(|p| encode_match_pair(&vocab, p, 256).unwrap()).collect();
    fit_examples(&mut matcher, &ex, &experiment_config("stl:A"), 1).unwrap();
    let mut match_secs = 0.0;
    for c in cases {
        match_secs += predict_articles_by_matching(&matcher, &vocab, &c.fact, &cat, 0.7).unwrap().elapsed_secs;
    }
    let match_latency = match_secs / cases.len() as f64;
    let ratio = match_latency / gen_latency;
    (
        ratio > 10.0,
        format!(
            "catalog {}: matching {:.4} s/case, generative {:.4} s/case, ratio {ratio:.1} (generative article F1 {gen_f1:.3})",
            cat.articles.len(),
            match_latency,
            gen_latency
        ),
    )
}

/// Article decoding one case at a time, mirroring the sequential matching scan.
fn evaluate_mode_sequential(model: &Model, vocab: &Vocab, cat: &LabelCatalog, cases: &[Case]) -> (Vec<TaskPredictions>, f64) {
    let order = OrderSpec::single(TaskKind::Article).unwrap();
    let preds: Vec<TaskPredictions> = cases
        .iter()
        .map(|c| {
            let x = vocab.encode(&build_prompt(c, cat, &order).unwrap().input_text).ids;
            parse_decoded(&decoded_text(vocab, &model.greedy_decode(&x, 64).unwrap()), &order, cat)
        })
        .collect();
    let p: Vec<Vec<String>> = preds.iter().map(|p| p.articles.clone().unwrap_or_default()).collect();
    let g: Vec<Vec<String>> = cases.iter().map(|c| c.articles.clone()).collect();
    let f1 = micro_f1(&p, &g).unwrap();
    (preds, f1)
}

fn criterion_10() -> Outcome {
    let (train, val, test, cat, vocab) = corpus_split(6250, 0.3, 10);
    let order = nested_order(&train, 10);
    let base = experiment_model(&vocab, 10);
    let mut scores = Vec::new();
    for size in [100usize, 1000, 5000] {
        let mut m = base.clone();
        let cfg = experiment_config("dep:ACP");
        finetune(&mut m, &vocab, &cat, &order[..size], &val, &cfg).unwrap();
        let (_, rep) = evaluate_mode(&m, &vocab, &cat, &test, &cfg.mode, cfg.max_out_len).unwrap();
        scores.push(rep.mean_score());
    }
    let drops: Vec<f64> = scores.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    let ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.02);
    (ok, format!("selection metric at 100/1000/5000 = {:.4}/{:.4}/{:.4}", scores[0], scores[1], scores[2]))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let secs = Duration::from_secs;
    let all = [
        Criterion { id: 1, name: "span-corruption statistics", limit: secs(10), run: criterion_1 },
        Criterion { id: 2, name: "reconstruction and parse inverse", limit: secs(30), run: criterion_2 },
        Criterion { id: 3, name: "gradient check", limit: secs(120), run: criterion_3 },
        Criterion { id: 4, name: "overfit sanity", limit: secs(300), run: criterion_4 },
        Criterion { id: 5, name: "dependency direction", limit: secs(3600), run: criterion_5 },
        Criterion { id: 6, name: "error-propagation direction", limit: secs(3600), run: criterion_6 },
        Criterion { id: 7, name: "metric oracles", limit: secs(10), run: criterion_7 },
        Criterion { id: 8, name: "PMI correctness", limit: secs(30), run: criterion_8 },
        Criterion { id: 9, name: "matching vs generative speed", limit: secs(600), run: criterion_9 },
        Criterion { id: 10, name: "data-size trend", limit: secs(5400), run: criterion_10 },
    ];
    let selected: Option<BTreeSet<usize>> = std::env::var("DEPJUDGE_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in all.iter().filter(|c| selected.as_ref().is_none_or(|s| s.contains(&c.id))) {
        let t0 = Instant::now();
        let (ok, detail) = (c.run)();
        let took = t0.elapsed();
        let in_time = took <= c.limit;
        let pass = ok && in_time;
        failed += usize::from(!pass);
        let timing = if in_time { String::new() } else { format!(" [over the {}s limit]", c.limit.as_secs()) };
        println!(
            "criterion {:>2} {:<34} {} ({:.1}s) {detail}{timing}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        // the direction-of-effect runs are reported, not gated, unless asked
        if std::env::var_os("DEPJUDGE_ACCEPT_STRICT").is_some() {
            std::process::exit(1);
        }
    } else {
        println!("all criteria passed");
    }
}
