//! Case records, label catalogs, the synthetic case generator, JSONL I/O,
//! coverage-preserving splits and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoded value of a life sentence, in months.
pub const LIFE_MONTHS: u32 = 350;
/// Encoded value of a death sentence, in months.
pub const DEATH_MONTHS: u32 = 400;
/// Longest fixed-term sentence (25 years).
pub const MAX_FIXED_MONTHS: u32 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PenaltyTerm {
    Fixed { months: u32 },
    Life,
    Death,
}

impl PenaltyTerm {
    pub fn months(self) -> u32 {
        encode_penalty(self)
    }

    /// Inverse of [`encode_penalty`] on its image.
    pub fn from_months(months: u32) -> Option<Self> {
        match months {
            LIFE_MONTHS => Some(PenaltyTerm::Life),
            DEATH_MONTHS => Some(PenaltyTerm::Death),
            m if m <= MAX_FIXED_MONTHS => Some(PenaltyTerm::Fixed { months: m }),
            _ => None,
        }
    }

    pub fn is_valid(self) -> bool {
        !matches!(self, PenaltyTerm::Fixed { months } if months > MAX_FIXED_MONTHS)
    }
}

/// Penalty in months: fixed terms map to themselves, life to 350, death to 400.
pub fn encode_penalty(p: PenaltyTerm) -> u32 {
    match p {
        PenaltyTerm::Fixed { months } => months,
        PenaltyTerm::Life => LIFE_MONTHS,
        PenaltyTerm::Death => DEATH_MONTHS,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub fact: String,
    pub articles: Vec<String>,
    pub charges: Vec<String>,
    pub penalty: PenaltyTerm,
    #[serde(default)]
    pub court_view: String,
}

impl Case {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.fact.is_empty() {
            return Err("empty fact".into());
        }
        if self.articles.is_empty() {
            return Err("no articles".into());
        }
        if self.charges.is_empty() {
            return Err("no charges".into());
        }
        if !self.penalty.is_valid() {
            return Err(format!("fixed term exceeds {MAX_FIXED_MONTHS} months"));
        }
        Ok(())
    }
}

pub type Corpus = Vec<Case>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleEntry {
    pub article_id: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCatalog {
    pub articles: Vec<ArticleEntry>,
    pub charges: Vec<String>,
}

impl LabelCatalog {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for a in &self.articles {
            if !seen.insert(a.article_id.as_str()) {
                return Err(Error::Config(format!("duplicate article id `{}` in catalog", a.article_id)));
            }
            if a.content.trim().is_empty() {
                return Err(Error::Config(format!("article `{}` has empty content", a.article_id)));
            }
        }
        let charges: HashSet<_> = self.charges.iter().collect();
        if charges.len() != self.charges.len() {
            return Err(Error::Config("duplicate charge id in catalog".into()));
        }
        Ok(())
    }

    pub fn article_index(&self, id: &str) -> Option<usize> {
        self.articles.iter().position(|a| a.article_id == id)
    }

    pub fn charge_index(&self, id: &str) -> Option<usize> {
        self.charges.iter().position(|c| c == id)
    }

    pub fn article_content(&self, id: &str) -> Option<&str> {
        self.articles.iter().find(|a| a.article_id == id).map(|a| a.content.as_str())
    }

    pub fn article_ids(&self) -> Vec<String> {
        self.articles.iter().map(|a| a.article_id.clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cat: LabelCatalog = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cat.validate()?;
        Ok(cat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyMode {
    /// Charges are drawn independently of the articles.
    Independent,
    /// Charge set is a pure function of the article set.
    ArticleDeterminesCharge,
    /// As above, and the penalty follows the charge rather than the article.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    English,
    Cjk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRule {
    /// Uniform integer jitter added to fixed terms, in months.
    pub noise_months: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_cases: usize,
    pub n_articles: usize,
    pub n_charges: usize,
    pub dependency_mode: DependencyMode,
    /// Probability that an article cue in the fact names a random article.
    pub fact_noise: f64,
    /// Probability that the charge cue names a random charge.
    pub family_cue_noise: f64,
    /// Probability that a case violates a second article.
    pub multi_article_prob: f64,
    pub penalty_rule: PenaltyRule,
    pub template: TemplateSet,
    pub rng_seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_cases: 1000,
            n_articles: 30,
            n_charges: 10,
            dependency_mode: DependencyMode::ArticleDeterminesCharge,
            fact_noise: 0.3,
            family_cue_noise: 0.5,
            multi_article_prob: 0.14,
            penalty_rule: PenaltyRule { noise_months: 2 },
            template: TemplateSet::English,
            rng_seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_articles == 0 || self.n_charges == 0 {
            return bad("n_articles and n_charges must be at least 1");
        }
        for (name, p) in [
            ("fact_noise", self.fact_noise),
            ("family_cue_noise", self.family_cue_noise),
            ("multi_article_prob", self.multi_article_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ru", "te", "va", "no", "si", "de", "pu", "ge", "zo", "ba", "ni", "fo", "ha", "ju", "ke", "wa", "yo",
];
const CJK_SYLLABLES: [&str; 20] = [
    "刀", "火", "舟", "金", "木", "石", "车", "网", "药", "酒", "纸", "锁", "票", "印", "船", "钱", "马", "门", "墙", "章",
];
const CHARGE_NAMES: [&str; 16] = [
    "theft", "fraud", "robbery", "assault", "bribery", "arson", "smuggling", "forgery", "extortion", "embezzlement",
    "kidnapping", "trespass", "perjury", "poaching", "piracy", "sabotage",
];
const NAMES: [&str; 8] = ["Lin", "Chen", "Wang", "Zhao", "Liu", "Sun", "Zhou", "Wu"];
const CJK_NAMES: [&str; 8] = ["林某", "陈某", "王某", "赵某", "刘某", "孙某", "周某", "吴某"];
const PLACES: [&str; 8] = ["market", "station", "harbor", "bank", "school", "farm", "hotel", "mall"];
const CJK_PLACES: [&str; 8] = ["市场", "车站", "港口", "银行", "学校", "农场", "酒店", "商场"];
const HARMS: [&str; 3] = ["minor", "serious", "grave"];
const CJK_HARMS: [&str; 3] = ["轻微", "严重", "特别严重"];
const HARM_FACTOR: [f64; 3] = [0.6, 1.0, 1.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tier {
    Months(u32),
    Life,
    Death,
}

const TIERS: [Tier; 12] = [
    Tier::Months(3),
    Tier::Months(6),
    Tier::Months(8),
    Tier::Months(10),
    Tier::Months(14),
    Tier::Months(20),
    Tier::Months(30),
    Tier::Months(42),
    Tier::Months(66),
    Tier::Months(96),
    Tier::Life,
    Tier::Death,
];

fn pseudo_word(index: usize, salt: usize, syllables: &[&str; 20]) -> String {
    // scramble so neighbouring labels do not share a prefix
    let k = (index * 7919 + salt * 104_729) % 8000;
    [k % 20, (k / 20) % 20, (k / 400) % 20].iter().map(|&s| syllables[s]).collect()
}

fn article_cue(i: usize, template: TemplateSet) -> String {
    match template {
        TemplateSet::English => pseudo_word(i, 0, &SYLLABLES),
        TemplateSet::Cjk => pseudo_word(i, 0, &CJK_SYLLABLES),
    }
}

fn charge_cue(i: usize, template: TemplateSet) -> String {
    match template {
        TemplateSet::English => pseudo_word(i, 1, &SYLLABLES),
        TemplateSet::Cjk => pseudo_word(i, 1, &CJK_SYLLABLES),
    }
}

pub fn article_id(i: usize) -> String {
    format!("art_{}", i + 1)
}

pub fn charge_id(i: usize) -> String {
    CHARGE_NAMES.get(i).map_or_else(|| format!("charge_{}", i + 1), |s| s.to_string())
}

fn build_catalog(spec: &GeneratorSpec) -> LabelCatalog {
    let articles = (0..spec.n_articles)
        .map(|i| {
            let content = match spec.template {
                TemplateSet::English => {
                    format!("Whoever uses a {} shall be punished under {}.", article_cue(i, spec.template), article_id(i))
                }
                TemplateSet::Cjk => format!("凡使用{}者，依第{}条处罚。", article_cue(i, spec.template), i + 1),
            };
            ArticleEntry { article_id: article_id(i), content }
        })
        .collect();
    LabelCatalog { articles, charges: (0..spec.n_charges).map(charge_id).collect() }
}

fn penalty_for(tiers: &[usize], harm: usize, noise: u32, rng: &mut ChaCha8Rng) -> PenaltyTerm {
    let mut ordered: Vec<Tier> = tiers.iter().map(|&t| TIERS[t % TIERS.len()]).collect();
    ordered.sort_by_key(|t| match t {
        Tier::Months(m) => *m,
        Tier::Life => LIFE_MONTHS,
        Tier::Death => DEATH_MONTHS,
    });
    let jitter = if noise > 0 { rng.random_range(-(noise as i64)..=noise as i64) } else { 0 };
    match ordered.last().copied() {
        Some(Tier::Life) => PenaltyTerm::Life,
        Some(Tier::Death) => PenaltyTerm::Death,
        Some(Tier::Months(top)) => {
            // lesser offences add a quarter of their base
            let extra: f64 = ordered[..ordered.len() - 1]
                .iter()
                .map(|t| if let Tier::Months(m) = t { *m as f64 * 0.25 } else { 0.0 })
                .sum();
            let months = ((top as f64 + extra) * HARM_FACTOR[harm]).round() as i64 + jitter;
            PenaltyTerm::Fixed { months: months.clamp(0, MAX_FIXED_MONTHS as i64) as u32 }
        }
        None => unreachable!("every case has at least one article"),
    }
}

fn court_view_text(charges: &[String], penalty: PenaltyTerm, template: TemplateSet) -> String {
    match template {
        TemplateSet::English => {
            let sentence = match penalty {
                PenaltyTerm::Fixed { months } => format!("{months} months in prison"),
                PenaltyTerm::Life => "life imprisonment".to_string(),
                PenaltyTerm::Death => "death".to_string(),
            };
            format!("The accused committed {} and is sentenced to {sentence}.", charges.join(" and "))
        }
        TemplateSet::Cjk => {
            let sentence = match penalty {
                PenaltyTerm::Fixed { months } => format!("有期徒刑{months}个月"),
                PenaltyTerm::Life => "无期徒刑".to_string(),
                PenaltyTerm::Death => "死刑".to_string(),
            };
            format!("被告人犯{}罪，判处{sentence}。", charges.join("、"))
        }
    }
}

fn generate_case(spec: &GeneratorSpec, index: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64 + 1);
    let t = spec.template;

    let mut arts = vec![rng.random_range(0..spec.n_articles)];
    if spec.n_articles > 1 && rng.random_bool(spec.multi_article_prob) {
        let mut second = rng.random_range(0..spec.n_articles - 1);
        if second >= arts[0] {
            second += 1;
        }
        arts.push(second);
    }
    arts.sort_unstable();

    let mut charges: Vec<usize> = match spec.dependency_mode {
        DependencyMode::Independent => {
            let mut c = vec![rng.random_range(0..spec.n_charges)];
            if spec.n_charges > 1 && rng.random_bool(spec.multi_article_prob / 2.0) {
                let other = rng.random_range(0..spec.n_charges);
                if other != c[0] {
                    c.push(other);
                }
            }
            c
        }
        DependencyMode::ArticleDeterminesCharge | DependencyMode::Chained => {
            arts.iter().map(|a| a % spec.n_charges).collect()
        }
    };
    charges.sort_unstable();
    charges.dedup();

    let harm = rng.random_range(0..3);
    let tiers: Vec<usize> = match spec.dependency_mode {
        DependencyMode::Chained => charges.clone(),
        _ => arts.clone(),
    };
    let penalty = penalty_for(&tiers, harm, spec.penalty_rule.noise_months, &mut rng);

    let art_cues: Vec<String> = arts
        .iter()
        .map(|&a| {
            let shown = if rng.random_bool(spec.fact_noise) { rng.random_range(0..spec.n_articles) } else { a };
            article_cue(shown, t)
        })
        .collect();
    let family = charges[rng.random_range(0..charges.len())];
    let family = if rng.random_bool(spec.family_cue_noise) { rng.random_range(0..spec.n_charges) } else { family };
    let ccue = charge_cue(family, t);

    let fact = match t {
        TemplateSet::English => format!(
            "{} used a {} at the {}, in {} fashion, causing {} harm.",
            NAMES.choose(&mut rng).expect("nonempty"),
            art_cues.join(" and a "),
            PLACES.choose(&mut rng).expect("nonempty"),
            ccue,
            HARMS[harm]
        ),
        TemplateSet::Cjk => format!(
            "{}在{}使用{}，以{}方式作案，造成{}后果。",
            CJK_NAMES.choose(&mut rng).expect("nonempty"),
            CJK_PLACES.choose(&mut rng).expect("nonempty"),
            art_cues.join("和"),
            ccue,
            CJK_HARMS[harm]
        ),
    };
    let charges: Vec<String> = charges.into_iter().map(charge_id).collect();
    let court_view = court_view_text(&charges, penalty, t);
    Case {
        id: format!("case_{index:06}"),
        fact,
        articles: arts.into_iter().map(article_id).collect(),
        charges,
        penalty,
        court_view,
    }
}

/// Generates `n_cases` templated cases and the matching label catalog.
///
/// Each case draws its randomness from its own stream of the seed, so any
/// case can be regenerated independently of the others.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec) -> Result<(Corpus, LabelCatalog)> {
    spec.validate()?;
    let catalog = build_catalog(spec);
    let corpus = (0..spec.n_cases).map(|i| generate_case(spec, i)).collect();
    Ok((corpus, catalog))
}

/// The charge set implied by an article set under article-determined
/// generation with `n_charges` charges.
pub fn implied_charges(articles: &[String], catalog: &LabelCatalog) -> Vec<String> {
    let n = catalog.charges.len();
    let mut idx: Vec<usize> =
        articles.iter().filter_map(|a| catalog.article_index(a)).map(|i| i % n).collect();
    idx.sort_unstable();
    idx.dedup();
    idx.into_iter().map(|i| catalog.charges[i].clone()).collect()
}

pub fn write_corpus<W: Write>(w: &mut W, corpus: &[Case]) -> Result<()> {
    for case in corpus {
        serde_json::to_writer(&mut *w, case)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &[Case], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

/// Parses JSONL records; `path` is only used in error messages.
pub fn read_corpus<R: BufRead>(r: R, path: &Path) -> Result<Corpus> {
    let mut corpus = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
        let case: Case = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        case.validate().map_err(parse_err)?;
        if !ids.insert(case.id.clone()) {
            return Err(Error::DuplicateId { id: case.id, line: line_no });
        }
        corpus.push(case);
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_corpus(f, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    pub warnings: Vec<String>,
}

fn labels(case: &Case) -> impl Iterator<Item = (bool, &str)> {
    case.articles.iter().map(|a| (true, a.as_str())).chain(case.charges.iter().map(|c| (false, c.as_str())))
}

/// Shuffled train/val/test split. Cases carrying a label seen only once in
/// the corpus are forced into train; afterwards any val/test case with a
/// label missing from train is swapped with a train case whose labels all
/// stay covered.
pub fn split_corpus(corpus: &[Case], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv < 0.0 || rs < 0.0 || rt + rv + rs > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!("invalid split ratios ({rt}, {rv}, {rs})")));
    }
    let n = corpus.len();
    let size = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let (n_train, n_val, n_test) = (size(rt), size(rv), size(rs));

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // 0 = train, 1 = val, 2 = test, 3 = unused
    let mut part = vec![3u8; n];
    for (k, &i) in order.iter().enumerate() {
        part[i] = if k < n_train {
            0
        } else if k < n_train + n_val {
            1
        } else if k < n_train + n_val + n_test {
            2
        } else {
            3
        };
    }

    let mut total: HashMap<(bool, &str), usize> = HashMap::new();
    for case in corpus {
        for l in labels(case) {
            *total.entry(l).or_default() += 1;
        }
    }
    let mut warnings = Vec::new();
    let mut train_count: HashMap<(bool, &str), usize> = HashMap::new();
    for (i, case) in corpus.iter().enumerate() {
        if part[i] == 0 {
            for l in labels(case) {
                *train_count.entry(l).or_default() += 1;
            }
        }
    }

    // singleton labels go to train unconditionally
    for (i, case) in corpus.iter().enumerate() {
        if part[i] != 0 && labels(case).any(|l| total[&l] == 1) {
            let l = labels(case).find(|l| total[l] == 1).expect("checked");
            warnings.push(format!("label `{}` occurs in a single case ({}); forced into train", l.1, case.id));
            part[i] = 0;
            for l in labels(case) {
                *train_count.entry(l).or_default() += 1;
            }
        }
    }

    let mut progress = true;
    while progress {
        progress = false;
        for i in 0..n {
            if part[i] == 0 || part[i] == 3 {
                continue;
            }
            let missing = labels(&corpus[i]).any(|l| train_count.get(&l).copied().unwrap_or(0) == 0);
            if !missing {
                continue;
            }
            // a train case that can leave without uncovering any label
            let donor = order.iter().rev().copied().find(|&j| {
                part[j] == 0
                    && labels(&corpus[j]).all(|l| {
                        let here = labels(&corpus[i]).filter(|m| *m == l).count();
                        train_count[&l] + here > 1
                    })
            });
            for l in labels(&corpus[i]) {
                *train_count.entry(l).or_default() += 1;
            }
            match donor {
                Some(j) => {
                    for l in labels(&corpus[j]) {
                        *train_count.get_mut(&l).expect("train label") -= 1;
                    }
                    part[j] = part[i];
                }
                None => warnings.push(format!("no swap partner for {}; moved into train", corpus[i].id)),
            }
            part[i] = 0;
            progress = true;
        }
    }

    let pick = |p: u8| -> Corpus {
        order.iter().filter(|&&i| part[i] == p).map(|&i| corpus[i].clone()).collect()
    };
    Ok(Split { train: pick(0), val: pick(1), test: pick(2), warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub case_count: usize,
    pub mean_articles_per_case: f64,
    pub mean_charges_per_case: f64,
    pub mean_fact_words: f64,
    pub article_histogram: BTreeMap<String, usize>,
    pub charge_histogram: BTreeMap<String, usize>,
    pub penalty_histogram: BTreeMap<u32, usize>,
}

pub fn corpus_stats(corpus: &[Case]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus has no cases"));
    }
    let n = corpus.len() as f64;
    let mut article_histogram = BTreeMap::new();
    let mut charge_histogram = BTreeMap::new();
    let mut penalty_histogram = BTreeMap::new();
    let (mut arts, mut chs, mut words) = (0usize, 0usize, 0usize);
    for c in corpus {
        arts += c.articles.len();
        chs += c.charges.len();
        words += c.fact.split_whitespace().count();
        for a in &c.articles {
            *article_histogram.entry(a.clone()).or_default() += 1;
        }
        for ch in &c.charges {
            *charge_histogram.entry(ch.clone()).or_default() += 1;
        }
        *penalty_histogram.entry(c.penalty.months()).or_default() += 1;
    }
    Ok(CorpusStats {
        case_count: corpus.len(),
        mean_articles_per_case: arts as f64 / n,
        mean_charges_per_case: chs as f64 / n,
        mean_fact_words: words as f64 / n,
        article_histogram,
        charge_histogram,
        penalty_histogram,
    })
}

/// Every article and charge label occurring in `corpus`.
pub fn label_sets(corpus: &[Case]) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut a = BTreeSet::new();
    let mut c = BTreeSet::new();
    for case in corpus {
        a.extend(case.articles.iter().cloned());
        c.extend(case.charges.iter().cloned());
    }
    (a, c)
}
