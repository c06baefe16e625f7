//! Masked prompts, ordered targets, decoded-sequence parsing and span
//! corruption.
//!
//! A case is rendered as a short judgment document: the fact followed by one
//! field per requested task. Each task field is replaced in the input by a
//! sentinel numbered by its position in the document; the target lists
//! `sentinel, span` pairs in the decode order and ends with `⟨end⟩`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rand::Rng;

use crate::corpus::{Case, LabelCatalog, PenaltyTerm, DEATH_MONTHS, LIFE_MONTHS};
use crate::error::{Error, Result};
use crate::tokenizer::{match_reserved, sentinel, sentinel_index, DELIM, END, END_ID, FIRST_SENTINEL_ID, NUM_SENTINELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Article,
    Charge,
    Penalty,
    CourtView,
    ArticleContent,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::Article, TaskKind::Charge, TaskKind::Penalty, TaskKind::CourtView, TaskKind::ArticleContent];

    pub fn code(self) -> &'static str {
        match self {
            TaskKind::Article => "A",
            TaskKind::Charge => "C",
            TaskKind::Penalty => "P",
            TaskKind::CourtView => "V",
            TaskKind::ArticleContent => "A'",
        }
    }

    pub fn is_auxiliary(self) -> bool {
        matches!(self, TaskKind::CourtView | TaskKind::ArticleContent)
    }

    pub fn is_generative(self) -> bool {
        self.is_auxiliary()
    }

    /// Rank of the task's field inside the rendered document.
    fn document_rank(self) -> usize {
        match self {
            TaskKind::CourtView => 0,
            TaskKind::Article => 1,
            TaskKind::ArticleContent => 2,
            TaskKind::Charge => 3,
            TaskKind::Penalty => 4,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Tasks in decode order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderSpec {
    tasks: Vec<TaskKind>,
}

impl OrderSpec {
    pub fn new(tasks: Vec<TaskKind>) -> Result<Self> {
        if tasks.is_empty() || tasks.len() > TaskKind::ALL.len() {
            return Err(Error::InvalidArgument(format!("an order needs 1 to 5 tasks, got {}", tasks.len())));
        }
        if tasks.iter().collect::<HashSet<_>>().len() != tasks.len() {
            return Err(Error::InvalidArgument("an order may not repeat a task".into()));
        }
        if tasks.contains(&TaskKind::ArticleContent) && !tasks.contains(&TaskKind::Article) {
            return Err(Error::InvalidArgument("article content requires the article task".into()));
        }
        Ok(Self { tasks })
    }

    pub fn single(task: TaskKind) -> Result<Self> {
        Self::new(vec![task])
    }

    pub fn tasks(&self) -> &[TaskKind] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn position(&self, task: TaskKind) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    pub fn contains(&self, task: TaskKind) -> bool {
        self.tasks.contains(&task)
    }

    /// Sentinel index of each task in decode order: tasks are numbered by
    /// where their field sits in the document, not by decode position.
    pub fn sentinels(&self) -> Vec<usize> {
        let mut by_doc: Vec<TaskKind> = self.tasks.clone();
        by_doc.sort_by_key(|t| t.document_rank());
        self.tasks.iter().map(|t| by_doc.iter().position(|d| d == t).expect("present")).collect()
    }
}

impl fmt::Display for OrderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tasks {
            f.write_str(t.code())?;
        }
        Ok(())
    }
}

impl FromStr for OrderSpec {
    type Err = Error;

    /// Parses compact codes such as `ACP` or `CA'AP` (separators `,`, `>`
    /// and spaces are ignored).
    fn from_str(s: &str) -> Result<Self> {
        let mut tasks = Vec::new();
        let mut chars = s.chars().filter(|c| !matches!(c, ',' | '>' | ' ' | '-')).peekable();
        while let Some(c) = chars.next() {
            let task = match c.to_ascii_uppercase() {
                'A' if chars.peek() == Some(&'\'') => {
                    chars.next();
                    TaskKind::ArticleContent
                }
                'A' => TaskKind::Article,
                'C' => TaskKind::Charge,
                'P' => TaskKind::Penalty,
                'V' => TaskKind::CourtView,
                other => return Err(Error::InvalidArgument(format!("unknown task code `{other}` in `{s}`"))),
            };
            tasks.push(task);
        }
        Self::new(tasks)
    }
}

/// What a sentinel stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Task(TaskKind),
    Corrupted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTarget {
    pub input_text: String,
    pub target_text: String,
    /// `(sentinel index, kind)` in target order.
    pub sentinel_map: Vec<(usize, SpanKind)>,
}

/// A target split at its sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segments {
    /// Text before the first sentinel.
    pub leading: String,
    pub spans: Vec<(usize, String)>,
    /// Whether the text ended with `⟨end⟩` (anything after it is dropped).
    pub ended: bool,
    /// Reserved tokens other than sentinels and end found inside spans.
    pub stray_reserved: usize,
}

/// Splits `text` at sentinel literals.
pub fn split_segments(text: &str) -> Segments {
    let mut seg = Segments::default();
    let mut rest = text;
    let mut current: Option<(usize, String)> = None;
    while let Some(c) = rest.chars().next() {
        if let Some((id, len)) = match_reserved(rest) {
            if let Some(n) = sentinel_index(id) {
                if let Some(done) = current.take() {
                    seg.spans.push(done);
                }
                current = Some((n, String::new()));
                rest = &rest[len..];
                continue;
            }
            if id == END_ID {
                seg.ended = true;
                break;
            }
            if id != crate::tokenizer::DELIM_ID {
                seg.stray_reserved += 1;
            }
        }
        match current.as_mut() {
            Some((_, s)) => s.push(c),
            None => seg.leading.push(c),
        }
        rest = &rest[c.len_utf8()..];
    }
    if let Some(done) = current {
        seg.spans.push(done);
    }
    seg
}

impl PromptTarget {
    pub fn segments(&self) -> Segments {
        split_segments(&self.target_text)
    }

    /// Substitutes every target span back into its sentinel.
    pub fn reconstruct(&self) -> Result<String> {
        let seg = self.segments();
        let mut spans: Vec<Option<&str>> = vec![None; NUM_SENTINELS];
        for (n, s) in &seg.spans {
            spans[*n] = Some(s);
        }
        let mut out = String::with_capacity(self.input_text.len() + self.target_text.len());
        let mut rest = self.input_text.as_str();
        while let Some(c) = rest.chars().next() {
            if let Some((id, len)) = match_reserved(rest) {
                if let Some(n) = sentinel_index(id) {
                    let span = spans[n]
                        .ok_or_else(|| Error::InvalidArgument(format!("sentinel {n} has no span in the target")))?;
                    out.push_str(span);
                    rest = &rest[len..];
                    continue;
                }
            }
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    /// The first `k` `sentinel, span` pairs of the target, as text.
    pub fn target_prefix(&self, k: usize) -> String {
        self.segments().spans.iter().take(k).map(|(n, s)| format!("{}{s}", sentinel(*n))).collect()
    }
}

/// Field captions of the rendered document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub fact: (String, String),
    pub court_view: (String, String),
    pub article: (String, String),
    pub article_content: (String, String),
    pub charge: (String, String),
    pub penalty: (String, String),
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let p = |a: &str, b: &str| (a.to_string(), b.to_string());
        Self {
            fact: p("Fact: ", ""),
            court_view: p(" View: ", ""),
            article: p(" Articles: ", "."),
            article_content: p(" Content: ", ""),
            charge: p(" Charges: ", "."),
            penalty: p(" Penalty: ", " months."),
        }
    }
}

impl PromptTemplate {
    fn field(&self, task: TaskKind) -> &(String, String) {
        match task {
            TaskKind::Article => &self.article,
            TaskKind::Charge => &self.charge,
            TaskKind::Penalty => &self.penalty,
            TaskKind::CourtView => &self.court_view,
            TaskKind::ArticleContent => &self.article_content,
        }
    }
}

fn sorted_labels(labels: &[String], index: impl Fn(&str) -> Option<usize>) -> Result<Vec<String>> {
    let mut idx = Vec::with_capacity(labels.len());
    for l in labels {
        idx.push((index(l).ok_or_else(|| Error::UnknownLabel(l.clone()))?, l));
    }
    idx.sort_by_key(|(i, _)| *i);
    idx.dedup_by_key(|(i, _)| *i);
    Ok(idx.into_iter().map(|(_, l)| l.clone()).collect())
}

pub fn penalty_surface(p: PenaltyTerm) -> String {
    match p {
        PenaltyTerm::Fixed { months } => months.to_string(),
        PenaltyTerm::Life => "life".to_string(),
        PenaltyTerm::Death => "death".to_string(),
    }
}

/// Surface form of one task's span for `case`.
pub fn task_surface(case: &Case, catalog: &LabelCatalog, task: TaskKind) -> Result<String> {
    Ok(match task {
        TaskKind::Article => sorted_labels(&case.articles, |a| catalog.article_index(a))?.join(DELIM),
        TaskKind::Charge => sorted_labels(&case.charges, |c| catalog.charge_index(c))?.join(DELIM),
        TaskKind::Penalty => penalty_surface(case.penalty),
        TaskKind::CourtView => case.court_view.clone(),
        TaskKind::ArticleContent => {
            let ids = sorted_labels(&case.articles, |a| catalog.article_index(a))?;
            ids.iter()
                .map(|a| catalog.article_content(a).map(str::to_string).ok_or_else(|| Error::UnknownLabel(a.clone())))
                .collect::<Result<Vec<_>>>()?
                .join(DELIM)
        }
    })
}

/// The unmasked document for `case` with a field for each task in `order`.
pub fn render_document(case: &Case, catalog: &LabelCatalog, order: &OrderSpec, template: &PromptTemplate) -> Result<String> {
    Ok(build_prompt_with(case, catalog, order, template)?.reconstruct().expect("prompt spans are complete"))
}

pub fn build_prompt(case: &Case, catalog: &LabelCatalog, order: &OrderSpec) -> Result<PromptTarget> {
    build_prompt_with(case, catalog, order, &PromptTemplate::default())
}

pub fn build_prompt_with(
    case: &Case,
    catalog: &LabelCatalog,
    order: &OrderSpec,
    template: &PromptTemplate,
) -> Result<PromptTarget> {
    let sentinels = order.sentinels();
    let mut by_doc: Vec<(usize, TaskKind)> = sentinels.iter().copied().zip(order.tasks().iter().copied()).collect();
    by_doc.sort_by_key(|(n, _)| *n);

    let mut input = format!("{}{}{}", template.fact.0, case.fact, template.fact.1);
    for (n, task) in &by_doc {
        let (pre, post) = template.field(*task);
        input.push_str(pre);
        input.push_str(&sentinel(*n));
        input.push_str(post);
    }
    let mut target = String::new();
    let mut sentinel_map = Vec::with_capacity(order.len());
    for (&task, &n) in order.tasks().iter().zip(&sentinels) {
        target.push_str(&sentinel(n));
        target.push_str(&task_surface(case, catalog, task)?);
        sentinel_map.push((n, SpanKind::Task(task)));
    }
    target.push_str(END);
    Ok(PromptTarget { input_text: input, target_text: target, sentinel_map })
}

/// Labels recovered from a decoded sequence; a field is `Some` iff its task
/// was requested and its span was found.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskPredictions {
    pub articles: Option<Vec<String>>,
    pub charges: Option<Vec<String>>,
    pub penalty_months: Option<u32>,
    pub court_view: Option<String>,
    pub article_content: Option<String>,
    pub malformed: bool,
}

impl TaskPredictions {
    /// Gold labels of `case` for the tasks in `order`.
    pub fn gold(case: &Case, catalog: &LabelCatalog, order: &OrderSpec) -> Result<Self> {
        let mut p = TaskPredictions::default();
        for &t in order.tasks() {
            p.set_span(t, &task_surface(case, catalog, t)?, catalog);
        }
        Ok(p)
    }

    pub fn has(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Article => self.articles.is_some(),
            TaskKind::Charge => self.charges.is_some(),
            TaskKind::Penalty => self.penalty_months.is_some(),
            TaskKind::CourtView => self.court_view.is_some(),
            TaskKind::ArticleContent => self.article_content.is_some(),
        }
    }

    /// Copies the fields of `other` that are present into `self`.
    pub fn merge(&mut self, other: TaskPredictions) {
        self.articles = other.articles.or(self.articles.take());
        self.charges = other.charges.or(self.charges.take());
        self.penalty_months = other.penalty_months.or(self.penalty_months.take());
        self.court_view = other.court_view.or(self.court_view.take());
        self.article_content = other.article_content.or(self.article_content.take());
        self.malformed |= other.malformed;
    }

    /// Stores one decoded span; returns false when it cannot be parsed.
    fn set_span(&mut self, task: TaskKind, span: &str, catalog: &LabelCatalog) -> bool {
        match task {
            TaskKind::Article => self.articles = Some(parse_labels(span, |l| catalog.article_index(l))),
            TaskKind::Charge => self.charges = Some(parse_labels(span, |l| catalog.charge_index(l))),
            TaskKind::Penalty => match parse_penalty(span) {
                Some(m) => self.penalty_months = Some(m),
                None => return false,
            },
            TaskKind::CourtView => self.court_view = Some(span.to_string()),
            TaskKind::ArticleContent => self.article_content = Some(span.to_string()),
        }
        true
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().join(" ")
}

/// Splits at the delimiter, normalizes whitespace, drops empties and
/// duplicates, and orders catalog labels by catalog position (unknown labels
/// keep their order after them).
fn parse_labels(span: &str, index: impl Fn(&str) -> Option<usize>) -> Vec<String> {
    let mut labels: Vec<String> = span.split(DELIM).map(normalize_ws).filter(|l| !l.is_empty()).collect();
    let mut seen = HashSet::new();
    labels.retain(|l| seen.insert(l.clone()));
    labels.sort_by_key(|l| index(l).unwrap_or(usize::MAX));
    labels
}

pub fn parse_penalty(span: &str) -> Option<u32> {
    match normalize_ws(span).as_str() {
        "life" => Some(LIFE_MONTHS),
        "death" => Some(DEATH_MONTHS),
        s if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) => s.parse().ok(),
        _ => None,
    }
}

/// Parses model output back into task labels. The k-th span is assigned to
/// the k-th task of `order`; missing end token, missing spans, unexpected
/// sentinels or unparseable penalties set `malformed`.
pub fn parse_decoded(decoded: &str, order: &OrderSpec, catalog: &LabelCatalog) -> TaskPredictions {
    let seg = split_segments(decoded);
    let expected = order.sentinels();
    let mut p = TaskPredictions {
        malformed: !seg.ended || !seg.leading.trim().is_empty() || seg.spans.len() != order.len(),
        ..Default::default()
    };
    for (k, (n, span)) in seg.spans.iter().enumerate().take(order.len()) {
        if *n != expected[k] {
            p.malformed = true;
        }
        if !p.set_span(order.tasks()[k], span, catalog) {
            p.malformed = true;
        }
    }
    p
}

/// Token pieces of `text`: reserved literals count as one token, everything
/// else is one character.
fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let len = match_reserved(rest).map_or(c.len_utf8(), |(_, l)| l);
        out.push(&rest[..len]);
        rest = &rest[len..];
    }
    out
}

/// Longest span drawn by [`span_corrupt`].
pub const MAX_SPAN: usize = 10;

fn truncated_geometric_mean(p: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for l in 1..=MAX_SPAN {
        let w = (1.0 - p).powi(l as i32 - 1) * p;
        num += l as f64 * w;
        den += w;
    }
    num / den
}

/// Success probability giving the requested mean on `1..=MAX_SPAN`.
fn geometric_p(mean: f64) -> f64 {
    if mean <= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (1e-9, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if truncated_geometric_mean(mid) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn sample_span<R: Rng + ?Sized>(p: f64, rng: &mut R) -> usize {
    loop {
        let mut l = 1;
        while l <= MAX_SPAN && !rng.random_bool(p) {
            l += 1;
        }
        if l <= MAX_SPAN {
            return l;
        }
    }
}

/// T5-style span corruption over character tokens.
///
/// `round(n * mask_ratio)` tokens are masked in spans whose lengths follow a
/// geometric law truncated at [`MAX_SPAN`] with mean `mean_span` (the last
/// span is clipped to hit the budget). Spans never touch, and are placed by
/// a random split of the unmasked tokens into gaps.
pub fn span_corrupt<R: Rng + ?Sized>(text: &str, mask_ratio: f64, mean_span: f64, rng: &mut R) -> Result<PromptTarget> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::InvalidArgument(format!("mask_ratio must lie in [0, 1), got {mask_ratio}")));
    }
    if !(1.0..(MAX_SPAN as f64 + 1.0) / 2.0).contains(&mean_span) {
        return Err(Error::InvalidArgument(format!("mean_span must lie in [1, 5.5), got {mean_span}")));
    }
    let toks = pieces(text);
    let n = toks.len();
    if n < 8 {
        return Err(Error::TextTooShort(n));
    }
    if toks.iter().any(|t| match_reserved(t).is_some_and(|(id, _)| id != crate::tokenizer::DELIM_ID)) {
        return Err(Error::InvalidArgument("text already contains sentinel or control tokens".into()));
    }
    let budget = if mask_ratio == 0.0 { 0 } else { ((n as f64 * mask_ratio).round() as usize).max(1) };
    let p = geometric_p(mean_span);
    let mut spans = Vec::new();
    let mut used = 0;
    while used < budget {
        let l = sample_span(p, rng).min(budget - used);
        spans.push(l);
        used += l;
    }
    let k = spans.len();
    if k > NUM_SENTINELS {
        return Err(Error::InvalidArgument(format!("text needs {k} spans, more than {NUM_SENTINELS} sentinels")));
    }
    let clean = n - budget;
    if k > clean + 1 {
        return Err(Error::InvalidArgument("mask ratio leaves no room to separate spans".into()));
    }
    // gaps g_0..g_k with interior gaps >= 1
    let mut gaps = vec![0usize; k + 1];
    if k > 0 {
        let free = clean + 1 - k;
        let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut prev = 0;
        for (i, &c) in cuts.iter().enumerate() {
            gaps[i] = c - prev + usize::from(i > 0);
            prev = c;
        }
        gaps[k] = free - prev;
    } else {
        gaps[0] = n;
    }

    let mut input = String::with_capacity(text.len());
    let mut target = String::new();
    let mut pos = 0;
    for (i, &len) in spans.iter().enumerate() {
        input.extend(toks[pos..pos + gaps[i]].iter().copied());
        pos += gaps[i];
        input.push_str(&sentinel(i));
        target.push_str(&sentinel(i));
        target.extend(toks[pos..pos + len].iter().copied());
        pos += len;
    }
    input.extend(toks[pos..].iter().copied());
    target.push_str(END);
    Ok(PromptTarget { input_text: input, target_text: target, sentinel_map: (0..k).map(|i| (i, SpanKind::Corrupted)).collect() })
}

/// Ordering constraints for [`enumerate_orders`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderConstraint {
    First(TaskKind),
    Last(TaskKind),
    Before(TaskKind, TaskKind),
    /// Court view and article content come after every main task.
    AuxiliariesLast,
}

impl OrderConstraint {
    fn holds(&self, tasks: &[TaskKind]) -> bool {
        let pos = |t: TaskKind| tasks.iter().position(|&x| x == t);
        match *self {
            OrderConstraint::First(t) => pos(t).is_none_or(|p| p == 0),
            OrderConstraint::Last(t) => pos(t).is_none_or(|p| p + 1 == tasks.len()),
            OrderConstraint::Before(a, b) => match (pos(a), pos(b)) {
                (Some(pa), Some(pb)) => pa < pb,
                _ => true,
            },
            OrderConstraint::AuxiliariesLast => {
                let first_aux = tasks.iter().position(|t| t.is_auxiliary()).unwrap_or(tasks.len());
                tasks[first_aux..].iter().all(|t| t.is_auxiliary())
            }
        }
    }
}

/// Every valid permutation of `tasks` satisfying all `constraints`, in
/// lexicographic order of task kinds.
pub fn enumerate_orders(tasks: &[TaskKind], constraints: &[OrderConstraint]) -> Result<Vec<OrderSpec>> {
    let mut uniq: Vec<TaskKind> = tasks.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.is_empty() {
        return Err(Error::Empty("no tasks to order"));
    }
    Ok(uniq
        .iter()
        .copied()
        .permutations(uniq.len())
        .filter(|p| constraints.iter().all(|c| c.holds(p)))
        .filter_map(|p| OrderSpec::new(p).ok())
        .collect())
}

/// Text of decoded ids for [`parse_decoded`]: the end literal is appended
/// when decoding stopped on its own.
pub fn decoded_text(vocab: &crate::tokenizer::Vocab, out: &crate::model::DecodeOutput) -> String {
    let mut s = vocab.decode(&out.ids);
    if !out.truncated {
        s.push_str(END);
    }
    s
}

/// Sentinel id range check used by decoders that force sentinel prefixes.
pub fn is_sentinel_id(id: u32) -> bool {
    (FIRST_SENTINEL_ID..FIRST_SENTINEL_ID + NUM_SENTINELS as u32).contains(&id)
}

/// Every text a prompt or target over `corpus` can contain, for building a
/// vocabulary that covers captions, label ids and penalty surfaces.
pub fn vocab_texts(corpus: &[Case], catalog: &LabelCatalog) -> Vec<String> {
    let t = PromptTemplate::default();
    let captions = [&t.fact, &t.court_view, &t.article, &t.article_content, &t.charge, &t.penalty]
        .iter()
        .map(|(a, b)| format!("{a}{b}"))
        .join("");
    let mut texts = vec![captions, "0123456789 life death yn".to_string()];
    texts.extend(corpus.iter().flat_map(|c| [c.fact.clone(), c.court_view.clone()]));
    texts.extend(catalog.articles.iter().flat_map(|a| [a.article_id.clone(), a.content.clone()]));
    texts.extend(catalog.charges.iter().cloned());
    texts
}
