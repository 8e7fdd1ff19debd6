//! Balanced synthetic multiple-choice tasks, their JSON Lines wire format,
//! and prompt rendering.
//!
//! # Toy alphabet
//!
//! Token ids are fixed; there is no tokenizer.
//!
//! | ids       | meaning                                              |
//! |-----------|------------------------------------------------------|
//! | 0         | `<bos>`                                              |
//! | 1         | `<sep>` between demonstrations                       |
//! | 2, 3, 4   | `Q:`, `Options:`, `A:` (answer cue)                  |
//! | 5..14     | three 3-token instruction templates                  |
//! | 16..21    | answer letters `A`..`E` (candidate style 0)          |
//! | 21..26    | answer numbers `1`..`5` (candidate style 1)          |
//! | 32..48    | numerals 0..15                                       |
//! | 48..53    | class names 0..4                                     |
//! | 64..96    | lexicon words                                        |
//! | 96..112   | filler words                                         |
//! | 112..117  | option tags 0..4                                     |
//!
//! # Generators
//!
//! Every query is four tokens.
//!
//! * `parity`: four bits (numerals 0/1); the answer is the number of ones
//!   modulo `n_options`. Option `j` shows numeral `j`.
//! * `lexicon-lookup`: three fillers and one lexicon word at a random slot; a
//!   seeded lexicon assigns each word a class, which is the answer. Option
//!   `j` shows class name `j`.
//! * `copy-match`: three fillers and one option tag at a random slot; the
//!   answer is the option displaying that tag. Option `j` shows tag `j`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{input_err, Error, Result};
use crate::model::Prompt;

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const QUERY: usize = 2;
pub const OPTIONS: usize = 3;
pub const ANSWER: usize = 4;
pub const INSTRUCTION_BASE: usize = 5;
pub const INSTRUCTION_LEN: usize = 3;
pub const N_INSTRUCTIONS: usize = 3;
pub const LETTER_BASE: usize = 16;
pub const N_CANDIDATE_STYLES: usize = 2;
pub const NUMERAL_BASE: usize = 32;
pub const CLASS_BASE: usize = 48;
pub const LEXICON_BASE: usize = 64;
pub const LEXICON_SIZE: usize = 32;
pub const FILLER_BASE: usize = 96;
pub const FILLER_SIZE: usize = 16;
pub const TAG_BASE: usize = 112;
/// Smallest vocabulary that holds the toy alphabet.
pub const MIN_VOCAB: usize = 117;
pub const MAX_OPTIONS: usize = 5;
pub const QUERY_LEN: usize = 4;

/// Answer token for option `index` in candidate `style`.
pub fn candidate_token(style: usize, index: usize) -> usize {
    LETTER_BASE + style * MAX_OPTIONS + index
}

/// One multiple-choice query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChoiceTask {
    pub query: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    /// Single answer token per option.
    pub candidates: Vec<usize>,
    pub correct: usize,
}

impl ChoiceTask {
    pub fn n_options(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return input_err("a task needs at least two candidates");
        }
        if self.options.len() != self.candidates.len() {
            return input_err(format!(
                "{} options but {} candidates",
                self.options.len(),
                self.candidates.len()
            ));
        }
        if self.correct >= self.candidates.len() {
            return input_err(format!("correct index {} out of bounds for {} options", self.correct, self.candidates.len()));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(c) {
                return input_err(format!("candidate token {c} repeated"));
            }
        }
        Ok(())
    }

    /// The same task answered with candidate `style` tokens.
    pub fn restyled(&self, style: usize) -> ChoiceTask {
        ChoiceTask {
            candidates: (0..self.n_options()).map(|j| candidate_token(style, j)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub n_options: usize,
    pub train: Vec<ChoiceTask>,
    pub valid: Vec<ChoiceTask>,
    pub test: Vec<ChoiceTask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl TaskSet {
    pub fn split(&self, s: Split) -> &[ChoiceTask] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<ChoiceTask> {
        match s {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per split, how often each option index is correct.
    pub fn correct_counts(&self, s: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_options];
        for t in self.split(s) {
            if t.correct < counts.len() {
                counts[t.correct] += 1;
            }
        }
        counts
    }

    /// Splits whose correct-index counts differ by more than one.
    pub fn imbalance(&self) -> Vec<BalanceIssue> {
        Split::ALL
            .iter()
            .filter_map(|&s| {
                let counts = self.correct_counts(s);
                let (lo, hi) = (counts.iter().min().copied()?, counts.iter().max().copied()?);
                (hi - lo > 1).then_some(BalanceIssue { split: s, counts })
            })
            .collect()
    }

    /// Downsample every split to `min count` examples per option index,
    /// keeping the first occurrences in file order.
    pub fn balanced(&self) -> TaskSet {
        let mut out = TaskSet { n_options: self.n_options, train: vec![], valid: vec![], test: vec![] };
        for s in Split::ALL {
            let counts = self.correct_counts(s);
            let keep = counts.iter().copied().min().unwrap_or(0);
            let mut taken = vec![0; self.n_options];
            for t in self.split(s) {
                if taken[t.correct] < keep {
                    taken[t.correct] += 1;
                    out.split_mut(s).push(t.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceIssue {
    pub split: Split,
    pub counts: Vec<usize>,
}

impl fmt::Display for BalanceIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} split is unbalanced: correct-index counts {:?}", self.split.name(), self.counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Parity,
    LexiconLookup,
    CopyMatch,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::LexiconLookup => "lexicon-lookup",
            TaskKind::CopyMatch => "copy-match",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(TaskKind::Parity),
            "lexicon-lookup" => Ok(TaskKind::LexiconLookup),
            "copy-match" => Ok(TaskKind::CopyMatch),
            _ => input_err(format!("unknown task kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGenSpec {
    pub kind: TaskKind,
    pub n_options: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl TaskGenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_OPTIONS).contains(&self.n_options) {
            return input_err(format!("n_options must be in 2..={MAX_OPTIONS}, got {}", self.n_options));
        }
        let unit = self.n_options * 8;
        if self.n_examples == 0 || self.n_examples % unit != 0 {
            return input_err(format!(
                "n_examples ({}) must be a positive multiple of n_options x 8 = {unit}",
                self.n_examples
            ));
        }
        Ok(())
    }
}

/// Seeded lexicon: word `w` (0-based within the lexicon range) has class
/// `lexicon[w]`; classes are as even as `LEXICON_SIZE` allows.
pub fn lexicon(n_options: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_7869_636f_6e00);
    let mut classes: Vec<usize> = (0..LEXICON_SIZE).map(|i| i % n_options).collect();
    classes.shuffle(&mut rng);
    classes
}

fn options_for(kind: TaskKind, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|j| match kind {
            TaskKind::Parity => vec![NUMERAL_BASE + j],
            TaskKind::LexiconLookup => vec![CLASS_BASE + j],
            TaskKind::CopyMatch => vec![TAG_BASE + j],
        })
        .collect()
}

fn make_query(kind: TaskKind, class: usize, n: usize, lex: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    match kind {
        TaskKind::Parity => loop {
            let bits: Vec<usize> = (0..QUERY_LEN).map(|_| rng.random_range(0..2)).collect();
            if bits.iter().sum::<usize>() % n == class {
                return bits.into_iter().map(|b| NUMERAL_BASE + b).collect();
            }
        },
        TaskKind::LexiconLookup | TaskKind::CopyMatch => {
            let mut q: Vec<usize> = (0..QUERY_LEN).map(|_| FILLER_BASE + rng.random_range(0..FILLER_SIZE)).collect();
            let key = if kind == TaskKind::CopyMatch {
                TAG_BASE + class
            } else {
                let words: Vec<usize> = (0..LEXICON_SIZE).filter(|&w| lex[w] == class).collect();
                LEXICON_BASE + words[rng.random_range(0..words.len())]
            };
            q[rng.random_range(0..QUERY_LEN)] = key;
            q
        }
    }
}

/// Generates an exactly balanced task set with a 6:1:1 split.
pub fn generate_synthetic(spec: &TaskGenSpec) -> Result<TaskSet> {
    spec.validate()?;
    let n = spec.n_options;
    let per_option = spec.n_examples / n;
    let (n_train, n_valid) = (per_option * 6 / 8, per_option / 8);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = lexicon(n, spec.seed);
    let options = options_for(spec.kind, n);
    let candidates: Vec<usize> = (0..n).map(|j| candidate_token(0, j)).collect();

    let mut set = TaskSet { n_options: n, train: vec![], valid: vec![], test: vec![] };
    for class in 0..n {
        for i in 0..per_option {
            let task = ChoiceTask {
                query: make_query(spec.kind, class, n, &lex, &mut rng),
                options: options.clone(),
                candidates: candidates.clone(),
                correct: class,
            };
            let split = if i < n_train {
                &mut set.train
            } else if i < n_train + n_valid {
                &mut set.valid
            } else {
                &mut set.test
            };
            split.push(task);
        }
    }
    set.train.shuffle(&mut rng);
    set.valid.shuffle(&mut rng);
    set.test.shuffle(&mut rng);
    Ok(set)
}

/// How a task is turned into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RenderContext {
    /// Instruction template, `0..N_INSTRUCTIONS`.
    pub instruction: usize,
    /// When set, candidate tokens are replaced by this style's answer tokens.
    pub candidate_style: Option<usize>,
}

/// Renders `<bos> instr (demo <sep>)* Q: query Options: (cand opt)* A:`.
/// Each demonstration ends with its correct candidate token. With any
/// demonstrations at all, their correct options must be a permutation of
/// the option indices.
pub fn render_prompt(task: &ChoiceTask, shots: &[&ChoiceTask], ctx: RenderContext) -> Result<Prompt> {
    task.validate()?;
    if ctx.instruction >= N_INSTRUCTIONS {
        return input_err(format!("instruction template {} does not exist", ctx.instruction));
    }
    if let Some(s) = ctx.candidate_style {
        if s >= N_CANDIDATE_STYLES || task.n_options() > MAX_OPTIONS {
            return input_err(format!("candidate style {s} unavailable"));
        }
    }
    let n = task.n_options();
    if !shots.is_empty() {
        if shots.len() != n {
            return input_err(format!("few-shot prompts need exactly {n} demonstrations, got {}", shots.len()));
        }
        let mut seen = vec![false; n];
        for s in shots {
            s.validate()?;
            if s.n_options() != n {
                return input_err("demonstration has a different number of options");
            }
            if std::mem::replace(&mut seen[s.correct], true) {
                return input_err(format!("duplicate demonstration option {}", s.correct));
            }
        }
    }
    let restyle = |t: &ChoiceTask| match ctx.candidate_style {
        Some(s) => t.restyled(s),
        None => t.clone(),
    };
    let base = INSTRUCTION_BASE + ctx.instruction * INSTRUCTION_LEN;
    let mut tokens = vec![BOS];
    tokens.extend(base..base + INSTRUCTION_LEN);
    let body = |t: &ChoiceTask, out: &mut Vec<usize>| {
        out.push(QUERY);
        out.extend(&t.query);
        out.push(OPTIONS);
        for (c, o) in t.candidates.iter().zip(&t.options) {
            out.push(*c);
            out.extend(o);
        }
        out.push(ANSWER);
    };
    for s in shots {
        let s = restyle(s);
        body(&s, &mut tokens);
        tokens.push(s.candidates[s.correct]);
        tokens.push(SEP);
    }
    let t = restyle(task);
    body(&t, &mut tokens);
    Ok(Prompt::at_end(tokens, t.candidates[t.correct]))
}

/// One demonstration per option index drawn from `pool`, in option order.
pub fn pick_shots<'a>(pool: &'a [ChoiceTask], n_options: usize, rng: &mut impl Rng) -> Result<Vec<&'a ChoiceTask>> {
    let mut out = Vec::with_capacity(n_options);
    for j in 0..n_options {
        let matching: Vec<&ChoiceTask> = pool.iter().filter(|t| t.correct == j).collect();
        if matching.is_empty() {
            return input_err(format!("no demonstration available for option {j}"));
        }
        out.push(matching[rng.random_range(0..matching.len())]);
    }
    Ok(out)
}

/// A prompting context: instruction template, demonstration set (`None` for
/// zero-shot) and candidate-token style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ContextSpec {
    pub instruction: usize,
    pub demos: Option<u64>,
    pub candidate_style: usize,
}

impl ContextSpec {
    pub fn zero_shot() -> Self {
        ContextSpec::default()
    }

    /// The 3 instructions x 2 demonstration sets x 2 candidate styles grid.
    pub fn grid() -> Vec<ContextSpec> {
        let mut out = Vec::new();
        for instruction in 0..N_INSTRUCTIONS {
            for demos in 0..2 {
                for candidate_style in 0..N_CANDIDATE_STYLES {
                    out.push(ContextSpec { instruction, demos: Some(demos), candidate_style });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction >= N_INSTRUCTIONS {
            return input_err(format!("instruction variant {} does not exist", self.instruction));
        }
        if self.candidate_style >= N_CANDIDATE_STYLES {
            return input_err(format!("candidate style {} does not exist", self.candidate_style));
        }
        Ok(())
    }

    /// Short label such as `i1-d0-s1` (or `i1-z-s1` for zero-shot).
    pub fn label(&self) -> String {
        match self.demos {
            Some(d) => format!("i{}-d{}-s{}", self.instruction, d, self.candidate_style),
            None => format!("i{}-z-s{}", self.instruction, self.candidate_style),
        }
    }

    /// The fixed demonstrations of this context, drawn from `set.train`.
    pub fn shots<'a>(&self, set: &'a TaskSet) -> Result<Vec<&'a ChoiceTask>> {
        match self.demos {
            None => Ok(Vec::new()),
            Some(id) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x64656d6f ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                pick_shots(&set.train, set.n_options, &mut rng)
            }
        }
    }

    /// Renders every task of `split` in this context.
    pub fn render_split(&self, set: &TaskSet, split: Split) -> Result<Vec<Prompt>> {
        self.validate()?;
        let shots = self.shots(set)?;
        let ctx = RenderContext { instruction: self.instruction, candidate_style: Some(self.candidate_style) };
        set.split(split).iter().map(|t| render_prompt(t, &shots, ctx)).collect()
    }
}

impl FromStr for ContextSpec {
    type Err = Error;

    /// Inverse of [`ContextSpec::label`].
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("context label {s:?} is not of the form i<n>-d<n>-s<n> or i<n>-z-s<n>"));
        let parts: Vec<&str> = s.split('-').collect();
        let [i, d, st] = parts.as_slice() else {
            return Err(bad());
        };
        let num = |p: &str, prefix: char| p.strip_prefix(prefix).and_then(|v| v.parse::<u64>().ok()).ok_or_else(bad);
        let instruction = num(i, 'i')? as usize;
        let demos = if *d == "z" { None } else { Some(num(d, 'd')?) };
        let candidate_style = num(st, 's')? as usize;
        let ctx = ContextSpec { instruction, demos, candidate_style };
        ctx.validate()?;
        Ok(ctx)
    }
}

/// Candidate tokens of `task` in context style `style`.
pub fn candidates_in_style(task: &ChoiceTask, style: usize) -> Vec<usize> {
    (0..task.n_options()).map(|j| candidate_token(style, j)).collect()
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

pub const TASK_FORMAT: &str = "neglab-tasks";
pub const TASK_FORMAT_VERSION: u64 = 1;

const RECORD_FIELDS: [&str; 5] = ["split", "query", "options", "candidates", "correct"];

#[derive(Serialize)]
struct Header<'a> {
    format: &'a str,
    version: u64,
    n_options: usize,
}

#[derive(Serialize)]
struct Record<'a> {
    split: &'a str,
    query: &'a [usize],
    options: &'a [Vec<usize>],
    candidates: &'a [usize],
    correct: usize,
}

/// Writes the header line followed by one record per task (train, valid,
/// test order).
pub fn export(set: &TaskSet, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &Header { format: TASK_FORMAT, version: TASK_FORMAT_VERSION, n_options: set.n_options })?;
    out.push(b'\n');
    for s in Split::ALL {
        for t in set.split(s) {
            let rec = Record { split: s.name(), query: &t.query, options: &t.options, candidates: &t.candidates, correct: t.correct };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Result of reading a task file: the tasks plus any balance problems found
/// (reported, never repaired).
#[derive(Debug, Clone)]
pub struct Ingested {
    pub tasks: TaskSet,
    pub imbalance: Vec<BalanceIssue>,
}

pub fn ingest(path: &Path) -> Result<Ingested> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let Some((hline, header)) = lines.next() else {
        return input_err("empty task file");
    };
    let header: Value = serde_json::from_str(&header?).map_err(|e| fmt_err(hline, e.to_string()))?;
    if header.get("format").and_then(Value::as_str) != Some(TASK_FORMAT) {
        return Err(fmt_err(hline, "missing format header".into()));
    }
    if header.get("version").and_then(Value::as_u64) != Some(TASK_FORMAT_VERSION) {
        return Err(fmt_err(hline, "unsupported task format version".into()));
    }
    let n_options = header
        .get("n_options")
        .and_then(Value::as_u64)
        .ok_or_else(|| fmt_err(hline, "header lacks n_options".into()))? as usize;

    let mut set = TaskSet { n_options, train: vec![], valid: vec![], test: vec![] };
    for (line, text) in lines {
        let v: Value = serde_json::from_str(&text?).map_err(|e| fmt_err(line, e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| fmt_err(line, "record is not an object".into()))?;
        if let Some(k) = obj.keys().find(|k| !RECORD_FIELDS.contains(&k.as_str())) {
            return Err(fmt_err(line, format!("unknown field {k:?}")));
        }
        let split = match obj.get("split").and_then(Value::as_str).unwrap_or("train") {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            s => return Err(fmt_err(line, format!("unknown split {s:?}"))),
        };
        let query = parse_tokens(obj.get("query"), line, "query")?;
        let options = match obj.get("options") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|o| parse_tokens(Some(o), line, "options"))
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(fmt_err(line, "options must be a list".into())),
        };
        let candidates = match obj.get("candidates") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|c| parse_candidate(c, line))
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(fmt_err(line, "candidates must be a list".into())),
        };
        let correct = obj
            .get("correct")
            .and_then(Value::as_u64)
            .ok_or_else(|| fmt_err(line, "correct must be a non-negative integer".into()))? as usize;
        let task = ChoiceTask { query, options, candidates, correct };
        if task.n_options() != n_options {
            return Err(fmt_err(line, format!("record has {} candidates, header says {n_options}", task.n_options())));
        }
        task.validate().map_err(|e| fmt_err(line, e.to_string()))?;
        set.split_mut(split).push(task);
    }
    if set.is_empty() {
        return input_err("task file has no records");
    }
    let imbalance = set.imbalance();
    Ok(Ingested { tasks: set, imbalance })
}

fn fmt_err(line: usize, msg: String) -> Error {
    Error::Format { line, msg }
}

/// A token list, or a string of whitespace-separated token ids.
fn parse_tokens(v: Option<&Value>, line: usize, field: &str) -> Result<Vec<usize>> {
    match v {
        Some(Value::Array(items)) => items
            .iter()
            .map(|x| x.as_u64().map(|t| t as usize).ok_or_else(|| fmt_err(line, format!("{field}: token ids must be non-negative integers"))))
            .collect(),
        Some(Value::String(s)) => s
            .split_whitespace()
            .map(|w| w.parse::<usize>().map_err(|_| fmt_err(line, format!("{field}: {w:?} is not a token id"))))
            .collect(),
        _ => Err(fmt_err(line, format!("{field} must be a token list or text"))),
    }
}

fn parse_candidate(v: &Value, line: usize) -> Result<usize> {
    match v {
        Value::Number(_) => v.as_u64().map(|t| t as usize).ok_or_else(|| fmt_err(line, "candidate must be a token id".into())),
        Value::Array(items) if items.len() == 1 => parse_candidate(&items[0], line),
        Value::Array(items) => Err(fmt_err(line, format!("multi-token candidate ({} tokens)", items.len()))),
        Value::String(s) => {
            let toks: Vec<&str> = s.split_whitespace().collect();
            match toks.as_slice() {
                [one] => one.parse().map_err(|_| fmt_err(line, format!("candidate {s:?} is not a token id"))),
                _ => Err(fmt_err(line, format!("multi-token candidate {s:?}"))),
            }
        }
        _ => Err(fmt_err(line, "candidate must be a token id".into())),
    }
}
