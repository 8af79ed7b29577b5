//! Synthetic ListOps-style classification data.
//!
//! Expressions are prefix-notation trees over the digits 0-9 with the
//! operators MAX, MIN, MED (median, lower-truncated for even counts) and
//! SUMMOD (sum mod 10). Token layout:
//!
//! | id    | token          |
//! |-------|----------------|
//! | 0     | padding        |
//! | 1..10 | digits 0..9    |
//! | 11    | `MAX`          |
//! | 12    | `MIN`          |
//! | 13    | `MED`          |
//! | 14    | `SUMMOD`       |
//! | 15    | `[`            |
//! | 16    | `]`            |

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};
use crate::model::seeded_rng;

pub const VOCAB_SIZE: usize = 17;
pub const NUM_CLASSES: usize = 10;
pub const PAD: usize = 0;
pub const OPEN: usize = 15;
pub const CLOSE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operator {
    Max,
    Min,
    Med,
    SumMod,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Max, Operator::Min, Operator::Med, Operator::SumMod];

    pub fn token(self) -> usize {
        11 + self as usize
    }

    pub fn from_token(id: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.token() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Max => "MAX",
            Operator::Min => "MIN",
            Operator::Med => "MED",
            Operator::SumMod => "SUMMOD",
        }
    }

    pub fn apply(self, args: &[u8]) -> u8 {
        match self {
            Operator::Max => *args.iter().max().expect("operands"),
            Operator::Min => *args.iter().min().expect("operands"),
            Operator::Med => {
                let mut sorted = args.to_vec();
                sorted.sort_unstable();
                let n = sorted.len();
                if n % 2 == 1 {
                    sorted[n / 2]
                } else {
                    (sorted[n / 2 - 1] + sorted[n / 2]) / 2
                }
            }
            Operator::SumMod => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }
}

pub fn digit_token(digit: u8) -> usize {
    1 + digit as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    Apply(Operator, Vec<Expr>),
}

impl Expr {
    pub fn value(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Apply(op, args) => {
                let vals: Vec<u8> = args.iter().map(Expr::value).collect();
                op.apply(&vals)
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Apply(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.write_tokens(&mut out);
        out
    }

    fn write_tokens(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(digit_token(*d)),
            Expr::Apply(op, args) => {
                out.push(OPEN);
                out.push(op.token());
                for a in args {
                    a.write_tokens(out);
                }
                out.push(CLOSE);
            }
        }
    }
}

/// Renders token ids as text, e.g. `[MAX 2 9 1]`.
pub fn render(tokens: &[usize]) -> String {
    let mut s = String::new();
    for (i, &t) in tokens.iter().enumerate() {
        let prev_open = i > 0 && tokens[i - 1] == OPEN;
        if i > 0 && t != CLOSE && !prev_open {
            s.push(' ');
        }
        match t {
            1..=10 => write!(s, "{}", t - 1).unwrap(),
            OPEN => s.push('['),
            CLOSE => s.push(']'),
            PAD => s.push('_'),
            _ => s.push_str(Operator::from_token(t).map_or("?", Operator::name)),
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ListOpsSpec {
    /// Tree depth is drawn uniformly from `1..=max_depth`.
    pub max_depth: usize,
    pub max_args: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for ListOpsSpec {
    fn default() -> Self {
        Self { max_depth: 3, max_args: 5, max_length: 256, seed: 0 }
    }
}

/// Smallest tokenized depth-1 expression: `[ OP a b ]`.
const MIN_EXPRESSION_LEN: usize = 5;
const MAX_ATTEMPTS: usize = 10_000;

impl ListOpsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_args < 2 {
            return Err(Error::Spec("need max_depth >= 1 and max_args >= 2".into()));
        }
        if self.max_length < MIN_EXPRESSION_LEN {
            return Err(Error::Spec(format!(
                "max_length {} cannot fit a depth-1 expression ({MIN_EXPRESSION_LEN} tokens)",
                self.max_length
            )));
        }
        Ok(())
    }
}

fn random_tree(rng: &mut impl Rng, depth: usize, max_args: usize) -> Expr {
    if depth == 0 {
        return Expr::Digit(rng.gen_range(0..10));
    }
    let op = *Operator::ALL.choose(rng).expect("operators");
    let arity = rng.gen_range(2..=max_args);
    let deep = rng.gen_range(0..arity);
    let args = (0..arity)
        .map(|i| {
            let child_depth = if i == deep { depth - 1 } else { rng.gen_range(0..depth) };
            random_tree(rng, child_depth, max_args)
        })
        .collect();
    Expr::Apply(op, args)
}

/// Generates `n` labelled expressions; deterministic in `spec.seed`.
pub fn gen_listops(spec: &ListOpsSpec, n: usize) -> Result<Vec<TaskSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Spec("sample count must be at least 1".into()));
    }
    let mut rng = seeded_rng(spec.seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let depth = rng.gen_range(1..=spec.max_depth);
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let expr = random_tree(&mut rng, depth, spec.max_args);
            let tokens = expr.tokens();
            if tokens.len() <= spec.max_length {
                accepted = Some(TaskSample { tokens, label: expr.value() as usize });
                break;
            }
        }
        let sample = accepted.ok_or_else(|| {
            Error::Spec(format!("no depth-{depth} expression fits in {} tokens", spec.max_length))
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn label_histogram(samples: &[TaskSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if s.label < classes {
            counts[s.label] += 1;
        }
    }
    counts
}

/// Fraction of samples carrying the most frequent label.
pub fn majority_fraction(samples: &[TaskSample], classes: usize) -> f64 {
    let hist = label_histogram(samples, classes);
    hist.into_iter().max().unwrap_or(0) as f64 / samples.len().max(1) as f64
}

/// Wraps `k` copies of the expression in a `MAX` node: `[MAX e e ... e]`.
/// MAX is idempotent, so the label is unchanged.
pub fn augment_max_concat(sample: &TaskSample, k: usize, cap: usize) -> Result<TaskSample> {
    if k == 0 {
        return Err(Error::Spec("augmentation factor must be at least 1".into()));
    }
    let length = 3 + k * sample.tokens.len();
    if length > cap {
        return Err(Error::Length { length, cap });
    }
    let mut tokens = Vec::with_capacity(length);
    tokens.push(OPEN);
    tokens.push(Operator::Max.token());
    for _ in 0..k {
        tokens.extend_from_slice(&sample.tokens);
    }
    tokens.push(CLOSE);
    Ok(TaskSample { tokens, label: sample.label })
}

pub fn write_jsonl(samples: &[TaskSample], path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(samples).as_bytes())
}

pub fn to_jsonl(samples: &[TaskSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// Reads one `{"tokens":[...],"label":k}` record per line, checking token ids
/// against `vocab_size` and labels against `classes`.
pub fn read_jsonl(path: &Path, vocab_size: usize, classes: usize) -> Result<Vec<TaskSample>> {
    let text = read_to_string(path)?;
    parse_jsonl(&text, &path.display().to_string(), vocab_size, classes)
}

pub fn parse_jsonl(text: &str, origin: &str, vocab_size: usize, classes: usize) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse { path: origin.to_string(), line: i + 1, message };
        let sample: TaskSample = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if sample.tokens.is_empty() {
            return Err(fail("empty token list".into()));
        }
        if sample.label >= classes {
            return Err(fail(format!("label {} out of range 0..{classes}", sample.label)));
        }
        if let Some(&bad) = sample.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(fail(format!("token id {bad} out of range 0..{vocab_size}")));
        }
        out.push(sample);
    }
    Ok(out)
}
