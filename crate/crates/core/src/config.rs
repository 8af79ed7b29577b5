//! Model configuration, named presets, and the flat `key = value` text format
//! shared by config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::latent::{InitVariant, ProjectionSharing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

impl Direction {
    pub fn has_forward(self) -> bool {
        matches!(self, Direction::Forward | Direction::Bidirectional)
    }

    pub fn has_backward(self) -> bool {
        matches!(self, Direction::Backward | Direction::Bidirectional)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Bidirectional => "bidirectional",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            "bidirectional" => Ok(Direction::Bidirectional),
            _ => Err(Error::Config(format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding size.
    pub d: usize,
    /// Feed-forward inner width.
    pub h_ff: usize,
    pub heads: usize,
    /// Segment size.
    pub t: usize,
    /// Latent block rows.
    pub l: usize,
    pub self_layers: usize,
    pub classes: usize,
    pub direction: Direction,
    pub fwd_init: InitVariant,
    pub bwd_init: InitVariant,
    pub sharing: ProjectionSharing,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("listops").expect("listops preset")
    }
}

/// `(name, d, h_ff, heads, t, vocab, classes, batch)` for the benchmark presets.
const PRESETS: [(&str, usize, usize, usize, usize, usize, usize, usize); 5] = [
    ("listops", 64, 128, 8, 100, crate::tasks::VOCAB_SIZE, 10, 32),
    ("text", 256, 256, 4, 10, 256, 2, 24),
    ("retrieval", 256, 736, 4, 100, 256, 2, 24),
    ("cifar10", 368, 736, 6, 10, 256, 10, 128),
    ("cifar100", 368, 736, 6, 10, 256, 100, 64),
];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let &(_, d, h_ff, heads, t, vocab_size, classes, _) = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        Ok(Self {
            vocab_size,
            d,
            h_ff,
            heads,
            t,
            l: t,
            self_layers: 2,
            classes,
            direction: Direction::Bidirectional,
            fwd_init: InitVariant::DynProjResidual,
            bwd_init: InitVariant::DynProjResidual,
            sharing: ProjectionSharing::SeparateWeights,
            seed: 0,
        })
    }

    pub fn preset_batch_size(name: &str) -> Option<usize> {
        PRESETS.iter().find(|p| p.0 == name).map(|p| p.7)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.t == 0 || self.l == 0 || self.self_layers == 0 {
            return fail("t, l and self_layers must be at least 1".into());
        }
        if self.vocab_size == 0 || self.classes < 2 || self.h_ff == 0 {
            return fail("vocab_size, h_ff must be positive and classes at least 2".into());
        }
        Ok(())
    }

    /// Serializes to `key = value` lines in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d", self.d.to_string()),
            ("h_ff", self.h_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("t", self.t.to_string()),
            ("l", self.l.to_string()),
            ("self_layers", self.self_layers.to_string()),
            ("classes", self.classes.to_string()),
            ("direction", self.direction.to_string()),
            ("fwd_init", self.fwd_init.to_string()),
            ("bwd_init", self.bwd_init.to_string()),
            ("sharing", self.sharing.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies recognized keys from `map`, leaving others untouched.
    /// A `preset` key, if present, is applied first.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        if let Some(name) = map.get("preset") {
            let seed = self.seed;
            *self = Self::preset(name)?;
            self.seed = seed;
        }
        for (k, v) in map {
            match k.as_str() {
                "vocab_size" => self.vocab_size = parse_value(k, v)?,
                "d" => self.d = parse_value(k, v)?,
                "h_ff" => self.h_ff = parse_value(k, v)?,
                "heads" => self.heads = parse_value(k, v)?,
                "t" => self.t = parse_value(k, v)?,
                "l" => self.l = parse_value(k, v)?,
                "self_layers" => self.self_layers = parse_value(k, v)?,
                "classes" => self.classes = parse_value(k, v)?,
                "direction" => self.direction = v.parse()?,
                "fwd_init" => self.fwd_init = v.parse()?,
                "bwd_init" => self.bwd_init = v.parse()?,
                "sharing" => self.sharing = v.parse()?,
                "seed" => self.seed = parse_value(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text, "<config>")?;
        let mut cfg = Self::default();
        cfg.apply(&map)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
