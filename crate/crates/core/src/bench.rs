//! Peak-memory and wall-clock scaling of one forward+backward pass, for the
//! segmented model and for a full `N×N` self-attention reference.
//!
//! Peak memory is the tracked tensor-byte high-water mark above the bytes
//! already live when the measurement starts (parameters, inputs).

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{seeded_rng, Model};
use crate::tensor::alloc;

pub const DEFAULT_LENGTHS: [usize; 4] = [512, 1024, 2048, 4096];
pub const SKIPPED_OVER_CAP: &str = "skipped_over_cap";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub lengths: Vec<usize>,
    /// The full-attention reference is not run above this length.
    pub naive_cap: usize,
    /// Record wall-clock seconds; when off the column is 0 and the output is
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.t = 100;
        model.l = 100;
        Self { model, lengths: DEFAULT_LENGTHS.to_vec(), naive_cap: 2048, timing: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Blrp,
    Naive,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Blrp => "blrp",
            Method::Naive => "naive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub method: Method,
    /// `None` when the run was skipped.
    pub peak_bytes: Option<i64>,
    pub seconds: f64,
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("length,method,peak_bytes,seconds,status\n");
    for r in rows {
        match r.peak_bytes {
            Some(b) => writeln!(out, "{},{},{b},{},ok", r.length, r.method.as_str(), r.seconds),
            None => writeln!(out, "{},{},,,{SKIPPED_OVER_CAP}", r.length, r.method.as_str()),
        }
        .unwrap();
    }
    out
}

/// Successive peak-byte ratios for one method, in length order, skipping
/// lengths that were not run.
pub fn growth_ratios(rows: &[BenchRow], method: Method) -> Vec<(usize, f64)> {
    let measured: Vec<&BenchRow> = rows.iter().filter(|r| r.method == method && r.peak_bytes.is_some()).collect();
    measured
        .windows(2)
        .map(|w| (w[1].length, w[1].peak_bytes.unwrap() as f64 / w[0].peak_bytes.unwrap() as f64))
        .collect()
}

fn measure(f: impl FnOnce() -> Result<()>, timing: bool) -> Result<(i64, f64)> {
    let baseline = alloc::live_bytes();
    alloc::reset_peak();
    let start = Instant::now();
    f()?;
    let seconds = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
    Ok((alloc::peak_bytes() - baseline, seconds))
}

/// Runs on the calling thread so that the thread-local allocation counter sees
/// every tensor.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.lengths.is_empty() || config.lengths.windows(2).any(|w| w[0] >= w[1]) || config.lengths[0] == 0 {
        return Err(Error::Config("bench lengths must be positive and strictly ascending".into()));
    }
    let model = Model::new(config.model.clone())?;
    let mut rng = seeded_rng(config.model.seed);
    let mut rows = Vec::new();
    for &n in &config.lengths {
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..config.model.vocab_size)).collect();
        let (peak, seconds) = measure(
            || {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let (logits, _) = model.run(&mut tape, &bound, &tokens)?;
                let loss = tape.cross_entropy(logits, 0)?;
                tape.backward(loss).map(drop)
            },
            config.timing,
        )?;
        rows.push(BenchRow { length: n, method: Method::Blrp, peak_bytes: Some(peak), seconds });

        if n > config.naive_cap {
            rows.push(BenchRow { length: n, method: Method::Naive, peak_bytes: None, seconds: 0.0 });
            continue;
        }
        let (peak, seconds) = measure(
            || {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let logits = model.naive_full_attention(&mut tape, &bound, &tokens)?;
                let loss = tape.cross_entropy(logits, 0)?;
                tape.backward(loss).map(drop)
            },
            config.timing,
        )?;
        rows.push(BenchRow { length: n, method: Method::Naive, peak_bytes: Some(peak), seconds });
    }
    Ok(rows)
}
