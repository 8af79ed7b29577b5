//! Command-line front end. Every subcommand resolves one flat effective
//! configuration (file values, then flags, then `--set` overrides), writes
//! its outputs atomically into `--out`, and records them in a manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::ablate::{self, AblationGrid};
use crate::bench::{self, BenchConfig};
use crate::config::{parse_kv, parse_value, ModelConfig};
use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};
use crate::gradcheck::{self, GradcheckConfig};
use crate::manifest::{hash_file, RunManifest};
use crate::tasks::{augment_max_concat, gen_listops, read_jsonl, write_jsonl, ListOpsSpec};
use crate::train::{self, Control, OptimConfig, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "blrp", version, about = "Bidirectional long-range parser: data, training, evaluation and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Extra configuration override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic ListOps train/val files.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training samples.
        #[arg(long)]
        n: Option<usize>,
        /// Validation samples.
        #[arg(long)]
        val_n: Option<usize>,
        /// Comma-separated MAX self-concatenation factors for extra val files.
        #[arg(long, value_name = "K,K,..")]
        augment: Option<String>,
    },
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        train: PathBuf,
        #[arg(long, value_name = "PATH")]
        val: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Train every variant of the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        train: PathBuf,
        #[arg(long, value_name = "PATH")]
        val: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Peak-memory and time scaling against full attention.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending sequence lengths.
        #[arg(long, value_name = "N,N,..")]
        lengths: Option<String>,
        #[arg(long)]
        naive_cap: Option<usize>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Maximum allowed relative error (`inf` always passes).
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

const MODEL_KEYS: &[&str] = &[
    "preset", "vocab_size", "d", "h_ff", "heads", "t", "l", "self_layers", "classes", "direction", "fwd_init",
    "bwd_init", "sharing", "seed",
];
const OPTIM_KEYS: &[&str] =
    &["lr0", "beta1", "beta2", "eps", "gamma", "weight_decay", "epochs", "batch_size", "schedule", "timing"];
const DATA_KEYS: &[&str] = &["seed", "n", "val_n", "max_depth", "max_args", "max_length", "augment"];
const BENCH_KEYS: &[&str] = &["lengths", "naive_cap", "timing"];
const GRADCHECK_KEYS: &[&str] = &["length", "label", "step", "tolerance"];

/// Result of a completed command, used for the exit status.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// The command ran but its check did not pass (gradcheck).
    CheckFailed,
}

/// Parses arguments and runs the command, returning the process exit code:
/// 0 success, 1 usage or validation error, 2 runtime error or failed check.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::CheckFailed) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn effective_config(
    common: &Common,
    flags: Vec<(&str, Option<String>)>,
    allowed: &[&[&str]],
) -> Result<BTreeMap<String, String>> {
    let mut map = match &common.config {
        Some(path) => parse_kv(&read_to_string(path)?, &path.display().to_string())?,
        None => BTreeMap::new(),
    };
    if let Some(seed) = common.seed {
        map.insert("seed".into(), seed.to_string());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    }
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    for key in map.keys() {
        if !allowed.iter().any(|keys| keys.contains(&key.as_str())) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
    }
    Ok(map)
}

fn model_config(map: &BTreeMap<String, String>, base: ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base;
    cfg.apply(map)?;
    cfg.validate()?;
    Ok(cfg)
}

fn optim_config(map: &BTreeMap<String, String>) -> Result<OptimConfig> {
    let mut cfg = OptimConfig::default();
    if let Some(batch) = map.get("preset").and_then(|p| ModelConfig::preset_batch_size(p)) {
        cfg.batch_size = batch;
    }
    cfg.apply(map)?;
    cfg.validate()?;
    Ok(cfg)
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    map.get(key).map_or(Ok(default), |v| parse_value(key, v))
}

fn parse_list(key: &str, text: &str) -> Result<Vec<usize>> {
    text.split(',').map(|s| parse_value(key, s.trim())).collect()
}

fn train_options(map: &BTreeMap<String, String>) -> Result<TrainOptions> {
    Ok(TrainOptions { timing: get(map, "timing", false)?, ..TrainOptions::default() })
}

fn finish(
    out: &Path,
    command: &str,
    config: BTreeMap<String, String>,
    inputs: &[&Path],
    outputs: Vec<String>,
) -> Result<()> {
    let inputs = inputs.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest::new(command, config, inputs, outputs);
    let path = manifest.write(out)?;
    println!("manifest: {} (run {})", path.display(), &manifest.run_id[..16]);
    Ok(())
}

fn full_config(map: &BTreeMap<String, String>, parts: &[Vec<(&'static str, String)>]) -> BTreeMap<String, String> {
    let mut cfg: BTreeMap<String, String> = parts.iter().flatten().map(|(k, v)| (k.to_string(), v.clone())).collect();
    if let Some(p) = map.get("preset") {
        cfg.insert("preset".into(), p.clone());
    }
    cfg
}

pub fn run(command: Command) -> Result<Outcome> {
    let started = Instant::now();
    let outcome = match command {
        Command::GenData { common, n, val_n, augment } => {
            let map = effective_config(
                &common,
                vec![("n", n.map(|v| v.to_string())), ("val_n", val_n.map(|v| v.to_string())), ("augment", augment)],
                &[DATA_KEYS],
            )?;
            let defaults = ListOpsSpec::default();
            let spec = ListOpsSpec {
                max_depth: get(&map, "max_depth", defaults.max_depth)?,
                max_args: get(&map, "max_args", defaults.max_args)?,
                max_length: get(&map, "max_length", defaults.max_length)?,
                seed: get(&map, "seed", defaults.seed)?,
            };
            let n: usize = get(&map, "n", 20_000)?;
            let val_n: usize = get(&map, "val_n", 2_000)?;
            let factors = map.get("augment").map_or(Ok(Vec::new()), |a| parse_list("augment", a))?;
            let all = gen_listops(&spec, n + val_n)?;
            let (train_set, val_set) = all.split_at(n);
            let mut outputs = Vec::new();
            let mut emit = |name: String, samples: &[_]| -> Result<()> {
                write_jsonl(samples, &common.out.join(&name))?;
                println!("wrote {} samples to {}", samples.len(), common.out.join(&name).display());
                outputs.push(name);
                Ok(())
            };
            if !train_set.is_empty() {
                emit("train.jsonl".into(), train_set)?;
            }
            if !val_set.is_empty() {
                emit("val.jsonl".into(), val_set)?;
                for &k in &factors {
                    let cap = 3 + k * spec.max_length;
                    let aug = val_set.iter().map(|s| augment_max_concat(s, k, cap)).collect::<Result<Vec<_>>>()?;
                    emit(format!("val-x{k}.jsonl"), &aug)?;
                }
            }
            let mut cfg = map.clone();
            cfg.insert("max_depth".into(), spec.max_depth.to_string());
            cfg.insert("max_args".into(), spec.max_args.to_string());
            cfg.insert("max_length".into(), spec.max_length.to_string());
            cfg.insert("seed".into(), spec.seed.to_string());
            cfg.insert("n".into(), n.to_string());
            cfg.insert("val_n".into(), val_n.to_string());
            finish(&common.out, "gen-data", cfg, &[], outputs)?;
            Outcome::Ok
        }
        Command::Train { common, train: train_path, val, epochs } => {
            let map = effective_config(&common, vec![("epochs", epochs.map(|e| e.to_string()))], &[MODEL_KEYS, OPTIM_KEYS])?;
            let model = model_config(&map, ModelConfig::default())?;
            let optim = optim_config(&map)?;
            let opts = train_options(&map)?;
            let train_set = read_jsonl(&train_path, model.vocab_size, model.classes)?;
            let val_set = read_jsonl(&val, model.vocab_size, model.classes)?;
            let out = train::train(&model, &optim, &train_set, &val_set, &common.out, &opts, |r| {
                println!(
                    "epoch {:>3}  lr {:.3e}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
                    r.epoch, r.lr, r.train_loss, r.train_accuracy, r.val.loss, r.val.accuracy
                );
                Control::Continue
            })?;
            if let Some(best) = out.reports.iter().map(|r| r.val.accuracy).reduce(f64::max) {
                println!("best val accuracy {best:.4}");
            }
            let mut cfg = full_config(&map, &[model.entries(), optim.entries()]);
            cfg.insert("timing".into(), opts.timing.to_string());
            let outputs =
                [train::METRICS_FILE, train::BEST_CHECKPOINT, train::LAST_CHECKPOINT].map(String::from).to_vec();
            finish(&common.out, "train", cfg, &[&train_path, &val], outputs)?;
            Outcome::Ok
        }
        Command::Eval { common, checkpoint, data } => {
            let map = effective_config(&common, vec![], &[MODEL_KEYS])?;
            let expected = if map.keys().any(|k| k != "seed") {
                Some(model_config(&map, ModelConfig::default())?)
            } else {
                None
            };
            let report = train::evaluate_checkpoint(&checkpoint, &data, expected.as_ref(), train::worker_threads())?;
            println!("samples {}  loss {:.6}  accuracy {}", report.count, report.loss, report.accuracy);
            for (i, b) in report.buckets.iter().enumerate() {
                println!("  bucket {i}: len {}..={}  n {}  acc {:.4}", b.min_len, b.max_len, b.count, b.accuracy);
            }
            write_atomic(&common.out.join("eval.csv"), report.to_csv().as_bytes())?;
            finish(&common.out, "eval", map, &[&checkpoint, &data], vec!["eval.csv".into()])?;
            Outcome::Ok
        }
        Command::Ablate { common, train: train_path, val, epochs } => {
            let map = effective_config(&common, vec![("epochs", epochs.map(|e| e.to_string()))], &[MODEL_KEYS, OPTIM_KEYS])?;
            let base = model_config(&map, ModelConfig::default())?;
            let optim = optim_config(&map)?;
            let opts = train_options(&map)?;
            let train_set = read_jsonl(&train_path, base.vocab_size, base.classes)?;
            let val_set = read_jsonl(&val, base.vocab_size, base.classes)?;
            let grid = AblationGrid::default_grid();
            let rows = ablate::run_ablation(&grid, &base, &optim, &train_set, &val_set, &common.out, &opts, |r| {
                println!("{:<48} val acc {:.4}  params {}", r.variant.descriptor(), r.val_accuracy, r.params);
            })?;
            write_atomic(&common.out.join("ablation.csv"), ablate::to_csv(&rows).as_bytes())?;
            if let Some(best) = ablate::best(&rows) {
                println!("best variant: {} (val acc {:.4})", best.variant.descriptor(), best.val_accuracy);
            }
            let mut outputs = vec!["ablation.csv".to_string()];
            for i in 1..=grid.len() {
                for f in [train::METRICS_FILE, train::BEST_CHECKPOINT, train::LAST_CHECKPOINT] {
                    outputs.push(format!("variants/{i:02}/{f}"));
                }
            }
            let mut cfg = full_config(&map, &[base.entries(), optim.entries()]);
            cfg.insert("timing".into(), opts.timing.to_string());
            finish(&common.out, "ablate", cfg, &[&train_path, &val], outputs)?;
            Outcome::Ok
        }
        Command::Bench { common, lengths, naive_cap } => {
            let map = effective_config(
                &common,
                vec![("lengths", lengths), ("naive_cap", naive_cap.map(|c| c.to_string()))],
                &[MODEL_KEYS, BENCH_KEYS],
            )?;
            let defaults = BenchConfig::default();
            let config = BenchConfig {
                model: model_config(&map, defaults.model.clone())?,
                lengths: map.get("lengths").map_or(Ok(defaults.lengths.clone()), |l| parse_list("lengths", l))?,
                naive_cap: get(&map, "naive_cap", defaults.naive_cap)?,
                timing: get(&map, "timing", defaults.timing)?,
            };
            let rows = bench::run_bench(&config)?;
            let csv = bench::to_csv(&rows);
            print!("{csv}");
            for method in [bench::Method::Blrp, bench::Method::Naive] {
                for (n, ratio) in bench::growth_ratios(&rows, method) {
                    println!("{} peak ratio at {n}: {ratio:.3}", method.as_str());
                }
            }
            write_atomic(&common.out.join("bench.csv"), csv.as_bytes())?;
            let mut cfg = full_config(&map, &[config.model.entries()]);
            cfg.insert("lengths".into(), config.lengths.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
            cfg.insert("naive_cap".into(), config.naive_cap.to_string());
            cfg.insert("timing".into(), config.timing.to_string());
            finish(&common.out, "bench", cfg, &[], vec!["bench.csv".into()])?;
            Outcome::Ok
        }
        Command::Gradcheck { common, tolerance } => {
            let map = effective_config(
                &common,
                vec![("tolerance", tolerance.map(|t| t.to_string()))],
                &[MODEL_KEYS, GRADCHECK_KEYS],
            )?;
            let defaults = GradcheckConfig::default();
            let config = GradcheckConfig {
                model: model_config(&map, defaults.model.clone())?,
                length: get(&map, "length", defaults.length)?,
                label: get(&map, "label", defaults.label)?,
                step: get(&map, "step", defaults.step)?,
                tolerance: get(&map, "tolerance", defaults.tolerance)?,
            };
            let report = gradcheck::gradcheck(&config, None)?;
            let csv = report.to_csv();
            write_atomic(&common.out.join("gradcheck.csv"), csv.as_bytes())?;
            for p in report.params.iter().filter(|p| !p.passed) {
                println!("FAIL {} max relative error {:e}", p.name, p.max_rel_error);
            }
            println!(
                "gradcheck {}: {} parameter tensors, worst relative error {:e}, tolerance {:e}",
                if report.passed() { "passed" } else { "FAILED" },
                report.params.len(),
                report.worst(),
                report.tolerance
            );
            let mut cfg = full_config(&map, &[config.model.entries()]);
            cfg.insert("length".into(), config.length.to_string());
            cfg.insert("label".into(), config.label.to_string());
            cfg.insert("step".into(), config.step.to_string());
            cfg.insert("tolerance".into(), config.tolerance.to_string());
            finish(&common.out, "gradcheck", cfg, &[], vec!["gradcheck.csv".into()])?;
            if report.passed() {
                Outcome::Ok
            } else {
                Outcome::CheckFailed
            }
        }
    };
    println!("done in {:.2}s", started.elapsed().as_secs_f64());
    Ok(outcome)
}
