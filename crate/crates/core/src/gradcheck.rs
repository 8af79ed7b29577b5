//! Central-difference verification of the model's analytic gradients.

use std::fmt::Write as _;

use crate::autodiff::{AdjointFault, Tape};
use crate::config::{Direction, ModelConfig};
use crate::error::Result;
use crate::latent::{InitVariant, ProjectionSharing};
use crate::model::{seeded_rng, Model};
use crate::params::Init;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    /// Sequence length; with `t = 4` the default of 11 gives three segments,
    /// the last one padded.
    pub length: usize,
    pub label: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: toy_model_config(),
            length: 11,
            label: 3,
            step: 1e-3,
            tolerance: 1e-3,
        }
    }
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 17,
        d: 8,
        h_ff: 16,
        heads: 2,
        t: 4,
        l: 4,
        self_layers: 2,
        classes: 10,
        direction: Direction::Bidirectional,
        fwd_init: InitVariant::DynProjResidual,
        bwd_init: InitVariant::DynProjResidual,
        sharing: ProjectionSharing::SeparateWeights,
        seed: 5,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,scalars,max_rel_error,status\n");
        for p in &self.params {
            let status = if p.passed { "pass" } else { "fail" };
            writeln!(out, "{},{},{:e},{status}", p.name, p.scalars, p.max_rel_error).unwrap();
        }
        out
    }
}

/// Relative error of a whole parameter tensor: the largest elementwise
/// difference divided by the larger of the two gradients' max magnitudes.
/// A tensor whose gradients are both identically zero has error 0.
pub fn tensor_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Builds the checked model. The classifier's output layer starts at zero in
/// normal training, which would make every upstream gradient vanish, so it is
/// re-drawn here.
pub fn toy_model(config: &GradcheckConfig) -> Result<Model> {
    let mut model = Model::new(config.model.clone())?;
    let out = model.layout().head.out;
    let (rows, cols) = (model.params().get(out).rows(), model.params().get(out).cols());
    *model.params_mut().get_mut(out) = Init::new(config.model.seed ^ 0xabcd).xavier(rows, cols);
    Ok(model)
}

pub fn toy_tokens(config: &GradcheckConfig) -> Vec<usize> {
    let mut rng = seeded_rng(config.model.seed.wrapping_add(1));
    (0..config.length).map(|_| rng.gen_range(1..config.model.vocab_size)).collect()
}

/// Compares analytic and central-difference gradients for every parameter.
/// `fault` corrupts one backward rule to demonstrate that the check bites.
pub fn gradcheck(config: &GradcheckConfig, fault: Option<AdjointFault>) -> Result<GradcheckReport> {
    let model = toy_model(config)?;
    let tokens = toy_tokens(config);

    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let bound = model.bind(&mut tape);
    let (logits, _) = model.run(&mut tape, &bound, &tokens)?;
    let loss = tape.cross_entropy(logits, config.label)?;
    let analytic = tape.backward(loss)?.into_params();

    let loss_at = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let (logits, _) = m.run(&mut tape, &bound, &tokens)?;
        let loss = tape.cross_entropy(logits, config.label)?;
        Ok(tape.value(loss).item())
    };

    let mut probe = model.clone();
    let mut params = Vec::with_capacity(model.params().len());
    for (id, name, value) in model.params().iter() {
        let mut numeric = Vec::with_capacity(value.len());
        for k in 0..value.len() {
            let original = value.data()[k];
            probe.params_mut().get_mut(id).data_mut()[k] = original + config.step;
            let up = loss_at(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[k] = original - config.step;
            let down = loss_at(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[k] = original;
            numeric.push((up - down) / (2.0 * config.step));
        }
        let err = tensor_rel_error(analytic[&id].data(), &numeric);
        params.push(ParamCheck {
            name: name.to_string(),
            scalars: value.len(),
            max_rel_error: err,
            passed: err <= config.tolerance,
        });
    }
    Ok(GradcheckReport { tolerance: config.tolerance, params })
}
