//! End-to-end assembly: segmentation, local self-attention, the forward and
//! backward latent recurrences, and the classification head.
//!
//! With segments `X_1..X_T`, encoded segments `E_i = SELF(X_i)` and initial
//! latent states `I_f`, `I_b`, the forward pass computes
//!
//! ```text
//! i = 1:  F_1 = CX_f(E_1, I_f)           Lf_1 = CL_f(I_f, [F_1])
//! i > 1:  F_i = CX_f(E_i, Lf_{i-1})      Lf_i = CL_f(Lf_{i-1}, [F_i ; I_f*])
//! ```
//!
//! and the backward pass, iterating `i = T .. 1`,
//!
//! ```text
//! i = T:  B_T = CX_b(E_T, I_b)           Lb_T = CL_b(Lf_T, [F_T ; B_T])
//! i < T:  B_i = CX_b(E_i, Lb_{i+1})      Lb_i = CL_b(Lb_{i+1}, [F_i ; B_i ; I_b*])
//! ```
//!
//! Starred terms appear only for [`InitVariant::DynProjResidual`], which also
//! adds the initial state onto every latent state it produces. A backward-only
//! model drops the `F_i` keys and uses `I_b` as the query at `i = T`. The
//! sequence embedding is `Lb_1` (or `Lf_T` for a forward-only model).

use rand::SeedableRng;

use crate::attention::{theta_cross_l, theta_cross_x, theta_self, AttentionParams};
use crate::autodiff::{Tape, Var};
use crate::config::{Direction, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{make_l_init, InitVariant, LatentInitParams, LatentSource, ProjectionSharing};
use crate::mask::BoolMask;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Cross-attention parameters and latent initialization of one pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassParams {
    pub cross_x: AttentionParams,
    pub cross_l: AttentionParams,
    pub init: LatentInitParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub hidden: ParamId,
    pub hidden_bias: ParamId,
    pub out: ParamId,
    pub out_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub self_blocks: Vec<AttentionParams>,
    pub forward: Option<PassParams>,
    pub backward: Option<PassParams>,
    pub head: HeadParams,
}

/// Padded segments of one embedded input sequence.
#[derive(Clone, Debug)]
pub struct SegmentedSequence {
    /// `T` tensors of shape `t×d`.
    pub segments: Vec<Var>,
    /// Per segment, `true` for real tokens; padding is trailing in the last one.
    pub masks: Vec<Vec<bool>>,
    pub original_length: usize,
}

impl SegmentedSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn valid_flat(&self) -> Vec<bool> {
        self.masks.iter().flatten().copied().collect()
    }
}

/// States produced by one pass, indexed by segment (`0..T`).
#[derive(Clone, Debug, Default)]
pub struct PassTrace {
    pub x: Vec<Var>,
    pub latent: Vec<Var>,
    /// Rows in the key set of each latent update.
    pub key_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LatentTrace {
    pub l_init_f: Option<Var>,
    pub l_init_b: Option<Var>,
    pub forward: Option<PassTrace>,
    pub backward: Option<PassTrace>,
    pub l_final: Var,
}

/// Per-sample loss and gradients, indexed by [`ParamId`].
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let (d, h, heads) = (config.d, config.h_ff, config.heads);

        let token_embedding = store.add("embed.token", init.xavier(config.vocab_size, d));
        let position_embedding = store.add("embed.position", init.xavier(config.t, d));
        let self_blocks = (0..config.self_layers)
            .map(|i| AttentionParams::new(&mut store, &mut init, &format!("self.{i}"), d, h, heads, false))
            .collect::<Result<Vec<_>>>()?;

        let (fwd_source, bwd_source) = latent_sources(&config, &mut store, &mut init);
        let mut pass = |name: &str, variant: InitVariant, source: LatentSource| -> Result<PassParams> {
            Ok(PassParams {
                cross_x: AttentionParams::new(&mut store, &mut init, &format!("{name}.cross_x"), d, h, heads, true)?,
                cross_l: AttentionParams::new(&mut store, &mut init, &format!("{name}.cross_l"), d, h, heads, true)?,
                init: LatentInitParams { variant, source },
            })
        };
        let forward = match fwd_source {
            Some(src) => Some(pass("fwd", config.fwd_init, src)?),
            None => None,
        };
        let backward = match bwd_source {
            Some(src) => Some(pass("bwd", config.bwd_init, src)?),
            None => None,
        };

        let head = HeadParams {
            hidden: store.add("head.hidden", init.xavier(d, h)),
            hidden_bias: store.add("head.hidden_bias", Tensor::zeros(1, h)),
            // Zero output layer: fresh models emit uniform logits.
            out: store.add("head.out", Tensor::zeros(h, config.classes)),
            out_bias: store.add("head.out_bias", Tensor::zeros(1, config.classes)),
        };

        Ok(Self {
            config,
            store,
            layout: Layout { token_embedding, position_embedding, self_blocks, forward, backward, head },
        })
    }

    /// Rebuilds a model around stored parameter values (e.g. from a checkpoint).
    pub fn with_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for ((_, name, value), (_, got_name, got)) in fresh.store.iter().zip(store.iter()) {
            if name != got_name || value.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {:?} does not match `{name}` {:?}",
                    got.shape(),
                    value.shape()
                )));
            }
        }
        Ok(Self { store, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }

    /// Embeds `tokens`, adds within-segment positions and splits into
    /// `ceil(N/t)` segments; padding rows are exactly zero.
    pub fn segment(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<SegmentedSequence> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let vocab_size = self.config.vocab_size;
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &id)| id >= vocab_size) {
            return Err(Error::Vocabulary { id, position, vocab_size });
        }
        let t = self.config.t;
        let mut segments = Vec::new();
        let mut masks = Vec::new();
        for chunk in tokens.chunks(t) {
            let ids: Vec<Option<usize>> = (0..t).map(|j| chunk.get(j).copied()).collect();
            let positions: Vec<Option<usize>> = (0..t).map(|j| (j < chunk.len()).then_some(j)).collect();
            let tok = tape.gather_rows(bound[self.layout.token_embedding], &ids)?;
            let pos = tape.gather_rows(bound[self.layout.position_embedding], &positions)?;
            segments.push(tape.add(tok, pos)?);
            masks.push(ids.iter().map(Option::is_some).collect());
        }
        Ok(SegmentedSequence { segments, masks, original_length: tokens.len() })
    }

    /// Local self-attention stack applied to every segment.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, seq: &SegmentedSequence) -> Result<Vec<Var>> {
        let t = self.config.t;
        seq.segments
            .iter()
            .zip(&seq.masks)
            .map(|(&x, valid)| {
                let mask = BoolMask::keys(t, valid.clone());
                self.layout
                    .self_blocks
                    .iter()
                    .try_fold(x, |h, blk| theta_self(tape, bound, blk, h, &mask))
            })
            .collect()
    }

    /// Initial latent states `(forward, backward)` for the enabled passes.
    pub fn latent_inits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &SegmentedSequence,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let needs_x = [&self.layout.forward, &self.layout.backward]
            .iter()
            .any(|p| p.as_ref().is_some_and(|p| matches!(p.init.source, LatentSource::Projection(_))));
        let (x, valid) = if needs_x {
            (tape.concat_rows(&seq.segments)?, seq.valid_flat())
        } else {
            (seq.segments[0], seq.masks[0].clone())
        };
        let l = self.config.l;
        let fwd = match &self.layout.forward {
            Some(p) => Some(make_l_init(tape, bound, x, &valid, Some(&p.init), l)?),
            None => None,
        };
        let bwd = match &self.layout.backward {
            Some(p) => {
                let shared = self.config.sharing == ProjectionSharing::SharedSingle
                    && self.layout.forward.as_ref().is_some_and(|f| f.init.source == p.init.source)
                    && matches!(p.init.source, LatentSource::Projection(_));
                match (shared, fwd) {
                    (true, Some(f)) => Some(f),
                    _ => Some(make_l_init(tape, bound, x, &valid, Some(&p.init), l)?),
                }
            }
            None => None,
        };
        Ok((fwd, bwd))
    }

    fn all_valid(&self) -> Vec<bool> {
        vec![true; self.config.l]
    }

    pub fn forward_pass(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &SegmentedSequence,
        encoded: &[Var],
        l_init: Var,
    ) -> Result<PassTrace> {
        let p = self
            .layout
            .forward
            .as_ref()
            .ok_or_else(|| Error::Config("forward pass is disabled".into()))?;
        let residual = p.init.variant.is_residual();
        let latent_valid = self.all_valid();
        let mut trace = PassTrace::default();
        for (i, (&enc, seg_valid)) in encoded.iter().zip(&seq.masks).enumerate() {
            let prev = if i == 0 { l_init } else { trace.latent[i - 1] };
            let x = theta_cross_x(tape, bound, &p.cross_x, enc, prev, &latent_valid)?;
            let mut keys = vec![x];
            let mut valid = seg_valid.clone();
            if i > 0 && residual {
                keys.push(l_init);
                valid.extend_from_slice(&latent_valid);
            }
            let kv = tape.concat_rows(&keys)?;
            let mut latent = theta_cross_l(tape, bound, &p.cross_l, prev, kv, &valid)?;
            if residual {
                latent = tape.add(latent, l_init)?;
            }
            trace.x.push(x);
            trace.latent.push(latent);
            trace.key_rows.push(valid.len());
        }
        Ok(trace)
    }

    pub fn backward_pass(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &SegmentedSequence,
        encoded: &[Var],
        l_init: Var,
        forward: Option<&PassTrace>,
    ) -> Result<PassTrace> {
        let p = self
            .layout
            .backward
            .as_ref()
            .ok_or_else(|| Error::Config("backward pass is disabled".into()))?;
        let segments = encoded.len();
        let forward = match (self.config.direction, forward) {
            (Direction::Bidirectional, None) => {
                return Err(Error::Sequencing("bidirectional backward pass needs the forward trace".into()))
            }
            (Direction::Bidirectional, Some(f)) if f.x.len() != segments || f.latent.len() != segments => {
                return Err(Error::Sequencing(format!(
                    "forward trace has {} states for {segments} segments",
                    f.latent.len()
                )))
            }
            (Direction::Bidirectional, f) => f,
            _ => None,
        };
        let residual = p.init.variant.is_residual();
        let latent_valid = self.all_valid();
        let mut x_states = vec![None; segments];
        let mut latents: Vec<Option<Var>> = vec![None; segments];
        let mut key_rows = vec![0; segments];
        for i in (0..segments).rev() {
            let last = i + 1 == segments;
            let prev = if last { l_init } else { latents[i + 1].expect("later state computed") };
            let x = theta_cross_x(tape, bound, &p.cross_x, encoded[i], prev, &latent_valid)?;
            let mut keys = Vec::with_capacity(3);
            let mut valid = Vec::new();
            if let Some(f) = forward {
                keys.push(f.x[i]);
                valid.extend_from_slice(&seq.masks[i]);
            }
            keys.push(x);
            valid.extend_from_slice(&seq.masks[i]);
            if !last && residual {
                keys.push(l_init);
                valid.extend_from_slice(&latent_valid);
            }
            let query = match (last, forward) {
                (true, Some(f)) => f.latent[segments - 1],
                (true, None) => l_init,
                (false, _) => prev,
            };
            let kv = tape.concat_rows(&keys)?;
            let mut latent = theta_cross_l(tape, bound, &p.cross_l, query, kv, &valid)?;
            if residual {
                latent = tape.add(latent, l_init)?;
            }
            x_states[i] = Some(x);
            latents[i] = Some(latent);
            key_rows[i] = valid.len();
        }
        Ok(PassTrace {
            x: x_states.into_iter().map(|v| v.expect("state")).collect(),
            latent: latents.into_iter().map(|v| v.expect("state")).collect(),
            key_rows,
        })
    }

    /// Mean over latent rows, then `d → h_ff → classes` with GELU.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, l_final: Var) -> Result<Var> {
        let h = &self.layout.head;
        let pooled = tape.mean_rows(l_final)?;
        let hidden = tape.matmul(pooled, bound[h.hidden])?;
        let hidden = tape.add_row(hidden, bound[h.hidden_bias])?;
        let hidden = tape.gelu(hidden);
        let logits = tape.matmul(hidden, bound[h.out])?;
        tape.add_row(logits, bound[h.out_bias])
    }

    /// Runs everything after segmentation.
    pub fn run_segments(&self, tape: &mut Tape, bound: &Bound, seq: &SegmentedSequence) -> Result<(Var, LatentTrace)> {
        let encoded = self.encode(tape, bound, seq)?;
        let (l_init_f, l_init_b) = self.latent_inits(tape, bound, seq)?;
        let forward = match l_init_f {
            Some(init) => Some(self.forward_pass(tape, bound, seq, &encoded, init)?),
            None => None,
        };
        let backward = match l_init_b {
            Some(init) => Some(self.backward_pass(tape, bound, seq, &encoded, init, forward.as_ref())?),
            None => None,
        };
        let l_final = match (&forward, &backward) {
            (_, Some(b)) => b.latent[0],
            (Some(f), None) => *f.latent.last().expect("at least one segment"),
            (None, None) => unreachable!("config validation guarantees one direction"),
        };
        let logits = self.classify(tape, bound, l_final)?;
        Ok((logits, LatentTrace { l_init_f, l_init_b, forward, backward, l_final }))
    }

    pub fn run(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<(Var, LatentTrace)> {
        let seq = self.segment(tape, bound, tokens)?;
        self.run_segments(tape, bound, &seq)
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (logits, _) = self.run(&mut tape, &bound, tokens)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn loss_and_grad(&self, tokens: &[usize], label: usize) -> Result<SampleGrad> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (logits, _) = self.run(&mut tape, &bound, tokens)?;
        let loss = tape.cross_entropy(logits, label)?;
        let grads = tape.backward(loss)?;
        let logit_values = tape.value(logits).data().to_vec();
        let loss_value = tape.value(loss).item();
        let grads = grads.into_params().into_values().collect::<Vec<_>>();
        debug_assert_eq!(grads.len(), self.store.len());
        Ok(SampleGrad { loss: loss_value, logits: logit_values, grads })
    }

    /// Reference classifier with full `N×N` self-attention over the whole
    /// sequence, sharing this model's embeddings, self blocks and head.
    pub fn naive_full_attention(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let ids: Vec<Option<usize>> = tokens.iter().map(|&id| Some(id)).collect();
        let positions: Vec<Option<usize>> = (0..tokens.len()).map(|j| Some(j % self.config.t)).collect();
        let tok = tape.gather_rows(bound[self.layout.token_embedding], &ids)?;
        let pos = tape.gather_rows(bound[self.layout.position_embedding], &positions)?;
        let mut h = tape.add(tok, pos)?;
        let mask = BoolMask::all(tokens.len(), tokens.len());
        for blk in &self.layout.self_blocks {
            h = theta_self(tape, bound, blk, h, &mask)?;
        }
        self.classify(tape, bound, h)
    }
}

/// Declares latent-initialization parameters and returns each enabled pass's
/// source. Projection weights are shared when both passes project and the
/// sharing mode is not `SeparateWeights`.
fn latent_sources(
    config: &ModelConfig,
    store: &mut ParamStore,
    init: &mut Init,
) -> (Option<LatentSource>, Option<LatentSource>) {
    let (d, l) = (config.d, config.l);
    let fwd_on = config.direction.has_forward();
    let bwd_on = config.direction.has_backward();
    let both_project = fwd_on
        && bwd_on
        && config.fwd_init.uses_projection()
        && config.bwd_init.uses_projection()
        && config.sharing != ProjectionSharing::SeparateWeights;
    let shared = both_project.then(|| store.add("latent.phi", init.xavier(d, l)));

    let mut source = |on: bool, variant: InitVariant, name: &str| -> Option<LatentSource> {
        if !on {
            return None;
        }
        Some(match variant {
            InitVariant::Blank => LatentSource::Blank,
            InitVariant::PosEmb1D => LatentSource::Table(store.add(format!("latent.{name}.table"), init.xavier(l, d))),
            InitVariant::DynProjInitOnly | InitVariant::DynProjResidual => match shared {
                Some(id) => LatentSource::Projection(id),
                None => LatentSource::Projection(store.add(format!("latent.{name}.phi"), init.xavier(d, l))),
            },
        })
    };
    let fwd = source(fwd_on, config.fwd_init, "fwd");
    let bwd = source(bwd_on, config.bwd_init, "bwd");
    (fwd, bwd)
}

/// Closed-form scalar parameter count:
///
/// ```text
/// P = V·d + t·d + self_layers·S + Σ_passes (2·C + I_pass) + Φ + (d·h + h + h·c + c)
/// S = 4d² + 2d·h + h + 5d          (self block: 2 layer norms)
/// C = 4d² + 2d·h + h + 7d          (cross block: 3 layer norms)
/// I_pass = l·d for a positional table, 0 otherwise
/// Φ = d·l per distinct projection basis (one when shared or Siamese, else one per projecting pass)
/// ```
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, d, h, t, l, c) = (config.vocab_size, config.d, config.h_ff, config.t, config.l, config.classes);
    let self_block = 4 * d * d + 2 * d * h + h + 5 * d;
    let cross_block = 4 * d * d + 2 * d * h + h + 7 * d;
    let mut total = v * d + t * d + config.self_layers * self_block + d * h + h + h * c + c;

    let passes: Vec<InitVariant> = [
        (config.direction.has_forward(), config.fwd_init),
        (config.direction.has_backward(), config.bwd_init),
    ]
    .into_iter()
    .filter_map(|(on, v)| on.then_some(v))
    .collect();
    for variant in &passes {
        total += 2 * cross_block;
        if *variant == InitVariant::PosEmb1D {
            total += l * d;
        }
    }
    let projecting = passes.iter().filter(|v| v.uses_projection()).count();
    let bases = match (projecting, config.sharing) {
        (2, ProjectionSharing::SeparateWeights) => 2,
        (0, _) => 0,
        _ => 1,
    };
    total + bases * d * l
}

/// Deterministic RNG for anything derived from a seed outside parameter init.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(direction: Direction, fwd: InitVariant, bwd: InitVariant, sharing: ProjectionSharing) -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d: 8,
            h_ff: 16,
            heads: 2,
            t: 4,
            l: 4,
            self_layers: 2,
            classes: 10,
            direction,
            fwd_init: fwd,
            bwd_init: bwd,
            sharing,
            seed: 11,
        }
    }

    fn default_toy() -> ModelConfig {
        toy(
            Direction::Bidirectional,
            InitVariant::DynProjResidual,
            InitVariant::DynProjResidual,
            ProjectionSharing::SeparateWeights,
        )
    }

    #[test]
    fn segmentation_counts() {
        let mut cfg = default_toy();
        cfg.t = 100;
        cfg.l = 100;
        let model = Model::new(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let seq = model.segment(&mut tape, &bound, &vec![3; 250]).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.masks[2].iter().filter(|&&b| b).count(), 50);
        assert!(seq.masks[2][..50].iter().all(|&b| b));
        let seq = model.segment(&mut tape, &bound, &vec![3; 100]).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.masks[0].iter().all(|&b| b));
    }

    #[test]
    fn segmentation_rejects_out_of_vocab() {
        let model = Model::new(default_toy()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let err = model.segment(&mut tape, &bound, &[1, 2, 17]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 17, position: 2, vocab_size: 17 }));
    }

    #[test]
    fn padding_rows_are_zero() {
        let model = Model::new(default_toy()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let seq = model.segment(&mut tape, &bound, &[1, 2, 3, 4, 5]).unwrap();
        let last = tape.value(seq.segments[1]);
        assert!(last.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_store_for_all_variants() {
        for direction in [Direction::Forward, Direction::Backward, Direction::Bidirectional] {
            for fwd in InitVariant::ALL {
                for bwd in InitVariant::ALL {
                    for sharing in ProjectionSharing::ALL {
                        let cfg = toy(direction, fwd, bwd, sharing);
                        let model = Model::new(cfg.clone()).unwrap();
                        assert_eq!(model.params().scalar_count(), param_count(&cfg), "{cfg:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn bidirectional_backward_needs_forward_trace() {
        let model = Model::new(default_toy()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let seq = model.segment(&mut tape, &bound, &[1, 2, 3, 4, 5]).unwrap();
        let enc = model.encode(&mut tape, &bound, &seq).unwrap();
        let (_, b) = model.latent_inits(&mut tape, &bound, &seq).unwrap();
        let err = model.backward_pass(&mut tape, &bound, &seq, &enc, b.unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::Sequencing(_)));
    }

    #[test]
    fn final_latent_is_first_backward_state() {
        let model = Model::new(default_toy()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (_, trace) = model.run(&mut tape, &bound, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]).unwrap();
        let b = trace.backward.as_ref().unwrap();
        assert_eq!(trace.forward.as_ref().unwrap().latent.len(), 3);
        assert_eq!(b.latent.len(), 3);
        assert_eq!(trace.l_final, b.latent[0]);
    }

    #[test]
    fn shared_single_reuses_the_same_tensor() {
        let cfg = toy(
            Direction::Bidirectional,
            InitVariant::DynProjResidual,
            InitVariant::DynProjResidual,
            ProjectionSharing::SharedSingle,
        );
        let model = Model::new(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (_, trace) = model.run(&mut tape, &bound, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(trace.l_init_f, trace.l_init_b);
    }
}
