//! Initial latent state: learned positional table, or a dynamic projection of
//! the whole input sequence onto `l` learned basis directions.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::BoolMask;
use crate::params::{Bound, ParamId};
use crate::tensor::Tensor;

/// How a pass obtains (and keeps using) its initial latent state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitVariant {
    /// No initialization signal: the latent block starts at zero.
    Blank,
    /// Learned `l×d` table, independent of the input.
    PosEmb1D,
    /// Dynamic projection, used only as the initial state.
    DynProjInitOnly,
    /// Dynamic projection used as the initial state, as an extra key block in
    /// every later latent update, and as a residual on every latent state.
    DynProjResidual,
}

impl InitVariant {
    pub const ALL: [InitVariant; 4] =
        [InitVariant::Blank, InitVariant::PosEmb1D, InitVariant::DynProjInitOnly, InitVariant::DynProjResidual];

    pub fn uses_projection(self) -> bool {
        matches!(self, InitVariant::DynProjInitOnly | InitVariant::DynProjResidual)
    }

    /// Whether the initial state is re-injected after the first step.
    pub fn is_residual(self) -> bool {
        self == InitVariant::DynProjResidual
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitVariant::Blank => "none",
            InitVariant::PosEmb1D => "posemb1d",
            InitVariant::DynProjInitOnly => "dynproj-init",
            InitVariant::DynProjResidual => "dynproj",
        }
    }
}

impl fmt::Display for InitVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown latent init `{s}`")))
    }
}

/// How the two passes share the dynamic projection when both use one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProjectionSharing {
    /// One projection evaluated once; both passes start from the same tensor.
    SharedSingle,
    /// One set of weights evaluated separately for each pass.
    SiameseSharedWeights,
    /// Independent weights per pass.
    SeparateWeights,
}

impl ProjectionSharing {
    pub const ALL: [ProjectionSharing; 3] = [
        ProjectionSharing::SharedSingle,
        ProjectionSharing::SiameseSharedWeights,
        ProjectionSharing::SeparateWeights,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionSharing::SharedSingle => "shared",
            ProjectionSharing::SiameseSharedWeights => "siamese",
            ProjectionSharing::SeparateWeights => "separate",
        }
    }
}

impl fmt::Display for ProjectionSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectionSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProjectionSharing::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection sharing `{s}`")))
    }
}

/// Where one pass's initial latent state comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Blank,
    Table(ParamId),
    /// Basis `w_p` of shape `d×l`.
    Projection(ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentInitParams {
    pub variant: InitVariant,
    pub source: LatentSource,
}

/// Dynamic projection of `x` (`N×d`) to `l×d`.
///
/// Scores `x·w_p` are normalized over the valid token positions separately for
/// each of the `l` basis columns, so every output row is a convex combination
/// of valid token rows.
pub fn phi(tape: &mut Tape, x: Var, w_p: Var, valid: &[bool]) -> Result<Var> {
    let n = tape.value(x).rows();
    if valid.len() != n {
        return Err(Error::Dimension { op: "phi", lhs: vec![n], rhs: vec![valid.len()] });
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptySequence);
    }
    let scores = tape.matmul(x, w_p)?;
    let scores_t = tape.transpose(scores)?;
    let l = tape.value(scores_t).rows();
    let weights = tape.softmax_rows(scores_t, Some(&BoolMask::keys(l, valid.to_vec())))?;
    tape.matmul(weights, x)
}

/// Initial latent state of one pass. `params = None` means the pass is
/// disabled in the current configuration.
pub fn make_l_init(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    valid: &[bool],
    params: Option<&LatentInitParams>,
    latent_size: usize,
) -> Result<Var> {
    let params = params.ok_or_else(|| Error::Config("latent init requested for a disabled direction".into()))?;
    match params.source {
        LatentSource::Blank => {
            let d = tape.value(x).cols();
            Ok(tape.constant(Tensor::zeros(latent_size, d)))
        }
        LatentSource::Table(id) => Ok(bound[id]),
        LatentSource::Projection(id) => phi(tape, x, bound[id], valid),
    }
}
