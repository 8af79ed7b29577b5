//! The ablation grid: latent-initialization and direction variants trained
//! one after another on identical data and seeds.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use crate::config::{Direction, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{InitVariant, ProjectionSharing};
use crate::model::param_count;
use crate::tasks::TaskSample;
use crate::train::{train, Control, OptimConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    /// Which study the row belongs to: `flow` (direction and initialization)
    /// or `projection` (how the dynamic projection is shared).
    pub study: &'static str,
    pub row: usize,
    pub direction: Direction,
    pub fwd_init: Option<InitVariant>,
    pub bwd_init: Option<InitVariant>,
    pub sharing: ProjectionSharing,
}

fn init_label(v: Option<InitVariant>) -> &'static str {
    v.map_or("-", InitVariant::as_str)
}

impl Variant {
    pub fn descriptor(&self) -> String {
        self.to_string()
    }

    /// `base` with this variant's direction, initializations and sharing.
    /// An absent pass keeps the base value, which the model ignores.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            direction: self.direction,
            fwd_init: self.fwd_init.unwrap_or(base.fwd_init),
            bwd_init: self.bwd_init.unwrap_or(base.bwd_init),
            sharing: self.sharing,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{:02}:{}:{}:{}:{}",
            self.study,
            self.row,
            self.direction.as_str(),
            init_label(self.fwd_init),
            init_label(self.bwd_init),
            self.sharing.as_str()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationGrid {
    variants: Vec<Variant>,
}

impl AblationGrid {
    pub fn new(variants: Vec<Variant>) -> Result<Self> {
        if variants.is_empty() {
            return Err(Error::Grid("ablation grid is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &variants {
            if v.direction.has_forward() != v.fwd_init.is_some() || v.direction.has_backward() != v.bwd_init.is_some() {
                return Err(Error::Grid(format!("{v}: initializations must be given exactly for the enabled passes")));
            }
            if !seen.insert(v.descriptor()) {
                return Err(Error::Grid(format!("duplicate variant descriptor `{v}`")));
            }
        }
        Ok(Self { variants })
    }

    /// Seventeen rows. The `flow` study is a forward-only blank-latent
    /// baseline, then forward-only, backward-only and bidirectional variants
    /// over positional-table and projection initializations (separate
    /// projection weights). The `projection` study compares the three sharing
    /// modes for bidirectional residual projection.
    pub fn default_grid() -> Self {
        use InitVariant::{Blank, DynProjInitOnly as I, DynProjResidual as R, PosEmb1D as P};
        let sep = ProjectionSharing::SeparateWeights;
        let mut variants = Vec::with_capacity(17);
        let mut flow = |direction, fwd, bwd, sharing| {
            let row = variants.len() + 1;
            variants.push(Variant { study: "flow", row, direction, fwd_init: fwd, bwd_init: bwd, sharing });
        };
        flow(Direction::Forward, Some(Blank), None, sep);
        for v in [P, I, R] {
            flow(Direction::Forward, Some(v), None, sep);
        }
        for v in [P, I, R] {
            flow(Direction::Backward, None, Some(v), sep);
        }
        for (f, b) in [(P, P), (P, I), (I, P), (I, I), (P, R), (R, P), (R, R)] {
            flow(Direction::Bidirectional, Some(f), Some(b), sep);
        }
        for (row, sharing) in [ProjectionSharing::SharedSingle, ProjectionSharing::SiameseSharedWeights, sep]
            .into_iter()
            .enumerate()
        {
            variants.push(Variant {
                study: "projection",
                row: row + 1,
                direction: Direction::Bidirectional,
                fwd_init: Some(R),
                bwd_init: Some(R),
                sharing,
            });
        }
        Self::new(variants).expect("default grid is valid")
    }

    pub fn variants(&self) -> &[Variant] {
        &self.variants
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub val_accuracy: f64,
    pub params: usize,
    pub seconds: f64,
}

pub const RESULTS_HEADER: &str = "variant,direction,fwd_init,bwd_init,sharing,val_accuracy,params,seconds";

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let v = &r.variant;
        writeln!(
            out,
            "{v},{},{},{},{},{},{},{}",
            v.direction.as_str(),
            init_label(v.fwd_init),
            init_label(v.bwd_init),
            v.sharing.as_str(),
            r.val_accuracy,
            r.params,
            r.seconds
        )
        .unwrap();
    }
    out
}

/// Highest validation accuracy; the earliest row wins ties.
pub fn best(rows: &[AblationRow]) -> Option<&AblationRow> {
    rows.iter().fold(None, |acc: Option<&AblationRow>, r| match acc {
        Some(b) if b.val_accuracy >= r.val_accuracy => Some(b),
        _ => Some(r),
    })
}

/// Trains every variant from the same seed on the same data. Each variant's
/// training artifacts go to `out_dir/variants/<descriptor index>`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    grid: &AblationGrid,
    base: &ModelConfig,
    optim: &OptimConfig,
    train_set: &[TaskSample],
    val_set: &[TaskSample],
    out_dir: &Path,
    opts: &TrainOptions,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for (i, variant) in grid.variants().iter().enumerate() {
        let config = variant.apply(base);
        let started = Instant::now();
        let dir = out_dir.join("variants").join(format!("{:02}", i + 1));
        let out = train(&config, optim, train_set, val_set, &dir, opts, |_| Control::Continue)?;
        let val_accuracy = out.reports.last().map_or(0.0, |r| r.val.accuracy);
        let row = AblationRow {
            variant: variant.clone(),
            val_accuracy,
            params: param_count(&config),
            seconds: if opts.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_seventeen_distinct_rows() {
        let grid = AblationGrid::default_grid();
        assert_eq!(grid.len(), 17);
        let descriptors: BTreeSet<String> = grid.variants().iter().map(Variant::descriptor).collect();
        assert_eq!(descriptors.len(), 17);
        assert_eq!(grid.variants().iter().filter(|v| v.study == "flow").count(), 14);
    }

    #[test]
    fn duplicate_descriptor_is_a_grid_error() {
        let v = AblationGrid::default_grid().variants()[3].clone();
        assert!(matches!(AblationGrid::new(vec![v.clone(), v]), Err(Error::Grid(_))));
    }

    #[test]
    fn inits_must_match_enabled_passes() {
        let mut v = AblationGrid::default_grid().variants()[1].clone();
        v.bwd_init = Some(InitVariant::PosEmb1D);
        assert!(matches!(AblationGrid::new(vec![v]), Err(Error::Grid(_))));
    }

    #[test]
    fn forward_rows_have_no_backward_parameters() {
        let base = ModelConfig::default();
        for v in AblationGrid::default_grid().variants().iter().filter(|v| v.direction == Direction::Forward) {
            let fwd = v.apply(&base);
            let bidir = ModelConfig {
                direction: Direction::Bidirectional,
                bwd_init: InitVariant::Blank,
                ..fwd.clone()
            };
            // A bidirectional model with a blank backward latent adds exactly
            // the backward cross blocks.
            let d = base.d;
            let h = base.h_ff;
            let cross = 4 * d * d + 2 * d * h + h + 7 * d;
            assert_eq!(param_count(&bidir) - param_count(&fwd), 2 * cross, "{v}");
        }
    }

    #[test]
    fn best_prefers_earliest_on_ties() {
        let grid = AblationGrid::default_grid();
        let rows: Vec<AblationRow> = grid
            .variants()
            .iter()
            .zip([0.2, 0.5, 0.5, 0.1])
            .map(|(v, a)| AblationRow { variant: v.clone(), val_accuracy: a, params: 0, seconds: 0.0 })
            .collect();
        assert_eq!(best(&rows).unwrap().variant.row, 2);
    }
}
