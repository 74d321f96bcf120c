//! Two-stage fine-tuning: train only the head with the body frozen, then
//! unfreeze everything with per-group learning-rate multipliers under a
//! cyclical schedule.

use std::collections::BTreeSet;

use super::{train_with_validation, History, LRSchedule, LrGroup, ModelGraph, TrainConfig};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    /// Layers `head_start..` form the head trained in stage one.
    pub head_start: usize,
    pub head_epochs: usize,
    pub head_lr: f32,
    pub fine_epochs: usize,
    pub base_lr: f32,
    pub max_lr: f32,
    pub step_size: usize,
    /// Multipliers for evenly sized layer groups, lowest layers first.
    pub group_multipliers: Vec<f32>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            head_start: 0,
            head_epochs: 5,
            head_lr: 1e-3,
            fine_epochs: 10,
            base_lr: 1e-4,
            max_lr: 1e-3,
            step_size: 20,
            group_multipliers: vec![0.1, 0.3, 1.0],
        }
    }
}

/// Splits `0..layers` into `groups.len()` contiguous ranges.
pub fn even_groups(layers: usize, multipliers: &[f32]) -> Vec<LrGroup> {
    let n = multipliers.len().max(1);
    multipliers
        .iter()
        .enumerate()
        .map(|(g, &multiplier)| LrGroup { layers: (g * layers / n)..((g + 1) * layers / n), multiplier })
        .collect()
}

/// Runs both stages; returns the final model and both histories.
pub fn fine_tune(
    model: &ModelGraph,
    train: &LabeledImageSet,
    validation: Option<&LabeledImageSet>,
    ft: &FineTuneConfig,
    base: &TrainConfig,
) -> Result<(ModelGraph, History, History)> {
    let n = model.layers().len();
    if ft.head_start >= n {
        return Err(Error::contract(format!("head starts at layer {} of {n}", ft.head_start)));
    }
    let stage_one = TrainConfig {
        freeze: (0..ft.head_start).collect::<BTreeSet<_>>(),
        lr_groups: Vec::new(),
        schedule: LRSchedule::Constant { lr: ft.head_lr },
        epochs: ft.head_epochs,
        ..base.clone()
    };
    let (model, first) = train_with_validation(model, train, validation, &stage_one)?;
    let stage_two = TrainConfig {
        freeze: BTreeSet::new(),
        lr_groups: even_groups(n, &ft.group_multipliers),
        schedule: LRSchedule::Cyclical { base_lr: ft.base_lr, max_lr: ft.max_lr, step_size: ft.step_size },
        epochs: ft.fine_epochs,
        seed: base.seed.wrapping_add(1),
        ..base.clone()
    };
    let (model, second) = train_with_validation(&model, train, validation, &stage_two)?;
    Ok((model, first, second))
}
