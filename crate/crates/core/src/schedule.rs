//! Multi-stage distillation schedule, per-stage learning-rate schedule, and
//! training-budget presets.
//!
//! The stage machine flips the (gamma, beta) loss weights at fixed fractions
//! of the total step budget: one-stage keeps (1,1) throughout; two-stage runs
//! (0,1) for the first half then (1,0); three-stage inserts a (1,1)
//! transition third in between. Boundaries are half-open `[start, end)` with
//! floored integer division. Within every stage the learning rate ramps
//! linearly from zero to the stage peak over the first 10% of the stage and
//! then decays linearly to zero; stage I of a multi-stage schedule runs at a
//! 2.5x higher peak.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KDScheduleKind {
    OneStage,
    TwoStage,
    ThreeStage,
}

impl KDScheduleKind {
    pub fn num_stages(&self) -> usize {
        match self {
            KDScheduleKind::OneStage => 1,
            KDScheduleKind::TwoStage => 2,
            KDScheduleKind::ThreeStage => 3,
        }
    }

    /// Half-open `[start, end)` step ranges of each stage.
    pub fn stage_bounds(&self, total_steps: usize) -> Vec<(usize, usize)> {
        let t = total_steps;
        match self {
            KDScheduleKind::OneStage => vec![(0, t)],
            KDScheduleKind::TwoStage => vec![(0, t / 2), (t / 2, t)],
            KDScheduleKind::ThreeStage => {
                vec![(0, t / 3), (t / 3, 2 * t / 3), (2 * t / 3, t)]
            }
        }
    }
}

impl FromStr for KDScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_stage" | "one-stage" | "1s" => Ok(KDScheduleKind::OneStage),
            "two_stage" | "two-stage" | "2s" => Ok(KDScheduleKind::TwoStage),
            "three_stage" | "three-stage" | "3s" => Ok(KDScheduleKind::ThreeStage),
            other => Err(Error::config(format!("unknown KD schedule kind: {other}"))),
        }
    }
}

/// Loss weights and stage index at one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePoint {
    pub gamma: f32,
    pub beta: f32,
    pub stage: usize,
}

/// (gamma, beta, stage) at step `t` of `total_steps`.
pub fn stage_at(t: usize, total_steps: usize, kind: KDScheduleKind) -> Result<StagePoint> {
    if t >= total_steps {
        return Err(Error::range(format!(
            "step {t} outside schedule of {total_steps} steps"
        )));
    }
    let point = match kind {
        KDScheduleKind::OneStage => StagePoint {
            gamma: 1.0,
            beta: 1.0,
            stage: 0,
        },
        KDScheduleKind::TwoStage => {
            if t < total_steps / 2 {
                StagePoint {
                    gamma: 0.0,
                    beta: 1.0,
                    stage: 0,
                }
            } else {
                StagePoint {
                    gamma: 1.0,
                    beta: 0.0,
                    stage: 1,
                }
            }
        }
        KDScheduleKind::ThreeStage => {
            if t < total_steps / 3 {
                StagePoint {
                    gamma: 0.0,
                    beta: 1.0,
                    stage: 0,
                }
            } else if t < 2 * total_steps / 3 {
                StagePoint {
                    gamma: 1.0,
                    beta: 1.0,
                    stage: 1,
                }
            } else {
                StagePoint {
                    gamma: 1.0,
                    beta: 0.0,
                    stage: 2,
                }
            }
        }
    };
    Ok(point)
}

/// Per-stage linear warmup/decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub peak_lr: f32,
    pub total_steps: usize,
    pub kind: KDScheduleKind,
    pub warmup_fraction: f64,
    pub stage_i_multiplier: f32,
}

impl LRSchedule {
    pub fn new(peak_lr: f32, total_steps: usize, kind: KDScheduleKind) -> Self {
        LRSchedule {
            peak_lr,
            total_steps,
            kind,
            warmup_fraction: 0.10,
            stage_i_multiplier: 2.5,
        }
    }

    /// Learning rate at step `t`. Rises from 0 to the stage peak over the
    /// first 10% of the stage's steps (at least one step), then decays
    /// linearly to 0 at the stage end.
    pub fn lr_at(&self, t: usize) -> Result<f32> {
        if t >= self.total_steps {
            return Err(Error::range(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let bounds = self.kind.stage_bounds(self.total_steps);
        let (idx, &(start, end)) = bounds
            .iter()
            .enumerate()
            .find(|(_, (s, e))| t >= *s && t < *e)
            .expect("t < total_steps implies some stage contains it");
        let stage_peak = if self.kind != KDScheduleKind::OneStage && idx == 0 {
            self.stage_i_multiplier * self.peak_lr
        } else {
            self.peak_lr
        };
        let n = end - start;
        let local = t - start;
        let warmup = ((self.warmup_fraction * n as f64).floor() as usize).max(1);
        let lr = if local <= warmup {
            stage_peak * (local as f32 / warmup as f32)
        } else {
            stage_peak * ((n - local) as f32 / (n - warmup) as f32)
        };
        Ok(lr)
    }
}

/// Peak learning rates searched by the grid, before any toy-model scaling.
pub const DEFAULT_LR_GRID: [f32; 3] = [2e-5, 1e-4, 5e-4];

/// The default grid multiplied by a factor (toy models train at larger
/// rates than the full-size setups the grid was written for).
pub fn scaled_lr_grid(factor: f32) -> Vec<f32> {
    DEFAULT_LR_GRID.iter().map(|lr| lr * factor).collect()
}

// ---- training-budget presets -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetLabel {
    A,
    B,
    C,
}

impl FromStr for BudgetLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(BudgetLabel::A),
            "B" | "b" => Ok(BudgetLabel::B),
            "C" | "c" => Ok(BudgetLabel::C),
            other => Err(Error::config(format!("unknown budget label: {other}"))),
        }
    }
}

/// Task families sharing a row of the budget table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    /// Large datasets trained without augmentation (QQP/MNLI-like).
    LargeNoDa,
    /// QNLI-like: augmented, medium budgets.
    QnliLike,
    /// SST-2/STS-B/RTE-like: augmented, small datasets.
    SmallDa,
    /// CoLA/MRPC-like: augmented, smallest datasets.
    ColaMrpcLike,
}

impl TaskClass {
    pub const ALL: [TaskClass; 4] = [
        TaskClass::LargeNoDa,
        TaskClass::QnliLike,
        TaskClass::SmallDa,
        TaskClass::ColaMrpcLike,
    ];

    pub fn uses_da(&self) -> bool {
        !matches!(self, TaskClass::LargeNoDa)
    }
}

impl FromStr for TaskClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large_no_da" => Ok(TaskClass::LargeNoDa),
            "qnli_like" => Ok(TaskClass::QnliLike),
            "small_da" => Ok(TaskClass::SmallDa),
            "cola_mrpc_like" => Ok(TaskClass::ColaMrpcLike),
            other => Err(Error::config(format!("unknown task class: {other}"))),
        }
    }
}

/// Epochs for a (budget, task-class) cell. Cells listing two options return
/// the smaller by default; `prefer_larger` selects the other.
pub fn budget_preset(label: BudgetLabel, class: TaskClass, prefer_larger: bool) -> u32 {
    use BudgetLabel::*;
    use TaskClass::*;
    match (label, class) {
        (A, LargeNoDa) => 3,
        (B, LargeNoDa) => 9,
        (C, LargeNoDa) => {
            if prefer_larger {
                36
            } else {
                18
            }
        }
        (A, QnliLike) => 1,
        (B, QnliLike) => 3,
        (C, QnliLike) => {
            if prefer_larger {
                9
            } else {
                6
            }
        }
        (A, SmallDa) => 1,
        (B, SmallDa) => 3,
        (C, SmallDa) => 12,
        (A, ColaMrpcLike) => 1,
        (B, ColaMrpcLike) => 3,
        (C, ColaMrpcLike) => {
            if prefer_larger {
                18
            } else {
                12
            }
        }
    }
}

/// A budget preset: label plus the per-class epochs and augmentation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBudget {
    pub label: BudgetLabel,
    pub prefer_larger: bool,
}

impl TrainingBudget {
    pub fn new(label: BudgetLabel) -> Self {
        TrainingBudget {
            label,
            prefer_larger: false,
        }
    }

    pub fn epochs(&self, class: TaskClass) -> u32 {
        budget_preset(self.label, class, self.prefer_larger)
    }

    pub fn use_da(&self, class: TaskClass) -> bool {
        class.uses_da()
    }

    pub fn epochs_by_task_class(&self) -> BTreeMap<TaskClass, u32> {
        TaskClass::ALL
            .iter()
            .map(|&c| (c, self.epochs(c)))
            .collect()
    }
}

/// Steps in one epoch given dataset size and batch size (last partial batch
/// counts).
pub fn steps_per_epoch(dataset_size: usize, batch_size: usize) -> usize {
    dataset_size.div_ceil(batch_size)
}

/// Total steps: `epochs * ceil(dataset_size / batch_size)`.
pub fn total_steps(epochs: u32, dataset_size: usize, batch_size: usize) -> usize {
    epochs as usize * steps_per_epoch(dataset_size, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_stage_is_always_1_1() {
        for t in [0usize, 17, 99] {
            let p = stage_at(t, 100, KDScheduleKind::OneStage).unwrap();
            assert_eq!((p.gamma, p.beta, p.stage), (1.0, 1.0, 0));
        }
    }

    #[test]
    fn two_stage_flips_at_half() {
        let p = stage_at(49, 100, KDScheduleKind::TwoStage).unwrap();
        assert_eq!((p.gamma, p.beta), (0.0, 1.0));
        let p = stage_at(50, 100, KDScheduleKind::TwoStage).unwrap();
        assert_eq!((p.gamma, p.beta), (1.0, 0.0));
    }

    #[test]
    fn three_stage_example_boundaries() {
        let p = stage_at(33, 99, KDScheduleKind::ThreeStage).unwrap();
        assert_eq!((p.gamma, p.beta, p.stage), (1.0, 1.0, 1));
        let p = stage_at(66, 99, KDScheduleKind::ThreeStage).unwrap();
        assert_eq!((p.gamma, p.beta, p.stage), (1.0, 0.0, 2));
    }

    #[test]
    fn out_of_range_step_is_range_error() {
        assert!(matches!(
            stage_at(100, 100, KDScheduleKind::OneStage),
            Err(crate::Error::Range(_))
        ));
        let s = LRSchedule::new(1e-4, 10, KDScheduleKind::OneStage);
        assert!(matches!(s.lr_at(10), Err(crate::Error::Range(_))));
    }

    #[test]
    fn warmup_endpoint_is_peak_exactly() {
        let s = LRSchedule::new(3e-4, 1000, KDScheduleKind::OneStage);
        assert_eq!(s.lr_at(100).unwrap(), 3e-4);
    }

    #[test]
    fn one_step_before_end_matches_linear_decay_arithmetic() {
        let s = LRSchedule::new(1.0, 1000, KDScheduleKind::OneStage);
        let lr = s.lr_at(999).unwrap();
        assert!((lr - 1.0 / 900.0).abs() < 1e-9, "{lr}");
    }

    #[test]
    fn stage_one_peak_is_2_5x() {
        let s = LRSchedule::new(1e-4, 1000, KDScheduleKind::TwoStage);
        let max_stage1 = (0..500)
            .map(|t| s.lr_at(t).unwrap())
            .fold(0.0f32, f32::max);
        let max_stage2 = (500..1000)
            .map(|t| s.lr_at(t).unwrap())
            .fold(0.0f32, f32::max);
        assert_eq!(max_stage2, 1e-4);
        assert!((max_stage1 - 2.5 * max_stage2).abs() < 1e-9);
    }

    #[test]
    fn lr_starts_at_zero_each_stage() {
        for kind in [
            KDScheduleKind::OneStage,
            KDScheduleKind::TwoStage,
            KDScheduleKind::ThreeStage,
        ] {
            let s = LRSchedule::new(1e-3, 300, kind);
            for (start, end) in kind.stage_bounds(300) {
                if start < end {
                    assert_eq!(s.lr_at(start).unwrap(), 0.0, "{kind:?} stage at {start}");
                }
            }
        }
    }

    #[test]
    fn discrete_lr_sum_matches_triangle_closed_form() {
        // per stage, sum of the discrete schedule is stage_peak * n / 2
        for kind in [
            KDScheduleKind::OneStage,
            KDScheduleKind::TwoStage,
            KDScheduleKind::ThreeStage,
        ] {
            let total = 900;
            let peak = 0.01f32;
            let s = LRSchedule::new(peak, total, kind);
            let sum: f64 = (0..total).map(|t| s.lr_at(t).unwrap() as f64).sum();
            let mut expect = 0.0f64;
            for (i, (start, end)) in kind.stage_bounds(total).into_iter().enumerate() {
                let stage_peak = if kind != KDScheduleKind::OneStage && i == 0 {
                    2.5 * peak as f64
                } else {
                    peak as f64
                };
                expect += stage_peak * (end - start) as f64 / 2.0;
            }
            assert!(
                (sum - expect).abs() / expect < 1e-4,
                "{kind:?}: {sum} vs {expect}"
            );
        }
    }

    #[test]
    fn budget_table_cells() {
        assert_eq!(budget_preset(BudgetLabel::A, TaskClass::LargeNoDa, false), 3);
        assert!(!TaskClass::LargeNoDa.uses_da());
        assert_eq!(budget_preset(BudgetLabel::B, TaskClass::SmallDa, false), 3);
        assert!(TaskClass::SmallDa.uses_da());
        assert_eq!(budget_preset(BudgetLabel::C, TaskClass::QnliLike, false), 6);
        assert_eq!(budget_preset(BudgetLabel::C, TaskClass::QnliLike, true), 9);
        assert_eq!(budget_preset(BudgetLabel::B, TaskClass::LargeNoDa, false), 9);
        assert_eq!(budget_preset(BudgetLabel::C, TaskClass::LargeNoDa, true), 36);
        assert_eq!(budget_preset(BudgetLabel::C, TaskClass::SmallDa, true), 12);
        assert_eq!(budget_preset(BudgetLabel::C, TaskClass::ColaMrpcLike, false), 12);
        assert_eq!(budget_preset(BudgetLabel::C, TaskClass::ColaMrpcLike, true), 18);
        assert_eq!(budget_preset(BudgetLabel::A, TaskClass::QnliLike, false), 1);
    }

    #[test]
    fn budget_map_covers_all_classes() {
        let b = TrainingBudget::new(BudgetLabel::B);
        let map = b.epochs_by_task_class();
        assert_eq!(map.len(), 4);
        assert_eq!(map[&TaskClass::LargeNoDa], 9);
    }

    #[test]
    fn epoch_to_step_conversion() {
        assert_eq!(total_steps(3, 100, 32), 3 * 4);
        assert_eq!(total_steps(1, 96, 32), 3);
    }

    #[test]
    fn unknown_class_string_is_config_error() {
        assert!(matches!(
            "mystery_task".parse::<TaskClass>(),
            Err(crate::Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn stage_transitions_exactly_at_floored_boundaries(total in 1usize..1000) {
            for t in 0..total {
                let p2 = stage_at(t, total, KDScheduleKind::TwoStage).unwrap();
                if t < total / 2 {
                    prop_assert_eq!((p2.gamma, p2.beta, p2.stage), (0.0, 1.0, 0));
                } else {
                    prop_assert_eq!((p2.gamma, p2.beta, p2.stage), (1.0, 0.0, 1));
                }
                let p3 = stage_at(t, total, KDScheduleKind::ThreeStage).unwrap();
                if t < total / 3 {
                    prop_assert_eq!((p3.gamma, p3.beta, p3.stage), (0.0, 1.0, 0));
                } else if t < 2 * total / 3 {
                    prop_assert_eq!((p3.gamma, p3.beta, p3.stage), (1.0, 1.0, 1));
                } else {
                    prop_assert_eq!((p3.gamma, p3.beta, p3.stage), (1.0, 0.0, 2));
                }
            }
        }

        #[test]
        fn lr_nonnegative_and_unimodal_per_stage(
            total in 30usize..600,
            kind_sel in 0usize..3,
        ) {
            let kind = [KDScheduleKind::OneStage, KDScheduleKind::TwoStage, KDScheduleKind::ThreeStage][kind_sel];
            let s = LRSchedule::new(1e-3, total, kind);
            for (start, end) in kind.stage_bounds(total) {
                if start >= end { continue; }
                let n = end - start;
                let warmup = ((0.10 * n as f64).floor() as usize).max(1);
                let lrs: Vec<f32> = (start..end).map(|t| s.lr_at(t).unwrap()).collect();
                for &lr in &lrs {
                    prop_assert!(lr >= 0.0);
                }
                // max attained at the warmup endpoint
                let max = lrs.iter().copied().fold(0.0f32, f32::max);
                if warmup < n {
                    prop_assert_eq!(lrs[warmup], max);
                }
                // rising before, falling after
                for i in 1..=warmup.min(n - 1) {
                    prop_assert!(lrs[i] >= lrs[i - 1]);
                }
                for i in warmup.max(1)..n - 1 {
                    prop_assert!(lrs[i + 1] <= lrs[i]);
                }
            }
        }
    }
}
