//! Quantization-aware distillation training loop.
//!
//! Each step quantizes weights on the forward pass, applies straight-through
//! gradients on the backward pass, and updates the full-precision latent
//! weights with Adam. The stage machine drives the (gamma, beta) loss
//! weights and the per-stage learning-rate schedule. Validation runs once
//! per epoch and the best checkpoint is returned.

mod metrics;
mod optim;

pub use metrics::{spec_hash, EvalRecord, MetricsLog, RunSummary, StepRecord, CSV_HEADER};
pub use optim::{clip_grad_norm, AdamHyper, OptimizerState};

use crate::data::{augment, generate_dataset, AugmenterSpec, Dataset, ToyTaskSpec};
use crate::distill::{kd_objective, AttentionTarget, KDPairing, KDWeights};
use crate::error::{Error, Result};
use crate::model::{attach_lora, EncoderModel};
use crate::quant::{Granularity, QuantizerSpec, QuantKind};
use crate::rng::stream;
use crate::schedule::{
    stage_at, total_steps, KDScheduleKind, LRSchedule, TaskClass, TrainingBudget,
};
use crate::tensor::Graph;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Bit widths per matrix family plus activation quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    /// Attention/FFN weight matrices: 1, 2, or 32.
    pub weight_bits: u8,
    /// Token embedding table: 1, 2, or 32.
    pub embedding_bits: u8,
    pub weight_granularity: Granularity,
    pub embedding_granularity: Granularity,
    /// Fake-quantize the input of every quantized linear to INT8.
    pub activations_int8: bool,
    pub ste_clip: Option<f32>,
    pub ternary_threshold_factor: f32,
}

impl QuantPolicy {
    pub fn fp32() -> Self {
        QuantPolicy {
            weight_bits: 32,
            embedding_bits: 32,
            weight_granularity: Granularity::PerTensor,
            embedding_granularity: Granularity::PerRow,
            activations_int8: false,
            ste_clip: None,
            ternary_threshold_factor: 0.7,
        }
    }

    pub fn bits(weight_bits: u8) -> Self {
        QuantPolicy {
            weight_bits,
            embedding_bits: weight_bits,
            activations_int8: true,
            ..QuantPolicy::fp32()
        }
    }

    fn spec_for(&self, bits: u8, granularity: Granularity) -> Result<QuantizerSpec> {
        let kind = match bits {
            32 => QuantKind::None,
            1 => QuantKind::Binary,
            2 => QuantKind::Ternary,
            other => {
                return Err(Error::config(format!(
                    "unsupported weight bit width {other} (use 1, 2, or 32)"
                )))
            }
        };
        Ok(QuantizerSpec {
            kind,
            granularity,
            ternary_threshold_factor: self.ternary_threshold_factor,
            ste_clip: self.ste_clip,
        })
    }

    /// Installs the policy's quantizer specs on a model.
    pub fn apply(&self, model: &mut EncoderModel) -> Result<()> {
        let w_spec = self.spec_for(self.weight_bits, self.weight_granularity)?;
        let e_spec = self.spec_for(self.embedding_bits, self.embedding_granularity)?;
        model.set_weight_quantizer(w_spec, Some(e_spec));
        model.quantize_activations = self.activations_int8;
        Ok(())
    }
}

/// Training objective: distill from a teacher, or plain supervised training
/// on the dataset labels (degenerate mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Distill,
    HardLabel,
}

/// A fully seeded experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub quant: QuantPolicy,
    pub kd_kind: KDScheduleKind,
    pub attention_target: AttentionTarget,
    pub budget: TrainingBudget,
    pub task_class: TaskClass,
    /// Overrides the budget-table epochs when set.
    pub epochs_override: Option<u32>,
    /// Peak learning-rate grid; at least one entry.
    pub peak_lrs: Vec<f32>,
    pub batch_size: usize,
    pub seed: u64,
    pub data_augmentation: bool,
    pub augment_prob: f32,
    pub augment_factor: usize,
    pub lora_rank: Option<usize>,
    pub lora_init_scale: f32,
    pub continue_rounds: usize,
    pub loss_mode: LossMode,
    pub max_grad_norm: Option<f32>,
    pub adam: AdamHyper,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            quant: QuantPolicy::fp32(),
            kd_kind: KDScheduleKind::OneStage,
            attention_target: AttentionTarget::Probs,
            budget: TrainingBudget::new(crate::schedule::BudgetLabel::A),
            task_class: TaskClass::SmallDa,
            epochs_override: None,
            peak_lrs: vec![1e-3],
            batch_size: 32,
            seed: 42,
            data_augmentation: true,
            augment_prob: 0.3,
            augment_factor: 5,
            lora_rank: None,
            lora_init_scale: 0.02,
            continue_rounds: 0,
            loss_mode: LossMode::Distill,
            max_grad_norm: None,
            adam: AdamHyper::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lrs.is_empty() {
            return Err(Error::config("learning-rate grid must be non-empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.augment_factor == 0 {
            return Err(Error::config("augment_factor must be >= 1"));
        }
        if let Some(r) = self.lora_rank {
            if r == 0 {
                return Err(Error::config("lora_rank must be >= 1"));
            }
        }
        self.quant.spec_for(self.quant.weight_bits, self.quant.weight_granularity)?;
        self.quant
            .spec_for(self.quant.embedding_bits, self.quant.embedding_granularity)?;
        Ok(())
    }

    pub fn epochs(&self) -> u32 {
        self.epochs_override
            .unwrap_or_else(|| self.budget.epochs(self.task_class))
    }

    /// Augmentation is active only when both the experiment and the task
    /// class call for it.
    pub fn uses_da(&self) -> bool {
        self.data_augmentation && self.budget.use_da(self.task_class)
    }
}

/// Generates the task's splits and applies augmentation when the spec calls
/// for it. Augmentation is seeded from the task seed so every training seed
/// sees the same corpus.
pub fn prepare_data(task: &ToyTaskSpec, spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = generate_dataset(task)?;
    if spec.uses_da() && spec.augment_factor > 1 {
        let aug = AugmenterSpec::label_safe(task, spec.augment_prob, spec.augment_factor)?;
        let train = augment(&train, &aug, task, task.seed)?;
        Ok((train, val))
    } else {
        Ok((train, val))
    }
}

/// Result of one training run: the best-validation checkpoint and its log.
pub struct TrainOutcome {
    pub student: EncoderModel,
    pub log: MetricsLog,
    pub best_accuracy: f32,
    pub best_epoch: usize,
}

/// Side-effect-free accuracy over a dataset (argmax ties go to the smaller
/// class index).
pub fn evaluate(model: &EncoderModel, data: &Dataset, batch_size: usize) -> Result<f32> {
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (tokens, labels) = data.gather(chunk);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &tokens, chunk.len())?;
        let logits = g.data(out.logits);
        let classes = data.num_classes;
        for (row, &label) in labels.iter().enumerate() {
            let row_logits = &logits[row * classes..(row + 1) * classes];
            let mut arg = 0usize;
            for (c, &v) in row_logits.iter().enumerate() {
                if v > row_logits[arg] {
                    arg = c;
                }
            }
            if arg == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Runs one quantization-aware distillation (or hard-label) training round.
///
/// The incoming student is cloned; the clone gets the spec's quant policy,
/// optional adapters, and `total_steps = epochs * ceil(n / batch)` updates
/// driven by `stage_at`/`lr_at`. Returns the best-validation snapshot.
pub fn train(
    spec: &ExperimentSpec,
    peak_lr: f32,
    teacher: Option<&EncoderModel>,
    student: &EncoderModel,
    pairing: &KDPairing,
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let mut student = student.deep_clone();
    spec.quant.apply(&mut student)?;
    if let Some(rank) = spec.lora_rank {
        let has_adapters = student.layers.iter().any(|l| l.wq.lora.is_some());
        if !has_adapters {
            let mut rng = stream(spec.seed, "lora-init");
            attach_lora(&mut student, rank, spec.lora_init_scale, &mut rng)?;
        }
    }
    student.set_trainable(true);
    student.zero_grads();

    let teacher = match (spec.loss_mode, teacher) {
        (LossMode::Distill, Some(t)) => {
            if t.config.hidden != student.config.hidden
                || t.config.heads != student.config.heads
                || t.config.ffn_dim != student.config.ffn_dim
            {
                return Err(Error::config(format!(
                    "teacher width (d_h={}, h={}, ffn={}) does not match student \
                     (d_h={}, h={}, ffn={}); width reduction is unsupported",
                    t.config.hidden,
                    t.config.heads,
                    t.config.ffn_dim,
                    student.config.hidden,
                    student.config.heads,
                    student.config.ffn_dim
                )));
            }
            pairing.validate(student.config.num_layers, t.config.num_layers)?;
            let mut frozen = t.deep_clone();
            frozen.set_trainable(false);
            Some(frozen)
        }
        (LossMode::Distill, None) => {
            return Err(Error::config("distillation requires a teacher model"))
        }
        (LossMode::HardLabel, _) => None,
    };

    let epochs = spec.epochs();
    let steps = total_steps(epochs, train_data.len(), spec.batch_size);
    if steps == 0 {
        return Err(Error::config("training schedule has zero steps"));
    }
    let lr_schedule = LRSchedule::new(peak_lr, steps, spec.kd_kind);
    let params = student.named_params();
    let mut opt = OptimizerState::new(&params, spec.adam);
    let mut log = MetricsLog::default();

    let mut best_accuracy = f32::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = student.deep_clone();

    let mut t = 0usize;
    for epoch in 0..epochs as usize {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng = stream(spec.seed, &format!("shuffle-epoch{epoch}"));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(spec.batch_size) {
            let point = stage_at(t, steps, spec.kd_kind)?;
            let lr = lr_schedule.lr_at(t)?;
            let (tokens, labels) = train_data.gather(chunk);

            let mut g = Graph::new();
            let record = match (&teacher, spec.loss_mode) {
                (Some(teacher), LossMode::Distill) => {
                    let t_out = teacher.forward(&mut g, &tokens, chunk.len())?;
                    let s_out = student.forward(&mut g, &tokens, chunk.len())?;
                    let weights = KDWeights {
                        gamma: point.gamma,
                        beta: point.beta,
                    };
                    let terms = kd_objective(
                        &mut g,
                        &s_out,
                        &t_out,
                        pairing,
                        weights,
                        spec.attention_target,
                    )?;
                    let total = g.scalar_value(terms.total);
                    if !total.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            step: t,
                            stage: point.stage,
                            detail: format!(
                                "total={total} logit={} hidden={} att={} lr={lr}",
                                g.scalar_value(terms.logit),
                                g.scalar_value(terms.hidden),
                                g.scalar_value(terms.att)
                            ),
                        });
                    }
                    g.backward(terms.total)?;
                    StepRecord {
                        step: t,
                        stage: point.stage,
                        gamma: point.gamma,
                        beta: point.beta,
                        lr,
                        loss_logit: g.scalar_value(terms.logit),
                        loss_hidden: g.scalar_value(terms.hidden),
                        loss_att: g.scalar_value(terms.att),
                        total,
                    }
                }
                _ => {
                    let s_out = student.forward(&mut g, &tokens, chunk.len())?;
                    let loss = g.hard_cross_entropy(s_out.logits, &labels)?;
                    let total = g.scalar_value(loss);
                    if !total.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            step: t,
                            stage: point.stage,
                            detail: format!("hard-label loss={total} lr={lr}"),
                        });
                    }
                    g.backward(loss)?;
                    StepRecord {
                        step: t,
                        stage: point.stage,
                        gamma: point.gamma,
                        beta: point.beta,
                        lr,
                        loss_logit: total,
                        loss_hidden: 0.0,
                        loss_att: 0.0,
                        total,
                    }
                }
            };

            if let Some(max_norm) = spec.max_grad_norm {
                clip_grad_norm(&params, max_norm);
            }
            opt.step(&params, lr);
            student.zero_grads();
            log.push_step(record);
            t += 1;
        }

        let accuracy = evaluate(&student, val_data, spec.batch_size.max(64))?;
        log.push_eval(epoch, accuracy);
        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            best_epoch = epoch;
            best_snapshot = student.deep_clone();
        }
    }

    Ok(TrainOutcome {
        student: best_snapshot,
        log,
        best_accuracy,
        best_epoch,
    })
}

/// Index of the winning (lr, metric) pair: highest metric, ties to the
/// smaller learning rate.
pub fn select_best_lr(results: &[(f32, f32)]) -> usize {
    let mut best = 0usize;
    for (i, &(lr, metric)) in results.iter().enumerate().skip(1) {
        let (best_lr, best_metric) = results[best];
        if metric > best_metric || (metric == best_metric && lr < best_lr) {
            best = i;
        }
    }
    best
}

pub struct GridOutcome {
    pub best_lr: f32,
    pub best: TrainOutcome,
    /// (peak lr, best validation accuracy) per grid entry, in grid order.
    pub results: Vec<(f32, f32)>,
}

/// Trains once per grid entry under the same seed and returns the best run.
pub fn lr_grid_search(
    spec: &ExperimentSpec,
    teacher: Option<&EncoderModel>,
    student: &EncoderModel,
    pairing: &KDPairing,
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<GridOutcome> {
    spec.validate()?;
    let mut outcomes = Vec::with_capacity(spec.peak_lrs.len());
    for &lr in &spec.peak_lrs {
        let outcome = train(spec, lr, teacher, student, pairing, train_data, val_data)?;
        outcomes.push((lr, outcome));
    }
    let results: Vec<(f32, f32)> = outcomes
        .iter()
        .map(|(lr, o)| (*lr, o.best_accuracy))
        .collect();
    let win = select_best_lr(&results);
    let (best_lr, best) = outcomes.swap_remove(win);
    Ok(GridOutcome {
        best_lr,
        best,
        results,
    })
}

pub struct ContinueOutcome {
    pub student: EncoderModel,
    /// One outcome per completed round.
    pub rounds: Vec<TrainOutcome>,
}

/// Repeats full training rounds from the trained latent weights, each with a
/// fresh learning-rate schedule. `continue_rounds == 0` returns the input
/// unchanged.
pub fn continue_train(
    spec: &ExperimentSpec,
    peak_lr: f32,
    teacher: Option<&EncoderModel>,
    trained: &EncoderModel,
    pairing: &KDPairing,
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<ContinueOutcome> {
    let mut current = trained.deep_clone();
    let mut rounds = Vec::with_capacity(spec.continue_rounds);
    for _ in 0..spec.continue_rounds {
        let outcome = train(spec, peak_lr, teacher, &current, pairing, train_data, val_data)?;
        current = outcome.student.deep_clone();
        rounds.push(outcome);
    }
    Ok(ContinueOutcome {
        student: current,
        rounds,
    })
}
