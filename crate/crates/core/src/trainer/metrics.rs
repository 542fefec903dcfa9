//! Per-step and per-epoch training records, CSV emission, and the JSON run
//! summary.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub gamma: f32,
    pub beta: f32,
    pub lr: f32,
    pub loss_logit: f32,
    pub loss_hidden: f32,
    pub loss_att: f32,
    pub total: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub accuracy: f32,
    pub best_so_far: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub const CSV_HEADER: &str = "step,stage,gamma,beta,lr,loss_logit,loss_hidden,loss_att,total";

impl MetricsLog {
    pub fn push_step(&mut self, r: StepRecord) {
        debug_assert!(
            self.steps.last().map_or(true, |prev| r.step > prev.step),
            "steps must be strictly increasing"
        );
        self.steps.push(r);
    }

    pub fn push_eval(&mut self, epoch: usize, accuracy: f32) {
        let best = self
            .evals
            .last()
            .map_or(accuracy, |e| e.best_so_far.max(accuracy));
        self.evals.push(EvalRecord {
            epoch,
            accuracy,
            best_so_far: best,
        });
    }

    pub fn best(&self) -> Option<EvalRecord> {
        self.evals.last().map(|last| {
            *self
                .evals
                .iter()
                .find(|e| e.accuracy == last.best_so_far)
                .unwrap_or(last)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.stage,
                r.gamma,
                r.beta,
                r.lr,
                r.loss_logit,
                r.loss_hidden,
                r.loss_att,
                r.total
            ));
        }
        out
    }

    pub fn evals_to_csv(&self) -> String {
        let mut out = String::from("epoch,accuracy,best_so_far\n");
        for e in &self.evals {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.accuracy, e.best_so_far));
        }
        out
    }
}

/// End-of-run summary serialized as JSON next to the CSV logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_metric: f32,
    pub best_epoch: usize,
    pub spec_hash: String,
}

/// FNV-1a hash of a serializable spec, hex-encoded; identical specs hash
/// identically across runs.
pub fn spec_hash<T: Serialize>(spec: &T) -> String {
    let text = serde_json::to_string(spec).expect("spec must serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
