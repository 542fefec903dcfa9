//! Teacher-subset student initialization (layer reduction).
//!
//! A shallower student is initialized from a subset of a fine-tuned
//! teacher's layers: `skip` takes evenly strided layers (keeping the last
//! layer when the depths divide), `top`/`bottom` take the highest/lowest
//! block, and `explicit` takes a user-provided index list.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

use super::EncoderModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Skip,
    Top,
    Bottom,
    Explicit,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(SelectionStrategy::Skip),
            "top" => Ok(SelectionStrategy::Top),
            "bottom" => Ok(SelectionStrategy::Bottom),
            "explicit" => Ok(SelectionStrategy::Explicit),
            other => Err(Error::config(format!("unknown selection strategy: {other}"))),
        }
    }
}

/// Which teacher layers seed the student, in 1-based teacher indexing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub strategy: SelectionStrategy,
    pub student_layers: usize,
    /// Only read when `strategy == Explicit`.
    pub indices: Option<Vec<usize>>,
}

impl LayerSelection {
    pub fn skip(student_layers: usize) -> Self {
        LayerSelection {
            strategy: SelectionStrategy::Skip,
            student_layers,
            indices: None,
        }
    }

    pub fn top(student_layers: usize) -> Self {
        LayerSelection {
            strategy: SelectionStrategy::Top,
            student_layers,
            indices: None,
        }
    }

    pub fn bottom(student_layers: usize) -> Self {
        LayerSelection {
            strategy: SelectionStrategy::Bottom,
            student_layers,
            indices: None,
        }
    }

    pub fn explicit(indices: Vec<usize>) -> Self {
        LayerSelection {
            strategy: SelectionStrategy::Explicit,
            student_layers: indices.len(),
            indices: Some(indices),
        }
    }

    /// Resolves to strictly increasing 1-based teacher layer indices.
    pub fn resolve(&self, teacher_layers: usize) -> Result<Vec<usize>> {
        let s = self.student_layers;
        if s == 0 {
            return Err(Error::config("student must keep at least one layer"));
        }
        if s > teacher_layers {
            return Err(Error::config(format!(
                "student depth {s} exceeds teacher depth {teacher_layers}"
            )));
        }
        let indices = match self.strategy {
            SelectionStrategy::Skip => {
                // stride floor(T/S); anchor at the last layer when the depths
                // divide, one below otherwise (12->5 gives {3,5,7,9,11})
                let stride = teacher_layers / s;
                let end = if teacher_layers % s == 0 {
                    teacher_layers
                } else {
                    teacher_layers - 1
                };
                (0..s).map(|k| end - stride * (s - 1 - k)).collect()
            }
            SelectionStrategy::Top => (teacher_layers - s + 1..=teacher_layers).collect(),
            SelectionStrategy::Bottom => (1..=s).collect(),
            SelectionStrategy::Explicit => {
                let idx = self
                    .indices
                    .clone()
                    .ok_or_else(|| Error::config("explicit selection without indices"))?;
                if idx.len() != s {
                    return Err(Error::config(format!(
                        "explicit selection lists {} layers, expected {s}",
                        idx.len()
                    )));
                }
                idx
            }
        };
        let mut prev = 0usize;
        for &i in &indices {
            if i == 0 || i > teacher_layers {
                return Err(Error::config(format!(
                    "layer index {i} outside teacher range 1..={teacher_layers}"
                )));
            }
            if i <= prev {
                return Err(Error::config(format!(
                    "layer indices must be strictly increasing, got {indices:?}"
                )));
            }
            prev = i;
        }
        Ok(indices)
    }
}

/// Builds a student by deep-copying the selected teacher layers along with
/// the embeddings and classifier head. The student's latent weights are
/// independent of the teacher afterwards.
pub fn init_student_from_teacher(
    teacher: &EncoderModel,
    selection: &LayerSelection,
) -> Result<(EncoderModel, Vec<usize>)> {
    let indices = selection.resolve(teacher.config.num_layers)?;
    let mut config = teacher.config;
    config.num_layers = indices.len();
    let layers = indices
        .iter()
        .map(|&i| teacher.layers[i - 1].deep_clone())
        .collect();
    let student = EncoderModel {
        config,
        tok_emb: crate::tensor::shared(teacher.tok_emb.borrow().clone()),
        tok_emb_spec: teacher.tok_emb_spec,
        tok_emb_lora: teacher.tok_emb_lora.as_ref().map(|a| a.deep_clone()),
        pos_emb: crate::tensor::shared(teacher.pos_emb.borrow().clone()),
        layers,
        cls_w: crate::tensor::shared(teacher.cls_w.borrow().clone()),
        cls_b: crate::tensor::shared(teacher.cls_b.borrow().clone()),
        quantize_activations: teacher.quantize_activations,
    };
    Ok((student, indices))
}
