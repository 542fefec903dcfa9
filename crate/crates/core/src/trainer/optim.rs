//! Adam with decoupled weight decay (BERT fine-tuning convention: decay on
//! matrices, none on biases or layernorm parameters). Parameters whose grad
//! buffer was never touched by backward are skipped entirely.

use crate::model::NamedParam;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-parameter first/second moment buffers plus the step counter.
pub struct OptimizerState {
    hyper: AdamHyper,
    moments: Vec<Moments>,
    step: usize,
}

impl OptimizerState {
    pub fn new(params: &[NamedParam], hyper: AdamHyper) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                let n = p.tensor.borrow().numel();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        OptimizerState {
            hyper,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over the parameter list the state was built from (same
    /// order). Gradients are consumed, not cleared.
    pub fn step(&mut self, params: &[NamedParam], lr: f32) {
        debug_assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bias1 = 1.0 - h.beta1.powi(t);
        let bias2 = 1.0 - h.beta2.powi(t);
        for (p, mom) in params.iter().zip(self.moments.iter_mut()) {
            let mut tensor = p.tensor.borrow_mut();
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad() else { continue };
            let grad = grad.to_vec();
            let decay = if p.decay { h.weight_decay } else { 0.0 };
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * g;
                mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * g * g;
                let m_hat = mom.m[i] / bias1;
                let v_hat = mom.v[i] / bias2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + h.eps) + decay * data[i]);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &[NamedParam], max_norm: f32) {
    let mut total = 0.0f64;
    for p in params {
        if let Some(g) = p.tensor.borrow().grad() {
            total += g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        }
    }
    let norm = total.sqrt() as f32;
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = max_norm / norm;
    for p in params {
        let mut t = p.tensor.borrow_mut();
        if t.grad().is_some() {
            let n = t.numel();
            let copy: Vec<f32> = t.grad().unwrap().iter().map(|g| g * scale).collect();
            t.zero_grad();
            debug_assert_eq!(copy.len(), n);
            t.accumulate_grad(&copy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NamedParam;
    use crate::quant::QuantizerSpec;
    use crate::tensor::{shared, Tensor};

    fn param(data: Vec<f32>, decay: bool) -> NamedParam {
        NamedParam {
            name: "w".into(),
            tensor: shared(Tensor::from_vec(vec![data.len()], data).unwrap().with_grad()),
            decay,
            quant: QuantizerSpec::none(),
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let p = param(vec![1.0, -1.0], false);
        p.tensor.borrow_mut().accumulate_grad(&[1.0, -1.0]);
        let params = vec![p];
        let mut opt = OptimizerState::new(&params, AdamHyper::default());
        opt.step(&params, 0.1);
        let t = params[0].tensor.borrow();
        assert!(t.data()[0] < 1.0);
        assert!(t.data()[1] > -1.0);
    }

    #[test]
    fn params_without_grad_are_skipped() {
        let p = param(vec![2.0], true);
        let params = vec![p];
        let mut opt = OptimizerState::new(&params, AdamHyper::default());
        opt.step(&params, 0.1);
        // no gradient was ever produced: no decay, no movement
        assert_eq!(params[0].tensor.borrow().data(), &[2.0]);
    }

    #[test]
    fn decay_applies_only_when_flagged() {
        let with_decay = param(vec![1.0], true);
        let without_decay = param(vec![1.0], false);
        with_decay.tensor.borrow_mut().accumulate_grad(&[0.0]);
        without_decay.tensor.borrow_mut().accumulate_grad(&[0.0]);
        let params = vec![with_decay, without_decay];
        let mut opt = OptimizerState::new(&params, AdamHyper::default());
        opt.step(&params, 0.5);
        let a = params[0].tensor.borrow().data()[0];
        let b = params[1].tensor.borrow().data()[0];
        assert!(a < 1.0, "decayed param should shrink, got {a}");
        assert_eq!(b, 1.0);
    }

    #[test]
    fn clip_rescales_joint_norm() {
        let p1 = param(vec![3.0], false);
        let p2 = param(vec![0.0], false);
        p1.tensor.borrow_mut().accumulate_grad(&[3.0]);
        p2.tensor.borrow_mut().accumulate_grad(&[4.0]);
        let params = vec![p1, p2];
        clip_grad_norm(&params, 1.0);
        let g1 = params[0].tensor.borrow().grad().unwrap()[0];
        let g2 = params[1].tensor.borrow().grad().unwrap()[0];
        let norm = (g1 * g1 + g2 * g2).sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!((g1 / g2 - 0.75).abs() < 1e-6);
    }
}
