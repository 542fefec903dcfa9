//! Weight and activation quantizers.
//!
//! Binary weights follow the classical 1-bit scheme: `q_i = alpha * sign(w_i)`
//! with `alpha = mean(|w|)` over the scale scope. Ternary weights follow the
//! threshold scheme: entries with `|w_i| <= delta` are zeroed, `delta = 0.7 *
//! mean(|w|)`, and `alpha` is the mean magnitude of the survivors. Activations
//! use a uniform symmetric INT8 quantizer. Scale statistics are accumulated in
//! f64 so that re-quantizing an already-quantized tensor reproduces it
//! bit-exactly.

mod pack;
mod size;

pub use pack::{pack, unpack, Cursor, PackedTensor, Segment};
pub use size::{model_size, ParamEntry, ParamInventory, SizeReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which quantizer applies to a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    None,
    Binary,
    Ternary,
    Int8Activation,
}

/// Scope of each scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerRow,
}

/// Quantizer configuration attached to a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantKind,
    pub granularity: Granularity,
    /// Threshold factor for the ternary quantizer (`delta = factor * mean|w|`).
    pub ternary_threshold_factor: f32,
    /// Optional clipped straight-through estimator: gradients are zeroed
    /// where `|w_latent| > ste_clip`. `None` means plain pass-through.
    pub ste_clip: Option<f32>,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec {
            kind: QuantKind::None,
            granularity: Granularity::PerTensor,
            ternary_threshold_factor: 0.7,
            ste_clip: None,
        }
    }
}

impl QuantizerSpec {
    pub fn none() -> Self {
        QuantizerSpec::default()
    }

    pub fn binary() -> Self {
        QuantizerSpec {
            kind: QuantKind::Binary,
            ..QuantizerSpec::default()
        }
    }

    pub fn ternary() -> Self {
        QuantizerSpec {
            kind: QuantKind::Ternary,
            ..QuantizerSpec::default()
        }
    }

    pub fn with_granularity(mut self, g: Granularity) -> Self {
        self.granularity = g;
        self
    }

    pub fn with_ste_clip(mut self, clip: f32) -> Self {
        self.ste_clip = Some(clip);
        self
    }

    /// Bits per element implied by the quantizer kind (ternary stores 2 bits
    /// per element).
    pub fn bits(&self) -> u8 {
        match self.kind {
            QuantKind::None => 32,
            QuantKind::Binary => 1,
            QuantKind::Ternary => 2,
            QuantKind::Int8Activation => 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ternary_threshold_factor <= 0.0 {
            return Err(Error::config(format!(
                "ternary_threshold_factor must be > 0, got {}",
                self.ternary_threshold_factor
            )));
        }
        Ok(())
    }

    fn check_scope(&self, shape: &[usize]) -> Result<()> {
        self.validate()?;
        if self.granularity == Granularity::PerRow && shape.len() != 2 {
            return Err(Error::dim(format!(
                "per-row granularity requires a 2-D weight, got shape {shape:?}"
            )));
        }
        Ok(())
    }
}

/// Result of quantizing a weight tensor: the dequantized codebook view plus
/// the scale factors (and, for ternary, the thresholds) per scope.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub q: Tensor,
    pub scales: Vec<f32>,
    pub deltas: Option<Vec<f32>>,
}

/// `sign` with the convention `sign(0) = +1`.
#[inline]
pub fn sign_pos(x: f32) -> f32 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn scopes(shape: &[usize], g: Granularity) -> (usize, usize) {
    let n: usize = shape.iter().product();
    match g {
        Granularity::PerTensor => (1, n),
        Granularity::PerRow => (shape[0], n / shape[0]),
    }
}

/// Binary quantizer: per scope, `alpha = mean(|w|)`, `q_i = alpha * sign(w_i)`.
pub fn binarize(w: &Tensor, spec: &QuantizerSpec) -> Result<(Tensor, Vec<f32>)> {
    if w.numel() == 0 {
        return Err(Error::dim("binarize: empty tensor"));
    }
    spec.check_scope(w.shape())?;
    let (num_scopes, scope_len) = scopes(w.shape(), spec.granularity);
    let mut scales = Vec::with_capacity(num_scopes);
    let mut q = vec![0.0f32; w.numel()];
    let data = w.data();
    for s in 0..num_scopes {
        let chunk = &data[s * scope_len..(s + 1) * scope_len];
        let alpha =
            (chunk.iter().map(|&x| (x as f64).abs()).sum::<f64>() / scope_len as f64) as f32;
        scales.push(alpha);
        for (i, &x) in chunk.iter().enumerate() {
            q[s * scope_len + i] = alpha * sign_pos(x);
        }
    }
    Ok((Tensor::from_vec(w.shape().to_vec(), q)?, scales))
}

/// Ternary quantizer: per scope, `delta = factor * mean(|w|)`; entries with
/// `|w_i| > delta` become `alpha * sign(w_i)` where `alpha` is the mean
/// magnitude over those survivors; the rest become zero. A scope with no
/// survivors quantizes to all zeros with `alpha = 0`.
pub fn ternarize(w: &Tensor, spec: &QuantizerSpec) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    if w.numel() == 0 {
        return Err(Error::dim("ternarize: empty tensor"));
    }
    spec.check_scope(w.shape())?;
    let (num_scopes, scope_len) = scopes(w.shape(), spec.granularity);
    let mut scales = Vec::with_capacity(num_scopes);
    let mut deltas = Vec::with_capacity(num_scopes);
    let mut q = vec![0.0f32; w.numel()];
    let data = w.data();
    for s in 0..num_scopes {
        let chunk = &data[s * scope_len..(s + 1) * scope_len];
        let mean_abs = chunk.iter().map(|&x| (x as f64).abs()).sum::<f64>() / scope_len as f64;
        let delta = (spec.ternary_threshold_factor as f64 * mean_abs) as f32;
        let mut survivor_sum = 0.0f64;
        let mut survivors = 0usize;
        for &x in chunk {
            if x.abs() > delta {
                survivor_sum += (x as f64).abs();
                survivors += 1;
            }
        }
        let alpha = if survivors == 0 {
            0.0
        } else {
            (survivor_sum / survivors as f64) as f32
        };
        scales.push(alpha);
        deltas.push(delta);
        for (i, &x) in chunk.iter().enumerate() {
            q[s * scope_len + i] = if x.abs() > delta {
                alpha * sign_pos(x)
            } else {
                0.0
            };
        }
    }
    Ok((Tensor::from_vec(w.shape().to_vec(), q)?, scales, deltas))
}

/// Dispatch on the spec's kind. `QuantKind::None` returns the tensor
/// unchanged with no scales.
pub fn quantize_weights(w: &Tensor, spec: &QuantizerSpec) -> Result<Quantized> {
    match spec.kind {
        QuantKind::None => Ok(Quantized {
            q: w.clone(),
            scales: Vec::new(),
            deltas: None,
        }),
        QuantKind::Binary => {
            let (q, scales) = binarize(w, spec)?;
            Ok(Quantized {
                q,
                scales,
                deltas: None,
            })
        }
        QuantKind::Ternary => {
            let (q, scales, deltas) = ternarize(w, spec)?;
            Ok(Quantized {
                q,
                scales,
                deltas: Some(deltas),
            })
        }
        QuantKind::Int8Activation => Err(Error::config(
            "int8_activation spec cannot be used as a weight quantizer".to_string(),
        )),
    }
}

/// Uniform symmetric INT8 quantizer: `s = max|x| / 127` (1 if the tensor is
/// all zeros), `q_i = clamp(round(x_i / s), -127, 127)` rounding halves away
/// from zero. Returns the integer codes (stored as f32) and the scale.
pub fn quantize_activation_int8(x: &Tensor) -> (Tensor, f32) {
    let max_abs = x.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let s = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let q: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| (v / s).round().clamp(-127.0, 127.0))
        .collect();
    (
        Tensor::from_vec(x.shape().to_vec(), q).expect("shape preserved"),
        s,
    )
}

/// Fake-quantize: quantize to INT8 and dequantize back in one step (the
/// forward view used during quantization-aware training).
pub fn fake_quantize_int8(x: &[f32]) -> Vec<f32> {
    let max_abs = x.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        return x.to_vec();
    }
    let s = max_abs / 127.0;
    x.iter()
        .map(|&v| (v / s).round().clamp(-127.0, 127.0) * s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn binarize_direct_case() {
        let (q, alphas) = binarize(&t(&[1.0, -2.0, 3.0]), &QuantizerSpec::binary()).unwrap();
        assert_eq!(alphas, vec![2.0]);
        assert_eq!(q.data(), &[2.0, -2.0, 2.0]);
    }

    #[test]
    fn binarize_all_zeros() {
        let (q, alphas) = binarize(&t(&[0.0, 0.0, 0.0]), &QuantizerSpec::binary()).unwrap();
        assert_eq!(alphas, vec![0.0]);
        assert_eq!(q.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn binarize_sign_zero_is_positive() {
        let (q, alphas) = binarize(&t(&[0.0, -2.0]), &QuantizerSpec::binary()).unwrap();
        assert_eq!(alphas, vec![1.0]);
        assert_eq!(q.data(), &[1.0, -1.0]);
    }

    #[test]
    fn binarize_matches_independent_oracle() {
        let mut rng = stream(7, "quant-oracle");
        let vals: Vec<f32> = (0..1024)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let (q, alphas) = binarize(&t(&vals), &QuantizerSpec::binary()).unwrap();

        // independent oracle: plain loop, f64 accumulator
        let mut acc = 0.0f64;
        for &v in &vals {
            acc += f64::from(v).abs();
        }
        let alpha_oracle = (acc / vals.len() as f64) as f32;
        assert!((alphas[0] - alpha_oracle).abs() <= 1e-6);
        for (qi, wi) in q.data().iter().zip(&vals) {
            let expect_sign = if *wi < 0.0 { -1.0 } else { 1.0 };
            assert_eq!(qi.signum(), expect_sign);
            assert_eq!(qi.abs(), alphas[0]);
        }
    }

    #[test]
    fn binarize_per_row() {
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, -3.0, 0.5, 0.5]).unwrap();
        let spec = QuantizerSpec::binary().with_granularity(Granularity::PerRow);
        let (q, alphas) = binarize(&w, &spec).unwrap();
        assert_eq!(alphas, vec![2.0, 0.5]);
        assert_eq!(q.data(), &[2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn binarize_per_row_requires_2d() {
        let w = Tensor::zeros(vec![2, 2, 2]);
        let spec = QuantizerSpec::binary().with_granularity(Granularity::PerRow);
        assert!(matches!(binarize(&w, &spec), Err(Error::Dim(_))));
    }

    #[test]
    fn binarize_empty_is_dimension_error() {
        let w = Tensor::zeros(vec![0]);
        assert!(matches!(
            binarize(&w, &QuantizerSpec::binary()),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn binarize_scale_invariance() {
        let mut rng = stream(3, "scale-inv");
        let vals: Vec<f32> = (0..64)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let (q1, a1) = binarize(&t(&vals), &QuantizerSpec::binary()).unwrap();
        let scaled: Vec<f32> = vals.iter().map(|v| v * 4.0).collect();
        let (q2, a2) = binarize(&t(&scaled), &QuantizerSpec::binary()).unwrap();
        // power of two keeps f32 arithmetic exact
        assert_eq!(a2[0], a1[0] * 4.0);
        for (x, y) in q1.data().iter().zip(q2.data()) {
            assert_eq!(x.signum(), y.signum());
        }
    }

    #[test]
    fn binarize_idempotent() {
        let mut rng = stream(11, "idem");
        for round in 0..20 {
            let n = 3 + round * 7;
            let vals: Vec<f32> = (0..n)
                .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
                .collect();
            let (q1, a1) = binarize(&t(&vals), &QuantizerSpec::binary()).unwrap();
            let (q2, a2) = binarize(&q1, &QuantizerSpec::binary()).unwrap();
            assert_eq!(a1, a2, "n={n}");
            assert_eq!(q1.data(), q2.data(), "n={n}");
        }
    }

    #[test]
    fn binarize_optimal_over_sign_patterns() {
        // brute force: alpha*(b) = w.b/n is optimal for fixed b; search all b
        let mut rng = stream(13, "brute");
        for n in 1..=10usize {
            let w: Vec<f32> = (0..n)
                .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
                .collect();
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << n) {
                let b: Vec<f64> = (0..n)
                    .map(|i| if mask & (1 << i) != 0 { 1.0 } else { -1.0 })
                    .collect();
                let dot: f64 = w.iter().zip(&b).map(|(wi, bi)| f64::from(*wi) * bi).sum();
                let alpha = dot / n as f64;
                let cost: f64 = w
                    .iter()
                    .zip(&b)
                    .map(|(wi, bi)| (f64::from(*wi) - alpha * bi).powi(2))
                    .sum();
                best = best.min(cost);
            }
            let (q, _) = binarize(&t(&w), &QuantizerSpec::binary()).unwrap();
            let impl_cost: f64 = w
                .iter()
                .zip(q.data())
                .map(|(wi, qi)| (f64::from(*wi) - f64::from(*qi)).powi(2))
                .sum();
            assert!(
                impl_cost <= best + 1e-9,
                "n={n}: impl {impl_cost} vs brute-force min {best}"
            );
        }
    }

    #[test]
    fn ternarize_direct_case() {
        let (q, alphas, deltas) =
            ternarize(&t(&[1.0, -2.0, 3.0]), &QuantizerSpec::ternary()).unwrap();
        assert!((deltas[0] - 1.4).abs() < 1e-6);
        assert_eq!(alphas, vec![2.5]);
        assert_eq!(q.data(), &[0.0, -2.5, 2.5]);
    }

    #[test]
    fn ternarize_all_zeros() {
        let (q, alphas, _) = ternarize(&t(&[0.0; 5]), &QuantizerSpec::ternary()).unwrap();
        assert_eq!(alphas, vec![0.0]);
        assert!(q.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ternarize_symmetric_exact_reconstruction() {
        let c = 0.75f32;
        let vals = [c, -c, c, -c, c];
        let (q, alphas, _) = ternarize(&t(&vals), &QuantizerSpec::ternary()).unwrap();
        assert_eq!(alphas, vec![c]);
        for (qi, wi) in q.data().iter().zip(&vals) {
            assert_eq!(qi, wi);
        }
    }

    #[test]
    fn ternarize_idempotent() {
        let mut rng = stream(17, "tern-idem");
        for round in 0..20 {
            let n = 5 + round * 11;
            let vals: Vec<f32> = (0..n)
                .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
                .collect();
            let (q1, a1, _) = ternarize(&t(&vals), &QuantizerSpec::ternary()).unwrap();
            let (q2, a2, _) = ternarize(&q1, &QuantizerSpec::ternary()).unwrap();
            assert_eq!(a1, a2, "n={n}");
            assert_eq!(q1.data(), q2.data(), "n={n}");
        }
    }

    #[test]
    fn int8_direct_case() {
        let (q, s) = quantize_activation_int8(&t(&[0.5, -1.0]));
        assert_eq!(s, 1.0 / 127.0);
        // 0.5 / (1/127) = 63.5 rounds away from zero to 64
        assert_eq!(q.data(), &[64.0, -127.0]);
    }

    #[test]
    fn int8_all_zeros() {
        let (q, s) = quantize_activation_int8(&t(&[0.0, 0.0]));
        assert_eq!(s, 1.0);
        assert_eq!(q.data(), &[0.0, 0.0]);
    }

    #[test]
    fn int8_max_maps_to_127() {
        let mut rng = stream(23, "int8");
        for _ in 0..50 {
            let vals: Vec<f32> = (0..33)
                .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
                .collect();
            let (q, _) = quantize_activation_int8(&t(&vals));
            let max_code = q.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            assert_eq!(max_code, 127.0);
        }
    }

    #[test]
    fn int8_dequant_error_bounded() {
        let mut rng = stream(29, "int8-err");
        let vals: Vec<f32> = (0..257)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let (q, s) = quantize_activation_int8(&t(&vals));
        for (qi, xi) in q.data().iter().zip(&vals) {
            let deq = qi * s;
            // half-step bound except exactly at the clamp boundary
            assert!(
                (deq - xi).abs() <= s / 2.0 + 1e-7,
                "x={xi} deq={deq} s={s}"
            );
        }
    }
}
