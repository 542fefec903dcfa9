//! Tiny transformer encoder with quantization-aware linear layers.
//!
//! Every weight matrix carries a [`QuantizerSpec`]; on each forward pass the
//! quantized view is recomputed from the full-precision latent weights, and
//! the straight-through estimator routes gradients back to the latents.
//! Optional low-rank residual adapters add a full-precision `U*V` term on top
//! of the quantized matrix.

mod checkpoint;
mod lora;
mod select;

pub use checkpoint::{checkpoint_size, load_model, save_model, MAGIC};
pub use lora::{attach_lora, LoRaAdapter};
pub use select::{init_student_from_teacher, LayerSelection, SelectionStrategy};

use crate::error::{Error, Result};
use crate::quant::{fake_quantize_int8, quantize_weights, QuantKind, QuantizerSpec};
use crate::tensor::{shared, Graph, SharedTensor, Tensor, Value};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Linear layer whose weight matrix is quantization-aware.
#[derive(Debug, Clone)]
pub struct QLinear {
    /// Latent full-precision weights, `[d_in, d_out]`.
    pub w: SharedTensor,
    pub b: SharedTensor,
    pub spec: QuantizerSpec,
    pub lora: Option<LoRaAdapter>,
}

impl QLinear {
    fn init(d_in: usize, d_out: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (2.0 / (d_in + d_out) as f32).sqrt();
        QLinear {
            w: shared(Tensor::randn(vec![d_in, d_out], std, rng).with_grad()),
            b: shared(Tensor::zeros(vec![d_out]).with_grad()),
            spec: QuantizerSpec::none(),
            lora: None,
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        QLinear {
            w: shared(Tensor::zeros(vec![d_in, d_out]).with_grad()),
            b: shared(Tensor::zeros(vec![d_out]).with_grad()),
            spec: QuantizerSpec::none(),
            lora: None,
        }
    }

    pub fn deep_clone(&self) -> Self {
        QLinear {
            w: shared(self.w.borrow().clone()),
            b: shared(self.b.borrow().clone()),
            spec: self.spec,
            lora: self.lora.as_ref().map(|a| a.deep_clone()),
        }
    }

    /// The quantized view of the current latent weights (plus scales), as
    /// used on the next forward pass.
    pub fn quantized_view(&self) -> Result<crate::quant::Quantized> {
        quantize_weights(&self.w.borrow(), &self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub wq: QLinear,
    pub wk: QLinear,
    pub wv: QLinear,
    pub wo: QLinear,
    pub ffn_up: QLinear,
    pub ffn_down: QLinear,
    pub ln1_gain: SharedTensor,
    pub ln1_bias: SharedTensor,
    pub ln2_gain: SharedTensor,
    pub ln2_bias: SharedTensor,
}

impl EncoderLayer {
    fn init(cfg: &TransformerConfig, rng: &mut impl rand::Rng) -> Self {
        let d = cfg.hidden;
        EncoderLayer {
            wq: QLinear::init(d, d, rng),
            wk: QLinear::init(d, d, rng),
            wv: QLinear::init(d, d, rng),
            wo: QLinear::init(d, d, rng),
            ffn_up: QLinear::init(d, cfg.ffn_dim, rng),
            ffn_down: QLinear::init(cfg.ffn_dim, d, rng),
            ln1_gain: shared(Tensor::filled(vec![d], 1.0).with_grad()),
            ln1_bias: shared(Tensor::zeros(vec![d]).with_grad()),
            ln2_gain: shared(Tensor::filled(vec![d], 1.0).with_grad()),
            ln2_bias: shared(Tensor::zeros(vec![d]).with_grad()),
        }
    }

    fn zeros(cfg: &TransformerConfig) -> Self {
        let d = cfg.hidden;
        EncoderLayer {
            wq: QLinear::zeros(d, d),
            wk: QLinear::zeros(d, d),
            wv: QLinear::zeros(d, d),
            wo: QLinear::zeros(d, d),
            ffn_up: QLinear::zeros(d, cfg.ffn_dim),
            ffn_down: QLinear::zeros(cfg.ffn_dim, d),
            ln1_gain: shared(Tensor::zeros(vec![d]).with_grad()),
            ln1_bias: shared(Tensor::zeros(vec![d]).with_grad()),
            ln2_gain: shared(Tensor::zeros(vec![d]).with_grad()),
            ln2_bias: shared(Tensor::zeros(vec![d]).with_grad()),
        }
    }

    pub fn deep_clone(&self) -> Self {
        EncoderLayer {
            wq: self.wq.deep_clone(),
            wk: self.wk.deep_clone(),
            wv: self.wv.deep_clone(),
            wo: self.wo.deep_clone(),
            ffn_up: self.ffn_up.deep_clone(),
            ffn_down: self.ffn_down.deep_clone(),
            ln1_gain: shared(self.ln1_gain.borrow().clone()),
            ln1_bias: shared(self.ln1_bias.borrow().clone()),
            ln2_gain: shared(self.ln2_gain.borrow().clone()),
            ln2_bias: shared(self.ln2_bias.borrow().clone()),
        }
    }
}

/// Encoder with learned absolute positional embeddings, post-LN blocks, and
/// a full-precision classifier head reading the first token.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: TransformerConfig,
    pub tok_emb: SharedTensor,
    pub tok_emb_spec: QuantizerSpec,
    pub tok_emb_lora: Option<LoRaAdapter>,
    pub pos_emb: SharedTensor,
    pub layers: Vec<EncoderLayer>,
    pub cls_w: SharedTensor,
    pub cls_b: SharedTensor,
    /// Fake-quantize the input of every quantized linear to INT8.
    pub quantize_activations: bool,
}

/// Everything a distillation loss needs from one forward pass.
pub struct ModelOutputs {
    /// `[batch, num_classes]`
    pub logits: Value,
    /// Per layer, `[batch, seq, hidden]` after the final layernorm.
    pub hiddens: Vec<Value>,
    /// Per layer, post-softmax attention probabilities `[batch, heads, seq, seq]`.
    pub attn_probs: Vec<Value>,
    /// Per layer, pre-softmax attention scores `[batch, heads, seq, seq]`.
    pub attn_scores: Vec<Value>,
}

impl EncoderModel {
    pub fn init(config: TransformerConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(&config, rng))
            .collect();
        Ok(EncoderModel {
            tok_emb: shared(Tensor::randn(vec![config.vocab_size, d], 0.02, rng).with_grad()),
            tok_emb_spec: QuantizerSpec::none(),
            tok_emb_lora: None,
            pos_emb: shared(Tensor::randn(vec![config.max_seq_len, d], 0.02, rng).with_grad()),
            layers,
            cls_w: shared(
                Tensor::randn(vec![d, config.num_classes], (2.0 / (d + config.num_classes) as f32).sqrt(), rng)
                    .with_grad(),
            ),
            cls_b: shared(Tensor::zeros(vec![config.num_classes]).with_grad()),
            config,
            quantize_activations: false,
        })
    }

    /// All-zero skeleton used by the checkpoint loader.
    pub(crate) fn zeros(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::zeros(&config))
            .collect();
        Ok(EncoderModel {
            tok_emb: shared(Tensor::zeros(vec![config.vocab_size, d]).with_grad()),
            tok_emb_spec: QuantizerSpec::none(),
            tok_emb_lora: None,
            pos_emb: shared(Tensor::zeros(vec![config.max_seq_len, d]).with_grad()),
            layers,
            cls_w: shared(Tensor::zeros(vec![d, config.num_classes]).with_grad()),
            cls_b: shared(Tensor::zeros(vec![config.num_classes]).with_grad()),
            config,
            quantize_activations: false,
        })
    }

    /// Independent copy: fresh tensors, shared nothing.
    pub fn deep_clone(&self) -> Self {
        EncoderModel {
            config: self.config,
            tok_emb: shared(self.tok_emb.borrow().clone()),
            tok_emb_spec: self.tok_emb_spec,
            tok_emb_lora: self.tok_emb_lora.as_ref().map(|a| a.deep_clone()),
            pos_emb: shared(self.pos_emb.borrow().clone()),
            layers: self.layers.iter().map(|l| l.deep_clone()).collect(),
            cls_w: shared(self.cls_w.borrow().clone()),
            cls_b: shared(self.cls_b.borrow().clone()),
            quantize_activations: self.quantize_activations,
        }
    }

    /// Marks every parameter trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.named_params() {
            p.tensor.borrow_mut().set_requires_grad(trainable);
        }
    }

    pub fn zero_grads(&self) {
        for p in self.named_params() {
            p.tensor.borrow_mut().zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|p| p.tensor.borrow().numel())
            .sum()
    }

    /// Deterministic (name, tensor, decay, quantizer) listing of every
    /// parameter, adapters included.
    pub fn named_params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &SharedTensor, decay: bool, spec: QuantizerSpec| {
            out.push(NamedParam {
                name,
                tensor: t.clone(),
                decay,
                quant: spec,
            });
        };
        push(
            "tok_emb".into(),
            &self.tok_emb,
            true,
            self.tok_emb_spec,
        );
        if let Some(a) = &self.tok_emb_lora {
            push("tok_emb.lora_u".into(), &a.u, true, QuantizerSpec::none());
            push("tok_emb.lora_v".into(), &a.v, true, QuantizerSpec::none());
        }
        push("pos_emb".into(), &self.pos_emb, true, QuantizerSpec::none());
        for (i, layer) in self.layers.iter().enumerate() {
            let mats = [
                ("attn.wq", &layer.wq),
                ("attn.wk", &layer.wk),
                ("attn.wv", &layer.wv),
                ("attn.wo", &layer.wo),
                ("ffn.w_up", &layer.ffn_up),
                ("ffn.w_down", &layer.ffn_down),
            ];
            for (tag, lin) in mats {
                push(format!("layer{i}.{tag}"), &lin.w, true, lin.spec);
                if let Some(a) = &lin.lora {
                    push(format!("layer{i}.{tag}.lora_u"), &a.u, true, QuantizerSpec::none());
                    push(format!("layer{i}.{tag}.lora_v"), &a.v, true, QuantizerSpec::none());
                }
                push(format!("layer{i}.{tag}.bias"), &lin.b, false, QuantizerSpec::none());
            }
            push(format!("layer{i}.ln1.gain"), &layer.ln1_gain, false, QuantizerSpec::none());
            push(format!("layer{i}.ln1.bias"), &layer.ln1_bias, false, QuantizerSpec::none());
            push(format!("layer{i}.ln2.gain"), &layer.ln2_gain, false, QuantizerSpec::none());
            push(format!("layer{i}.ln2.bias"), &layer.ln2_bias, false, QuantizerSpec::none());
        }
        push("cls.w".into(), &self.cls_w, true, QuantizerSpec::none());
        push("cls.b".into(), &self.cls_b, false, QuantizerSpec::none());
        out
    }

    /// Mutable access to each quantizable matrix and its canonical name
    /// (attention/FFN projections and the token embedding).
    pub fn quantizable_matrices_mut(&mut self) -> Vec<(String, &mut QLinear)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn.wq"), &mut layer.wq));
            out.push((format!("layer{i}.attn.wk"), &mut layer.wk));
            out.push((format!("layer{i}.attn.wv"), &mut layer.wv));
            out.push((format!("layer{i}.attn.wo"), &mut layer.wo));
            out.push((format!("layer{i}.ffn.w_up"), &mut layer.ffn_up));
            out.push((format!("layer{i}.ffn.w_down"), &mut layer.ffn_down));
        }
        out
    }

    /// Applies one weight-quantizer spec to every attention/FFN matrix and
    /// optionally the token embedding; layernorm and biases are never
    /// quantized, nor is the classifier head.
    pub fn set_weight_quantizer(&mut self, spec: QuantizerSpec, embedding_spec: Option<QuantizerSpec>) {
        for (_, lin) in self.quantizable_matrices_mut() {
            lin.spec = spec;
        }
        if let Some(es) = embedding_spec {
            self.tok_emb_spec = es;
        }
    }

    /// Runs the encoder on a flat `[batch * seq]` token buffer.
    pub fn forward(&self, g: &mut Graph, tokens: &[u32], batch: usize) -> Result<ModelOutputs> {
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::input(format!(
                "token buffer of {} does not divide into {batch} rows",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dk = self.config.head_dim();

        // embeddings
        let emb_table = {
            let raw = g.param(&self.tok_emb);
            let quantized = if self.tok_emb_spec.kind == QuantKind::None {
                raw
            } else {
                ste_quantize(g, raw, &self.tok_emb_spec)?
            };
            match &self.tok_emb_lora {
                Some(a) => {
                    let uv = lora_residual(g, a)?;
                    g.add(quantized, uv)?
                }
                None => quantized,
            }
        };
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.gather(emb_table, &ids)?;
        let mut h = g.reshape(tok, vec![batch, seq, d])?;
        let pos_table = g.param(&self.pos_emb);
        let pos_rows: Vec<usize> = (0..seq).collect();
        let pos = g.gather(pos_table, &pos_rows)?;
        h = g.add_broadcast(h, pos)?;

        let mut hiddens = Vec::with_capacity(self.layers.len());
        let mut attn_probs = Vec::with_capacity(self.layers.len());
        let mut attn_scores = Vec::with_capacity(self.layers.len());

        for layer in &self.layers {
            let x = h;
            let q = self.quantized_linear(g, x, &layer.wq)?;
            let k = self.quantized_linear(g, x, &layer.wk)?;
            let v = self.quantized_linear(g, x, &layer.wv)?;

            let split = |g: &mut Graph, t: Value| -> Result<Value> {
                let r = g.reshape(t, vec![batch, seq, heads, dk])?;
                g.permute(r, &[0, 2, 1, 3])
            };
            let qh = split(g, q)?;
            let kh = split(g, k)?;
            let vh = split(g, v)?;

            let kt = g.permute(kh, &[0, 1, 3, 2])?;
            let raw_scores = g.matmul(qh, kt)?;
            let scores = g.scale(raw_scores, 1.0 / (dk as f32).sqrt());
            let probs = g.softmax(scores)?;

            let ctx = g.matmul(probs, vh)?;
            let merged = g.permute(ctx, &[0, 2, 1, 3])?;
            let merged = g.reshape(merged, vec![batch, seq, d])?;
            let attn_out = self.quantized_linear(g, merged, &layer.wo)?;

            let res1 = g.add(x, attn_out)?;
            let ln1_g = g.param(&layer.ln1_gain);
            let ln1_b = g.param(&layer.ln1_bias);
            let h1 = g.layernorm(res1, ln1_g, ln1_b)?;

            let up = self.quantized_linear(g, h1, &layer.ffn_up)?;
            let act = match self.config.activation {
                Activation::Gelu => g.gelu(up),
                Activation::Relu => g.relu(up),
            };
            let down = self.quantized_linear(g, act, &layer.ffn_down)?;
            let res2 = g.add(h1, down)?;
            let ln2_g = g.param(&layer.ln2_gain);
            let ln2_b = g.param(&layer.ln2_bias);
            h = g.layernorm(res2, ln2_g, ln2_b)?;

            hiddens.push(h);
            attn_probs.push(probs);
            attn_scores.push(scores);
        }

        let cls_tok = g.select_axis1(h, 0)?;
        let wc = g.param(&self.cls_w);
        let bc = g.param(&self.cls_b);
        let proj = g.matmul(cls_tok, wc)?;
        let logits = g.add_broadcast(proj, bc)?;

        Ok(ModelOutputs {
            logits,
            hiddens,
            attn_probs,
            attn_scores,
        })
    }

    /// `y = x * (quantize(W) + U*V) + b` with straight-through gradients to
    /// the latent weights and exact gradients to the adapter.
    pub fn quantized_linear(&self, g: &mut Graph, x: Value, lin: &QLinear) -> Result<Value> {
        let x = if self.quantize_activations {
            ste_fake_int8(g, x)?
        } else {
            x
        };
        let w = g.param(&lin.w);
        let w_eff = if lin.spec.kind == QuantKind::None {
            w
        } else {
            ste_quantize(g, w, &lin.spec)?
        };
        let w_eff = match &lin.lora {
            Some(a) => {
                let uv = lora_residual(g, a)?;
                g.add(w_eff, uv)?
            }
            None => w_eff,
        };
        let y = g.matmul(x, w_eff)?;
        let b = g.param(&lin.b);
        g.add_broadcast(y, b)
    }
}

/// One named parameter handle.
pub struct NamedParam {
    pub name: String,
    pub tensor: SharedTensor,
    /// Whether weight decay applies (matrices yes, biases/layernorm no).
    pub decay: bool,
    /// Quantizer used when the parameter is serialized.
    pub quant: QuantizerSpec,
}

fn lora_residual(g: &mut Graph, a: &LoRaAdapter) -> Result<Value> {
    let u = g.param(&a.u);
    let v = g.param(&a.v);
    g.matmul(u, v)
}

/// Quantize-with-straight-through: forward runs the spec's weight quantizer,
/// backward passes the output gradient to the latents unchanged (or clipped
/// to `|w| <= ste_clip` when configured).
pub fn ste_quantize(g: &mut Graph, w: Value, spec: &QuantizerSpec) -> Result<Value> {
    let fwd_spec = *spec;
    let clip = spec.ste_clip;
    g.custom_grad(
        &[w],
        move |ins| {
            let (shape, data) = ins[0];
            let t = Tensor::from_vec(shape.to_vec(), data.to_vec())?;
            let qz = quantize_weights(&t, &fwd_spec)?;
            Ok((shape.to_vec(), qz.q.data().to_vec()))
        },
        move |saved, gout| match clip {
            None => vec![gout.to_vec()],
            Some(c) => {
                let latents = &saved.inputs[0].1;
                vec![gout
                    .iter()
                    .zip(latents)
                    .map(|(gi, wi)| if wi.abs() <= c { *gi } else { 0.0 })
                    .collect()]
            }
        },
    )
}

/// INT8 fake-quantization with identity gradients.
pub fn ste_fake_int8(g: &mut Graph, x: Value) -> Result<Value> {
    g.custom_grad(
        &[x],
        |ins| {
            let (shape, data) = ins[0];
            Ok((shape.to_vec(), fake_quantize_int8(data)))
        },
        |_saved, gout| vec![gout.to_vec()],
    )
}
