//! Model checkpoints.
//!
//! Layout: magic `XTC1`, the eight `TransformerConfig` fields as
//! little-endian u32, a u32 tensor count, then one tensor record per
//! parameter in the segment format. Quantized matrices are stored packed
//! (1 or 2 bits per element plus scales); everything else is raw f32.
//! Loading reconstructs latent weights from the dequantized codebook values,
//! which re-quantize to themselves, so forward outputs are reproduced
//! exactly.

use super::{Activation, EncoderModel, LoRaAdapter, TransformerConfig};
use crate::error::{Error, Result};
use crate::quant::{pack, quantize_weights, Cursor, Granularity, QuantKind, QuantizerSpec, Segment};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"XTC1";

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let c = &model.config;
    let fields = [
        c.num_layers,
        c.hidden,
        c.heads,
        c.ffn_dim,
        c.vocab_size,
        c.max_seq_len,
        c.num_classes,
        match c.activation {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        },
    ];
    for f in fields {
        buf.extend_from_slice(&(f as u32).to_le_bytes());
    }
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let t = p.tensor.borrow();
        let seg = match p.quant.kind {
            QuantKind::Binary | QuantKind::Ternary => {
                let qz = quantize_weights(&t, &p.quant)?;
                let packed = pack(&qz.q, &qz.scales, p.quant.bits(), p.quant.granularity)?;
                Segment::from_packed(&p.name, &packed)
            }
            _ => Segment::from_f32(&p.name, &t),
        };
        seg.write_to(&mut buf);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor::new(&buf);
    let magic = cur.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut field = || -> Result<usize> { Ok(cur.u32()? as usize) };
    let num_layers = field()?;
    let hidden = field()?;
    let heads = field()?;
    let ffn_dim = field()?;
    let vocab_size = field()?;
    let max_seq_len = field()?;
    let num_classes = field()?;
    let activation = match field()? {
        0 => Activation::Gelu,
        1 => Activation::Relu,
        other => {
            return Err(Error::Format {
                offset: cur.offset() - 4,
                msg: format!("unknown activation tag {other}"),
            })
        }
    };
    let config = TransformerConfig {
        num_layers,
        hidden,
        heads,
        ffn_dim,
        vocab_size,
        max_seq_len,
        num_classes,
        activation,
    };
    config
        .validate()
        .map_err(|e| Error::Format {
            offset: 4,
            msg: format!("invalid config block: {e}"),
        })?;

    let count = cur.u32()? as usize;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let offset = cur.offset();
        let seg = Segment::read_from(&mut cur)?;
        segments.push((offset, seg));
    }
    if !cur.is_at_end() {
        return Err(cur.format_err("trailing bytes after final tensor record"));
    }

    let mut model = EncoderModel::zeros(config)?;
    let slots: BTreeMap<String, crate::tensor::SharedTensor> = model
        .named_params()
        .into_iter()
        .map(|p| (p.name, p.tensor))
        .collect();

    let mut quant_specs: BTreeMap<String, QuantizerSpec> = BTreeMap::new();
    let mut lora_parts: BTreeMap<String, (Option<crate::tensor::Tensor>, Option<crate::tensor::Tensor>)> =
        BTreeMap::new();

    for (offset, seg) in &segments {
        let tensor = seg.to_tensor().map_err(|e| Error::Format {
            offset: *offset,
            msg: e.to_string(),
        })?;
        if let Some(base) = seg.name.strip_suffix(".lora_u") {
            lora_parts.entry(base.to_string()).or_default().0 = Some(tensor);
            continue;
        }
        if let Some(base) = seg.name.strip_suffix(".lora_v") {
            lora_parts.entry(base.to_string()).or_default().1 = Some(tensor);
            continue;
        }
        let slot = slots.get(&seg.name).ok_or_else(|| Error::Format {
            offset: *offset,
            msg: format!("unknown tensor name {:?}", seg.name),
        })?;
        {
            let mut t = slot.borrow_mut();
            if t.shape() != tensor.shape() {
                return Err(Error::Format {
                    offset: *offset,
                    msg: format!(
                        "tensor {:?} has shape {:?}, model expects {:?}",
                        seg.name,
                        tensor.shape(),
                        t.shape()
                    ),
                });
            }
            t.data_mut().copy_from_slice(tensor.data());
        }
        match seg.quant_kind() {
            QuantKind::Binary => {
                quant_specs.insert(
                    seg.name.clone(),
                    QuantizerSpec {
                        kind: QuantKind::Binary,
                        granularity: seg.granularity,
                        ..QuantizerSpec::default()
                    },
                );
            }
            QuantKind::Ternary => {
                quant_specs.insert(
                    seg.name.clone(),
                    QuantizerSpec {
                        kind: QuantKind::Ternary,
                        granularity: seg.granularity,
                        ..QuantizerSpec::default()
                    },
                );
            }
            _ => {}
        }
    }

    for (name, lin) in model.quantizable_matrices_mut() {
        if let Some(spec) = quant_specs.get(&name) {
            lin.spec = *spec;
        }
        if let Some((Some(u), Some(v))) = lora_parts.remove(&name) {
            lin.lora = Some(LoRaAdapter::from_tensors(u, v)?);
        }
    }
    if let Some(spec) = quant_specs.get("tok_emb") {
        model.tok_emb_spec = *spec;
    }
    if let Some((Some(u), Some(v))) = lora_parts.remove("tok_emb") {
        model.tok_emb_lora = Some(LoRaAdapter::from_tensors(u, v)?);
    }
    if let Some((base, _)) = lora_parts.into_iter().next() {
        return Err(Error::Format {
            offset: 0,
            msg: format!("incomplete or orphaned adapter for {base:?}"),
        });
    }
    Ok(model)
}

/// Size of the serialized checkpoint in bytes without writing it out.
pub fn checkpoint_size(model: &EncoderModel) -> Result<usize> {
    let mut total = 4 + 8 * 4 + 4;
    for p in model.named_params() {
        let t = p.tensor.borrow();
        let payload = match p.quant.kind {
            QuantKind::Binary => t.numel().div_ceil(8),
            QuantKind::Ternary => (t.numel() * 2).div_ceil(8),
            _ => t.numel() * 4,
        };
        let scale_count = match p.quant.kind {
            QuantKind::Binary | QuantKind::Ternary => match p.quant.granularity {
                Granularity::PerTensor => 1,
                Granularity::PerRow => t.shape()[0],
            },
            _ => 0,
        };
        total += 4 + p.name.len() + 1 + 1 + 4 + 4 * t.shape().len() + 4 + 4 * scale_count + 4 + payload;
    }
    Ok(total)
}
