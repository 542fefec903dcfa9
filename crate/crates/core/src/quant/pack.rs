//! Bit-packing codec for quantized tensors and the serialized tensor-record
//! format used by checkpoints.
//!
//! 1-bit layout: bit `b` of byte `k` encodes element `8k + b`, set = positive.
//! 2-bit (ternary) layout: code `j` of byte `k` occupies bits `2j..2j+2` of
//! element `4k + j`, with codes `00 = 0`, `01 = +alpha`, `10 = -alpha`.
//! All integers in the record format are little-endian.

use super::{Granularity, QuantKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bit-packed quantized tensor plus its scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub bits: u8,
    pub shape: Vec<usize>,
    pub granularity: Granularity,
    /// Packed code bytes; length is `ceil(numel * bits / 8)`.
    pub packed: Vec<u8>,
    /// One scale per tensor or per row.
    pub scales: Vec<f32>,
}

fn scope_len(shape: &[usize], g: Granularity, n: usize) -> usize {
    match g {
        Granularity::PerTensor => n,
        Granularity::PerRow => n / shape[0],
    }
}

fn expect_scales(shape: &[usize], g: Granularity) -> usize {
    match g {
        Granularity::PerTensor => 1,
        Granularity::PerRow => shape[0],
    }
}

/// Packs a codebook-valued tensor (`{-a, +a}` for 1-bit, `{-a, 0, +a}` for
/// 2-bit, integers in `[-127, 127]` for 8-bit). Values outside the codebook
/// are a codec error.
pub fn pack(
    q: &Tensor,
    scales: &[f32],
    bits: u8,
    granularity: Granularity,
) -> Result<PackedTensor> {
    let n = q.numel();
    if n == 0 {
        return Err(Error::dim("pack: empty tensor"));
    }
    if granularity == Granularity::PerRow && q.shape().len() != 2 {
        return Err(Error::dim(format!(
            "pack: per-row granularity requires 2-D, got {:?}",
            q.shape()
        )));
    }
    if bits != 8 && scales.len() != expect_scales(q.shape(), granularity) {
        return Err(Error::codec(format!(
            "pack: expected {} scales, got {}",
            expect_scales(q.shape(), granularity),
            scales.len()
        )));
    }
    let sl = scope_len(q.shape(), granularity, n);
    let data = q.data();
    let packed = match bits {
        1 => {
            let mut bytes = vec![0u8; n.div_ceil(8)];
            for (i, &v) in data.iter().enumerate() {
                let alpha = scales[i / sl];
                let code = if v == alpha {
                    // sign(0) = +1, so an all-zero scope packs as positive
                    true
                } else if v == -alpha && alpha != 0.0 {
                    false
                } else {
                    return Err(Error::codec(format!(
                        "pack(1-bit): value {v} at index {i} outside codebook {{-{alpha}, +{alpha}}}"
                    )));
                };
                if code {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            bytes
        }
        2 => {
            let mut bytes = vec![0u8; (n * 2).div_ceil(8)];
            for (i, &v) in data.iter().enumerate() {
                let alpha = scales[i / sl];
                let code: u8 = if v == 0.0 {
                    0b00
                } else if v == alpha {
                    0b01
                } else if v == -alpha {
                    0b10
                } else {
                    return Err(Error::codec(format!(
                        "pack(2-bit): value {v} at index {i} outside codebook {{-{alpha}, 0, +{alpha}}}"
                    )));
                };
                bytes[i / 4] |= code << (2 * (i % 4));
            }
            bytes
        }
        8 => {
            let mut bytes = Vec::with_capacity(n);
            for (i, &v) in data.iter().enumerate() {
                if v.fract() != 0.0 || !(-127.0..=127.0).contains(&v) {
                    return Err(Error::codec(format!(
                        "pack(8-bit): value {v} at index {i} is not an int8 code"
                    )));
                }
                bytes.push(v as i8 as u8);
            }
            bytes
        }
        other => {
            return Err(Error::codec(format!(
                "pack: unsupported bit width {other}"
            )))
        }
    };
    Ok(PackedTensor {
        bits,
        shape: q.shape().to_vec(),
        granularity,
        packed,
        scales: scales.to_vec(),
    })
}

/// Exact inverse of [`pack`].
pub fn unpack(p: &PackedTensor) -> Result<(Tensor, Vec<f32>)> {
    let n: usize = p.shape.iter().product();
    let sl = scope_len(&p.shape, p.granularity, n);
    let mut data = vec![0.0f32; n];
    match p.bits {
        1 => {
            if p.packed.len() != n.div_ceil(8) {
                return Err(Error::codec(format!(
                    "unpack(1-bit): payload {} bytes, expected {}",
                    p.packed.len(),
                    n.div_ceil(8)
                )));
            }
            for (i, slot) in data.iter_mut().enumerate() {
                let alpha = p.scales[i / sl];
                let set = p.packed[i / 8] & (1 << (i % 8)) != 0;
                *slot = if set { alpha } else { -alpha };
            }
        }
        2 => {
            if p.packed.len() != (n * 2).div_ceil(8) {
                return Err(Error::codec(format!(
                    "unpack(2-bit): payload {} bytes, expected {}",
                    p.packed.len(),
                    (n * 2).div_ceil(8)
                )));
            }
            for (i, slot) in data.iter_mut().enumerate() {
                let alpha = p.scales[i / sl];
                let code = (p.packed[i / 4] >> (2 * (i % 4))) & 0b11;
                *slot = match code {
                    0b00 => 0.0,
                    0b01 => alpha,
                    0b10 => -alpha,
                    _ => {
                        return Err(Error::codec(format!(
                            "unpack(2-bit): invalid code 11 at element {i}"
                        )))
                    }
                };
            }
        }
        8 => {
            if p.packed.len() != n {
                return Err(Error::codec(format!(
                    "unpack(8-bit): payload {} bytes, expected {n}",
                    p.packed.len()
                )));
            }
            for (i, slot) in data.iter_mut().enumerate() {
                *slot = p.packed[i] as i8 as f32;
            }
        }
        other => {
            return Err(Error::codec(format!(
                "unpack: unsupported bit width {other}"
            )))
        }
    }
    Ok((Tensor::from_vec(p.shape.clone(), data)?, p.scales.clone()))
}

// ---- serialized tensor records ----------------------------------------

/// One named tensor record in the checkpoint segment format:
/// `{name_len u32, name utf-8, bits u8, granularity u8, rank u32, dims u32
/// each, scale_count u32, scales f32 each, payload_len u32, payload}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub bits: u8,
    pub granularity: Granularity,
    pub shape: Vec<usize>,
    pub scales: Vec<f32>,
    pub payload: Vec<u8>,
}

impl Segment {
    /// Raw full-precision record (bits = 32, payload = f32 little-endian).
    pub fn from_f32(name: &str, t: &Tensor) -> Segment {
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Segment {
            name: name.to_string(),
            bits: 32,
            granularity: Granularity::PerTensor,
            shape: t.shape().to_vec(),
            scales: Vec::new(),
            payload,
        }
    }

    pub fn from_packed(name: &str, p: &PackedTensor) -> Segment {
        Segment {
            name: name.to_string(),
            bits: p.bits,
            granularity: p.granularity,
            shape: p.shape.clone(),
            scales: p.scales.clone(),
            payload: p.packed.clone(),
        }
    }

    /// Decodes the record back to a dense tensor (dequantized codebook values
    /// for packed records).
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.bits == 32 {
            let n: usize = self.shape.iter().product();
            if self.payload.len() != n * 4 {
                return Err(Error::codec(format!(
                    "segment {}: f32 payload {} bytes, expected {}",
                    self.name,
                    self.payload.len(),
                    n * 4
                )));
            }
            let data: Vec<f32> = self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(self.shape.clone(), data)
        } else {
            let (t, _) = unpack(&PackedTensor {
                bits: self.bits,
                shape: self.shape.clone(),
                granularity: self.granularity,
                packed: self.payload.clone(),
                scales: self.scales.clone(),
            })?;
            Ok(t)
        }
    }

    /// Quantizer kind implied by the stored bit width.
    pub fn quant_kind(&self) -> QuantKind {
        match self.bits {
            1 => QuantKind::Binary,
            2 => QuantKind::Ternary,
            8 => QuantKind::Int8Activation,
            _ => QuantKind::None,
        }
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.bits);
        out.push(match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerRow => 1,
        });
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.scales.len() as u32).to_le_bytes());
        for &s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn read_from(cur: &mut Cursor<'_>) -> Result<Segment> {
        let name_len = cur.u32()? as usize;
        let name_bytes = cur.bytes(name_len)?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| cur.format_err("tensor name is not valid UTF-8"))?;
        let bits = cur.u8()?;
        let granularity = match cur.u8()? {
            0 => Granularity::PerTensor,
            1 => Granularity::PerRow,
            g => return Err(cur.format_err(&format!("unknown granularity tag {g}"))),
        };
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let scale_count = cur.u32()? as usize;
        let mut scales = Vec::with_capacity(scale_count);
        for _ in 0..scale_count {
            scales.push(f32::from_le_bytes(cur.bytes(4)?.try_into().unwrap()));
        }
        let payload_len = cur.u32()? as usize;
        let payload = cur.bytes(payload_len)?.to_vec();
        Ok(Segment {
            name,
            bits,
            granularity,
            shape,
            scales,
            payload,
        })
    }
}

/// Byte cursor that reports the offset of the first malformed field.
pub struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn format_err(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!(
                    "truncated: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{binarize, ternarize, QuantizerSpec};
    use crate::rng::stream;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn one_bit_all_positive_is_0xff() {
        let q = t(&[1.5; 8]);
        let p = pack(&q, &[1.5], 1, Granularity::PerTensor).unwrap();
        assert_eq!(p.packed, vec![0xFF]);
    }

    #[test]
    fn one_bit_1000_elements_is_125_bytes_and_matches_bit_oracle() {
        let mut rng = stream(31, "pack");
        let vals: Vec<f32> = (0..1000)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let (q, alphas) = binarize(&t(&vals), &QuantizerSpec::binary()).unwrap();
        let p = pack(&q, &alphas, 1, Granularity::PerTensor).unwrap();
        assert_eq!(p.packed.len(), 125);

        // independent bit-by-bit unpacker
        let alpha = alphas[0];
        for i in 0..1000 {
            let byte = p.packed[i / 8];
            let bit = (byte >> (i % 8)) & 1;
            let expect = if bit == 1 { alpha } else { -alpha };
            assert_eq!(q.data()[i], expect, "element {i}");
        }
    }

    #[test]
    fn round_trip_binary_and_ternary() {
        let mut rng = stream(37, "roundtrip");
        for len in [1usize, 3, 7, 8, 9, 63, 64, 65, 1000] {
            let vals: Vec<f32> = (0..len)
                .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
                .collect();
            let (q, a) = binarize(&t(&vals), &QuantizerSpec::binary()).unwrap();
            let p = pack(&q, &a, 1, Granularity::PerTensor).unwrap();
            let (q2, a2) = unpack(&p).unwrap();
            assert_eq!(q.data(), q2.data(), "1-bit len={len}");
            assert_eq!(a, a2);

            let (q, a, _) = ternarize(&t(&vals), &QuantizerSpec::ternary()).unwrap();
            let p = pack(&q, &a, 2, Granularity::PerTensor).unwrap();
            let (q2, _) = unpack(&p).unwrap();
            assert_eq!(q.data(), q2.data(), "2-bit len={len}");
        }
    }

    #[test]
    fn round_trip_per_row() {
        let mut rng = stream(41, "perrow");
        let vals: Vec<f32> = (0..6 * 9)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let w = Tensor::from_vec(vec![6, 9], vals).unwrap();
        let spec = QuantizerSpec::binary().with_granularity(Granularity::PerRow);
        let (q, a) = binarize(&w, &spec).unwrap();
        assert_eq!(a.len(), 6);
        let p = pack(&q, &a, 1, Granularity::PerRow).unwrap();
        let (q2, _) = unpack(&p).unwrap();
        assert_eq!(q.data(), q2.data());
    }

    #[test]
    fn round_trip_int8() {
        let mut rng = stream(43, "int8pack");
        let vals: Vec<f32> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (q, s) = crate::quant::quantize_activation_int8(&t(&vals));
        let p = pack(&q, &[s], 8, Granularity::PerTensor).unwrap();
        let (q2, s2) = unpack(&p).unwrap();
        assert_eq!(q.data(), q2.data());
        assert_eq!(s2, vec![s]);
    }

    #[test]
    fn pack_rejects_values_outside_codebook() {
        let q = t(&[1.0, 0.5]); // 0.5 not in {-1, +1}
        assert!(matches!(
            pack(&q, &[1.0], 1, Granularity::PerTensor),
            Err(Error::Codec(_))
        ));
        let q = t(&[1.0, 0.25]);
        assert!(matches!(
            pack(&q, &[1.0], 2, Granularity::PerTensor),
            Err(Error::Codec(_))
        ));
    }

    #[test]
    fn unpack_rejects_invalid_ternary_code() {
        let p = PackedTensor {
            bits: 2,
            shape: vec![2],
            granularity: Granularity::PerTensor,
            packed: vec![0b0000_1101], // second code = 11
            scales: vec![1.0],
        };
        assert!(matches!(unpack(&p), Err(Error::Codec(_))));
    }

    #[test]
    fn all_zero_scope_round_trips() {
        let (q, a) = binarize(&t(&[0.0; 5]), &QuantizerSpec::binary()).unwrap();
        let p = pack(&q, &a, 1, Granularity::PerTensor).unwrap();
        let (q2, _) = unpack(&p).unwrap();
        assert_eq!(q.data(), q2.data());
    }

    #[test]
    fn segment_round_trip() {
        let mut rng = stream(47, "segment");
        let vals: Vec<f32> = (0..37)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let raw = Segment::from_f32("layer0.attn.wq", &t(&vals));
        let (q, a) = binarize(&t(&vals), &QuantizerSpec::binary()).unwrap();
        let packed = Segment::from_packed(
            "layer0.attn.wk",
            &pack(&q, &a, 1, Granularity::PerTensor).unwrap(),
        );

        let mut buf = Vec::new();
        raw.write_to(&mut buf);
        packed.write_to(&mut buf);

        let mut cur = Cursor::new(&buf);
        let r1 = Segment::read_from(&mut cur).unwrap();
        let r2 = Segment::read_from(&mut cur).unwrap();
        assert!(cur.is_at_end());
        assert_eq!(r1, raw);
        assert_eq!(r2, packed);
        assert_eq!(r1.to_tensor().unwrap().data(), &vals[..]);
        assert_eq!(r2.to_tensor().unwrap().data(), q.data());
    }

    #[test]
    fn truncated_segment_reports_offset() {
        let seg = Segment::from_f32("w", &t(&[1.0, 2.0]));
        let mut buf = Vec::new();
        seg.write_to(&mut buf);
        buf.truncate(buf.len() - 3);
        let mut cur = Cursor::new(&buf);
        match Segment::read_from(&mut cur) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
