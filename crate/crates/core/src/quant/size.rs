//! Model-size accounting over a parameter inventory.

use crate::error::{Error, Result};

/// One parameter tensor in the inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub element_count: usize,
    pub bits: u8,
    /// Whether the entry's scale factors count toward the byte total.
    pub is_scale_overhead_counted: bool,
    /// Number of f32 scales the entry carries.
    pub scale_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamInventory {
    entries: Vec<ParamEntry>,
}

impl ParamInventory {
    pub fn new() -> Self {
        ParamInventory::default()
    }

    pub fn push(
        &mut self,
        name: &str,
        element_count: usize,
        bits: u8,
        scale_count: usize,
    ) -> Result<()> {
        if element_count == 0 {
            return Err(Error::config(format!("inventory entry {name}: zero elements")));
        }
        if ![1, 2, 8, 32].contains(&bits) {
            return Err(Error::config(format!(
                "inventory entry {name}: bits must be one of 1/2/8/32, got {bits}"
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            element_count,
            bits,
            is_scale_overhead_counted: scale_count > 0,
            scale_count,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Size report: quantized bytes (scale overhead included), the same in MB
/// (2^20 bytes), and the headline compression ratio versus an all-32-bit
/// model (scale overhead excluded from the ratio).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeReport {
    pub bytes: f64,
    pub megabytes: f64,
    pub baseline_bytes: f64,
    pub ratio_vs_fp32: f64,
}

pub fn model_size(inventory: &ParamInventory) -> Result<SizeReport> {
    if inventory.is_empty() {
        return Err(Error::config("model_size: empty inventory"));
    }
    let mut quant_bits = 0.0f64;
    let mut scale_bits = 0.0f64;
    let mut baseline_bits = 0.0f64;
    for e in inventory.entries() {
        quant_bits += e.element_count as f64 * e.bits as f64;
        baseline_bits += e.element_count as f64 * 32.0;
        if e.is_scale_overhead_counted {
            scale_bits += e.scale_count as f64 * 32.0;
        }
    }
    let bytes = (quant_bits + scale_bits) / 8.0;
    Ok(SizeReport {
        bytes,
        megabytes: bytes / (1024.0 * 1024.0),
        baseline_bytes: baseline_bits / 8.0,
        ratio_vs_fp32: baseline_bits / quant_bits,
    })
}
