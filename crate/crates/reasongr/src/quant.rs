//! Block-wise symmetric 4-bit quantization for frozen base weights.
//!
//! The matrix is flattened row-major and cut into blocks; each block stores
//! an f64 scale (absmax / 7) and signed codes in [-7, 7] packed two per
//! byte. Dequantized values are `code * scale`, so the elementwise error is
//! at most half a scale step (absmax / 14), and lattice-valued blocks
//! round-trip exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Largest code magnitude for signed 4-bit symmetric quantization.
const QMAX: f64 = 7.0;
/// Nibble bias: code -8..7 stored as 0..15 (the quantizer only emits -7..7).
const NIBBLE_BIAS: i8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    /// One scale per block: absmax of the block divided by 7.
    pub scales: Vec<f64>,
    /// Two 4-bit codes per byte; element i lives in byte i/2, low nibble
    /// for even i.
    pub codes: Vec<u8>,
}

impl QuantizedMatrix {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self, i: usize) -> i8 {
        let byte = self.codes[i / 2];
        let nibble = if i % 2 == 0 { byte & 0x0F } else { byte >> 4 };
        nibble as i8 - NIBBLE_BIAS
    }

    /// Dequantized value of flat element `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.code(i) as f64 * self.scales[i / self.block_size]
    }
}

/// Quantizes `w` with the given block size. Rejects non-finite entries.
pub fn quantize_4bit(w: &Array2<f64>, block_size: usize) -> Result<QuantizedMatrix> {
    if block_size == 0 {
        return Err(Error::Dims("block_size must be >= 1".into()));
    }
    let flat: Vec<f64> = w.iter().copied().collect();
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("cannot quantize non-finite entries".into()));
    }

    let n_blocks = flat.len().div_ceil(block_size);
    let mut scales = Vec::with_capacity(n_blocks);
    let mut codes = vec![0u8; flat.len().div_ceil(2)];

    for (b, block) in flat.chunks(block_size).enumerate() {
        let absmax = block.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale = absmax / QMAX;
        scales.push(scale);
        if scale == 0.0 {
            // all-zero block: codes stay 0, which packs to nibble 8
            for i in 0..block.len() {
                let flat_i = b * block_size + i;
                pack(&mut codes, flat_i, 0);
            }
            continue;
        }
        for (i, &x) in block.iter().enumerate() {
            let code = (x / scale).round().clamp(-QMAX, QMAX) as i8;
            pack(&mut codes, b * block_size + i, code);
        }
    }

    Ok(QuantizedMatrix {
        rows: w.nrows(),
        cols: w.ncols(),
        block_size,
        scales,
        codes,
    })
}

fn pack(codes: &mut [u8], i: usize, code: i8) {
    let nibble = (code + NIBBLE_BIAS) as u8;
    if i % 2 == 0 {
        codes[i / 2] = (codes[i / 2] & 0xF0) | nibble;
    } else {
        codes[i / 2] = (codes[i / 2] & 0x0F) | (nibble << 4);
    }
}

/// Reconstructs the full matrix as `code * scale` per element.
pub fn dequantize(q: &QuantizedMatrix) -> Array2<f64> {
    let mut out = Array2::zeros((q.rows, q.cols));
    for (i, v) in out.iter_mut().enumerate() {
        *v = q.value(i);
    }
    out
}
