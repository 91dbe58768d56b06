//! Block-wise symmetric 4-bit quantization and model-size accounting.
//!
//! Each block of `block_size` consecutive row-major elements shares one
//! `f32` scale `absmax / 7`. Codes are signed integers in `[-7, 7]`; `-8`
//! is never produced, so the grid is symmetric and the round-trip error of
//! every element is at most half a step, `absmax / 14`.
//!
//! Packed layout: element `2i` sits in the low nibble of byte `i`, element
//! `2i + 1` in the high nibble, both as two's-complement 4-bit values.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const MAX_CODE: i8 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    block_size: usize,
    codes: Vec<u8>,
    scales: Vec<f32>,
}

fn pack_nibble(code: i8) -> u8 {
    (code as u8) & 0x0f
}

fn unpack_nibble(n: u8) -> i8 {
    // sign-extend bit 3
    ((n << 4) as i8) >> 4
}

impl QuantizedMatrix {
    /// Quantizes a 2-D tensor with absmax scaling per block.
    pub fn quantize(w: &Tensor<f32>, block_size: usize) -> Result<Self> {
        let (rows, cols) = w.dims2()?;
        if block_size == 0 {
            return Err(Error::Config("block_size must be at least 1".into()));
        }
        if !w.all_finite() {
            return Err(Error::Numeric("cannot quantize non-finite weights".into()));
        }
        let data = w.data();
        let mut codes = vec![0u8; data.len().div_ceil(2)];
        let mut scales = Vec::with_capacity(data.len().div_ceil(block_size));
        for (b, block) in data.chunks(block_size).enumerate() {
            let absmax = block.iter().fold(0f32, |m, v| m.max(v.abs()));
            let scale = absmax / MAX_CODE as f32;
            scales.push(scale);
            for (j, &v) in block.iter().enumerate() {
                let code = if scale == 0.0 {
                    0
                } else {
                    // f32::round rounds half away from zero
                    (v / scale)
                        .round()
                        .clamp(-(MAX_CODE as f32), MAX_CODE as f32) as i8
                };
                let e = b * block_size + j;
                let nib = pack_nibble(code);
                codes[e / 2] |= if e.is_multiple_of(2) { nib } else { nib << 4 };
            }
        }
        Ok(QuantizedMatrix {
            rows,
            cols,
            block_size,
            codes,
            scales,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn code(&self, e: usize) -> i8 {
        let byte = self.codes[e / 2];
        unpack_nibble(if e.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        })
    }

    pub fn codes(&self) -> Vec<i8> {
        (0..self.len()).map(|e| self.code(e)).collect()
    }

    /// Dequantized value of element `e` (row-major index).
    #[inline]
    pub fn value(&self, e: usize) -> f32 {
        self.code(e) as f32 * self.scales[e / self.block_size]
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data = (0..self.len()).map(|e| self.value(e)).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("shape matches element count")
    }

    /// `out[rows×n] += W · x[cols×n]`, dequantizing one element at a time.
    pub fn matmul_into<T: Scalar>(&self, x: &[T], n: usize, out: &mut [T]) {
        for i in 0..self.rows {
            let out_row = &mut out[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let w = self.value(i * self.cols + k);
                if w == 0.0 {
                    continue;
                }
                let w = T::from_f64(w as f64);
                for (o, &xv) in out_row.iter_mut().zip(&x[k * n..(k + 1) * n]) {
                    *o += w * xv;
                }
            }
        }
    }

    /// `out[cols×n] += Wᵀ · g[rows×n]`.
    pub fn matmul_t_into<T: Scalar>(&self, g: &[T], n: usize, out: &mut [T]) {
        for i in 0..self.rows {
            let g_row = &g[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let w = self.value(i * self.cols + k);
                if w == 0.0 {
                    continue;
                }
                let w = T::from_f64(w as f64);
                for (o, &gv) in out[k * n..(k + 1) * n].iter_mut().zip(g_row) {
                    *o += w * gv;
                }
            }
        }
    }

    /// Product with a float matrix without materializing the dequantized
    /// weights.
    pub fn qmatmul(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (k, n) = x.dims2()?;
        if k != self.cols {
            return Err(Error::shape("qmatmul", &[self.rows, self.cols], x.shape()));
        }
        let mut out = vec![0f32; self.rows * n];
        self.matmul_into(x.data(), n, &mut out);
        Tensor::new(vec![self.rows, n], out)
    }

    /// Packed codes followed by little-endian `f32` scales.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.codes.len() + 4 * self.scales.len());
        buf.extend_from_slice(&self.codes);
        for s in &self.scales {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(rows: usize, cols: usize, block_size: usize, bytes: &[u8]) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Checkpoint("block_size 0".into()));
        }
        let n = rows * cols;
        let n_codes = n.div_ceil(2);
        let n_scales = n.div_ceil(block_size);
        if bytes.len() != n_codes + 4 * n_scales {
            return Err(Error::Checkpoint(format!(
                "q4 blob for {rows}x{cols}/{block_size} should be {} bytes, got {}",
                n_codes + 4 * n_scales,
                bytes.len()
            )));
        }
        let codes = bytes[..n_codes].to_vec();
        let scales = bytes[n_codes..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let q = QuantizedMatrix {
            rows,
            cols,
            block_size,
            codes,
            scales,
        };
        if (0..n).any(|e| q.code(e) == -8) {
            return Err(Error::Checkpoint(
                "q4 code -8 is outside the symmetric grid".into(),
            ));
        }
        Ok(q)
    }

    /// Storage in bytes: packed codes plus one `f32` scale per block.
    pub fn size_bytes(&self) -> u64 {
        (self.codes.len() + 4 * self.scales.len()) as u64
    }
}

/// Model size accounting: `datatype_bits × num_weights / 8 + overhead`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeModel {
    pub datatype_bits: u64,
    pub num_weights: u64,
    pub overhead_bytes: u64,
}

impl SizeModel {
    /// 4-bit weights with one `f32` scale per block.
    pub fn q4(num_weights: u64, block_size: u64) -> Self {
        SizeModel {
            datatype_bits: 4,
            num_weights,
            overhead_bytes: 4 * num_weights.div_ceil(block_size.max(1)),
        }
    }

    pub fn f32(num_weights: u64) -> Self {
        SizeModel {
            datatype_bits: 32,
            num_weights,
            overhead_bytes: 0,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        model_size_bytes(self.datatype_bits, self.num_weights, self.overhead_bytes)
    }
}

/// Bytes needed to store `num_weights` values of `datatype_bits` each, plus
/// `overhead_bytes`. A bit count that is not a whole number of bytes rounds
/// up to the next byte.
pub fn model_size_bytes(datatype_bits: u64, num_weights: u64, overhead_bytes: u64) -> u64 {
    let bits = datatype_bits as u128 * num_weights as u128;
    (bits.div_ceil(8) as u64) + overhead_bytes
}
