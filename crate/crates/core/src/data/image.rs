use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// 8-bit grayscale image; pixel value `v` represents `v / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return shape_err(format!("{} pixels for a {height}×{width} image", pixels.len()));
        }
        Ok(Self { height, width, pixels })
    }

    /// Quantizes values in `[0, 1]` (clamped) to 8 bits.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(height, width, pixels)
    }

    /// `H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let scale = T::one() / T::lit(255.0);
        let data = self.pixels.iter().map(|&p| T::lit(p as f64) * scale).collect();
        Tensor::leaf(data, vec![self.height, self.width], false)
    }
}

/// Binary `H×W` mask stored as 0/1 bytes, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return shape_err(format!("{} mask values for a {height}×{width} mask", bits.len()));
        }
        let bits = bits.into_iter().map(|b| (b != 0) as u8).collect();
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![0; height * width] }
    }

    /// Thresholds a confidence map: `p >= threshold` is foreground.
    pub fn from_scores<T: Scalar>(height: usize, width: usize, scores: &[T], threshold: T) -> Result<Self> {
        Self::new(height, width, scores.iter().map(|&p| (p >= threshold) as u8).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b != 0 { T::one() } else { T::zero() }).collect();
        Tensor::leaf(data, vec![self.height, self.width], false)
    }

    /// Row-major, MSB-first bit packing; `ceil(H·W/8)` bytes.
    pub fn pack_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b != 0 {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack_bits(height: usize, width: usize, packed: &[u8]) -> Result<Self> {
        let n = height * width;
        if packed.len() != n.div_ceil(8) {
            return shape_err(format!("{} packed bytes for a {height}×{width} mask", packed.len()));
        }
        let bits = (0..n).map(|i| (packed[i / 8] >> (7 - i % 8)) & 1).collect();
        Ok(Self { height, width, bits })
    }
}
