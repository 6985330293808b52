//! Field rasters, augmentation, splits and the synthetic field generator.

mod augment;
mod io;
mod split;
mod synth;
mod terrain;

pub use augment::{augment, center_crop, to_model_input, AugSample, AugmentSpec};
pub use io::{load_attributes, load_field, write_field, write_gray_png, write_rgb_png, ATTRIBUTE_FILES, MASK_FILE};
pub use split::{
    build_splits, imbalance_stats, read_manifest, write_manifest, ImbalanceStats, ManifestEntry, Split,
    SplitAssignment,
};
pub use synth::{synth_field, synth_field_with, SynthSpec};
pub use terrain::{
    d8_receivers, derive_terrain, dem_from_hills, flow_accumulation_d8, log_scale, synth_dem, Hill, Raster, D8_OFFSETS,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attributes in stacking order.
pub const ATTRIBUTES: [&str; 5] = ["aspect", "flow", "slope", "ndvi", "yield"];

/// Channels of the stacked input (five attributes, three channels each).
pub const STACK_CHANNELS: usize = 15;

/// One field: five RGB attribute rasters and a binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    pub id: String,
    /// `[15, H, W]`, values in `[0, 1]`.
    pub attributes: Tensor<f32>,
    /// `H * W` values in `{0, 1}`.
    pub mask: Vec<u8>,
}

impl FieldStack {
    pub fn new(id: impl Into<String>, attributes: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let s = attributes.shape();
        if s.len() != 3 || s[0] != STACK_CHANNELS {
            return Err(Error::dim(format!("field stack must be [15, H, W], got {s:?}")));
        }
        if mask.len() != s[1] * s[2] {
            return Err(Error::dim(format!("mask has {} pixels, rasters {}x{}", mask.len(), s[1], s[2])));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(FieldStack {
            id: id.into(),
            attributes,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.attributes.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.attributes.shape()[2]
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    /// The three channels of attribute `index` (stacking order).
    pub fn attribute(&self, index: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.attributes.data()[3 * index * n..3 * (index + 1) * n]
    }
}

/// A model-ready sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub field_id: String,
    /// `[C, H, W]`.
    pub input: Tensor<T>,
    /// `[1, H, W]` in `{0, 1}`.
    pub mask: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(id: impl Into<String>, field_id: impl Into<String>, input: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        let (si, sm) = (input.shape(), mask.shape());
        if si.len() != 3 || sm.len() != 3 || sm[0] != 1 || si[1..] != sm[1..] {
            return Err(Error::dim(format!("sample input {si:?} does not match mask {sm:?}")));
        }
        Ok(Sample {
            id: id.into(),
            field_id: field_id.into(),
            input,
            mask,
        })
    }

    /// Build from a field stack at its native size.
    pub fn from_field(stack: &FieldStack) -> Result<Self> {
        let (h, w) = (stack.height(), stack.width());
        let mask = Tensor::new(&[1, h, w], stack.mask.iter().map(|&v| T::lit(v as f64)).collect())?;
        Self::new(stack.id.clone(), stack.id.clone(), stack.attributes.cast(), mask)
    }

    pub fn height(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[2]
    }

    /// Same sample with the attribute stack collapsed to five luma channels.
    pub fn to_grayscale(&self) -> Result<Self> {
        Ok(Sample {
            input: to_grayscale(&self.input)?,
            ..self.clone()
        })
    }
}

/// Luma `0.299 R + 0.587 G + 0.114 B` per attribute: `[15, H, W] -> [5, H, W]`.
pub fn to_grayscale<T: Scalar>(stack: &Tensor<T>) -> Result<Tensor<T>> {
    let s = stack.shape();
    if s.len() != 3 || s[0] != STACK_CHANNELS {
        return Err(Error::dim(format!("grayscale conversion expects [15, H, W], got {s:?}")));
    }
    let n = s[1] * s[2];
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let d = stack.data();
    let mut out = Vec::with_capacity(5 * n);
    for a in 0..5 {
        let base = 3 * a * n;
        out.extend((0..n).map(|i| wr * d[base + i] + wg * d[base + n + i] + wb * d[base + 2 * n + i]));
    }
    Tensor::new(&[5, s[1], s[2]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_examples() {
        let mut v = vec![0.0f64; 15];
        v[0] = 1.0; // red of aspect
        for c in 3..6 {
            v[c] = 0.4; // gray flow
        }
        for c in 6..9 {
            v[c] = 1.0; // white slope
        }
        let g = to_grayscale(&Tensor::new(&[15, 1, 1], v).unwrap()).unwrap();
        assert!((g.data()[0] - 0.299).abs() < 1e-12);
        assert!((g.data()[1] - 0.4).abs() < 1e-12);
        assert!((g.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn field_stack_rejects_nonbinary_mask() {
        let t = Tensor::<f32>::zeros(&[15, 2, 2]);
        assert!(FieldStack::new("f", t.clone(), vec![0, 1, 0, 1]).is_ok());
        assert!(FieldStack::new("f", t, vec![0, 2, 0, 1]).is_err());
    }
}
