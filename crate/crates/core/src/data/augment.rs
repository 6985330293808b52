//! Center crops, random crops and random rotations of a field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FieldStack, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::bilinear_resize;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub center_crop_sizes: Vec<usize>,
    pub n_random_crops: usize,
    pub random_crop_size: usize,
    pub n_rotations: usize,
    /// Rotation angles are drawn uniformly from this range, in degrees.
    pub rotation_range_deg: (f64, f64),
    pub target_size: usize,
    pub model_input_size: usize,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            center_crop_sizes: vec![900, 700, 572, 300],
            n_random_crops: 10,
            random_crop_size: 572,
            n_rotations: 20,
            rotation_range_deg: (5.0, 60.0),
            target_size: 572,
            model_input_size: 512,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range_deg;
        if self.target_size == 0 || self.random_crop_size == 0 || self.model_input_size == 0 {
            return Err(Error::config("augmentation sizes must be >= 1"));
        }
        if !(lo <= hi) {
            return Err(Error::config(format!("rotation range [{lo}, {hi}] is empty")));
        }
        if self.center_crop_sizes.contains(&0) {
            return Err(Error::config("center crop sizes must be >= 1"));
        }
        Ok(())
    }
}

/// One augmented sample at the target size.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSample {
    /// Short tag such as `center700`, `crop3` or `rot12`.
    pub augmentation: String,
    /// `[15, S, S]`.
    pub input: Tensor<f32>,
    /// `S * S` values in `{0, 1}`.
    pub mask: Vec<u8>,
}

fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for r in top..top + height {
            let base = ch * h * w + r * w;
            out.extend_from_slice(&x.data()[base + left..base + left + width]);
        }
    }
    Tensor::new(&[c, height, width], out).expect("crop extents checked by caller")
}

/// Central `size x size` window of a `[C, H, W]` tensor.
pub fn center_crop<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] < size || s[2] < size || size == 0 {
        return Err(Error::dim(format!("cannot center-crop {s:?} to {size}x{size}")));
    }
    Ok(crop(x, (s[1] - size) / 2, (s[2] - size) / 2, size, size))
}

fn mask_tensor(mask: &[u8], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(&[1, h, w], mask.iter().map(|&v| v as f32).collect()).expect("mask size")
}

fn binarize<T: Scalar>(m: &Tensor<T>) -> Vec<u8> {
    m.data().iter().map(|v| u8::from(v.as_f64() >= 0.5)).collect()
}

fn resize_pair(input: &Tensor<f32>, mask: &Tensor<f32>, size: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    Ok((bilinear_resize(input, size, size)?, binarize(&bilinear_resize(mask, size, size)?)))
}

/// Rotate about the center: bilinear for attributes, nearest for the mask,
/// zero outside the source.
fn rotate(input: &Tensor<f32>, mask: &[u8], degrees: f64) -> (Tensor<f32>, Vec<u8>) {
    let s = input.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let n = h * w;
    let mut out = vec![0f32; c * n];
    let mut out_mask = vec![0u8; n];
    let src = input.data();
    for r in 0..h {
        for col in 0..w {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            // Inverse map from destination to source coordinates.
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                out_mask[r * w + col] = mask[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let taps = [(y0, x0, (1.0 - fy) * (1.0 - fx)), (y0, x0 + 1.0, (1.0 - fy) * fx), (y0 + 1.0, x0, fy * (1.0 - fx)), (y0 + 1.0, x0 + 1.0, fy * fx)];
            for (ty, tx, wt) in taps {
                if wt == 0.0 || ty < 0.0 || tx < 0.0 || ty as usize >= h || tx as usize >= w {
                    continue;
                }
                let si = ty as usize * w + tx as usize;
                for ch in 0..c {
                    out[ch * n + r * w + col] += wt * src[ch * n + si];
                }
            }
        }
    }
    (Tensor::new(&[c, h, w], out).expect("rotation keeps size"), out_mask)
}

/// Center-crop series, seeded random crops and seeded rotations, all at
/// `spec.target_size`. Crops larger than the source are skipped.
pub fn augment(stack: &FieldStack, spec: &AugmentSpec) -> Result<Vec<AugSample>> {
    spec.validate()?;
    let (h, w) = (stack.height(), stack.width());
    let need = spec.target_size.max(spec.random_crop_size);
    if h < need || w < need {
        return Err(Error::Input(format!(
            "field {} is {h}x{w}, smaller than the {need}x{need} augmentation size",
            stack.id
        )));
    }
    let input = &stack.attributes;
    let mask = mask_tensor(&stack.mask, h, w);
    let t = spec.target_size;
    let mut out = Vec::new();
    for &size in &spec.center_crop_sizes {
        if size > h || size > w {
            continue;
        }
        let (top, left) = ((h - size) / 2, (w - size) / 2);
        let (x, m) = resize_pair(&crop(input, top, left, size, size), &crop(&mask, top, left, size, size), t)?;
        out.push(AugSample {
            augmentation: format!("center{size}"),
            input: x,
            mask: m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rc = spec.random_crop_size;
    for i in 0..spec.n_random_crops {
        let top = rng.gen_range(0..=h - rc);
        let left = rng.gen_range(0..=w - rc);
        let (x, m) = resize_pair(&crop(input, top, left, rc, rc), &crop(&mask, top, left, rc, rc), t)?;
        out.push(AugSample {
            augmentation: format!("crop{i}"),
            input: x,
            mask: m,
        });
    }
    let (lo, hi) = spec.rotation_range_deg;
    let side = h.min(w);
    for i in 0..spec.n_rotations {
        let angle = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let (rx, rm) = rotate(input, &stack.mask, angle);
        let (top, left) = ((h - side) / 2, (w - side) / 2);
        let sq_x = crop(&rx, top, left, side, side);
        let sq_m = crop(&mask_tensor(&rm, h, w), top, left, side, side);
        let (x, m) = resize_pair(&sq_x, &sq_m, t)?;
        out.push(AugSample {
            augmentation: format!("rot{i}"),
            input: x,
            mask: m,
        });
    }
    Ok(out)
}

/// Center crop to `crop_size`, then resize to `size` if the two differ.
/// Masks are re-binarized at 0.5 after any resize.
pub fn to_model_input<T: Scalar>(sample: &Sample<T>, crop_size: usize, size: usize) -> Result<Sample<T>> {
    let crop_size = crop_size.min(sample.height()).min(sample.width());
    let x = center_crop(&sample.input, crop_size)?;
    let m = center_crop(&sample.mask, crop_size)?;
    let (x, m) = if size == crop_size {
        (x, m)
    } else {
        let mr = bilinear_resize(&m, size, size)?;
        let bin = Tensor::new(mr.shape(), binarize(&mr).into_iter().map(|v| T::lit(v as f64)).collect())?;
        (bilinear_resize(&x, size, size)?, bin)
    };
    Sample::new(sample.id.clone(), sample.field_id.clone(), x, m)
}
