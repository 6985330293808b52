//! Decoder that fuses the four encoder maps into one mask logit map.
//!
//! Every stage map is projected to `C_h` channels per pixel and resized to a
//! quarter of the input extent. The four results are concatenated and fused
//! to `C_m` channels with a dilated 3x3 convolution; a second dilated
//! convolution produces the single-channel logit map.

use crate::error::{Error, Result};
use crate::nn::{map_to_seq, seq_to_map, Conv2d, LayerNorm};
use crate::scalar::Scalar;
use crate::tensor::{conv_output_extent, Conv2dGeometry, ParamBuilder, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Unified width of each projected stage map.
    pub unified: usize,
    /// Width of the fused map.
    pub fused: usize,
    /// Dilation rate `r`.
    pub dilation: usize,
    /// Kernel size `E`.
    pub kernel: usize,
    /// Stride `S`.
    pub stride: usize,
    /// Padding `P`.
    pub padding: usize,
    /// Per-pixel layer norm and GELU between the fuse and head convolutions.
    pub fuse_activation: bool,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        DecoderConfig {
            unified: 768,
            fused: 256,
            dilation: 2,
            kernel: 3,
            stride: 1,
            padding: 2,
            fuse_activation: true,
        }
    }

    pub fn tiny() -> Self {
        DecoderConfig {
            unified: 64,
            fused: 256,
            ..Self::paper()
        }
    }

    pub fn geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry::new(self.stride, self.padding, self.dilation)
    }

    /// Checks widths and that the dilated convolutions keep every extent.
    pub fn validate(&self) -> Result<()> {
        if self.unified == 0 || self.fused == 0 || self.kernel == 0 {
            return Err(Error::config("decoder widths and kernel must be >= 1"));
        }
        if self.stride != 1 || self.dilation * (self.kernel - 1) != 2 * self.padding {
            return Err(Error::config(format!(
                "atrous geometry r={} E={} S={} P={} does not preserve spatial size",
                self.dilation, self.kernel, self.stride, self.padding
            )));
        }
        Ok(())
    }

    /// Output extent of one atrous convolution on an input extent.
    pub fn atrous_extent(&self, extent: usize) -> Result<usize> {
        conv_output_extent(extent, self.kernel, self.stride, self.padding, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub unify: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub fuse_norm: Option<LayerNorm>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, config: DecoderConfig, stage_widths: &[usize]) -> Result<Self> {
        config.validate()?;
        pb.push_scope("decoder");
        let built = (|| {
            let unify = stage_widths
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    Conv2d::new(pb, &format!("unify{}", i + 1), c, config.unified, 1, Conv2dGeometry::default())
                })
                .collect::<Result<Vec<_>>>()?;
            let geom = config.geometry();
            let fuse = Conv2d::new(
                pb,
                "fuse",
                config.unified * stage_widths.len(),
                config.fused,
                config.kernel,
                geom,
            )?;
            let fuse_norm = if config.fuse_activation {
                Some(LayerNorm::new(pb, "fuse_norm", config.fused)?)
            } else {
                None
            };
            let head = Conv2d::new(pb, "head", config.fused, 1, config.kernel, geom)?;
            Ok(Decoder {
                config: config.clone(),
                unify,
                fuse,
                fuse_norm,
                head,
            })
        })();
        pb.pop_scope();
        built
    }

    /// Per-pixel projection of stage `index` to `C_h`, resized to `target`.
    pub fn unify_and_upsample<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        index: usize,
        feature: &Var<'t, T>,
        target: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let s = feature.shape();
        if target.0 < s[1] || target.1 < s[2] {
            return Err(Error::dim(format!(
                "cannot upsample {}x{} to smaller {}x{}",
                s[1], s[2], target.0, target.1
            )));
        }
        let projected = self.unify[index].forward(tape, store, feature)?;
        projected.bilinear_resize(target.0, target.1)
    }

    /// Channel concat of the unified maps followed by the fuse convolution
    /// (and, when enabled, the per-pixel norm and GELU).
    pub fn fuse<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        maps: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::dim("fuse needs at least one map"))?
            .shape()
            .to_vec();
        for m in maps {
            if m.shape()[1..] != first[1..] {
                return Err(Error::dim(format!(
                    "fuse inputs differ in spatial size: {:?} vs {:?}",
                    first,
                    m.shape()
                )));
            }
        }
        let cat = tape.concat(maps, 0)?;
        let fused = self.fuse.forward(tape, store, &cat)?;
        match &self.fuse_norm {
            Some(norm) => {
                let (h, w) = (fused.shape()[1], fused.shape()[2]);
                let normed = norm.forward(tape, store, &map_to_seq(&fused)?)?;
                Ok(seq_to_map(&normed, h, w)?.gelu())
            }
            None => Ok(fused),
        }
    }

    /// Raw single-channel logit map at the fused resolution.
    pub fn predict_head<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        fused: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.head.forward(tape, store, fused)
    }

    /// Decoder logits `[1, H_1, W_1]` at the stage-one resolution.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        features: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if features.len() != self.unify.len() {
            return Err(Error::dim(format!(
                "decoder expects {} feature maps, got {}",
                self.unify.len(),
                features.len()
            )));
        }
        let s = features[0].shape();
        let target = (s[1], s[2]);
        let unified = features
            .iter()
            .enumerate()
            .map(|(i, f)| self.unify_and_upsample(tape, store, i, f, target))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse(tape, store, &unified)?;
        self.predict_head(tape, store, &fused)
    }
}

/// Logits resized to the input extent, then squashed to probabilities.
pub fn full_res_mask<'t, T: Scalar>(logits: &Var<'t, T>, height: usize, width: usize) -> Result<Var<'t, T>> {
    Ok(full_res_logits(logits, height, width)?.sigmoid())
}

/// Logits resized to the input extent.
pub fn full_res_logits<'t, T: Scalar>(logits: &Var<'t, T>, height: usize, width: usize) -> Result<Var<'t, T>> {
    logits.bilinear_resize(height, width)
}
