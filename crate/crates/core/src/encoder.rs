//! Four-stage hierarchical transformer encoder.
//!
//! Each stage shrinks its input with an overlapped patch merge (a strided
//! convolution), runs `depth` pre-norm transformer blocks over the resulting
//! token sequence and normalizes the result. Attention uses a sequence
//! reduction of the keys and values by the stage's factor `R`; the
//! feed-forward sublayer mixes tokens spatially with a 3x3 depthwise
//! convolution.

use crate::error::{Error, Result};
use crate::nn::{map_to_seq, seq_to_map, Conv2d, DepthwiseConv2d, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensor::{conv_output_extent, Conv2dGeometry, ParamBuilder, ParamStore, Tape, Tensor, Var};

/// Hyperparameters of one encoder stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    /// Patch (kernel) size `E`.
    pub patch: usize,
    /// Stride `S`.
    pub stride: usize,
    /// Zero padding `P`.
    pub padding: usize,
    /// Embedding width `C`.
    pub channels: usize,
    /// Number of transformer blocks `L`.
    pub depth: usize,
    /// Attention heads `h`.
    pub heads: usize,
    /// Key/value sequence-reduction factor `R`.
    pub reduction: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 {
            return Err(Error::config("patch size and stride must be >= 1"));
        }
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "{} channels cannot be split over {} heads",
                self.channels, self.heads
            )));
        }
        if self.reduction == 0 || self.depth == 0 {
            return Err(Error::config("reduction factor and depth must be >= 1"));
        }
        Ok(())
    }

    /// Spatial extent after the patch merge.
    pub fn output_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let h = conv_output_extent(height, self.patch, self.stride, self.padding, 1)?;
        let w = conv_output_extent(width, self.patch, self.stride, self.padding, 1)?;
        Ok((h, w))
    }
}

/// Layout of the stacked input attributes, in channel order.
pub const INPUT_LAYOUT: &str = "aspect, flow accumulation, slope, NDVI, yield (3 channels each)";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Hidden-width multiplier of the mixing feed-forward sublayer.
    pub mlp_ratio: usize,
}

fn stage(
    patch: usize,
    stride: usize,
    padding: usize,
    channels: usize,
    depth: usize,
    heads: usize,
    reduction: usize,
) -> StageConfig {
    StageConfig {
        patch,
        stride,
        padding,
        channels,
        depth,
        heads,
        reduction,
    }
}

impl EncoderConfig {
    /// Full-width configuration: C = 64/128/320/512, L = 3/3/18/3.
    pub fn paper() -> Self {
        EncoderConfig {
            in_channels: 15,
            stages: vec![
                stage(7, 4, 3, 64, 3, 1, 64),
                stage(3, 2, 1, 128, 3, 2, 16),
                stage(3, 2, 1, 320, 18, 5, 4),
                stage(3, 2, 1, 512, 3, 8, 1),
            ],
            mlp_ratio: 4,
        }
    }

    /// Desk-scale configuration: C = 16/32/64/128, L = 1/1/2/1.
    pub fn tiny() -> Self {
        EncoderConfig {
            in_channels: 15,
            stages: vec![
                stage(7, 4, 3, 16, 1, 1, 16),
                stage(3, 2, 1, 32, 1, 2, 4),
                stage(3, 2, 1, 64, 2, 4, 2),
                stage(3, 2, 1, 128, 1, 8, 1),
            ],
            mlp_ratio: 4,
        }
    }

    /// Same stage geometry as [`EncoderConfig::tiny`] with custom widths,
    /// depths and reductions; one head per stage.
    pub fn custom(widths: [usize; 4], depths: [usize; 4], reductions: [usize; 4]) -> Self {
        let mut cfg = Self::tiny();
        for (i, s) in cfg.stages.iter_mut().enumerate() {
            s.channels = widths[i];
            s.depth = depths[i];
            s.reduction = reductions[i];
            s.heads = 1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("encoder needs at least one stage"));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("input channels and mlp ratio must be >= 1"));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    /// Spatial extents of every stage output for an `height x width` input.
    pub fn stage_extents(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(self.stages.len());
        let (mut h, mut w) = (height, width);
        for s in &self.stages {
            (h, w) = s.output_extent(h, w)?;
            dims.push((h, w));
        }
        Ok(dims)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }
}

/// Reshape `[N, C]` keys/values to `[N/R, R*C]` and project back to `C`.
pub fn sequence_reduce<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    seq: &Var<'t, T>,
    reduction: usize,
    projection: &Linear,
) -> Result<Var<'t, T>> {
    let (n, c) = (seq.shape()[0], seq.shape()[1]);
    if reduction == 0 || n % reduction != 0 {
        return Err(Error::config(format!(
            "reduction factor {reduction} does not divide sequence length {n}"
        )));
    }
    let grouped = seq.reshape(&[n / reduction, reduction * c])?;
    projection.forward(tape, store, &grouped)
}

/// Query/key/value/output projections with optional sequence reduction.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub reduce: Option<Linear>,
    pub heads: usize,
    pub reduction: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        heads: usize,
        reduction: usize,
    ) -> Result<Self> {
        pb.push_scope(name);
        let built = (|| {
            Ok(Attention {
                query: Linear::new(pb, "query", channels, channels, false)?,
                key: Linear::new(pb, "key", channels, channels, false)?,
                value: Linear::new(pb, "value", channels, channels, false)?,
                output: Linear::new(pb, "output", channels, channels, true)?,
                reduce: if reduction > 1 {
                    Some(Linear::new(pb, "reduce", reduction * channels, channels, true)?)
                } else {
                    None
                },
                heads,
                reduction,
            })
        })();
        pb.pop_scope();
        built
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        seq: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward_capture(tape, store, seq, None)
    }

    /// Forward pass that optionally records each head's attention weights.
    pub fn forward_capture<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        seq: &Var<'t, T>,
        mut weights: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var<'t, T>> {
        let c = seq.shape()[1];
        if c % self.heads != 0 {
            return Err(Error::config(format!("{c} channels over {} heads", self.heads)));
        }
        let q = self.query.forward(tape, store, seq)?;
        let kv_source = match &self.reduce {
            Some(proj) => sequence_reduce(tape, store, seq, self.reduction, proj)?,
            None => seq.clone(),
        };
        let k = self.key.forward(tape, store, &kv_source)?;
        let v = self.value.forward(tape, store, &kv_source)?;
        let dh = c / self.heads;
        let scale = T::lit((dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for e in 0..self.heads {
            let (qe, ke, ve) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (q.narrow(1, e * dh, dh)?, k.narrow(1, e * dh, dh)?, v.narrow(1, e * dh, dh)?)
            };
            let scores = qe.matmul(&ke.transpose()?)?;
            let alpha = scores.softmax_scaled(scale)?;
            if let Some(w) = weights.as_deref_mut() {
                w.push(alpha.value().clone());
            }
            outs.push(alpha.matmul(&ve)?);
        }
        let merged = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            tape.concat(&outs, 1)?
        };
        self.output.forward(tape, store, &merged)
    }
}

/// Expand, depthwise 3x3 mix on the spatial grid, GELU, contract.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub expand: Linear,
    pub mix: DepthwiseConv2d,
    pub contract: Linear,
}

impl MixFfn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        pb.push_scope(name);
        let hidden = channels * ratio;
        let built = (|| {
            Ok(MixFfn {
                expand: Linear::new(pb, "expand", channels, hidden, true)?,
                mix: DepthwiseConv2d::new(pb, "mix", hidden, 3, Conv2dGeometry::new(1, 1, 1))?,
                contract: Linear::new(pb, "contract", hidden, channels, true)?,
            })
        })();
        pb.pop_scope();
        built
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        seq: &Var<'t, T>,
        height: usize,
        width: usize,
    ) -> Result<Var<'t, T>> {
        if seq.shape()[0] != height * width {
            return Err(Error::usage(format!(
                "sequence of {} tokens does not fill a {height}x{width} grid",
                seq.shape()[0]
            )));
        }
        let hidden = self.expand.forward(tape, store, seq)?;
        let map = seq_to_map(&hidden, height, width)?;
        let mixed = self.mix.forward(tape, store, &map)?.gelu();
        self.contract.forward(tape, store, &map_to_seq(&mixed)?)
    }
}

/// Pre-norm transformer block with residual connections.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: Attention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cfg: &StageConfig, mlp_ratio: usize) -> Result<Self> {
        pb.push_scope(name);
        let built = (|| {
            Ok(TransformerBlock {
                norm1: LayerNorm::new(pb, "norm1", cfg.channels)?,
                attention: Attention::new(pb, "attention", cfg.channels, cfg.heads, cfg.reduction)?,
                norm2: LayerNorm::new(pb, "norm2", cfg.channels)?,
                ffn: MixFfn::new(pb, "ffn", cfg.channels, mlp_ratio)?,
            })
        })();
        pb.pop_scope();
        built
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        seq: &Var<'t, T>,
        height: usize,
        width: usize,
    ) -> Result<Var<'t, T>> {
        let attn = self
            .attention
            .forward(tape, store, &self.norm1.forward(tape, store, seq)?)?;
        let seq = seq.add(&attn)?;
        let ffn = self
            .ffn
            .forward(tape, store, &self.norm2.forward(tape, store, &seq)?, height, width)?;
        seq.add(&ffn)
    }
}

/// Strided convolution that turns a map into a token sequence.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub conv: Conv2d,
}

impl PatchMerge {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_channels: usize, cfg: &StageConfig) -> Result<Self> {
        let geom = Conv2dGeometry::new(cfg.stride, cfg.padding, 1);
        Ok(PatchMerge {
            conv: Conv2d::new(pb, name, in_channels, cfg.channels, cfg.patch, geom)?,
        })
    }

    /// Returns the `[N, C]` sequence and the merged grid extents.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, usize, usize)> {
        let map = self.conv.forward(tape, store, x)?;
        let (h, w) = (map.shape()[1], map.shape()[2]);
        Ok((map_to_seq(&map)?, h, w))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub merge: PatchMerge,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

/// The stage feature maps `F_1..F_4`, each `[C_i, H_i, W_i]`.
pub struct EncoderOutput<'t, T: Scalar> {
    pub features: Vec<Var<'t, T>>,
}

impl<T: Scalar> EncoderOutput<'_, T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.features.iter().map(|f| f.shape().to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_channels = config.in_channels;
        for (i, sc) in config.stages.iter().enumerate() {
            pb.push_scope(format!("encoder.stage{}", i + 1));
            let built = (|| {
                let merge = PatchMerge::new(pb, "merge", in_channels, sc)?;
                let blocks = (0..sc.depth)
                    .map(|b| TransformerBlock::new(pb, &format!("block{b}"), sc, config.mlp_ratio))
                    .collect::<Result<Vec<_>>>()?;
                let norm = LayerNorm::new(pb, "norm", sc.channels)?;
                Ok(EncoderStage { merge, blocks, norm })
            })();
            pb.pop_scope();
            stages.push(built?);
            in_channels = sc.channels;
        }
        Ok(Encoder { config, stages })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<EncoderOutput<'t, T>> {
        self.forward_capture(tape, store, x, None)
    }

    /// Forward pass recording every attention-weight matrix, stage by stage.
    pub fn forward_capture<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
        mut weights: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<EncoderOutput<'t, T>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::Input(format!(
                "expected [{}, H, W] input ({}), got {:?}",
                self.config.in_channels,
                if self.config.in_channels == 15 { INPUT_LAYOUT } else { "attribute stack" },
                s
            )));
        }
        // Validate the whole geometry up front so failures name the stage.
        let extents = self.config.stage_extents(s[1], s[2])?;
        for (i, ((h, w), sc)) in extents.iter().zip(&self.config.stages).enumerate() {
            if (h * w) % sc.reduction != 0 {
                return Err(Error::config(format!(
                    "stage {}: reduction {} does not divide {h}x{w} tokens",
                    i + 1,
                    sc.reduction
                )));
            }
        }
        let mut features = Vec::with_capacity(self.stages.len());
        let mut current = x.clone();
        for st in &self.stages {
            let (mut seq, h, w) = st.merge.forward(tape, store, &current)?;
            for block in &st.blocks {
                if let Some(ws) = weights.as_deref_mut() {
                    let normed = block.norm1.forward(tape, store, &seq)?;
                    block.attention.forward_capture(tape, store, &normed, Some(ws))?;
                }
                seq = block.forward(tape, store, &seq, h, w)?;
            }
            let seq = st.norm.forward(tape, store, &seq)?;
            current = seq_to_map(&seq, h, w)?;
            features.push(current.clone());
        }
        Ok(EncoderOutput { features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_stage_extents() {
        let dims = EncoderConfig::paper().stage_extents(512, 512).unwrap();
        assert_eq!(dims, vec![(128, 128), (64, 64), (32, 32), (16, 16)]);
        let dims = EncoderConfig::tiny().stage_extents(64, 64).unwrap();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn paper_stage_one_token_count() {
        let s1 = &EncoderConfig::paper().stages[0];
        let (h, w) = s1.output_extent(512, 512).unwrap();
        assert_eq!(h * w, 16384);
        let s2 = &EncoderConfig::paper().stages[1];
        assert_eq!(s2.output_extent(128, 128).unwrap(), (64, 64));
    }

    #[test]
    fn stage_config_validation() {
        let mut s = EncoderConfig::paper().stages[2].clone();
        assert!(s.validate().is_ok());
        s.heads = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn wrong_channel_count_names_layout() {
        let mut pb = ParamBuilder::<f32>::new(0);
        let enc = Encoder::new(&mut pb, EncoderConfig::tiny()).unwrap();
        let store = pb.finish();
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[14, 64, 64]));
        let err = enc.forward(&tape, &store, &x).err().unwrap();
        assert!(err.to_string().contains("NDVI"), "{err}");
    }
}
