//! End-to-end segmenters: attribute stack in, full-resolution logits out.

use crate::decoder::{full_res_logits, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamBuilder, ParamStore, Tape, Tensor, Var};

/// Foreground prior used to initialize the output bias of every head.
pub const FOREGROUND_PRIOR: f64 = 0.01;

/// Default multiplier on the uniform init bound.
pub const INIT_GAIN: f64 = 1.0;

/// Head weights start wider than the rest so the sigmoid sharpens early.
pub const HEAD_GAIN: f64 = 4.0;

/// Logit of [`FOREGROUND_PRIOR`].
pub fn prior_logit() -> f64 {
    logit(FOREGROUND_PRIOR)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A trainable per-sample binary segmenter.
pub trait Segmenter<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn in_channels(&self) -> usize;

    /// Full-resolution logits `[1, H, W]` for a `[C, H, W]` input.
    fn logits<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>>;

    /// Foreground probabilities `[1, H, W]` without recording a graph.
    fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let input = tape.constant(x.clone());
        let p = self.logits(&tape, &input)?.sigmoid();
        p.ensure_finite("prediction")?;
        Ok(p.value().clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Multiplier on the `1/sqrt(fan_in)` bound of the uniform weight init.
    pub init_gain: f64,
    /// Initial foreground probability encoded in the head bias.
    pub head_prior: f64,
    /// Extra multiplier on the head weights' init bound.
    pub head_gain: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
            init_gain: INIT_GAIN,
            head_prior: FOREGROUND_PRIOR,
            head_gain: HEAD_GAIN,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            init_gain: INIT_GAIN,
            head_prior: FOREGROUND_PRIOR,
            head_gain: HEAD_GAIN,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown preset `{other}` (expected paper or tiny)"))),
        }
    }
}

/// Hierarchical transformer encoder plus atrous decoder.
#[derive(Clone, Debug)]
pub struct TransformerSegmenter<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TransformerSegmenter<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut pb = ParamBuilder::with_gain(seed, config.init_gain);
        let encoder = Encoder::new(&mut pb, config.encoder.clone())?;
        let decoder = Decoder::new(&mut pb, config.decoder.clone(), &config.encoder.widths())?;
        let mut params = pb.finish();
        let bias = decoder.head.bias;
        if !(config.head_prior > 0.0 && config.head_prior < 1.0) {
            return Err(Error::config(format!("head prior {} must lie in (0, 1)", config.head_prior)));
        }
        params.set_value(bias, Tensor::full(&[1], T::lit(logit(config.head_prior))))?;
        let hw = decoder.head.weight;
        let scaled = params.value(hw).map(|v| v * T::lit(config.head_gain));
        params.set_value(hw, scaled)?;
        Ok(TransformerSegmenter {
            config,
            encoder,
            decoder,
            params,
        })
    }

    /// Stage maps plus the decoder logits at the stage-one resolution.
    pub fn forward_parts<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
    ) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
        let enc = self.encoder.forward(tape, &self.params, x)?;
        let logits = self.decoder.forward(tape, &self.params, &enc.features)?;
        Ok((enc.features, logits))
    }
}

impl<T: Scalar> Segmenter<T> for TransformerSegmenter<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.config.encoder.in_channels
    }

    fn logits<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, low) = self.forward_parts(tape, x)?;
        let s = x.shape();
        full_res_logits(&low, s[1], s[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_bias_sets_initial_probability() {
        let m = TransformerSegmenter::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let x = Tensor::zeros(&[15, 32, 32]);
        let p = m.predict(&x).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32]);
        // Zero input makes every layer output its bias, so the head bias dominates.
        assert!(p.data().iter().all(|&v| (v - 0.01).abs() < 0.01));
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert_eq!(ModelConfig::preset("huge").unwrap_err().kind(), "config");
    }
}
