//! Parameterized layers built on the tape.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dGeometry, ParamBuilder, ParamId, ParamStore, Tape, Var};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Affine map on sequences: `[N, in] -> [N, out]`, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        pb.push_scope(name);
        let weight = pb.uniform("weight", &[in_dim, out_dim], in_dim);
        let bias = if with_bias {
            Some(pb.zeros("bias", &[out_dim]))
        } else {
            None
        };
        pb.pop_scope();
        Ok(Linear {
            weight: weight?,
            bias: bias.transpose()?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = x.matmul(&tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(&tape.param(store, b), 1),
            None => Ok(y),
        }
    }
}

/// 2-D convolution layer on `[C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Conv2dGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: Conv2dGeometry,
    ) -> Result<Self> {
        pb.push_scope(name);
        let fan_in = in_channels * kernel * kernel;
        let weight = pb.uniform("weight", &[out_channels, in_channels, kernel, kernel], fan_in);
        let bias = pb.zeros("bias", &[out_channels]);
        pb.pop_scope();
        Ok(Conv2d {
            weight: weight?,
            bias: bias?,
            geom,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.conv2d(&w, Some(&b), self.geom)
    }
}

/// Per-channel 2-D convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Conv2dGeometry,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        geom: Conv2dGeometry,
    ) -> Result<Self> {
        pb.push_scope(name);
        let weight = pb.uniform("weight", &[channels, 1, kernel, kernel], kernel * kernel);
        let bias = pb.zeros("bias", &[channels]);
        pb.pop_scope();
        Ok(DepthwiseConv2d {
            weight: weight?,
            bias: bias?,
            geom,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.depthwise_conv2d(&w, Some(&b), self.geom)
    }
}

/// Row-wise layer normalization of `[N, C]` sequences.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        pb.push_scope(name);
        let gain = pb.constant("gain", &[channels], 1.0);
        let bias = pb.zeros("bias", &[channels]);
        pb.pop_scope();
        Ok(LayerNorm {
            gain: gain?,
            bias: bias?,
            eps: LN_EPS,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        x.layer_norm(&g, &b, T::lit(self.eps))
    }
}

/// `[N, C]` sequence to a `[C, H, W]` map.
pub fn seq_to_map<'t, T: Scalar>(seq: &Var<'t, T>, height: usize, width: usize) -> Result<Var<'t, T>> {
    let c = seq.shape()[1];
    seq.transpose()?.reshape(&[c, height, width])
}

/// `[C, H, W]` map to an `[H*W, C]` sequence.
pub fn map_to_seq<'t, T: Scalar>(map: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = map.shape();
    map.reshape(&[s[0], s[1] * s[2]])?.transpose()
}
