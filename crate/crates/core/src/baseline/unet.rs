//! Small Unet-style CNN used as the comparison model.

use crate::error::{Error, Result};
use crate::model::{prior_logit, Segmenter};
use crate::nn::Conv2d;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dGeometry, ParamBuilder, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnetConfig {
    pub in_channels: usize,
    /// Widths from the full-resolution level down to the bottleneck.
    pub widths: Vec<usize>,
}

impl UnetConfig {
    /// Default desk-scale widths 16, 32, 64, 128.
    pub fn new(in_channels: usize) -> Self {
        UnetConfig {
            in_channels,
            widths: vec![16, 32, 64, 128],
        }
    }

    /// Number of pooling steps.
    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("unet needs input channels and non-zero widths"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let g = Conv2dGeometry::new(1, 1, 1);
        pb.push_scope(name);
        let built = (|| {
            Ok(DoubleConv {
                a: Conv2d::new(pb, "conv1", cin, cout, 3, g)?,
                b: Conv2d::new(pb, "conv2", cout, cout, 3, g)?,
            })
        })();
        pb.pop_scope();
        built
    }

    fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.a.forward(tape, store, x)?.relu();
        Ok(self.b.forward(tape, store, &h)?.relu())
    }
}

/// Conv-conv blocks with max pooling down, bilinear upsampling and skip
/// concatenation up, and a 1x1 logit head.
#[derive(Clone, Debug)]
pub struct Unet<T: Scalar> {
    pub config: UnetConfig,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
    head: Conv2d,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Unet<T> {
    pub fn new(config: UnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let w = &config.widths;
        let mut down = Vec::new();
        let mut cin = config.in_channels;
        for (i, &c) in w.iter().enumerate() {
            down.push(DoubleConv::new(&mut pb, &format!("unet.down{i}"), cin, c)?);
            cin = c;
        }
        let mut up = Vec::new();
        for i in (0..config.depth()).rev() {
            up.push(DoubleConv::new(&mut pb, &format!("unet.up{i}"), w[i + 1] + w[i], w[i])?);
        }
        let head = Conv2d::new(&mut pb, "unet.head", w[0], 1, 1, Conv2dGeometry::default())?;
        let mut params = pb.finish();
        params.set_value(head.bias, Tensor::full(&[1], T::lit(prior_logit())))?;
        Ok(Unet {
            config,
            down,
            up,
            head,
            params,
        })
    }
}

impl<T: Scalar> Segmenter<T> for Unet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn logits<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::Input(format!(
                "unet expects [{}, H, W] input, got {s:?}",
                self.config.in_channels
            )));
        }
        let div = 1usize << self.config.depth();
        if s[1] % div != 0 || s[2] % div != 0 {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by {div}",
                s[1], s[2]
            )));
        }
        let store = &self.params;
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2()?;
            }
            h = block.forward(tape, store, &h)?;
            skips.push(h.clone());
        }
        skips.pop();
        for block in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            let (sh, sw) = (skip.shape()[1], skip.shape()[2]);
            let upsampled = h.bilinear_resize(sh, sw)?;
            h = block.forward(tape, store, &tape.concat(&[upsampled, skip], 0)?)?;
        }
        self.head.forward(tape, store, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_matches_input_extent() {
        let m = Unet::<f32>::new(UnetConfig::new(5), 1).unwrap();
        let p = m.predict(&Tensor::zeros(&[5, 32, 48])).unwrap();
        assert_eq!(p.shape(), &[1, 32, 48]);
        assert!(m.predict(&Tensor::zeros(&[5, 36, 48])).is_err());
        assert!(m.predict(&Tensor::zeros(&[15, 32, 32])).is_err());
    }
}
