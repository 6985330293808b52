//! Stochastic gradient descent with momentum and weight decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers (one per parameter, created on first use) and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub buffers: Vec<Option<Tensor<T>>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(n_params: usize) -> Self {
        OptimState {
            buffers: vec![None; n_params],
            step: 0,
        }
    }

    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::new(store.len())
    }
}

/// One update of every trainable parameter:
/// `g <- g + wd * theta`, `b <- g` on the first step and `b <- mu * b + g`
/// afterwards, `theta <- theta - lr * b`.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimState<T>, hp: SgdParams) -> Result<()> {
    if state.buffers.len() != store.len() {
        return Err(Error::usage(format!(
            "optimizer tracks {} parameters, model has {}",
            state.buffers.len(),
            store.len()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.requires_grad && p.grad.is_none()) {
        return Err(Error::usage(format!("parameter {} has no gradient", p.name)));
    }
    let (lr, mu, wd) = (T::lit(hp.lr), T::lit(hp.momentum), T::lit(hp.weight_decay));
    for ((_, p), buf) in store.iter_mut().zip(state.buffers.iter_mut()) {
        if !p.requires_grad {
            continue;
        }
        let mut g = p.grad.take().expect("checked above");
        for (gi, &th) in g.data_mut().iter_mut().zip(p.value().data()) {
            *gi += wd * th;
        }
        match buf {
            Some(b) => {
                for (bi, &gi) in b.data_mut().iter_mut().zip(g.data()) {
                    *bi = mu * *bi + gi;
                }
            }
            None => *buf = Some(g),
        }
        let b = buf.as_ref().expect("buffer set above");
        for (th, &bi) in p.value_mut().data_mut().iter_mut().zip(b.data()) {
            *th -= lr * bi;
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("theta", Tensor::full(&[1], theta)).unwrap();
        s
    }

    fn step(s: &mut ParamStore<f64>, st: &mut OptimState<f64>, g: f64, hp: SgdParams) {
        s.iter_mut().for_each(|(_, p)| p.grad = Some(Tensor::full(&[1], g)));
        sgd_step(s, st, hp).unwrap();
    }

    #[test]
    fn plain_gradient_step() {
        let mut s = store(1.0);
        let mut st = OptimState::for_store(&s);
        let hp = SgdParams { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        step(&mut s, &mut st, 0.5, hp);
        assert_eq!(s.iter().next().unwrap().1.value().data()[0], 0.95);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let mut s = store(2.0);
        let mut st = OptimState::for_store(&s);
        let hp = SgdParams { lr: 0.5, momentum: 0.0, weight_decay: 0.1 };
        step(&mut s, &mut st, 0.0, hp);
        assert!((s.iter().next().unwrap().1.value().data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = store(1.0);
        let mut st = OptimState::for_store(&s);
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        assert_eq!(sgd_step(&mut s, &mut st, hp).unwrap_err().kind(), "usage");
    }
}
