//! Losses, the optimizer, the epoch loop, checkpoints and model selection.

mod checkpoint;
mod optim;

pub use checkpoint::{
    checkpoint_crc, load_checkpoint, restore, save_checkpoint, snapshot, Checkpoint, MAGIC, VERSION,
};
pub use optim::{sgd_step, OptimState, SgdParams};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{confusion, segmentation_metrics, threshold_mask, BinaryMask, MetricsReport};
use crate::model::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

fn check_pair<T: Scalar>(probs: &[T], targets: &[T]) -> Result<()> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::dim(format!(
            "{} probabilities vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities, clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Scalar>(probs: &[T], targets: &[T]) -> Result<T> {
    check_pair(probs, targets)?;
    let (eps, one) = (T::lit(PROB_EPS), T::one());
    let total: T = probs
        .iter()
        .zip(targets)
        .map(|(&m, &y)| {
            let m = m.max(eps).min(one - eps);
            -(y * m.ln() + (one - y) * (one - m).ln())
        })
        .sum();
    Ok(total / T::lit(probs.len() as f64))
}

/// Mean focal loss `-a_t (1 - p_t)^gamma ln p_t` of clamped probabilities.
pub fn focal_loss<T: Scalar>(probs: &[T], targets: &[T], alpha: f64, gamma: f64) -> Result<T> {
    check_pair(probs, targets)?;
    LossKind::Focal { alpha, gamma }.validate()?;
    let (eps, one) = (T::lit(PROB_EPS), T::one());
    let (a, g) = (T::lit(alpha), T::lit(gamma));
    let total: T = probs
        .iter()
        .zip(targets)
        .map(|(&m, &y)| {
            let m = m.max(eps).min(one - eps);
            let pos = -a * (one - m).powf(g) * m.ln();
            let neg = -(one - a) * m.powf(g) * (one - m).ln();
            y * pos + (one - y) * neg
        })
        .sum();
    Ok(total / T::lit(probs.len() as f64))
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Bce,
    Focal { alpha: f64, gamma: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::Focal { alpha, gamma } = *self {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::config(format!("focal alpha {alpha} must lie in (0, 1)")));
            }
            if !(gamma >= 0.0) {
                return Err(Error::config(format!("focal gamma {gamma} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Focal { .. } => "focal",
        }
    }

    /// Loss of full-resolution logits against a binary mask.
    pub fn apply<'t, T: Scalar>(&self, logits: &Var<'t, T>, mask: &crate::tensor::Tensor<T>) -> Result<Var<'t, T>> {
        match *self {
            LossKind::Bce => logits.bce_with_logits(mask),
            LossKind::Focal { alpha, gamma } => logits.focal_with_logits(mask, T::lit(alpha), T::lit(gamma)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            epochs: 300,
            checkpoint_every: 50,
            seed: 0,
            loss: LossKind::Bce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint interval must be >= 1"));
        }
        self.loss.validate()
    }

    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// `(ceil(T / B), size of the last batch)`.
pub fn iterations_per_epoch(samples: usize, batch: usize) -> Result<(usize, usize)> {
    if samples == 0 || batch == 0 {
        return Err(Error::usage("sample count and batch size must be >= 1"));
    }
    let iters = samples.div_ceil(batch);
    Ok((iters, samples - (iters - 1) * batch))
}

/// Sample order for a 1-based epoch; depends only on the seed and the epoch.
pub fn epoch_order(samples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    order
}

/// One 1-based epoch of minibatch SGD. Returns the mean per-sample loss.
pub fn train_epoch<T: Scalar, M: Segmenter<T> + ?Sized>(
    model: &mut M,
    optim: &mut OptimState<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut total = 0.0;
    for (iteration, batch) in order.chunks(cfg.batch_size).enumerate() {
        model.params_mut().zero_grads();
        let scale = T::lit(1.0 / batch.len() as f64);
        for &i in batch {
            let sample = &data[i];
            let tape = Tape::new();
            let x = tape.constant(sample.input.clone());
            let loss = cfg.loss.apply(&model.logits(&tape, &x)?, &sample.mask)?;
            let value = loss.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch}, iteration {}, sample {}",
                    iteration + 1,
                    sample.id
                )));
            }
            total += value;
            let grads = tape.backward(&loss)?;
            model.params_mut().accumulate_grads(&grads, scale);
        }
        sgd_step(model.params_mut(), optim, cfg.sgd())?;
    }
    Ok(total / data.len() as f64)
}

/// Mean per-sample loss with frozen parameters.
pub fn mean_loss<T: Scalar, M: Segmenter<T> + ?Sized>(model: &M, data: &[Sample<T>], loss: LossKind) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::usage("cannot average a loss over no samples"));
    }
    let mut total = 0.0;
    for s in data {
        let tape = Tape::inference();
        let x = tape.constant(s.input.clone());
        total += loss.apply(&model.logits(&tape, &x)?, &s.mask)?.value().item().as_f64();
    }
    Ok(total / data.len() as f64)
}

/// Threshold predictions and score them against the ground-truth masks.
pub fn evaluate<T: Scalar, M: Segmenter<T> + ?Sized>(
    model: &M,
    data: &[Sample<T>],
    threshold: f64,
) -> Result<MetricsReport> {
    let counts = data
        .iter()
        .map(|s| {
            let (h, w) = (s.height(), s.width());
            let pred = threshold_mask(model.predict(&s.input)?.data(), threshold)?;
            confusion(
                &BinaryMask::from_u8(h, w, &pred)?,
                &BinaryMask::from_reals(h, w, s.mask.data())?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    segmentation_metrics(&counts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Header of the loss curve CSV.
pub const LOSS_HEADER: &str = "epoch,train_loss,val_loss";

pub fn loss_row(r: &EpochRecord) -> String {
    match r.val_loss {
        Some(v) => format!("{},{},{}", r.epoch, r.train_loss, v),
        None => format!("{},{},", r.epoch, r.train_loss),
    }
}

/// Where [`train`] writes its loss curve and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub loss_csv: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            loss_csv: dir.join("loss.csv"),
            checkpoint_dir: dir.join("checkpoints"),
        }
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir.join(format!("epoch_{epoch:05}.sseg"))
    }
}

/// Train epochs `start_epoch + 1 ..= cfg.epochs`.
///
/// With outputs, each epoch appends a loss row (the header is written when
/// starting from epoch 0) and a checkpoint is saved every
/// `cfg.checkpoint_every` epochs and after the last one.
pub fn train<T: Scalar, M: Segmenter<T> + ?Sized>(
    model: &mut M,
    optim: &mut OptimState<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    start_epoch: usize,
    outputs: Option<&TrainOutputs>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.input.shape()[0] != model.in_channels()) {
        return Err(Error::Input(format!(
            "sample {} has {} channels, model expects {}",
            s.id,
            s.input.shape()[0],
            model.in_channels()
        )));
    }
    let mut csv = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.checkpoint_dir).map_err(|e| Error::io(&o.checkpoint_dir, e))?;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(start_epoch > 0)
                .truncate(start_epoch == 0)
                .open(&o.loss_csv)
                .map_err(|e| Error::io(&o.loss_csv, e))?;
            if start_epoch == 0 {
                writeln!(f, "{LOSS_HEADER}").map_err(|e| Error::io(&o.loss_csv, e))?;
            }
            Some(f)
        }
        None => None,
    };
    let mut records = Vec::new();
    for epoch in start_epoch + 1..=cfg.epochs {
        let train_loss = train_epoch(model, optim, train_set, cfg, epoch)?;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(mean_loss(model, val_set, cfg.loss)?)
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        if let (Some(f), Some(o)) = (csv.as_mut(), outputs) {
            writeln!(f, "{}", loss_row(&rec)).map_err(|e| Error::io(&o.loss_csv, e))?;
            if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
                save_checkpoint(&o.checkpoint_path(epoch), model, optim, epoch)?;
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Epoch with the highest validation MIoU; ties go to the earliest epoch.
pub fn select_best(series: &[(usize, f64)]) -> Result<usize> {
    let mut sorted = series.to_vec();
    sorted.sort_by_key(|&(e, _)| e);
    let mut best: Option<(usize, f64)> = None;
    for (epoch, miou) in sorted {
        if best.map_or(true, |(_, b)| miou > b) {
            best = Some((epoch, miou));
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::usage("no evaluated checkpoints to choose from"))
}
