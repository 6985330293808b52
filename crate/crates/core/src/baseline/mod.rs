//! CNN comparison arm: a Unet stand-in and the input-mode by loss grid.

mod unet;

pub use unet::{Unet, UnetConfig};

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{write_report_csv, ReportRow};
use crate::model::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::train::{evaluate, train, LossKind, OptimState, TrainConfig, TrainOutputs};

pub use crate::train::focal_loss;

/// Focal loss with the usual `alpha = 0.25`, `gamma = 2`.
pub const DEFAULT_FOCAL: LossKind = LossKind::Focal { alpha: 0.25, gamma: 2.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputMode {
    /// Five luma channels.
    Grayscale,
    /// The full fifteen-channel stack.
    Rgb,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Grayscale => 5,
            InputMode::Rgb => 15,
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Grayscale => "grayscale",
            InputMode::Rgb => "rgb",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub input: InputMode,
    pub loss: LossKind,
}

impl GridCell {
    pub fn name(&self) -> String {
        let mode = match self.input {
            InputMode::Grayscale => "gray",
            InputMode::Rgb => "rgb",
        };
        format!("{mode}_{}", self.loss.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
    pub widths: Vec<usize>,
    /// Shared by every cell; `checkpoint_every` doubles as the evaluation cadence.
    pub train: TrainConfig,
    pub threshold: f64,
    /// Parameter initialization seed, identical across cells.
    pub init_seed: u64,
}

impl ExperimentGrid {
    /// Grayscale/RGB by BCE/focal, batch 32, checkpoints every 500 epochs.
    pub fn standard(epochs: usize, seed: u64) -> Self {
        let mut cells = Vec::new();
        for input in [InputMode::Grayscale, InputMode::Rgb] {
            for loss in [LossKind::Bce, DEFAULT_FOCAL] {
                cells.push(GridCell { input, loss });
            }
        }
        ExperimentGrid {
            cells,
            widths: UnetConfig::new(15).widths,
            train: TrainConfig {
                batch_size: 32,
                epochs,
                checkpoint_every: 500,
                seed,
                ..TrainConfig::default()
            },
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            init_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != 4 {
            return Err(Error::config(format!("grid needs exactly four cells, has {}", self.cells.len())));
        }
        for c in &self.cells {
            c.loss.validate()?;
        }
        self.train.validate()
    }

    pub fn cell_config(&self, cell: &GridCell) -> TrainConfig {
        TrainConfig {
            loss: cell.loss,
            ..self.train.clone()
        }
    }

    pub fn model(&self, cell: &GridCell) -> Result<Unet<f32>> {
        Unet::new(
            UnetConfig {
                in_channels: cell.input.channels(),
                widths: self.widths.clone(),
            },
            self.init_seed,
        )
    }

    /// Epochs after which a cell is evaluated: the cadence plus the final epoch.
    pub fn eval_epochs(&self) -> Vec<usize> {
        let every = self.train.checkpoint_every.max(1);
        let mut out: Vec<usize> = (every..=self.train.epochs).step_by(every).collect();
        if out.last() != Some(&self.train.epochs) && self.train.epochs > 0 {
            out.push(self.train.epochs);
        }
        out
    }
}

/// Samples in the representation a cell consumes.
pub fn prepare<T: Scalar>(samples: &[Sample<T>], mode: InputMode) -> Result<Vec<Sample<T>>> {
    match mode {
        InputMode::Rgb => Ok(samples.to_vec()),
        InputMode::Grayscale => samples.iter().map(Sample::to_grayscale).collect(),
    }
}

/// Outcome of one grid cell; a failing cell does not stop the others.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub metrics_csv: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    pub rows: Vec<ReportRow>,
    pub error: Option<String>,
}

fn run_cell(
    grid: &ExperimentGrid,
    cell: &GridCell,
    train_set: &[Sample<f32>],
    val_set: &[Sample<f32>],
    dir: &Path,
) -> Result<(Vec<ReportRow>, PathBuf)> {
    let cfg = grid.cell_config(cell);
    let tr = prepare(train_set, cell.input)?;
    let va = prepare(val_set, cell.input)?;
    let mut model = grid.model(cell)?;
    let mut optim = OptimState::for_store(model.params());
    let outputs = TrainOutputs::in_dir(dir);
    let mut rows = Vec::new();
    let mut done = 0;
    for stop in grid.eval_epochs() {
        let seg = TrainConfig {
            epochs: stop,
            ..cfg.clone()
        };
        train(&mut model, &mut optim, &tr, &va, &seg, done, Some(&outputs))?;
        done = stop;
        for (split, set) in [("train", &tr), ("val", &va)] {
            if !set.is_empty() {
                rows.push(ReportRow {
                    split: split.into(),
                    epoch: stop,
                    report: evaluate(&model, set, grid.threshold)?,
                });
            }
        }
        write_report_csv(&dir.join("metrics.csv"), &rows)?;
    }
    Ok((rows, outputs.checkpoint_path(done)))
}

/// Train and evaluate every cell under `out_dir/<cell>/`, then write
/// `out_dir/grid.csv` with `cell,input_mode,loss,checkpoint_path`.
pub fn run_grid(
    grid: &ExperimentGrid,
    train_set: &[Sample<f32>],
    val_set: &[Sample<f32>],
    out_dir: &Path,
) -> Result<Vec<CellOutcome>> {
    grid.validate()?;
    let mut outcomes = Vec::new();
    for cell in &grid.cells {
        let dir = out_dir.join(cell.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let result = run_cell(grid, cell, train_set, val_set, &dir);
        let (rows, ckpt, error) = match result {
            Ok((rows, ckpt)) => (rows, Some(ckpt), None),
            Err(e) => (Vec::new(), None, Some(format!("{}: {e}", e.kind()))),
        };
        outcomes.push(CellOutcome {
            cell: *cell,
            metrics_csv: dir.join("metrics.csv"),
            final_checkpoint: ckpt,
            rows,
            error,
        });
    }
    let mut manifest = String::from("cell,input_mode,loss,checkpoint_path\n");
    for o in &outcomes {
        let path = o
            .final_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        manifest.push_str(&format!("{},{},{},{}\n", o.cell.name(), o.cell.input, o.cell.loss.name(), path));
    }
    let path = out_dir.join("grid.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(outcomes)
}

/// Share of the loss gradient mass (sum of absolute gradients with respect
/// to the logits) that falls on foreground pixels, summed over a batch.
pub fn foreground_gradient_share<T: Scalar, M: Segmenter<T> + ?Sized>(
    model: &M,
    batch: &[Sample<T>],
    loss: LossKind,
) -> Result<f64> {
    let (mut fg, mut total) = (0.0, 0.0);
    for s in batch {
        let frozen = Tape::inference();
        let x = frozen.constant(s.input.clone());
        let logits = model.logits(&frozen, &x)?.value().clone();
        let tape = Tape::new();
        let z = tape.leaf(logits, true);
        let grads = tape.backward(&loss.apply(&z, &s.mask)?)?;
        let g = grads.wrt(&z).ok_or_else(|| Error::usage("loss did not reach the logits"))?;
        for (gi, yi) in g.data().iter().zip(s.mask.data()) {
            let a = gi.as_f64().abs();
            total += a;
            if yi.as_f64() >= 0.5 {
                fg += a;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::usage("loss gradient vanished on this batch"));
    }
    Ok(fg / total)
}
