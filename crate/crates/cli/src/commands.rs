//! One function per subcommand. Each reads from `cfg.data`, writes under
//! `cfg.out` and leaves a frozen config snapshot there.

use std::path::{Path, PathBuf};

use terraseg::baseline::{run_grid, ExperimentGrid};
use terraseg::data::{
    augment, build_splits, imbalance_stats, load_attributes, load_field, read_manifest, synth_field_with,
    to_model_input, write_field, write_gray_png, write_manifest, write_rgb_png, FieldStack, ManifestEntry, Sample,
    Split, MASK_FILE,
};
use terraseg::metrics::{
    confusion, segmentation_metrics, threshold_mask, write_report_csv, BinaryMask, ReportRow,
};
use terraseg::tensor::kernels::bilinear_resize;
use terraseg::train::{evaluate, load_checkpoint, train, OptimState, TrainOutputs};
use terraseg::{Error, Result, Segmenter, Tensor, TransformerSegmenter};

use crate::config::{io_err, Command, RunConfig};

/// Run the configured command and return a one-line summary.
pub fn dispatch(cfg: &RunConfig) -> Result<String> {
    cfg.freeze()?;
    match cfg.command {
        Command::Synth => synth(cfg),
        Command::Augment => augment_fields(cfg),
        Command::Train => train_model(cfg),
        Command::Eval => eval(cfg),
        Command::Predict => predict(cfg),
        Command::BaselineGrid => baseline_grid(cfg),
    }
}

fn synth(cfg: &RunConfig) -> Result<String> {
    let s = &cfg.synth;
    let mut masks = Vec::with_capacity(s.fields);
    for i in 0..s.fields {
        let mut field = synth_field_with(s.height, s.width, cfg.seed.wrapping_add(i as u64), &s.spec)?;
        field.id = format!("field{i:02}");
        write_field(&cfg.out.join(&field.id), &field)?;
        masks.push(field.mask);
    }
    let stats = imbalance_stats(&masks)?;
    Ok(format!(
        "synth: {} fields in {}; imbalance ratio mean {:.3} min {:.3} max {:.3}",
        s.fields,
        cfg.out.display(),
        stats.mean,
        stats.min,
        stats.max
    ))
}

/// Field directories directly under `root`, sorted by name.
fn field_dirs(root: &Path, need_mask: bool) -> Result<Vec<PathBuf>> {
    if root.join("ndvi.png").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("ndvi.png").is_file() && (!need_mask || p.join(MASK_FILE).is_file()))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no field directories under {}", root.display())));
    }
    Ok(dirs)
}

fn augment_fields(cfg: &RunConfig) -> Result<String> {
    let dirs = field_dirs(&cfg.data, true)?;
    let ids: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let splits = build_splits(&ids, cfg.split, cfg.seed)?;
    let samples_dir = cfg.out.join("samples");
    let mut entries = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let field = load_field(dir)?;
        let spec = terraseg::data::AugmentSpec {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.augment.clone()
        };
        let split = splits
            .split_of(&field.id)
            .ok_or_else(|| Error::Input(format!("field {} missing from the split", field.id)))?;
        for aug in augment(&field, &spec)? {
            let sample_id = format!("{}_{}", field.id, aug.augmentation);
            let stack = FieldStack::new(sample_id.clone(), aug.input, aug.mask)?;
            write_field(&samples_dir.join(&sample_id), &stack)?;
            entries.push(ManifestEntry {
                sample_id,
                field_id: field.id.clone(),
                split,
                augmentation: aug.augmentation,
            });
        }
    }
    write_manifest(&cfg.out.join("manifest.csv"), &entries)?;
    Ok(format!(
        "augment: {} samples from {} fields ({} train, {} val, {} test fields)",
        entries.len(),
        dirs.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ))
}

/// Samples of one split from an augmented dataset, at `size x size`.
fn load_split(cfg: &RunConfig, split: Split, size: usize) -> Result<Vec<Sample<f32>>> {
    let manifest = read_manifest(&cfg.data.join("manifest.csv"))?;
    manifest
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let field = load_field(&cfg.data.join("samples").join(&e.sample_id))?;
            let s = Sample::<f32>::from_field(&field)?;
            let s = Sample::new(e.sample_id.clone(), e.field_id.clone(), s.input, s.mask)?;
            to_model_input(&s, cfg.augment.model_input_size, size)
        })
        .collect()
}

fn new_model(cfg: &RunConfig) -> Result<TransformerSegmenter<f32>> {
    TransformerSegmenter::new(cfg.model_config()?, cfg.seed)
}

/// Model with weights from `model.checkpoint`; returns the stored epoch too.
fn trained_model(cfg: &RunConfig) -> Result<(TransformerSegmenter<f32>, usize)> {
    let path = cfg
        .model
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("model.checkpoint is required for this command".into()))?;
    let mut model = new_model(cfg)?;
    let mut optim = OptimState::for_store(model.params());
    let epoch = load_checkpoint(path, &mut model, &mut optim)?;
    Ok((model, epoch))
}

fn train_model(cfg: &RunConfig) -> Result<String> {
    let size = cfg.input_size();
    let train_set = load_split(cfg, Split::Train, size)?;
    let val_set = load_split(cfg, Split::Val, size)?;
    let mut model = new_model(cfg)?;
    let mut optim = OptimState::for_store(model.params());
    let start = match &cfg.resume {
        Some(p) => load_checkpoint(p, &mut model, &mut optim)?,
        None => 0,
    };
    let outputs = TrainOutputs::in_dir(&cfg.out);
    let records = train(&mut model, &mut optim, &train_set, &val_set, &cfg.train, start, Some(&outputs))?;
    let last = records.last().map(|r| r.epoch).unwrap_or(start);
    let mut rows = Vec::new();
    for (split, set) in [("train", &train_set), ("val", &val_set)] {
        if !set.is_empty() {
            rows.push(ReportRow {
                split: split.into(),
                epoch: last,
                report: evaluate(&model, set, cfg.threshold)?,
            });
        }
    }
    write_report_csv(&cfg.out.join("metrics.csv"), &rows)?;
    let loss = records.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    Ok(format!(
        "train: epochs {}..={} on {} samples, final loss {loss:.6}, checkpoint {}",
        start + 1,
        cfg.train.epochs,
        train_set.len(),
        outputs.checkpoint_path(last).display()
    ))
}

fn read_binary_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion {
            file: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let px: Vec<u8> = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    BinaryMask::from_u8(img.height() as usize, img.width() as usize, &px)
}

fn eval(cfg: &RunConfig) -> Result<String> {
    let split: Split = cfg.eval_split.parse()?;
    let (report, epoch) = match &cfg.eval_predictions {
        Some(dir) => {
            // Score stored masks at the samples' native resolution.
            let manifest = read_manifest(&cfg.data.join("manifest.csv"))?;
            let counts = manifest
                .iter()
                .filter(|e| e.split == split)
                .map(|e| {
                    let truth = read_binary_png(&cfg.data.join("samples").join(&e.sample_id).join(MASK_FILE))?;
                    let pred = read_binary_png(&dir.join(format!("{}.png", e.sample_id)))?;
                    confusion(&pred, &truth)
                })
                .collect::<Result<Vec<_>>>()?;
            (segmentation_metrics(&counts)?, 0)
        }
        None => {
            let (model, epoch) = trained_model(cfg)?;
            let set = load_split(cfg, split, cfg.input_size())?;
            (evaluate(&model, &set, cfg.threshold)?, epoch)
        }
    };
    let path = cfg.out.join("metrics.csv");
    let line = format!(
        "eval: {split} split, {} samples, MA {:.6} MDC {:.6} MIoU {:.6}",
        report.count(),
        report.mean_accuracy,
        report.mean_dice,
        report.mean_iou
    );
    write_report_csv(
        &path,
        &[ReportRow {
            split: split.to_string(),
            epoch,
            report,
        }],
    )?;
    Ok(line)
}

/// Inputs are padded to a multiple of this so every stage's token count is
/// divisible by its sequence-reduction factor.
pub const PAD_MULTIPLE: usize = 32;

/// Bottom/right edge replication of a `[C, H, W]` tensor.
fn pad_edges(x: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for r in 0..height {
            let row = &d[ch * h * w + r.min(h - 1) * w..][..w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(row[w - 1]).take(width - w));
        }
    }
    Tensor::new(&[c, height, width], out)
}

fn crop_top_left(x: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let (c, w) = (s[0], s[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for r in 0..height {
            out.extend_from_slice(&d[(ch * s[1] + r) * w..][..width]);
        }
    }
    Tensor::new(&[c, height, width], out)
}

/// Full-resolution foreground probabilities of one attribute stack.
///
/// The field is scaled by the ratio the model was trained at (model input
/// over crop size), edge-padded to [`PAD_MULTIPLE`], predicted, and the
/// probabilities cropped and scaled back.
pub fn field_probabilities<M: Segmenter<f32>>(
    model: &M,
    attributes: &Tensor<f32>,
    input_size: usize,
    crop_size: usize,
) -> Result<Tensor<f32>> {
    let (h, w) = (attributes.shape()[1], attributes.shape()[2]);
    let scale = input_size as f64 / crop_size as f64;
    let (sh, sw) = (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    );
    let x = if (sh, sw) == (h, w) {
        attributes.clone()
    } else {
        bilinear_resize(attributes, sh, sw)?
    };
    let (ph, pw) = (sh.next_multiple_of(PAD_MULTIPLE), sw.next_multiple_of(PAD_MULTIPLE));
    let p = model.predict(&pad_edges(&x, ph, pw)?)?;
    let p = crop_top_left(&p, sh, sw)?;
    if (sh, sw) == (h, w) {
        return Ok(p);
    }
    Ok(bilinear_resize(&p, h, w)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Mask pixels tinted red over the gray NDVI raster.
pub fn overlay(ndvi: &[f32], mask: &[u8]) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(3 * ndvi.len());
    for (&v, &m) in ndvi.iter().zip(mask) {
        let g = (v.clamp(0.0, 1.0) * 255.0).round();
        if m > 0 {
            let blend = |c: f32| (0.4 * g + 0.6 * c).round() as u8;
            rgb.extend([blend(255.0), blend(0.0), blend(0.0)]);
        } else {
            rgb.extend([g as u8; 3]);
        }
    }
    rgb
}

fn predict(cfg: &RunConfig) -> Result<String> {
    let (model, _) = trained_model(cfg)?;
    let dirs = field_dirs(&cfg.data, false)?;
    let mut total = 0;
    for dir in &dirs {
        let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let x = load_attributes(dir)?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let p = field_probabilities(&model, &x, cfg.input_size(), cfg.augment.model_input_size)?;
        let mask = threshold_mask(p.data(), cfg.threshold)?;
        total += mask.iter().filter(|&&m| m > 0).count();
        let out = cfg.out.join(&id);
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let prob = p.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        write_gray_png(&out.join("prob.png"), h, w, prob)?;
        write_gray_png(&out.join("mask.png"), h, w, mask.clone())?;
        // First channel of the NDVI band.
        let ndvi = &x.data()[9 * h * w..10 * h * w];
        write_rgb_png(&out.join("overlay.png"), h, w, overlay(ndvi, &mask))?;
    }
    Ok(format!(
        "predict: {} fields, {total} site pixels, outputs in {}",
        dirs.len(),
        cfg.out.display()
    ))
}

fn baseline_grid(cfg: &RunConfig) -> Result<String> {
    let size = cfg.grid_input_size();
    let train_set = load_split(cfg, Split::Train, size)?;
    let val_set = load_split(cfg, Split::Val, size)?;
    let mut grid = ExperimentGrid::standard(cfg.grid_epochs(), cfg.seed);
    grid.train.batch_size = cfg.grid.batch_size;
    grid.train.checkpoint_every = cfg.grid.checkpoint_every;
    grid.train.lr = cfg.train.lr;
    grid.train.momentum = cfg.train.momentum;
    grid.train.weight_decay = cfg.train.weight_decay;
    grid.threshold = cfg.threshold;
    let outcomes = run_grid(&grid, &train_set, &val_set, &cfg.out)?;
    let failed: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.error.as_ref().map(|e| format!("{} ({e})", o.cell.name())))
        .collect();
    if !failed.is_empty() {
        return Err(Error::Usage(format!("grid cells failed: {}", failed.join("; "))));
    }
    Ok(format!(
        "baseline-grid: {} cells, {} epochs, results in {}",
        outcomes.len(),
        grid.train.epochs,
        cfg.out.join("grid.csv").display()
    ))
}
