//! Run configuration: a small `key = value` format with `[section]` headers.
//!
//! Resolution order is defaults, then the config file, then command-line
//! flags. Every key is known up front; anything else is rejected with the
//! line it came from.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use terraseg::data::{AugmentSpec, SynthSpec};
use terraseg::metrics::DEFAULT_THRESHOLD;
use terraseg::train::{LossKind, TrainConfig};
use terraseg::{Error, ModelConfig, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Augment,
    Train,
    Eval,
    Predict,
    BaselineGrid,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Synth,
        Command::Augment,
        Command::Train,
        Command::Eval,
        Command::Predict,
        Command::BaselineGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Augment => "augment",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::BaselineGrid => "baseline-grid",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown command `{s}`")))
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub fields: usize,
    pub height: usize,
    pub width: usize,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub preset: String,
    /// Side of the square the model sees; `None` picks the preset's default.
    pub input_size: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub fuse_activation: Option<bool>,
    pub head_gain: Option<f64>,
    pub head_prior: Option<f64>,
    pub init_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSettings {
    /// `None` reuses `train.epochs`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub input_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub threshold: f64,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
    pub augment: AugmentSpec,
    pub synth: SynthSettings,
    pub split: (f64, f64, f64),
    pub eval_split: String,
    /// Directory of `<sample_id>.png` masks scored instead of model output.
    pub eval_predictions: Option<PathBuf>,
    pub grid: GridSettings,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        RunConfig {
            command,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            model: ModelSettings {
                preset: "paper".into(),
                input_size: None,
                checkpoint: None,
                fuse_activation: None,
                head_gain: None,
                head_prior: None,
                init_gain: None,
            },
            train: TrainConfig::default(),
            resume: None,
            augment: AugmentSpec::default(),
            synth: SynthSettings {
                fields: 14,
                height: 900,
                width: 1100,
                spec: SynthSpec::default(),
            },
            split: (0.7, 0.15, 0.15),
            eval_split: "test".into(),
            eval_predictions: None,
            grid: GridSettings {
                epochs: None,
                batch_size: 32,
                checkpoint_every: 500,
                input_size: None,
            },
        }
    }

    /// Architecture with the preset and any per-key overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut mc = ModelConfig::preset(&self.model.preset)?;
        if let Some(v) = self.model.fuse_activation {
            mc.decoder.fuse_activation = v;
        }
        if let Some(v) = self.model.head_gain {
            mc.head_gain = v;
        }
        if let Some(v) = self.model.head_prior {
            mc.head_prior = v;
        }
        if let Some(v) = self.model.init_gain {
            mc.init_gain = v;
        }
        Ok(mc)
    }

    /// Model input side; the tiny preset works at a quarter of the crop.
    pub fn input_size(&self) -> usize {
        self.model.input_size.unwrap_or(match self.model.preset.as_str() {
            "tiny" => self.augment.model_input_size / 4,
            _ => self.augment.model_input_size,
        })
    }

    pub fn grid_input_size(&self) -> usize {
        self.grid.input_size.unwrap_or_else(|| self.input_size())
    }

    pub fn grid_epochs(&self) -> usize {
        self.grid.epochs.unwrap_or(self.train.epochs)
    }

    /// Fill preset-dependent defaults so a snapshot reads back identically.
    pub fn resolve(mut self) -> Result<Self> {
        let mc = self.model_config()?;
        self.model.input_size = Some(self.input_size());
        self.model.fuse_activation = Some(mc.decoder.fuse_activation);
        self.model.head_gain = Some(mc.head_gain);
        self.model.head_prior = Some(mc.head_prior);
        self.model.init_gain = Some(mc.init_gain);
        self.grid.input_size = Some(self.grid_input_size());
        self.grid.epochs = Some(self.grid_epochs());
        self.train.seed = self.seed;
        self.augment.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.model_config()?;
        if !(0.0..=255.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} must lie in [0, 255]", self.threshold)));
        }
        if self.input_size() == 0 || self.grid_input_size() == 0 {
            return Err(Error::Config("input sizes must be >= 1".into()));
        }
        if self.grid.batch_size == 0 || self.grid.checkpoint_every == 0 {
            return Err(Error::Config("grid batch size and checkpoint interval must be >= 1".into()));
        }
        if !["train", "val", "test"].contains(&self.eval_split.as_str()) {
            return Err(Error::Config(format!(
                "eval.split `{}` must be train, val or test",
                self.eval_split
            )));
        }
        Ok(())
    }

    /// Assign one key. `Ok(false)` means the key is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let v = value;
        match key {
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = num(v)?,
            "threshold" => self.threshold = num(v)?,
            "model.preset" => {
                ModelConfig::preset(v).map_err(|e| e.to_string())?;
                self.model.preset = v.to_string();
            }
            "model.input_size" => self.model.input_size = opt_num(v)?,
            "model.checkpoint" => self.model.checkpoint = opt_path(v),
            "model.fuse_activation" => self.model.fuse_activation = opt_num(v)?,
            "model.head_gain" => self.model.head_gain = opt_num(v)?,
            "model.head_prior" => self.model.head_prior = opt_num(v)?,
            "model.init_gain" => self.model.init_gain = opt_num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.lr" => self.train.lr = num(v)?,
            "train.momentum" => self.train.momentum = num(v)?,
            "train.weight_decay" => self.train.weight_decay = num(v)?,
            "train.epochs" => self.train.epochs = num(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(v)?,
            "train.loss" => {
                self.train.loss = match v {
                    "bce" => LossKind::Bce,
                    "focal" => match self.train.loss {
                        f @ LossKind::Focal { .. } => f,
                        LossKind::Bce => terraseg::baseline::DEFAULT_FOCAL,
                    },
                    _ => return Err(format!("`{v}` is not bce or focal")),
                }
            }
            "train.focal_alpha" | "train.focal_gamma" => {
                let x: f64 = num(v)?;
                let (mut alpha, mut gamma) = match self.train.loss {
                    LossKind::Focal { alpha, gamma } => (alpha, gamma),
                    LossKind::Bce => return Err("set `train.loss = focal` first".into()),
                };
                if key.ends_with("alpha") {
                    alpha = x;
                } else {
                    gamma = x;
                }
                self.train.loss = LossKind::Focal { alpha, gamma };
            }
            "train.resume" => self.resume = opt_path(v),
            "augment.center_crop_sizes" => self.augment.center_crop_sizes = list(v)?,
            "augment.random_crops" => self.augment.n_random_crops = num(v)?,
            "augment.random_crop_size" => self.augment.random_crop_size = num(v)?,
            "augment.rotations" => self.augment.n_rotations = num(v)?,
            "augment.rotation_min_deg" => self.augment.rotation_range_deg.0 = num(v)?,
            "augment.rotation_max_deg" => self.augment.rotation_range_deg.1 = num(v)?,
            "augment.target_size" => self.augment.target_size = num(v)?,
            "augment.model_input_size" => self.augment.model_input_size = num(v)?,
            "synth.fields" => self.synth.fields = num(v)?,
            "synth.height" => self.synth.height = num(v)?,
            "synth.width" => self.synth.width = num(v)?,
            "synth.target_ratio" => self.synth.spec.target_ratio = num(v)?,
            "synth.ratio_min" => self.synth.spec.ratio_bounds.0 = num(v)?,
            "synth.ratio_max" => self.synth.spec.ratio_bounds.1 = num(v)?,
            "synth.tile" => self.synth.spec.tile = num(v)?,
            "synth.flow_weight" => self.synth.spec.flow_weight = num(v)?,
            "split.train" => self.split.0 = num(v)?,
            "split.val" => self.split.1 = num(v)?,
            "split.test" => self.split.2 = num(v)?,
            "eval.split" => self.eval_split = v.to_string(),
            "eval.predictions" => self.eval_predictions = opt_path(v),
            "grid.epochs" => self.grid.epochs = opt_num(v)?,
            "grid.batch_size" => self.grid.batch_size = num(v)?,
            "grid.checkpoint_every" => self.grid.checkpoint_every = num(v)?,
            "grid.input_size" => self.grid.input_size = opt_num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every setting in the file format, readable by [`parse_config_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(s, "# terraseg {} (fully resolved)", self.command);
        let _ = writeln!(s, "data = {}", self.data.display());
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "preset = {}", self.model.preset);
        let _ = writeln!(s, "input_size = {}", opt(self.model.input_size.map(|v| v.to_string())));
        let _ = writeln!(s, "checkpoint = {}", path(&self.model.checkpoint));
        let _ = writeln!(s, "fuse_activation = {}", opt(self.model.fuse_activation.map(|v| v.to_string())));
        let _ = writeln!(s, "head_gain = {}", opt(self.model.head_gain.map(|v| v.to_string())));
        let _ = writeln!(s, "head_prior = {}", opt(self.model.head_prior.map(|v| v.to_string())));
        let _ = writeln!(s, "init_gain = {}", opt(self.model.init_gain.map(|v| v.to_string())));
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        match t.loss {
            LossKind::Bce => {
                let _ = writeln!(s, "loss = bce");
            }
            LossKind::Focal { alpha, gamma } => {
                let _ = writeln!(s, "loss = focal\nfocal_alpha = {alpha}\nfocal_gamma = {gamma}");
            }
        }
        let _ = writeln!(s, "resume = {}", path(&self.resume));
        let a = &self.augment;
        let sizes: Vec<String> = a.center_crop_sizes.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "\n[augment]");
        let _ = writeln!(s, "center_crop_sizes = {}", sizes.join(","));
        let _ = writeln!(s, "random_crops = {}", a.n_random_crops);
        let _ = writeln!(s, "random_crop_size = {}", a.random_crop_size);
        let _ = writeln!(s, "rotations = {}", a.n_rotations);
        let _ = writeln!(s, "rotation_min_deg = {}", a.rotation_range_deg.0);
        let _ = writeln!(s, "rotation_max_deg = {}", a.rotation_range_deg.1);
        let _ = writeln!(s, "target_size = {}", a.target_size);
        let _ = writeln!(s, "model_input_size = {}", a.model_input_size);
        let sy = &self.synth;
        let _ = writeln!(s, "\n[synth]");
        let _ = writeln!(s, "fields = {}", sy.fields);
        let _ = writeln!(s, "height = {}", sy.height);
        let _ = writeln!(s, "width = {}", sy.width);
        let _ = writeln!(s, "target_ratio = {}", sy.spec.target_ratio);
        let _ = writeln!(s, "ratio_min = {}", sy.spec.ratio_bounds.0);
        let _ = writeln!(s, "ratio_max = {}", sy.spec.ratio_bounds.1);
        let _ = writeln!(s, "tile = {}", sy.spec.tile);
        let _ = writeln!(s, "flow_weight = {}", sy.spec.flow_weight);
        let _ = writeln!(s, "\n[split]");
        let _ = writeln!(s, "train = {}\nval = {}\ntest = {}", self.split.0, self.split.1, self.split.2);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "split = {}", self.eval_split);
        let _ = writeln!(s, "predictions = {}", path(&self.eval_predictions));
        let g = &self.grid;
        let _ = writeln!(s, "\n[grid]");
        let _ = writeln!(s, "epochs = {}", opt(g.epochs.map(|v| v.to_string())));
        let _ = writeln!(s, "batch_size = {}", g.batch_size);
        let _ = writeln!(s, "checkpoint_every = {}", g.checkpoint_every);
        let _ = writeln!(s, "input_size = {}", opt(g.input_size.map(|v| v.to_string())));
        s
    }

    /// Write the frozen snapshot as `<out>/<command>.conf`.
    pub fn freeze(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        let path = self.out.join(format!("{}.conf", self.command));
        std::fs::write(&path, self.to_text()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn num<N: FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn opt_num<N: FromStr>(v: &str) -> std::result::Result<Option<N>, String> {
    if v.is_empty() {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(p.trim())).collect()
}

/// Empty values clear optional paths.
fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Apply a config file's text on top of `cfg`. `source` names the file in errors.
pub fn parse_config_text(cfg: &mut RunConfig, text: &str, source: &str) -> Result<()> {
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("{source} line {line_no}: unterminated section header")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{source} line {line_no}: expected `key = value`")))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        apply(cfg, &key, v.trim(), &format!("{source} line {line_no}"))?;
    }
    Ok(())
}

/// Set one key, turning failures into configuration errors that name `at`.
pub fn apply(cfg: &mut RunConfig, key: &str, value: &str, at: &str) -> Result<()> {
    match cfg.set(key, value) {
        Ok(true) => Ok(()),
        Ok(false) => Err(Error::Config(format!("{at}: unknown key `{key}`"))),
        Err(reason) => Err(Error::Config(format!("{at}: bad value for `{key}`: {reason}"))),
    }
}

/// Defaults, then the optional file, then `overrides` in order.
pub fn parse_config(command: Command, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults(command);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        parse_config_text(&mut cfg, &text, &path.display().to_string())?;
    }
    for (k, v) in overrides {
        apply(&mut cfg, k, v, "command line")?;
    }
    cfg.resolve()
}
