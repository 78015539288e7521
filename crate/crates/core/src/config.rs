//! Run configuration: a flat `section.key = value` text format holding every
//! tunable, with typed parsing, cross-field validation, and a canonical echo
//! that parses back to the identical configuration.
//!
//! Unset keys take documented defaults; several defaults are derived from
//! other keys (queue capacity = one meta-batch of unique images, recall query
//! = whole queue, head size = twice the minimum the label-capacity bound
//! allows, warmup = min(1000, total/10)). `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::arch::TrunkConfig;
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::optim::AdamWHyper;
use crate::stream::Mode;
use crate::train::TrainSettings;

/// Where training images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar10 => "cifar10",
            DataSource::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "cifar10" => Ok(DataSource::Cifar10),
            "cifar100" => Ok(DataSource::Cifar100),
            other => Err(Error::Config(format!(
                "data.source must be `synthetic`, `cifar10` or `cifar100`, got `{other}`"
            ))),
        }
    }
}

/// The `data.*` section.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// File or directory for the CIFAR binaries; unused for synthetic data.
    pub path: String,
    /// Seeds synthetic generation and the class-level split partitions;
    /// independent of the training seed.
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub hw: usize,
    pub difficulty: f64,
}

/// The `eval.*` section: continual few-shot testing protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Inner learning rates cross-validation chooses between.
    pub lr_grid: Vec<f64>,
    /// Numbers of classes per task (trajectory lengths C).
    pub lengths: Vec<usize>,
    /// Training examples streamed per class (N_c).
    pub per_class: usize,
    /// Held-out test examples per class.
    pub heldout_per_class: usize,
    /// Task draws averaged for the reported accuracy.
    pub tasks: usize,
    /// Task draws used by learning-rate cross-validation.
    pub cv_tasks: usize,
    pub seed: u64,
}

/// Everything a run needs, resolved and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub total_steps: u64,
    pub out_dir: String,
    /// Checkpoint cadence in meta-steps; 0 = final checkpoint only.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub num_streams: usize,
    pub num_contexts: usize,
    pub repeats: usize,
    pub num_labels: usize,
    pub queue_capacity: usize,
    pub recall_query: usize,
    pub alpha: f64,
    pub adamw: AdamWHyper,
    pub warmup: u64,
    pub channels: Vec<usize>,
    pub pool: Vec<bool>,
    pub groups: usize,
    pub extra_relu: bool,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("empty config resolves to defaults")
    }
}

/// Raw key-value view of the file, with duplicate and syntax checking.
struct RawConfig {
    map: BTreeMap<String, String>,
}

impl RawConfig {
    fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `section.key = value`"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !key.contains('.') {
                return Err(Error::Config(format!(
                    "line {line_no}: key `{key}` has no section prefix"
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
            }
        }
        Ok(RawConfig { map })
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }

    /// Like [`take`] but for keys whose default depends on other keys.
    fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|_| {
                        Error::Config(format!("key `{key}`: cannot parse item `{}`", item.trim()))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
            Err(Error::Config(format!("unknown config key(s): {}", keys.join(", "))))
        }
    }
}

impl RunConfig {
    /// Parse configuration text, fill defaults, and validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::from_text(text)?;

        let mode = raw.take("run.mode", Mode::Unsupervised)?;
        let seed = raw.take("run.seed", 0u64)?;
        let total_steps = raw.take("run.total_steps", 350_000u64)?;
        let out_dir = raw.take_raw("run.out_dir").unwrap_or_else(|| "runs/out".to_string());
        let checkpoint_every = raw.take("run.checkpoint_every", 0u64)?;

        let data = DataConfig {
            source: raw.take("data.source", DataSource::Synthetic)?,
            path: raw.take_raw("data.path").unwrap_or_default(),
            seed: raw.take("data.seed", 0u64)?,
            classes: raw.take("data.classes", 24usize)?,
            per_class: raw.take("data.per_class", 100usize)?,
            hw: raw.take("data.hw", 16usize)?,
            difficulty: raw.take("data.difficulty", 0.5f64)?,
        };

        let num_streams = raw.take("stream.num_streams", 4usize)?;
        let num_contexts = raw.take("stream.num_contexts", 5usize)?;
        let repeats = raw.take("stream.repeats", 2usize)?;

        let uniques = num_streams * num_contexts;
        let queue_capacity = raw.take_opt("queue.capacity")?.unwrap_or(uniques);
        let recall_query = raw.take_opt("queue.recall_query")?.unwrap_or(queue_capacity);
        let num_labels =
            raw.take_opt("head.num_labels")?.unwrap_or(2 * (uniques + queue_capacity));

        let alpha = raw.take("inner.alpha", 0.1f64)?;
        let default_hyper = AdamWHyper::default();
        let adamw = AdamWHyper {
            lr: raw.take("outer.lr", default_hyper.lr)?,
            beta1: raw.take("outer.beta1", default_hyper.beta1)?,
            beta2: raw.take("outer.beta2", default_hyper.beta2)?,
            eps: raw.take("outer.eps", default_hyper.eps)?,
            weight_decay: raw.take("outer.weight_decay", default_hyper.weight_decay)?,
            clip_norm: raw.take("outer.clip_norm", default_hyper.clip_norm)?,
        };
        let warmup = raw.take_opt("outer.warmup")?.unwrap_or_else(|| 1000.min(total_steps / 10));

        let channels = raw.take_list("trunk.channels", vec![32, 32, 32, 32])?;
        let pool = raw.take_list("trunk.pool", vec![true, true, true, false])?;
        let groups = raw.take("trunk.groups", 8usize)?;
        let extra_relu = raw.take("trunk.extra_relu", true)?;

        let default_aug = AugmentConfig::default();
        let augment = AugmentConfig {
            scale_lo: raw.take("augment.scale_lo", default_aug.scale_lo)?,
            scale_hi: raw.take("augment.scale_hi", default_aug.scale_hi)?,
            aspect_lo: raw.take("augment.aspect_lo", default_aug.aspect_lo)?,
            aspect_hi: raw.take("augment.aspect_hi", default_aug.aspect_hi)?,
            color_strength: raw.take("augment.color_strength", default_aug.color_strength)?,
            grayscale_prob: raw.take("augment.grayscale_prob", default_aug.grayscale_prob)?,
            blur_sigma_lo: raw.take("augment.blur_sigma_lo", default_aug.blur_sigma_lo)?,
            blur_sigma_hi: raw.take("augment.blur_sigma_hi", default_aug.blur_sigma_hi)?,
            blur_prob: raw.take("augment.blur_prob", default_aug.blur_prob)?,
            views: raw.take("augment.views", default_aug.views)?,
        };

        let eval = EvalConfig {
            lr_grid: raw.take_list("eval.lr_grid", vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1])?,
            lengths: raw.take_list("eval.lengths", vec![2, 5])?,
            per_class: raw.take("eval.per_class", 30usize)?,
            heldout_per_class: raw.take("eval.heldout_per_class", 20usize)?,
            tasks: raw.take("eval.tasks", 10usize)?,
            cv_tasks: raw.take("eval.cv_tasks", 5usize)?,
            seed: raw.take("eval.seed", 0u64)?,
        };

        raw.finish()?;

        let cfg = RunConfig {
            mode,
            seed,
            total_steps,
            out_dir,
            checkpoint_every,
            data,
            num_streams,
            num_contexts,
            repeats,
            num_labels,
            queue_capacity,
            recall_query,
            alpha,
            adamw,
            warmup,
            channels,
            pool,
            groups,
            extra_relu,
            augment,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a configuration file from disk.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Image side length implied by the data source.
    pub fn image_hw(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic => self.data.hw,
            DataSource::Cifar10 | DataSource::Cifar100 => 32,
        }
    }

    /// The trunk description, with the image size taken from the data source.
    pub fn trunk_config(&self) -> TrunkConfig {
        TrunkConfig {
            in_channels: 3,
            image_hw: self.image_hw(),
            channels: self.channels.clone(),
            pool: self.pool.clone(),
            groups: self.groups,
            extra_relu: self.extra_relu,
        }
    }

    /// Assemble the trainer settings this configuration describes.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            trunk: self.trunk_config(),
            augment: self.augment.clone(),
            mode: self.mode,
            num_streams: self.num_streams,
            num_contexts: self.num_contexts,
            repeats: self.repeats,
            num_labels: self.num_labels,
            queue_capacity: self.queue_capacity,
            recall_query: self.recall_query,
            alpha: self.alpha,
            adamw: self.adamw.clone(),
            warmup: self.warmup,
            total_steps: self.total_steps,
            seed: self.seed,
        }
    }

    /// Cross-field checks beyond what the trainer itself enforces.
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.pool.len() != 4 {
            return Err(Error::Config(format!(
                "trunk must have exactly 4 blocks: got {} channel entries and {} pool flags",
                self.channels.len(),
                self.pool.len()
            )));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.classes < 2 || self.data.per_class == 0 {
                    return Err(Error::Config(format!(
                        "synthetic data needs >= 2 classes and >= 1 image per class, got {} x {}",
                        self.data.classes, self.data.per_class
                    )));
                }
                if !(0.0..=1.0).contains(&self.data.difficulty) {
                    return Err(Error::Config(format!(
                        "data.difficulty must be in [0, 1], got {}",
                        self.data.difficulty
                    )));
                }
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                if self.data.path.is_empty() {
                    return Err(Error::Config(format!(
                        "data.source = {} requires data.path",
                        self.data.source
                    )));
                }
            }
        }
        let a = &self.augment;
        let range_ok = |lo: f64, hi: f64| lo > 0.0 && lo <= hi;
        if !range_ok(a.scale_lo, a.scale_hi) || a.scale_hi > 1.0 {
            return Err(Error::Config(format!(
                "augment.scale range ({}, {}] must satisfy 0 < lo <= hi <= 1",
                a.scale_lo, a.scale_hi
            )));
        }
        if !range_ok(a.aspect_lo, a.aspect_hi) {
            return Err(Error::Config(format!(
                "augment.aspect range [{}, {}] must satisfy 0 < lo <= hi",
                a.aspect_lo, a.aspect_hi
            )));
        }
        if !range_ok(a.blur_sigma_lo, a.blur_sigma_hi) {
            return Err(Error::Config(format!(
                "augment.blur_sigma range [{}, {}] must satisfy 0 < lo <= hi",
                a.blur_sigma_lo, a.blur_sigma_hi
            )));
        }
        for (name, p) in [("grayscale_prob", a.grayscale_prob), ("blur_prob", a.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        if a.color_strength < 0.0 {
            return Err(Error::Config(format!(
                "augment.color_strength must be >= 0, got {}",
                a.color_strength
            )));
        }
        if a.views == 0 {
            return Err(Error::Config("augment.views must be >= 1".into()));
        }
        let e = &self.eval;
        if e.lr_grid.is_empty() || e.lr_grid.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::Config("eval.lr_grid must be non-empty and positive".into()));
        }
        if e.lengths.is_empty() || e.lengths.contains(&0) {
            return Err(Error::Config("eval.lengths must be non-empty and positive".into()));
        }
        if e.per_class == 0 || e.heldout_per_class == 0 || e.tasks == 0 || e.cv_tasks == 0 {
            return Err(Error::Config(
                "eval.per_class, eval.heldout_per_class, eval.tasks and eval.cv_tasks must be >= 1"
                    .into(),
            ));
        }
        // Trainer-level checks (positive dims, label-capacity bound, trunk
        // geometry, schedule sanity) run on the assembled settings.
        self.train_settings().validate()
    }

    /// Canonical text form: every key, resolved, in fixed order.
    /// `parse(echo(cfg))` reproduces `cfg` exactly.
    pub fn echo(&self) -> String {
        fn list<T: std::fmt::Display>(items: &[T]) -> String {
            items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
        }
        let mut s = String::new();
        let _ = writeln!(s, "run.mode = {}", self.mode);
        let _ = writeln!(s, "run.seed = {}", self.seed);
        let _ = writeln!(s, "run.total_steps = {}", self.total_steps);
        let _ = writeln!(s, "run.out_dir = {}", self.out_dir);
        let _ = writeln!(s, "run.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "data.source = {}", self.data.source);
        if !self.data.path.is_empty() {
            let _ = writeln!(s, "data.path = {}", self.data.path);
        }
        let _ = writeln!(s, "data.seed = {}", self.data.seed);
        let _ = writeln!(s, "data.classes = {}", self.data.classes);
        let _ = writeln!(s, "data.per_class = {}", self.data.per_class);
        let _ = writeln!(s, "data.hw = {}", self.data.hw);
        let _ = writeln!(s, "data.difficulty = {}", self.data.difficulty);
        let _ = writeln!(s, "stream.num_streams = {}", self.num_streams);
        let _ = writeln!(s, "stream.num_contexts = {}", self.num_contexts);
        let _ = writeln!(s, "stream.repeats = {}", self.repeats);
        let _ = writeln!(s, "head.num_labels = {}", self.num_labels);
        let _ = writeln!(s, "queue.capacity = {}", self.queue_capacity);
        let _ = writeln!(s, "queue.recall_query = {}", self.recall_query);
        let _ = writeln!(s, "inner.alpha = {}", self.alpha);
        let _ = writeln!(s, "outer.lr = {}", self.adamw.lr);
        let _ = writeln!(s, "outer.beta1 = {}", self.adamw.beta1);
        let _ = writeln!(s, "outer.beta2 = {}", self.adamw.beta2);
        let _ = writeln!(s, "outer.eps = {}", self.adamw.eps);
        let _ = writeln!(s, "outer.weight_decay = {}", self.adamw.weight_decay);
        let _ = writeln!(s, "outer.clip_norm = {}", self.adamw.clip_norm);
        let _ = writeln!(s, "outer.warmup = {}", self.warmup);
        let _ = writeln!(s, "trunk.channels = {}", list(&self.channels));
        let _ = writeln!(s, "trunk.pool = {}", list(&self.pool));
        let _ = writeln!(s, "trunk.groups = {}", self.groups);
        let _ = writeln!(s, "trunk.extra_relu = {}", self.extra_relu);
        let _ = writeln!(s, "augment.scale_lo = {}", self.augment.scale_lo);
        let _ = writeln!(s, "augment.scale_hi = {}", self.augment.scale_hi);
        let _ = writeln!(s, "augment.aspect_lo = {}", self.augment.aspect_lo);
        let _ = writeln!(s, "augment.aspect_hi = {}", self.augment.aspect_hi);
        let _ = writeln!(s, "augment.color_strength = {}", self.augment.color_strength);
        let _ = writeln!(s, "augment.grayscale_prob = {}", self.augment.grayscale_prob);
        let _ = writeln!(s, "augment.blur_sigma_lo = {}", self.augment.blur_sigma_lo);
        let _ = writeln!(s, "augment.blur_sigma_hi = {}", self.augment.blur_sigma_hi);
        let _ = writeln!(s, "augment.blur_prob = {}", self.augment.blur_prob);
        let _ = writeln!(s, "augment.views = {}", self.augment.views);
        let _ = writeln!(s, "eval.lr_grid = {}", list(&self.eval.lr_grid));
        let _ = writeln!(s, "eval.lengths = {}", list(&self.eval.lengths));
        let _ = writeln!(s, "eval.per_class = {}", self.eval.per_class);
        let _ = writeln!(s, "eval.heldout_per_class = {}", self.eval.heldout_per_class);
        let _ = writeln!(s, "eval.tasks = {}", self.eval.tasks);
        let _ = writeln!(s, "eval.cv_tasks = {}", self.eval.cv_tasks);
        let _ = writeln!(s, "eval.seed = {}", self.eval.seed);
        s
    }
}
