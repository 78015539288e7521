//! Continual few-shot evaluation of a frozen trunk, plus representation
//! sparsity statistics.
//!
//! A task streams `C` classes one class at a time, `per_class` examples each,
//! every example seen exactly once. A fresh zero-initialized `C`-way linear
//! head takes one plain-SGD update per example (the same closed-form operator
//! the inner loop uses, batch size 1); the trunk is never touched. Accuracy
//! is measured on a balanced held-out set covering all `C` classes. The
//! learning rate is cross-validated per trajectory length on a separate
//! validation split, ties going to the smaller rate.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{trunk_forward, TrunkConfig, TrunkParams};
use crate::config::EvalConfig;
use crate::data::{images_to_batch, Dataset};
use crate::error::{Error, Result};
use crate::parallel::parallel_enabled;
use crate::rng::{sample_without_replacement, tag, RngKey};
use crate::tensor::Tape;

/// Shape of one evaluation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    /// Classes per task (the trajectory length C).
    pub num_classes: usize,
    /// Training examples streamed per class (each seen once).
    pub per_class: usize,
    /// Held-out test examples per class, disjoint from the training ones.
    pub heldout_per_class: usize,
}

/// One sampled task: class ids in presentation order plus disjoint
/// train/test indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfslTask {
    pub classes: Vec<usize>,
    pub train_indices: Vec<Vec<usize>>,
    pub test_indices: Vec<Vec<usize>>,
}

/// Outcome of one task at one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub accuracy: f64,
    /// Accuracy per class position in presentation order.
    pub per_class: Vec<f64>,
}

/// Aggregated results for one trajectory length.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthReport {
    pub length: usize,
    pub selected_lr: f64,
    pub task_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub stderr: f64,
    pub per_class_mean: Vec<f64>,
}

/// Provenance attached to a report: enough to reproduce the run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub checkpoint_hash: String,
    pub config_echo: String,
    pub seed: u64,
}

/// Full sweep output: one row per trajectory length.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<LengthReport>,
    pub manifest: Manifest,
}

/// Draw a task: `C` distinct classes, then for each class disjoint train and
/// test examples, all without replacement.
pub fn sample_task(data: &Dataset, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<CfslTask> {
    if spec.num_classes == 0 {
        return Err(Error::Eval("a task needs at least one class".into()));
    }
    let all_classes = data.classes();
    if all_classes.len() < spec.num_classes {
        return Err(Error::Eval(format!(
            "split has {} classes, task needs {}",
            all_classes.len(),
            spec.num_classes
        )));
    }
    let picks = sample_without_replacement(rng, all_classes.len(), spec.num_classes);
    let classes: Vec<usize> = picks.into_iter().map(|i| all_classes[i]).collect();

    let need = spec.per_class + spec.heldout_per_class;
    let mut train_indices = Vec::with_capacity(spec.num_classes);
    let mut test_indices = Vec::with_capacity(spec.num_classes);
    for &class in &classes {
        let pool = data.indices_of_class(class);
        if pool.len() < need {
            return Err(Error::Eval(format!(
                "class {class} has {} examples, task needs {need} \
                 ({} train + {} held-out)",
                pool.len(),
                spec.per_class,
                spec.heldout_per_class
            )));
        }
        let drawn = sample_without_replacement(rng, pool.len(), need);
        train_indices.push(drawn[..spec.per_class].iter().map(|&i| pool[i]).collect());
        test_indices.push(drawn[spec.per_class..].iter().map(|&i| pool[i]).collect());
    }
    Ok(CfslTask { classes, train_indices, test_indices })
}

/// Trunk representations for a batch of images, row-major `[B, feature_dim]`.
/// No gradient graph is built; the trunk is read-only.
pub fn extract_features(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    images: &[&crate::augment::Image],
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let pixels = images_to_batch(images);
    let x = tape.constant(pixels, &[images.len(), 3, cfg.image_hw, cfg.image_hw])?;
    let placed = trunk.place(cfg, &mut tape, false)?;
    let features = trunk_forward(&mut tape, cfg, &placed, x)?;
    Ok(tape.value(features).to_vec())
}

/// Lowest index among the maxima.
fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One single-example SGD step on the linear head: softmax cross-entropy
/// gradient, the batch-size-1 case of the inner-loop operator.
fn sgd_head_update(w: &mut [f64], b: &mut [f64], z: &[f64], label: usize, lr: f64) {
    let c = b.len();
    let d = z.len();
    let mut logits = vec![0.0; c];
    for j in 0..c {
        let row = &w[j * d..(j + 1) * d];
        logits[j] = b[j] + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in &mut logits {
        *l = (*l - max).exp();
        sum += *l;
    }
    for (j, p) in logits.iter().enumerate() {
        let coeff = lr * (p / sum - f64::from(u8::from(j == label)));
        for (wv, zv) in w[j * d..(j + 1) * d].iter_mut().zip(z) {
            *wv -= coeff * zv;
        }
        b[j] -= coeff;
    }
}

/// Features of one task, extracted once and reused across learning rates.
struct TaskFeatures {
    /// Stream-ordered training features, `[C * per_class, d]` row-major.
    train: Vec<f64>,
    /// Test features grouped by class position, `[C * heldout, d]` row-major.
    test: Vec<f64>,
    num_classes: usize,
    per_class: usize,
    heldout: usize,
    dim: usize,
}

impl TaskFeatures {
    fn build(
        cfg: &TrunkConfig,
        trunk: &TrunkParams,
        data: &Dataset,
        task: &CfslTask,
    ) -> Result<Self> {
        let per_class = task.train_indices.first().map_or(0, Vec::len);
        let heldout = task.test_indices.first().map_or(0, Vec::len);
        let mut images = Vec::new();
        for class_train in &task.train_indices {
            for &i in class_train {
                images.push(&data.images[i]);
            }
        }
        for class_test in &task.test_indices {
            for &i in class_test {
                images.push(&data.images[i]);
            }
        }
        let feats = extract_features(cfg, trunk, &images)?;
        let dim = cfg.feature_dim();
        let split = task.classes.len() * per_class * dim;
        let (train, test) = feats.split_at(split);
        Ok(TaskFeatures {
            train: train.to_vec(),
            test: test.to_vec(),
            num_classes: task.classes.len(),
            per_class,
            heldout,
            dim,
        })
    }

    /// Stream the training examples once through a fresh zero head, then
    /// score the held-out set.
    fn run(&self, lr: f64) -> TaskResult {
        self.run_streamed(lr, |_| {})
    }

    /// [`run`](Self::run) with every head update reported to `on_update` as
    /// the task-local class it consumed, in arrival order.
    fn run_streamed(&self, lr: f64, mut on_update: impl FnMut(usize)) -> TaskResult {
        let (c, d) = (self.num_classes, self.dim);
        let mut w = vec![0.0; c * d];
        let mut b = vec![0.0; c];
        for ci in 0..c {
            for e in 0..self.per_class {
                let row = (ci * self.per_class + e) * d;
                sgd_head_update(&mut w, &mut b, &self.train[row..row + d], ci, lr);
                on_update(ci);
            }
        }
        let mut per_class = vec![0.0; c];
        for ci in 0..c {
            let mut correct = 0usize;
            for e in 0..self.heldout {
                let row = (ci * self.heldout + e) * d;
                let z = &self.test[row..row + d];
                let mut logits = vec![0.0; c];
                for j in 0..c {
                    logits[j] = b[j]
                        + w[j * d..(j + 1) * d].iter().zip(z).map(|(a, bb)| a * bb).sum::<f64>();
                }
                if argmax_lowest(&logits) == ci {
                    correct += 1;
                }
            }
            per_class[ci] = correct as f64 / self.heldout as f64;
        }
        let accuracy = per_class.iter().sum::<f64>() / c as f64;
        TaskResult { accuracy, per_class }
    }
}

/// Run one task end to end: freeze the trunk, stream the task once, score.
pub fn run_cfsl(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    data: &Dataset,
    task: &CfslTask,
    lr: f64,
) -> Result<TaskResult> {
    Ok(TaskFeatures::build(cfg, trunk, data, task)?.run(lr))
}

/// One task replayed with the update stream exposed.
///
/// `update_classes[i]` is the task-local class consumed by the `i`-th head
/// update, in arrival order — one entry per training example. Protocol
/// audits use it to confirm the single-pass, one-update-per-example,
/// class-contiguous replay without instrumenting the scoring path.
#[derive(Debug, Clone)]
pub struct StreamLog {
    pub update_classes: Vec<usize>,
    pub result: TaskResult,
}

/// [`run_cfsl`] with the order of head updates recorded.
pub fn run_cfsl_logged(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    data: &Dataset,
    task: &CfslTask,
    lr: f64,
) -> Result<StreamLog> {
    let feats = TaskFeatures::build(cfg, trunk, data, task)?;
    let mut update_classes = Vec::with_capacity(feats.num_classes * feats.per_class);
    let result = feats.run_streamed(lr, |ci| update_classes.push(ci));
    Ok(StreamLog { update_classes, result })
}

/// Pick the learning rate maximizing mean accuracy over `cv_tasks`
/// validation tasks (every candidate sees the same tasks). Ties go to the
/// smaller rate.
pub fn cross_validate_lr(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    val_data: &Dataset,
    spec: &TaskSpec,
    grid: &[f64],
    cv_tasks: usize,
    key: RngKey,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Eval("learning-rate grid is empty".into()));
    }
    if grid.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
        return Err(Error::Eval(format!("learning-rate grid must be finite and >= 0: {grid:?}")));
    }
    if cv_tasks == 0 {
        return Err(Error::Eval("cross-validation needs at least one task".into()));
    }
    let feats = run_tasks(cfg, trunk, val_data, spec, cv_tasks, key, |f| Ok(f))?;
    let mut candidates: Vec<f64> = grid.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite by check above"));
    let mut best = candidates[0];
    let mut best_acc = f64::NEG_INFINITY;
    for &lr in &candidates {
        let mean =
            feats.iter().map(|f| f.run(lr).accuracy).sum::<f64>() / feats.len() as f64;
        if mean > best_acc {
            best_acc = mean;
            best = lr;
        }
    }
    Ok(best)
}

/// Sample `count` tasks under per-task child keys and map them through `f`,
/// in parallel when enabled. Results keep task order.
fn run_tasks<T: Send, F>(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    data: &Dataset,
    spec: &TaskSpec,
    count: usize,
    key: RngKey,
    f: F,
) -> Result<Vec<T>>
where
    F: Fn(TaskFeatures) -> Result<T> + Sync,
{
    let one = |i: usize| -> Result<T> {
        let mut rng = key.child(i as u64).rng();
        let task = sample_task(data, spec, &mut rng)?;
        f(TaskFeatures::build(cfg, trunk, data, &task)?)
    };
    if parallel_enabled() && count > 1 {
        (0..count).into_par_iter().map(one).collect()
    } else {
        (0..count).map(one).collect()
    }
}

/// Full protocol: for each trajectory length, cross-validate the learning
/// rate on the validation split, then run fresh tasks on the test split and
/// aggregate mean, standard error, and per-class-position accuracy.
pub fn sweep(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    val_data: &Dataset,
    test_data: &Dataset,
    eval_cfg: &EvalConfig,
    manifest: Manifest,
) -> Result<EvalReport> {
    let root = RngKey::from_seed(eval_cfg.seed);
    let mut rows = Vec::with_capacity(eval_cfg.lengths.len());
    for &length in &eval_cfg.lengths {
        let spec = TaskSpec {
            num_classes: length,
            per_class: eval_cfg.per_class,
            heldout_per_class: eval_cfg.heldout_per_class,
        };
        let selected_lr = cross_validate_lr(
            cfg,
            trunk,
            val_data,
            &spec,
            &eval_cfg.lr_grid,
            eval_cfg.cv_tasks,
            root.child(tag::EVAL_CV).child(length as u64),
        )?;
        let results = run_tasks(
            cfg,
            trunk,
            test_data,
            &spec,
            eval_cfg.tasks,
            root.child(tag::EVAL_TASK).child(length as u64),
            |f| Ok(f.run(selected_lr)),
        )?;
        let task_accuracies: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
        let k = task_accuracies.len();
        let mean_accuracy = task_accuracies.iter().sum::<f64>() / k as f64;
        let stderr = if k < 2 {
            0.0
        } else {
            let var = task_accuracies.iter().map(|a| (a - mean_accuracy).powi(2)).sum::<f64>()
                / (k - 1) as f64;
            (var / k as f64).sqrt()
        };
        let mut per_class_mean = vec![0.0; length];
        for r in &results {
            for (acc, v) in per_class_mean.iter_mut().zip(&r.per_class) {
                *acc += v / k as f64;
            }
        }
        rows.push(LengthReport {
            length,
            selected_lr,
            task_accuracies,
            mean_accuracy,
            stderr,
            per_class_mean,
        });
    }
    Ok(EvalReport { rows, manifest })
}

/// Representation sparsity statistics over a sample of images.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub samples: usize,
    pub dim: usize,
    pub tau: f64,
    /// Fraction of activations equal to 0.0 exactly.
    pub frac_exact_zero: f64,
    /// Fraction of activations with magnitude at most `tau`.
    pub frac_below_tau: f64,
    /// Mean absolute activation per feature unit.
    pub unit_mean_abs: Vec<f64>,
    /// `(upper edge, count)` bins of activation magnitude, equal width from
    /// 0 to the largest magnitude seen.
    pub histogram: Vec<(f64, usize)>,
}

const HISTOGRAM_BINS: usize = 16;

/// Compute sparsity statistics of trunk representations.
pub fn sparsity_report(
    cfg: &TrunkConfig,
    trunk: &TrunkParams,
    images: &[&crate::augment::Image],
    tau: f64,
) -> Result<SparsityReport> {
    if tau < 0.0 {
        return Err(Error::Eval(format!("tau must be >= 0, got {tau}")));
    }
    if images.is_empty() {
        return Err(Error::Eval("sparsity report needs at least one image".into()));
    }
    let feats = extract_features(cfg, trunk, images)?;
    let dim = cfg.feature_dim();
    let total = feats.len();
    let mut exact_zero = 0usize;
    let mut below_tau = 0usize;
    let mut unit_mean_abs = vec![0.0; dim];
    let mut max_mag = 0.0f64;
    for (i, &v) in feats.iter().enumerate() {
        let mag = v.abs();
        if v == 0.0 {
            exact_zero += 1;
        }
        if mag <= tau {
            below_tau += 1;
        }
        unit_mean_abs[i % dim] += mag / images.len() as f64;
        max_mag = max_mag.max(mag);
    }
    let mut histogram = Vec::with_capacity(HISTOGRAM_BINS);
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    if max_mag > 0.0 {
        for &v in &feats {
            let bin = ((v.abs() / max_mag * HISTOGRAM_BINS as f64) as usize)
                .min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
    } else {
        counts[0] = total;
    }
    for (i, &count) in counts.iter().enumerate() {
        histogram.push((max_mag * (i + 1) as f64 / HISTOGRAM_BINS as f64, count));
    }
    Ok(SparsityReport {
        samples: images.len(),
        dim,
        tau,
        frac_exact_zero: exact_zero as f64 / total as f64,
        frac_below_tau: below_tau as f64 / total as f64,
        unit_mean_abs,
        histogram,
    })
}

/// Per-task CSV: one row per (length, task); the seed column carries the
/// sweep seed so rows remain self-describing when files are merged.
pub fn rows_csv(report: &EvalReport) -> String {
    let mut s = String::from("length,task,seed,lr,accuracy\n");
    for row in &report.rows {
        for (task, acc) in row.task_accuracies.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                row.length, task, report.manifest.seed, row.selected_lr, acc
            ));
        }
    }
    s
}

/// Parse [`rows_csv`] output back into `(length, task, seed, lr, accuracy)`
/// tuples. Floats round-trip exactly.
pub fn parse_rows_csv(text: &str) -> Result<Vec<(usize, usize, u64, f64, f64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("length,task,seed,lr,accuracy") => {}
        other => return Err(Error::Eval(format!("unexpected CSV header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Eval(format!("row {}: expected 5 fields, got {line}", i + 2)));
        }
        let parse_err = |field: &str| Error::Eval(format!("row {}: bad field `{field}`", i + 2));
        rows.push((
            fields[0].parse().map_err(|_| parse_err(fields[0]))?,
            fields[1].parse().map_err(|_| parse_err(fields[1]))?,
            fields[2].parse().map_err(|_| parse_err(fields[2]))?,
            fields[3].parse().map_err(|_| parse_err(fields[3]))?,
            fields[4].parse().map_err(|_| parse_err(fields[4]))?,
        ));
    }
    Ok(rows)
}

/// Summary CSV: one row per trajectory length; per-class means are
/// semicolon-joined inside one column.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut s = String::from("length,lr,tasks,mean_accuracy,stderr,per_class\n");
    for row in &report.rows {
        let per_class: Vec<String> = row.per_class_mean.iter().map(f64::to_string).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.length,
            row.selected_lr,
            row.task_accuracies.len(),
            row.mean_accuracy,
            row.stderr,
            per_class.join(";")
        ));
    }
    s
}
