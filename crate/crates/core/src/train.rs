//! Meta-training engine: head-only inner SGD over correlated trajectories,
//! outer loss on fresh views plus recalled features, and backpropagation
//! through the unrolled inner loop into the trunk and the initial head.
//!
//! The inner update has a closed form — the head is linear and its loss is
//! softmax cross-entropy — so each step is recorded on the tape as ordinary
//! forward arithmetic: `W' = W − α(p − y)zᵀ`. Reverse-mode differentiation
//! of that expression *is* the meta-gradient; no higher-order machinery is
//! needed, and an independent generic-autodiff oracle in the tests confirms
//! the equivalence.

use crate::arch::{head_forward, trunk_forward, HeadParams, TrunkConfig, TrunkParams};
use crate::augment::AugmentConfig;
use crate::data::{images_to_batch, Dataset};
use crate::error::{Error, Result};
use crate::optim::{adamw_clip_update, lr_schedule, AdamWHyper, Moments};
use crate::recall::RecallQueue;
use crate::rng::{tag, RngKey};
use crate::stream::{build_meta_batch, MetaBatch, Mode, StreamSource};
use crate::tensor::{Tape, TensorRef};

/// Everything a pretraining run needs beyond the dataset itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub trunk: TrunkConfig,
    pub augment: AugmentConfig,
    pub mode: Mode,
    /// Parallel streams per meta-step (M).
    pub num_streams: usize,
    /// Contexts per trajectory.
    pub num_contexts: usize,
    /// Samples per context (n); trajectory length is `num_contexts * n`.
    pub repeats: usize,
    /// Head output size (L).
    pub num_labels: usize,
    /// Recall queue capacity (N).
    pub queue_capacity: usize,
    /// Queue entries sampled into the outer query set each step.
    pub recall_query: usize,
    /// Inner-loop learning rate (α).
    pub alpha: f64,
    pub adamw: AdamWHyper,
    pub warmup: u64,
    pub total_steps: u64,
    pub seed: u64,
}

impl TrainSettings {
    /// Inner-loop length k.
    pub fn trajectory_len(&self) -> usize {
        self.num_contexts * self.repeats
    }

    /// Labels consumed per meta-step (before queue eviction).
    pub fn labels_per_step(&self) -> usize {
        self.num_streams * self.num_contexts
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("inner learning rate must be positive, got {}", self.alpha)));
        }
        if self.num_streams == 0 || self.num_contexts == 0 || self.repeats == 0 {
            return Err(Error::Config(
                "streams, contexts, and repeats must all be positive".into(),
            ));
        }
        if self.total_steps == 0 || self.warmup > self.total_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup ≤ total, got warmup={} total={}",
                self.warmup, self.total_steps
            )));
        }
        // Worst case the queue is full, so the head must be strictly larger
        // than one meta-step of fresh labels next to every live queue label.
        if self.num_labels <= self.labels_per_step() + self.queue_capacity {
            return Err(Error::OutputSizeConstraint {
                l: self.num_labels,
                uniques: self.labels_per_step(),
                queue: self.queue_capacity,
            });
        }
        Ok(())
    }
}

/// One timestep of the inner loop, batched over the M streams and recorded
/// on the tape: `W' = W − (α/M) Σ_i (p_i − onehot(y_i)) z_iᵀ` and likewise
/// for the bias, with `p = softmax(Wz + b)`.
pub fn inner_update(
    tape: &mut Tape,
    w: TensorRef,
    b: TensorRef,
    z: TensorRef,
    labels: &[usize],
    alpha: f64,
) -> Result<(TensorRef, TensorRef)> {
    let l = tape.shape(w)[0];
    let m = tape.shape(z)[0];
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            op: "inner_update",
            detail: format!("{} labels for {m} feature rows", labels.len()),
        });
    }
    let mut onehot = vec![0.0; m * l];
    for (r, &lab) in labels.iter().enumerate() {
        if lab >= l {
            return Err(Error::LabelOutOfRange { label: lab, len: l });
        }
        onehot[r * l + lab] = 1.0;
    }
    let logits = head_forward(tape, w, b, z)?;
    let p = tape.softmax(logits)?;
    let y = tape.constant(onehot, &[m, l])?;
    let diff = tape.sub(p, y)?;
    let step = alpha / m as f64;
    let gw = tape.matmul_ta(diff, z)?;
    let gw = tape.scale(gw, step);
    let w_next = tape.sub(w, gw)?;
    let gb = tape.sum_axis0(diff)?;
    let gb = tape.scale(gb, step);
    let b_next = tape.sub(b, gb)?;
    Ok((w_next, b_next))
}

/// Sequential composition of [`inner_update`] over the trajectory timesteps.
/// `steps[t]` holds the `[M, d]` feature block and the M labels for
/// timestep t.
pub fn inner_loop(
    tape: &mut Tape,
    w0: TensorRef,
    b0: TensorRef,
    steps: &[(TensorRef, Vec<usize>)],
    alpha: f64,
) -> Result<(TensorRef, TensorRef)> {
    let (mut w, mut b) = (w0, b0);
    for (z, labels) in steps {
        (w, b) = inner_update(tape, w, b, *z, labels, alpha)?;
    }
    Ok((w, b))
}

/// Mean softmax cross-entropy of the updated head over the query union
/// Q = fresh ∪ recalled. Returns `(scalar loss, logits, query labels)`; the
/// first `fresh_labels.len()` logit rows are the fresh part.
pub fn outer_loss(
    tape: &mut Tape,
    w: TensorRef,
    b: TensorRef,
    fresh_z: TensorRef,
    fresh_labels: &[usize],
    recalled: Option<(TensorRef, Vec<usize>)>,
) -> Result<(TensorRef, TensorRef, Vec<usize>)> {
    let (z, labels) = match recalled {
        Some((qz, q_labels)) => {
            let z = tape.concat_rows(fresh_z, qz)?;
            let mut labels = fresh_labels.to_vec();
            labels.extend(q_labels);
            (z, labels)
        }
        None => (fresh_z, fresh_labels.to_vec()),
    };
    if labels.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let logits = head_forward(tape, w, b, z)?;
    let per_row = tape.softmax_xent(logits, &labels)?;
    let loss = tape.mean_all(per_row)?;
    Ok((loss, logits, labels))
}

/// Per-step numbers worth logging. Accuracies are argmax-vs-label over the
/// two query parts; `queue_accuracy` is `None` while the queue part is empty.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub fresh_accuracy: f64,
    pub queue_accuracy: Option<f64>,
    pub lr: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

/// Complete mutable state of a pretraining run; the checkpoint format is a
/// direct serialization of this.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerSnapshot {
    pub trunk_flat: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub moments: Moments,
    pub queue_entries: Vec<crate::recall::QueueEntry>,
    pub step: u64,
}

/// The meta-training driver. Owns parameters, optimizer state, and the
/// recall queue; borrows the dataset through a [`StreamSource`].
pub struct Trainer<'a> {
    pub settings: TrainSettings,
    source: StreamSource<'a>,
    pub trunk: TrunkParams,
    pub head: HeadParams,
    pub moments: Moments,
    pub queue: RecallQueue,
    pub step: u64,
    root: RngKey,
}

/// Query-set snapshot of the recalled features for one meta-step, fixed
/// before any gradient work so the loss is a pure function of parameters.
struct RecalledBatch {
    z: Vec<f64>,
    labels: Vec<usize>,
}

/// Tape handles produced by the shared forward construction.
struct LossGraph {
    loss: TensorRef,
    logits: TensorRef,
    query_labels: Vec<usize>,
    features: TensorRef,
    fresh_rows: usize,
    /// Every parameter leaf in flat order: trunk buffers, head W, head b.
    param_refs: Vec<TensorRef>,
}

impl<'a> Trainer<'a> {
    pub fn new(settings: TrainSettings, dataset: &'a Dataset) -> Result<Self> {
        settings.validate()?;
        let root = RngKey::from_seed(settings.seed);
        let source = StreamSource::new(dataset, settings.mode, settings.augment.clone())?;
        let trunk = TrunkParams::init(&settings.trunk, root.child(tag::INIT))?;
        let head = HeadParams::zeros(settings.num_labels, settings.trunk.feature_dim());
        let moments = Moments::zeros(trunk.num_params() + head.num_params());
        let queue = RecallQueue::new(settings.queue_capacity);
        Ok(Self { settings, source, trunk, head, moments, queue, step: 0, root })
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            trunk_flat: self.trunk.flatten(),
            head_w: self.head.w.clone(),
            head_b: self.head.b.clone(),
            moments: self.moments.clone(),
            queue_entries: self.queue.entries().cloned().collect(),
            step: self.step,
        }
    }

    pub fn restore(&mut self, snap: &TrainerSnapshot) -> Result<()> {
        self.trunk.load_flat(&snap.trunk_flat)?;
        if snap.head_w.len() != self.head.w.len() || snap.head_b.len() != self.head.b.len() {
            return Err(Error::Checkpoint(format!(
                "head shape mismatch: snapshot {}x{}, config {}x{}",
                snap.head_b.len(),
                snap.head_w.len() / snap.head_b.len().max(1),
                self.head.classes,
                self.head.dim
            )));
        }
        if snap.moments.m.len() != self.moments.m.len() {
            return Err(Error::Checkpoint(format!(
                "moment length mismatch: snapshot {}, config {}",
                snap.moments.m.len(),
                self.moments.m.len()
            )));
        }
        self.head.w = snap.head_w.clone();
        self.head.b = snap.head_b.clone();
        self.moments = snap.moments.clone();
        self.queue =
            RecallQueue::from_entries(self.settings.queue_capacity, snap.queue_entries.clone())?;
        self.step = snap.step;
        Ok(())
    }

    /// Key governing all stochastic choices of meta-step `step`.
    fn step_key(&self, step: u64) -> RngKey {
        self.root.child(tag::STEP).child(step)
    }

    fn sample_recalled(&self, step: u64) -> RecalledBatch {
        let mut rng = self.step_key(step).child(tag::RECALL).rng();
        let picks = self.queue.sample_query(&mut rng, self.settings.recall_query);
        let mut z = Vec::with_capacity(picks.len() * self.settings.trunk.feature_dim());
        let mut labels = Vec::with_capacity(picks.len());
        for e in picks {
            z.extend_from_slice(&e.z);
            labels.push(e.label);
        }
        RecalledBatch { z, labels }
    }

    /// Shared forward construction: trunk features for every trajectory and
    /// fresh image in one batch, the unrolled inner loop, and the outer loss.
    ///
    /// Image rows are timestep-major — trajectory item t of stream m sits at
    /// row `t*M + m`, so each timestep's M-example block is contiguous; the
    /// fresh views follow at `k*M + m*num_contexts + ci`.
    fn build_loss(
        &self,
        tape: &mut Tape,
        trunk: &TrunkParams,
        head: &HeadParams,
        batch: &MetaBatch,
        recalled: &RecalledBatch,
        tracked: bool,
    ) -> Result<LossGraph> {
        let s = &self.settings;
        let (m_streams, k, nc) = (s.num_streams, s.trajectory_len(), s.num_contexts);
        let hw = s.trunk.image_hw;
        let d = s.trunk.feature_dim();

        let mut images = Vec::with_capacity((k + nc) * m_streams);
        for t in 0..k {
            for traj in &batch.trajectories {
                images.push(&traj.items[t].image);
            }
        }
        for traj in &batch.trajectories {
            for f in &traj.fresh {
                images.push(&f.image);
            }
        }
        let pixels = images_to_batch(&images);
        let x = tape.constant(pixels, &[images.len(), 3, hw, hw])?;

        let trunk_tensors = trunk.place(&s.trunk, tape, tracked)?;
        let features = trunk_forward(tape, &s.trunk, &trunk_tensors, x)?;
        let (w0, b0) = head.place(tape, tracked)?;
        let mut param_refs = trunk_tensors.refs();
        param_refs.extend([w0, b0]);

        let mut steps = Vec::with_capacity(k);
        for t in 0..k {
            let z_t = tape.slice_rows(features, t * m_streams, m_streams)?;
            let labels: Vec<usize> =
                batch.trajectories.iter().map(|traj| traj.items[t].label).collect();
            steps.push((z_t, labels));
        }
        let (w_k, b_k) = inner_loop(tape, w0, b0, &steps, s.alpha)?;

        let fresh_rows = m_streams * nc;
        let fresh_z = tape.slice_rows(features, k * m_streams, fresh_rows)?;
        let fresh_labels: Vec<usize> = batch
            .trajectories
            .iter()
            .flat_map(|traj| traj.labels.iter().copied())
            .collect();
        let queue_part = if recalled.labels.is_empty() {
            None
        } else {
            let qz = tape.constant(recalled.z.clone(), &[recalled.labels.len(), d])?;
            Some((qz, recalled.labels.clone()))
        };
        let (loss, logits, query_labels) =
            outer_loss(tape, w_k, b_k, fresh_z, &fresh_labels, queue_part)?;
        Ok(LossGraph { loss, logits, query_labels, features, fresh_rows, param_refs })
    }

    /// The scalar meta-loss for a fixed batch and recalled sample, as a pure
    /// function of the given parameters. This is exactly the quantity
    /// [`Self::meta_step`] differentiates; the finite-difference oracle in
    /// the tests perturbs parameters through this entry point.
    pub fn meta_loss_only(
        &self,
        trunk: &TrunkParams,
        head: &HeadParams,
        batch: &MetaBatch,
        recalled_z: &[f64],
        recalled_labels: &[usize],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let recalled =
            RecalledBatch { z: recalled_z.to_vec(), labels: recalled_labels.to_vec() };
        let graph = self.build_loss(&mut tape, trunk, head, batch, &recalled, false)?;
        Ok(tape.scalar(graph.loss))
    }

    /// Build the meta-batch for step `step` from the current queue state.
    pub fn next_batch(&self, step: u64) -> Result<MetaBatch> {
        let s = &self.settings;
        build_meta_batch(
            &self.source,
            self.step_key(step),
            s.num_streams,
            s.num_contexts,
            s.repeats,
            &self.queue,
            s.num_labels,
        )
    }

    /// Flat `(trunk ‖ head.W ‖ head.b)` parameter vector — the coordinate
    /// space shared by [`probe_meta_loss`](Self::probe_meta_loss) and
    /// [`probe_meta_gradient`](Self::probe_meta_gradient).
    pub fn probe_params(&self) -> Vec<f64> {
        let mut flat = self.trunk.flatten();
        flat.extend_from_slice(&self.head.w);
        flat.extend_from_slice(&self.head.b);
        flat
    }

    /// The scalar outer loss the next [`meta_step`](Self::meta_step) would
    /// differentiate, as a pure function of a flat parameter vector: the
    /// batch draw, queue snapshot, and recall draw are the ones that step
    /// would use, rebuilt deterministically on every call. Exists so
    /// verification harnesses can take finite differences of the whole
    /// pipeline and compare them against
    /// [`probe_meta_gradient`](Self::probe_meta_gradient).
    pub fn probe_meta_loss(&self, flat: &[f64]) -> Result<f64> {
        let trunk_len = self.trunk.num_params();
        let w_len = self.head.w.len();
        let total = trunk_len + w_len + self.head.b.len();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                op: "probe_meta_loss",
                detail: format!("expected {total} parameters, got {}", flat.len()),
            });
        }
        let mut trunk = self.trunk.clone();
        trunk.load_flat(&flat[..trunk_len])?;
        let mut head = self.head.clone();
        head.w.copy_from_slice(&flat[trunk_len..trunk_len + w_len]);
        head.b.copy_from_slice(&flat[trunk_len + w_len..]);
        let batch = self.next_batch(self.step)?;
        let recalled = self.sample_recalled(self.step);
        self.meta_loss_only(&trunk, &head, &batch, &recalled.z, &recalled.labels)
    }

    /// Analytic gradient of [`probe_meta_loss`](Self::probe_meta_loss) at
    /// the trainer's own parameters, flattened in
    /// [`probe_params`](Self::probe_params) order. Coordinates the loss
    /// never touches come back zero.
    pub fn probe_meta_gradient(&self) -> Result<Vec<f64>> {
        let batch = self.next_batch(self.step)?;
        let recalled = self.sample_recalled(self.step);
        let mut tape = Tape::new();
        let graph =
            self.build_loss(&mut tape, &self.trunk, &self.head, &batch, &recalled, true)?;
        let mut grads = tape.backward(graph.loss)?;
        let mut out = Vec::with_capacity(self.trunk.num_params() + self.head.num_params());
        for &r in &graph.param_refs {
            match grads.take(r) {
                Some(g) => out.extend_from_slice(&g),
                None => out.extend(std::iter::repeat(0.0).take(tape.value(r).len())),
            }
        }
        Ok(out)
    }

    /// One full meta-step: forward, unrolled inner loop, outer loss,
    /// backward, clipped AdamW update, queue advance, and reset of head rows
    /// freed by eviction.
    pub fn meta_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batch = self.next_batch(step)?;
        let recalled = self.sample_recalled(step);

        let mut tape = Tape::new();
        let graph = self.build_loss(&mut tape, &self.trunk, &self.head, &batch, &recalled, true)?;
        let loss = tape.scalar(graph.loss);
        if !loss.is_finite() {
            return Err(self.non_finite(step, loss, "outer loss"));
        }

        let mut grads = tape.backward(graph.loss)?;
        let trunk_len = self.trunk.num_params();
        let head_len = self.head.num_params();
        let mut flat_grad = Vec::with_capacity(trunk_len + head_len);
        for &r in &graph.param_refs {
            match grads.take(r) {
                Some(g) => flat_grad.extend_from_slice(&g),
                None => flat_grad.extend(std::iter::repeat(0.0).take(tape.value(r).len())),
            }
        }
        debug_assert_eq!(flat_grad.len(), trunk_len + head_len);

        let mut flat = self.trunk.flatten();
        flat.extend_from_slice(&self.head.w);
        flat.extend_from_slice(&self.head.b);
        // Updates are 1-indexed on the schedule so the very first one is not
        // a zero-rate no-op; steps past the horizon stay at the endpoint.
        let sched_step = (step + 1).min(self.settings.total_steps);
        let lr = lr_schedule(sched_step, self.settings.total_steps, self.settings.warmup, self.settings.adamw.lr);
        let grad_norm =
            adamw_clip_update(&mut flat, &mut flat_grad, &mut self.moments, lr, &self.settings.adamw);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(step, grad_norm, "gradient norm"));
        }
        self.trunk.load_flat(&flat[..trunk_len])?;
        let d = self.head.dim;
        let w_len = self.head.w.len();
        self.head.w.copy_from_slice(&flat[trunk_len..trunk_len + w_len]);
        self.head.b.copy_from_slice(&flat[trunk_len + w_len..]);

        // Queue advance: the first view of each context block, features
        // straight from the forward pass (no image is encoded twice).
        let s = &self.settings;
        let feat = tape.value(graph.features);
        let mut reps = Vec::with_capacity(s.labels_per_step());
        for (m, traj) in batch.trajectories.iter().enumerate() {
            for ci in 0..s.num_contexts {
                let row = (ci * s.repeats) * s.num_streams + m;
                reps.push((feat[row * d..(row + 1) * d].to_vec(), traj.labels[ci]));
            }
        }
        let evicted = self.queue.push_trajectory(reps, step)?;
        for e in &evicted {
            self.head.zero_row(e.label);
            self.moments.zero_span(trunk_len + e.label * d, d);
            self.moments.zero_span(trunk_len + w_len + e.label, 1);
        }

        let metrics = self.metrics_from(&tape, &graph, step, loss, lr, grad_norm);
        self.step = step + 1;
        Ok(metrics)
    }

    fn metrics_from(
        &self,
        tape: &Tape,
        graph: &LossGraph,
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    ) -> StepMetrics {
        let logits = tape.value(graph.logits);
        let cols = tape.shape(graph.logits)[1];
        let correct = |row: usize| -> bool {
            let slice = &logits[row * cols..(row + 1) * cols];
            let mut best = 0;
            for (i, &v) in slice.iter().enumerate() {
                if v > slice[best] {
                    best = i;
                }
            }
            best == graph.query_labels[row]
        };
        let fresh_hits = (0..graph.fresh_rows).filter(|&r| correct(r)).count();
        let queue_rows = graph.query_labels.len() - graph.fresh_rows;
        let queue_accuracy = if queue_rows == 0 {
            None
        } else {
            let hits = (graph.fresh_rows..graph.query_labels.len()).filter(|&r| correct(r)).count();
            Some(hits as f64 / queue_rows as f64)
        };
        StepMetrics {
            step,
            loss,
            fresh_accuracy: fresh_hits as f64 / graph.fresh_rows as f64,
            queue_accuracy,
            lr,
            grad_norm,
        }
    }

    /// Drive `steps` consecutive meta-steps, reporting each to `on_step`.
    pub fn run(&mut self, steps: u64, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        for _ in 0..steps {
            let metrics = self.meta_step()?;
            on_step(&metrics);
        }
        Ok(())
    }

    fn non_finite(&self, step: u64, loss: f64, stage: &str) -> Error {
        let mut diag = format!("step {step}: non-finite {stage} ({loss})");
        for (name, buf) in self.trunk.named_buffers() {
            let max = buf.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            diag.push_str(&format!("; {name} max|w|={max:.3e}"));
        }
        let head_max = self.head.w.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        diag.push_str(&format!("; head max|w|={head_max:.3e}"));
        Error::NonFiniteLoss { step, diagnostics: diag }
    }
}
