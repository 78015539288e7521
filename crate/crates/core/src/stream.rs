//! Correlated pretraining streams: context sampling, support trajectories,
//! collision-free label assignment, and meta-batch assembly.
//!
//! A stream shows the learner one hidden context at a time, `n` samples per
//! context, before moving on — the non-iid structure the inner loop must
//! survive. In supervised mode a context is a ground-truth class; in
//! unsupervised mode it is a single image whose "samples" are fresh augmented
//! views. The two modes produce structurally identical batches, so the
//! trainer never branches on mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_view, AugmentConfig, Image};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::recall::RecallQueue;
use crate::rng::{sample_without_replacement, tag, RngKey};

/// How contexts map onto the bound dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Context = ground-truth class; samples are augmented images of it.
    Supervised,
    /// Context = one image; samples are fresh augmented views of it.
    /// Never reads a ground-truth label.
    Unsupervised,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            other => Err(crate::error::Error::Config(format!(
                "mode must be `supervised` or `unsupervised`, got `{other}`"
            ))),
        }
    }
}

/// The hidden variable governing one block of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Context {
    /// Ground-truth class id (supervised mode).
    Class(usize),
    /// Dataset image index (unsupervised mode).
    Image(usize),
}

/// One stream element: an augmented image, its assigned head label, and the
/// index of the context block it belongs to.
#[derive(Debug, Clone)]
pub struct TrajectoryItem {
    pub image: Image,
    pub label: usize,
    /// Position of the owning context within the trajectory (block index).
    pub context_idx: usize,
}

/// One correlated support stream: `num_contexts` contiguous blocks of `n`
/// items each, plus one held-out fresh view per context for the query set.
#[derive(Debug, Clone)]
pub struct SupportTrajectory {
    /// Length `num_contexts * n`, grouped `(C_0 ×n, C_1 ×n, …)` in sampled
    /// order — the temporal correlation is real, never shuffled.
    pub items: Vec<TrajectoryItem>,
    /// One fresh view per context, same labels as the matching blocks.
    pub fresh: Vec<TrajectoryItem>,
    pub contexts: Vec<Context>,
    /// Head label per context, parallel to `contexts`.
    pub labels: Vec<usize>,
}

impl SupportTrajectory {
    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// M parallel trajectories sharing one label space.
#[derive(Debug, Clone)]
pub struct MetaBatch {
    pub trajectories: Vec<SupportTrajectory>,
}

impl MetaBatch {
    pub fn num_streams(&self) -> usize {
        self.trajectories.len()
    }

    /// Inner-loop timestep count (shared across streams).
    pub fn trajectory_len(&self) -> usize {
        self.trajectories[0].len()
    }
}

/// Samples contexts and per-context images from one dataset split.
///
/// Supervised mode resolves class membership once at construction (the only
/// label reads this module ever makes); the unsupervised path touches images
/// only, which the dataset's label-access counter can certify.
pub struct StreamSource<'a> {
    dataset: &'a Dataset,
    mode: Mode,
    augment: AugmentConfig,
    /// Supervised only: `(class id, its image indices)`, ascending by id.
    classes: Vec<(usize, Vec<usize>)>,
}

impl<'a> StreamSource<'a> {
    pub fn new(dataset: &'a Dataset, mode: Mode, augment: AugmentConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data(format!("{} split is empty", dataset.split)));
        }
        let classes = match mode {
            Mode::Supervised => dataset
                .classes()
                .into_iter()
                .map(|c| (c, dataset.indices_of_class(c)))
                .collect(),
            Mode::Unsupervised => Vec::new(),
        };
        Ok(Self { dataset, mode, augment, classes })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of distinct contexts this source can offer.
    pub fn population(&self) -> usize {
        match self.mode {
            Mode::Supervised => self.classes.len(),
            Mode::Unsupervised => self.dataset.len(),
        }
    }

    /// `count` distinct contexts, uniform without replacement.
    pub fn sample_contexts(&self, rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Context>> {
        let population = self.population();
        if count > population {
            return Err(Error::PopulationTooSmall { requested: count, available: population });
        }
        let picks = sample_without_replacement(rng, population, count);
        Ok(match self.mode {
            Mode::Supervised => {
                picks.into_iter().map(|i| Context::Class(self.classes[i].0)).collect()
            }
            Mode::Unsupervised => picks.into_iter().map(Context::Image).collect(),
        })
    }

    /// One augmented draw from the context's conditional distribution.
    pub fn draw_sample(&self, ctx: Context, rng: &mut ChaCha8Rng) -> Image {
        let source = match ctx {
            Context::Class(c) => {
                let slot = self
                    .classes
                    .binary_search_by_key(&c, |(id, _)| *id)
                    .expect("context class drawn from this source");
                let pool = &self.classes[slot].1;
                &self.dataset.images[pool[rng.random_range(0..pool.len())]]
            }
            Context::Image(i) => &self.dataset.images[i],
        };
        make_view(source, rng, &self.augment)
    }
}

/// Draw `count` distinct head labels from `{0..num_labels-1}`, avoiding every
/// label currently alive in the queue. Uniform over the free set; returned in
/// draw order (the i-th context gets the i-th label).
pub fn assign_labels(
    count: usize,
    queue: &RecallQueue,
    rng: &mut ChaCha8Rng,
    num_labels: usize,
) -> Result<Vec<usize>> {
    let active = queue.active_labels();
    let free: Vec<usize> = (0..num_labels).filter(|l| !active.contains(l)).collect();
    if count > free.len() {
        return Err(Error::InsufficientFreeLabels {
            needed: count,
            free: free.len(),
            l: num_labels,
        });
    }
    Ok(sample_without_replacement(rng, free.len(), count)
        .into_iter()
        .map(|i| free[i])
        .collect())
}

/// Assemble `num_streams` parallel trajectories plus their fresh query views.
///
/// Every random draw is keyed, so the batch is a pure function of
/// `(key, queue snapshot)` regardless of execution order:
///
/// - contexts for stream `m`: `key/CONTEXTS/m` (independent per stream);
/// - labels for all `num_streams × num_contexts` contexts: one shared
///   `key/LABELS` draw, so the streams share a collision-free label space;
/// - view for trajectory item `t` of stream `m`: `key/VIEWS/m/t`, and for
///   the fresh query view of context `c`: `key/VIEWS/m/{len + c}`.
pub fn build_meta_batch(
    source: &StreamSource,
    key: RngKey,
    num_streams: usize,
    num_contexts: usize,
    n: usize,
    queue: &RecallQueue,
    num_labels: usize,
) -> Result<MetaBatch> {
    if num_streams == 0 || num_contexts == 0 || n == 0 {
        return Err(Error::Config(format!(
            "meta batch dimensions must be positive (streams={num_streams}, \
             contexts={num_contexts}, repeats={n})"
        )));
    }
    let mut stream_contexts = Vec::with_capacity(num_streams);
    for m in 0..num_streams {
        let mut rng = key.child(tag::CONTEXTS).child(m as u64).rng();
        stream_contexts.push(source.sample_contexts(&mut rng, num_contexts)?);
    }
    let mut label_rng = key.child(tag::LABELS).rng();
    let labels = assign_labels(num_streams * num_contexts, queue, &mut label_rng, num_labels)?;

    let mut trajectories = Vec::with_capacity(num_streams);
    for (m, contexts) in stream_contexts.into_iter().enumerate() {
        let view_key = key.child(tag::VIEWS).child(m as u64);
        let stream_labels = &labels[m * num_contexts..(m + 1) * num_contexts];
        let mut items = Vec::with_capacity(num_contexts * n);
        for (ci, &ctx) in contexts.iter().enumerate() {
            for rep in 0..n {
                let mut rng = view_key.child((ci * n + rep) as u64).rng();
                items.push(TrajectoryItem {
                    image: source.draw_sample(ctx, &mut rng),
                    label: stream_labels[ci],
                    context_idx: ci,
                });
            }
        }
        let fresh_base = num_contexts * n;
        let mut fresh = Vec::with_capacity(num_contexts);
        for (ci, &ctx) in contexts.iter().enumerate() {
            let mut rng = view_key.child((fresh_base + ci) as u64).rng();
            fresh.push(TrajectoryItem {
                image: source.draw_sample(ctx, &mut rng),
                label: stream_labels[ci],
                context_idx: ci,
            });
        }
        trajectories.push(SupportTrajectory {
            items,
            fresh,
            contexts,
            labels: stream_labels.to_vec(),
        });
    }
    Ok(MetaBatch { trajectories })
}
