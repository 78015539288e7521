//! Trunk and head architecture.
//!
//! The trunk is a stack of residual blocks. Each block runs the same input
//! through two computation paths — both a single 3x3 weight-standardized
//! convolution followed by group normalization — and sums them. One path is
//! rectified (ReLU, then max-pool on pooling blocks); the other stays linear
//! so gradients always have an activation-free route through the block.
//! An optional extra ReLU after the final block trades that linearity for
//! exact zeros in the representation.
//!
//! Parameters live in plain `Vec<f64>` buffers and are placed onto a [`Tape`]
//! for each forward pass. Buffer traversal order is fixed and shared by the
//! optimizer, checkpoints, and gradient flattening.

use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::{Tape, TensorRef};

/// Epsilon inside the square root when standardizing conv weights.
pub const WS_EPS: f64 = 1e-5;
/// Epsilon inside the square root for group normalization.
pub const GN_EPS: f64 = 1e-5;
/// All trunk convolutions are 3x3, stride 1, zero-padded by one pixel.
pub const KERNEL: usize = 3;

/// Static description of the trunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkConfig {
    pub in_channels: usize,
    /// Input images are square `image_hw x image_hw`.
    pub image_hw: usize,
    /// Output channels per block; the length sets the number of blocks.
    pub channels: Vec<usize>,
    /// Which blocks halve the spatial resolution.
    pub pool: Vec<bool>,
    /// Group count for group normalization; must divide every block width.
    pub groups: usize,
    /// Rectify the final block's output (sparse-representation variant).
    pub extra_relu: bool,
}

impl TrunkConfig {
    /// Standard 32x32 trunk: four blocks, pooling in the first three, final
    /// feature map 4x4.
    pub fn cifar(extra_relu: bool) -> Self {
        Self {
            in_channels: 3,
            image_hw: 32,
            channels: vec![32, 64, 128, 128],
            pool: vec![true, true, true, false],
            groups: 8,
            extra_relu,
        }
    }

    /// Small 16x16 trunk for the synthetic corpus: four blocks, pooling in the
    /// first two, final feature map 4x4.
    pub fn small16(extra_relu: bool) -> Self {
        Self {
            in_channels: 3,
            image_hw: 16,
            channels: vec![12, 16, 16, 16],
            pool: vec![true, true, false, false],
            groups: 4,
            extra_relu,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Input channel count seen by block `i`.
    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.channels[i - 1]
        }
    }

    /// Spatial edge length after block `i` has run.
    pub fn hw_after(&self, i: usize) -> usize {
        let mut hw = self.image_hw;
        for &p in &self.pool[..=i] {
            if p {
                hw /= 2;
            }
        }
        hw
    }

    /// Length of the flattened representation.
    pub fn feature_dim(&self) -> usize {
        let last = self.num_blocks() - 1;
        self.channels[last] * self.hw_after(last) * self.hw_after(last)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("trunk needs at least one block".into()));
        }
        if self.pool.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "pool flags ({}) must match block count ({})",
                self.pool.len(),
                self.channels.len()
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("group count must be positive".into()));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "block {i} width {c} is not divisible by {} groups",
                    self.groups
                )));
            }
        }
        let mut hw = self.image_hw;
        for (i, &p) in self.pool.iter().enumerate() {
            if p {
                if hw % 2 != 0 {
                    return Err(Error::Config(format!(
                        "block {i} pools a {hw}x{hw} map; need an even edge"
                    )));
                }
                hw /= 2;
            }
        }
        if hw == 0 {
            return Err(Error::Config("trunk pools the image away entirely".into()));
        }
        Ok(())
    }
}

/// One convolution + group-norm unit: the parameters of a single path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGn {
    /// `[co, ci, 3, 3]`
    pub w: Vec<f64>,
    /// `[co]`
    pub b: Vec<f64>,
    /// `[co]` group-norm scale
    pub gamma: Vec<f64>,
    /// `[co]` group-norm shift
    pub beta: Vec<f64>,
}

impl ConvGn {
    fn init(ci: usize, co: usize, rng_key: RngKey) -> Self {
        // He-uniform fan-in bound; weight standardization rescales anyway,
        // but a sane starting spread keeps the first steps well-conditioned.
        let fan_in = ci * KERNEL * KERNEL;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = rng_key.rng();
        use rand::Rng;
        let w = (0..co * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        Self { w, b: vec![0.0; co], gamma: vec![1.0; co], beta: vec![0.0; co] }
    }
}

/// Both paths of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub rectified: ConvGn,
    pub linear: ConvGn,
}

/// All trunk parameters, off-tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkParams {
    pub blocks: Vec<BlockParams>,
}

/// Fixed traversal order over every parameter buffer in the trunk. The same
/// order backs flattening, optimizer state, and checkpoint records.
macro_rules! trunk_buffers {
    ($self:expr, $f:expr) => {
        for (i, block) in $self.blocks.iter().enumerate() {
            for (path_name, path) in
                [("rectified", &block.rectified), ("linear", &block.linear)]
            {
                $f(format!("block{i}.{path_name}.conv_w"), &path.w);
                $f(format!("block{i}.{path_name}.conv_b"), &path.b);
                $f(format!("block{i}.{path_name}.gn_gamma"), &path.gamma);
                $f(format!("block{i}.{path_name}.gn_beta"), &path.beta);
            }
        }
    };
}

impl TrunkParams {
    pub fn init(cfg: &TrunkConfig, rng_key: RngKey) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks());
        for i in 0..cfg.num_blocks() {
            let ci = cfg.block_in_channels(i);
            let co = cfg.channels[i];
            blocks.push(BlockParams {
                rectified: ConvGn::init(ci, co, rng_key.child(2 * i as u64)),
                linear: ConvGn::init(ci, co, rng_key.child(2 * i as u64 + 1)),
            });
        }
        Ok(Self { blocks })
    }

    /// `(name, buffer)` pairs in canonical order.
    pub fn named_buffers(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        trunk_buffers!(self, |name, buf| out.push((name, buf)));
        out
    }

    /// Mutable buffers in the same canonical order as [`Self::named_buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for path in [&mut block.rectified, &mut block.linear] {
                out.push(&mut path.w);
                out.push(&mut path.b);
                out.push(&mut path.gamma);
                out.push(&mut path.beta);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_buffers().iter().map(|(_, b)| b.len()).sum()
    }

    /// All parameters as one vector, in canonical buffer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, buf) in self.named_buffers() {
            out.extend_from_slice(buf);
        }
        out
    }

    /// Inverse of [`Self::flatten`]; the layout must match exactly.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Checkpoint(format!(
                "flat parameter vector has {} values, trunk holds {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for buf in self.buffers_mut() {
            let len = buf.len();
            buf.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Put every buffer on the tape; `tracked` decides whether gradients flow.
    pub fn place(&self, cfg: &TrunkConfig, tape: &mut Tape, tracked: bool) -> Result<TrunkTensors> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let ci = cfg.block_in_channels(i);
            let co = cfg.channels[i];
            let place_path = |tape: &mut Tape, p: &ConvGn| -> Result<ConvGnTensors> {
                Ok(ConvGnTensors {
                    w: tape.leaf(p.w.clone(), &[co, ci, KERNEL, KERNEL], tracked)?,
                    b: tape.leaf(p.b.clone(), &[co], tracked)?,
                    gamma: tape.leaf(p.gamma.clone(), &[co], tracked)?,
                    beta: tape.leaf(p.beta.clone(), &[co], tracked)?,
                })
            };
            blocks.push(BlockTensors {
                rectified: place_path(tape, &block.rectified)?,
                linear: place_path(tape, &block.linear)?,
            });
        }
        Ok(TrunkTensors { blocks })
    }
}

/// Tape handles for one path's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvGnTensors {
    pub w: TensorRef,
    pub b: TensorRef,
    pub gamma: TensorRef,
    pub beta: TensorRef,
}

/// Tape handles for the whole trunk, mirroring [`TrunkParams`].
#[derive(Debug, Clone)]
pub struct TrunkTensors {
    pub blocks: Vec<BlockTensors>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockTensors {
    pub rectified: ConvGnTensors,
    pub linear: ConvGnTensors,
}

impl TrunkTensors {
    /// Tensor handles in the same canonical order as `TrunkParams` buffers.
    pub fn refs(&self) -> Vec<TensorRef> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for path in [&block.rectified, &block.linear] {
                out.extend([path.w, path.b, path.gamma, path.beta]);
            }
        }
        out
    }
}

/// Standardize conv weights per output channel: each `[ci * kh * kw]` row is
/// shifted to zero mean and scaled to unit variance before the convolution.
pub fn ws_standardize(tape: &mut Tape, w: TensorRef) -> Result<TensorRef> {
    let shape = tape.shape(w).to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "ws_standardize",
            detail: format!("expected conv weights [co, ci, kh, kw], got {shape:?}"),
        });
    }
    let fan_in = shape[1] * shape[2] * shape[3];
    tape.row_normalize(w, fan_in, WS_EPS)
}

/// Group normalization with per-channel affine. Statistics are taken over
/// each (sample, channel-group) slab of the `[b, c, h, w]` input.
pub fn group_norm(
    tape: &mut Tape,
    x: TensorRef,
    groups: usize,
    gamma: TensorRef,
    beta: TensorRef,
) -> Result<TensorRef> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || groups == 0 || shape[1] % groups != 0 {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            detail: format!("{groups} groups over input {shape:?}"),
        });
    }
    let slab = (shape[1] / groups) * shape[2] * shape[3];
    let normed = tape.row_normalize(x, slab, GN_EPS)?;
    tape.channel_affine(normed, gamma, beta)
}

fn conv_gn_forward(
    tape: &mut Tape,
    path: &ConvGnTensors,
    x: TensorRef,
    groups: usize,
) -> Result<TensorRef> {
    let w_std = ws_standardize(tape, path.w)?;
    let y = tape.conv2d(x, w_std, path.b, KERNEL / 2)?;
    group_norm(tape, y, groups, path.gamma, path.beta)
}

/// One residual block: rectified path + linear path, summed.
pub fn block_forward(
    tape: &mut Tape,
    cfg: &TrunkConfig,
    block: &BlockTensors,
    x: TensorRef,
    pool: bool,
) -> Result<TensorRef> {
    let mut a = conv_gn_forward(tape, &block.rectified, x, cfg.groups)?;
    a = tape.relu(a);
    if pool {
        a = tape.maxpool2(a)?;
    }
    let mut l = conv_gn_forward(tape, &block.linear, x, cfg.groups)?;
    if pool {
        l = tape.maxpool2(l)?;
    }
    tape.add(a, l)
}

/// Full trunk: `[b, in_channels, hw, hw]` images to `[b, feature_dim]` rows.
pub fn trunk_forward(
    tape: &mut Tape,
    cfg: &TrunkConfig,
    trunk: &TrunkTensors,
    x: TensorRef,
) -> Result<TensorRef> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.image_hw
        || shape[3] != cfg.image_hw
    {
        return Err(Error::ShapeMismatch {
            op: "trunk_forward",
            detail: format!(
                "expected [b, {}, {}, {}], got {shape:?}",
                cfg.in_channels, cfg.image_hw, cfg.image_hw
            ),
        });
    }
    let mut h = x;
    for (i, block) in trunk.blocks.iter().enumerate() {
        h = block_forward(tape, cfg, block, h, cfg.pool[i])?;
    }
    // The sparse-representation variant rectifies once, after the last block,
    // so the representation itself carries exact zeros.
    if cfg.extra_relu {
        h = tape.relu(h);
    }
    tape.reshape(h, &[shape[0], cfg.feature_dim()])
}

/// Linear classification head parameters, off-tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[classes, dim]`
    pub w: Vec<f64>,
    /// `[classes]`
    pub b: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
}

impl HeadParams {
    /// All-zero head: every row starts free.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { w: vec![0.0; classes * dim], b: vec![0.0; classes], classes, dim }
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Zero one output row and its bias (used when a label is retired).
    pub fn zero_row(&mut self, row: usize) {
        self.w[row * self.dim..(row + 1) * self.dim].fill(0.0);
        self.b[row] = 0.0;
    }

    /// True when the row carries no weight at all.
    pub fn row_is_zero(&self, row: usize) -> bool {
        self.b[row] == 0.0 && self.w[row * self.dim..(row + 1) * self.dim].iter().all(|&v| v == 0.0)
    }

    pub fn place(&self, tape: &mut Tape, tracked: bool) -> Result<(TensorRef, TensorRef)> {
        let w = tape.leaf(self.w.clone(), &[self.classes, self.dim], tracked)?;
        let b = tape.leaf(self.b.clone(), &[self.classes], tracked)?;
        Ok((w, b))
    }
}

/// Head logits: `z @ wᵀ + b` for features `z: [m, dim]`.
pub fn head_forward(
    tape: &mut Tape,
    w: TensorRef,
    b: TensorRef,
    z: TensorRef,
) -> Result<TensorRef> {
    let logits = tape.matmul_tb(z, w)?;
    tape.add_row_broadcast(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;
    use crate::tensor::gradcheck;

    fn tiny_cfg() -> TrunkConfig {
        TrunkConfig {
            in_channels: 2,
            image_hw: 4,
            channels: vec![4],
            pool: vec![true],
            groups: 2,
            extra_relu: false,
        }
    }

    fn random_images(cfg: &TrunkConfig, batch: usize, key: RngKey) -> Vec<f64> {
        use rand::Rng;
        let mut rng = key.rng();
        (0..batch * cfg.in_channels * cfg.image_hw * cfg.image_hw)
            .map(|_| rng.random_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn cifar_config_geometry() {
        let cfg = TrunkConfig::cifar(false);
        cfg.validate().unwrap();
        assert_eq!(cfg.num_blocks(), 4);
        assert_eq!(cfg.hw_after(3), 4);
        assert_eq!(cfg.feature_dim(), 128 * 16);
    }

    #[test]
    fn validate_rejects_bad_geometry() {
        let mut cfg = tiny_cfg();
        cfg.groups = 3; // does not divide 4
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.image_hw = 5; // odd edge cannot pool
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ws_rows_are_standardized() {
        let cfg = tiny_cfg();
        let params = TrunkParams::init(&cfg, RngKey::from_seed(7)).unwrap();
        let mut tape = Tape::new();
        let trunk = params.place(&cfg, &mut tape, false).unwrap();
        let w_std = ws_standardize(&mut tape, trunk.blocks[0].rectified.w).unwrap();
        let fan_in = 2 * KERNEL * KERNEL;
        for row in tape.value(w_std).chunks_exact(fan_in) {
            let mean: f64 = row.iter().sum::<f64>() / fan_in as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fan_in as f64;
            assert!(mean.abs() < 1e-10);
            // Unit variance up to the epsilon folded into the denominator.
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_slabs_are_standardized() {
        let cfg = tiny_cfg();
        let mut tape = Tape::new();
        let x_data = random_images(&cfg, 2, RngKey::from_seed(3));
        let x = tape.constant(x_data, &[2, 2, 4, 4]).unwrap();
        let gamma = tape.constant(vec![1.0, 1.0], &[2]).unwrap();
        let beta = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = group_norm(&mut tape, x, 2, gamma, beta).unwrap();
        // groups == channels here: every [1, 4, 4] slab is standardized.
        for slab in tape.value(y).chunks_exact(16) {
            let mean: f64 = slab.iter().sum::<f64>() / 16.0;
            let var: f64 = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn trunk_output_shape_and_determinism() {
        let cfg = TrunkConfig::small16(false);
        cfg.validate().unwrap();
        let params = TrunkParams::init(&cfg, RngKey::from_seed(11)).unwrap();
        let params2 = TrunkParams::init(&cfg, RngKey::from_seed(11)).unwrap();
        assert_eq!(params, params2);

        let x_data = random_images(&cfg, 3, RngKey::from_seed(5));
        let run = || {
            let mut tape = Tape::new();
            let trunk = params.place(&cfg, &mut tape, false).unwrap();
            let x = tape.constant(x_data.clone(), &[3, 3, 16, 16]).unwrap();
            let z = trunk_forward(&mut tape, &cfg, &trunk, x).unwrap();
            assert_eq!(tape.shape(z), &[3, cfg.feature_dim()]);
            tape.value(z).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = tiny_cfg();
        let params = TrunkParams::init(&cfg, RngKey::from_seed(2)).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.num_params());
        let mut other = TrunkParams::init(&cfg, RngKey::from_seed(99)).unwrap();
        assert_ne!(other, params);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, params);
        assert!(other.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn extra_relu_produces_exact_zeros() {
        let mut cfg = TrunkConfig::small16(false);
        let x_data = random_images(&cfg, 2, RngKey::from_seed(8));
        let zero_fraction = |cfg: &TrunkConfig| {
            let params = TrunkParams::init(cfg, RngKey::from_seed(4)).unwrap();
            let mut tape = Tape::new();
            let trunk = params.place(cfg, &mut tape, false).unwrap();
            let x = tape.constant(x_data.clone(), &[2, 3, 16, 16]).unwrap();
            let z = trunk_forward(&mut tape, cfg, &trunk, x).unwrap();
            let v = tape.value(z);
            v.iter().filter(|&&f| f == 0.0).count() as f64 / v.len() as f64
        };
        let base = zero_fraction(&cfg);
        cfg.extra_relu = true;
        let sparse = zero_fraction(&cfg);
        assert!(base < 0.05, "linear-path sum should almost never be exactly zero, got {base}");
        assert!(sparse > 0.2, "rectified block sums should zero out a chunk, got {sparse}");
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        // One-block trunk, every parameter checked against the numeric oracle.
        let cfg = tiny_cfg();
        let params = TrunkParams::init(&cfg, RngKey::from_seed(21)).unwrap();
        let x_data = random_images(&cfg, 2, RngKey::from_seed(22));
        let labels = [1usize, 3];

        let loss_of = |flat: &[f64]| {
            let mut p = params.clone();
            p.load_flat(flat).unwrap();
            let mut tape = Tape::new();
            let trunk = p.place(&cfg, &mut tape, true).unwrap();
            let x = tape.constant(x_data.clone(), &[2, 2, 4, 4]).unwrap();
            let z = trunk_forward(&mut tape, &cfg, &trunk, x).unwrap();
            let per_row = tape.softmax_xent(z, &labels).unwrap();
            let loss = tape.mean_all(per_row).unwrap();
            tape.scalar(loss)
        };

        let flat = params.flatten();
        let numeric = gradcheck::central_diff(loss_of, &flat, 1e-5);

        let mut tape = Tape::new();
        let trunk = params.place(&cfg, &mut tape, true).unwrap();
        let x = tape.constant(x_data.clone(), &[2, 2, 4, 4]).unwrap();
        let z = trunk_forward(&mut tape, &cfg, &trunk, x).unwrap();
        let per_row = tape.softmax_xent(z, &labels).unwrap();
        let loss = tape.mean_all(per_row).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::with_capacity(flat.len());
        for r in trunk.refs() {
            analytic.extend_from_slice(grads.get(r).expect("every trunk leaf gets a gradient"));
        }

        let report = gradcheck::compare(&analytic, &numeric);
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} at coord {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_coord,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }

    #[test]
    fn head_forward_logits() {
        let mut tape = Tape::new();
        let head = HeadParams {
            w: vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            b: vec![0.1, -0.1, 0.0],
            classes: 3,
            dim: 2,
        };
        let (w, b) = head.place(&mut tape, false).unwrap();
        let z = tape.constant(vec![2.0, 3.0], &[1, 2]).unwrap();
        let logits = head_forward(&mut tape, w, b, z).unwrap();
        let got = tape.value(logits);
        assert!((got[0] - 2.1).abs() < 1e-12);
        assert!((got[1] - 2.9).abs() < 1e-12);
        assert!((got[2] - 5.0).abs() < 1e-12);
    }
}
