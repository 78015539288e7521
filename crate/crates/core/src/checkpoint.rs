//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "METACLCK"
//! version  u32      currently 1
//! echo     u64 len + UTF-8 bytes   config echo, opaque to this module
//! step     u64      completed meta-steps
//! adam_t   u64      optimizer bias-correction counter
//! blobs    u32 count, then per blob:
//!          u16 name-len + UTF-8 name, u64 value-count, f64 LE values
//! queue    u32 entry-count, u64 feature-dim, then per entry:
//!          u64 label, u64 birth-step, feature-dim f64 LE values
//! ```
//!
//! Parameter blobs appear in canonical traversal order (trunk buffers, then
//! `head.w`, `head.b`, then `adam.m`, `adam.v`), so concatenating them
//! reproduces the optimizer's flat vector layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::TrunkParams;
use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::recall::QueueEntry;
use crate::train::{Trainer, TrainerSnapshot};

const MAGIC: &[u8; 8] = b"METACLCK";
const VERSION: u32 = 1;

/// Everything read back from a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub config_echo: String,
    pub snapshot: TrainerSnapshot,
    /// Blob names in file order, for integrity checks against the config.
    pub blob_names: Vec<String>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("blob name too long: {name}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    Ok(w.write_all(bytes)?)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut bytes = vec![0u8; len];
    read_exact(r, &mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}

/// Serialize the trainer's full mutable state.
pub fn save_trainer(path: &Path, trainer: &Trainer<'_>, config_echo: &str) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u64(&mut w, config_echo.len() as u64)?;
    w.write_all(config_echo.as_bytes())?;
    write_u64(&mut w, trainer.step)?;
    write_u64(&mut w, trainer.moments.t)?;

    let trunk_blobs = trainer.trunk.named_buffers();
    let blob_count = trunk_blobs.len() + 4;
    write_u32(&mut w, blob_count as u32)?;
    for (name, buf) in &trunk_blobs {
        write_name(&mut w, name)?;
        write_u64(&mut w, buf.len() as u64)?;
        write_f64s(&mut w, buf)?;
    }
    for (name, buf) in [
        ("head.w", &trainer.head.w),
        ("head.b", &trainer.head.b),
        ("adam.m", &trainer.moments.m),
        ("adam.v", &trainer.moments.v),
    ] {
        write_name(&mut w, name)?;
        write_u64(&mut w, buf.len() as u64)?;
        write_f64s(&mut w, buf)?;
    }

    let entries: Vec<&QueueEntry> = trainer.queue.entries().collect();
    write_u32(&mut w, entries.len() as u32)?;
    let dim = entries.first().map_or(0, |e| e.z.len());
    write_u64(&mut w, dim as u64)?;
    for e in &entries {
        if e.z.len() != dim {
            return Err(Error::Checkpoint(format!(
                "queue entry for label {} has dim {}, expected {dim}",
                e.label,
                e.z.len()
            )));
        }
        write_u64(&mut w, e.label as u64)?;
        write_u64(&mut w, e.birth_step)?;
        write_f64s(&mut w, &e.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_trainer`]. The caller restores it
/// into a trainer built from the matching config.
pub fn load_trainer(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}, not a checkpoint")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let echo_len = read_u64(&mut r)? as usize;
    let config_echo = read_string(&mut r, echo_len)?;
    let step = read_u64(&mut r)?;
    let adam_t = read_u64(&mut r)?;

    let blob_count = read_u32(&mut r)? as usize;
    let mut blob_names = Vec::with_capacity(blob_count);
    let mut blobs: Vec<Vec<f64>> = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = {
            let mut b = [0u8; 2];
            read_exact(&mut r, &mut b)?;
            u16::from_le_bytes(b) as usize
        };
        blob_names.push(read_string(&mut r, name_len)?);
        let len = read_u64(&mut r)? as usize;
        blobs.push(read_f64s(&mut r, len)?);
    }
    let expect_tail = ["head.w", "head.b", "adam.m", "adam.v"];
    if blob_count < 4 || blob_names[blob_count - 4..] != expect_tail {
        return Err(Error::Checkpoint(format!(
            "blob list {blob_names:?} does not end with {expect_tail:?}"
        )));
    }
    let adam_v = blobs.pop().expect("count checked");
    let adam_m = blobs.pop().expect("count checked");
    let head_b = blobs.pop().expect("count checked");
    let head_w = blobs.pop().expect("count checked");
    let trunk_flat: Vec<f64> = blobs.into_iter().flatten().collect();

    let entry_count = read_u32(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let mut queue_entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let label = read_u64(&mut r)? as usize;
        let birth_step = read_u64(&mut r)?;
        let z = read_f64s(&mut r, dim)?;
        queue_entries.push(QueueEntry { z, label, birth_step });
    }

    Ok(LoadedCheckpoint {
        config_echo,
        snapshot: TrainerSnapshot {
            trunk_flat,
            head_w,
            head_b,
            moments: Moments { m: adam_m, v: adam_v, t: adam_t },
            queue_entries,
            step,
        },
        blob_names,
    })
}

/// SHA-256 over the trunk parameters' little-endian bytes in canonical
/// order. Two trunks hash equal iff every parameter is bit-identical.
pub fn trunk_sha256(trunk: &TrunkParams) -> String {
    let mut hasher = Sha256::new();
    for (_, buf) in trunk.named_buffers() {
        for v in buf {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::TrunkConfig;
    use crate::augment::AugmentConfig;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::optim::AdamWHyper;
    use crate::rng::RngKey;
    use crate::stream::Mode;
    use crate::train::TrainSettings;

    fn settings() -> TrainSettings {
        TrainSettings {
            trunk: TrunkConfig {
                in_channels: 3,
                image_hw: 8,
                channels: vec![4, 2],
                pool: vec![true, true],
                groups: 2,
                extra_relu: false,
            },
            augment: AugmentConfig::default(),
            mode: Mode::Unsupervised,
            num_streams: 2,
            num_contexts: 2,
            repeats: 2,
            num_labels: 16,
            queue_capacity: 4,
            recall_query: 3,
            alpha: 0.05,
            adamw: AdamWHyper::default(),
            warmup: 5,
            total_steps: 50,
            seed: 21,
        }
    }

    #[test]
    fn roundtrip_restores_and_resumes_identically() {
        let data = gen_synthetic(&SyntheticSpec { classes: 5, per_class: 6, hw: 8, difficulty: 0.3 }, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");

        let mut a = Trainer::new(settings(), &data).unwrap();
        for _ in 0..4 {
            a.meta_step().unwrap();
        }
        save_trainer(&path, &a, "config-echo-v1").unwrap();

        let loaded = load_trainer(&path).unwrap();
        assert_eq!(loaded.config_echo, "config-echo-v1");
        assert_eq!(loaded.snapshot, a.snapshot());

        let mut b = Trainer::new(settings(), &data).unwrap();
        b.restore(&loaded.snapshot).unwrap();
        for _ in 0..3 {
            a.meta_step().unwrap();
            b.meta_step().unwrap();
        }
        assert_eq!(a.trunk.flatten(), b.trunk.flatten());
        assert_eq!(a.moments, b.moments);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_trainer(&bad), Err(Error::Checkpoint(_))));

        let data = gen_synthetic(&SyntheticSpec { classes: 5, per_class: 6, hw: 8, difficulty: 0.3 }, 4);
        let trainer = Trainer::new(settings(), &data).unwrap();
        let good = dir.path().join("good.ckpt");
        save_trainer(&good, &trainer, "echo").unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_trainer(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_gate_is_enforced() {
        let data = gen_synthetic(&SyntheticSpec { classes: 5, per_class: 6, hw: 8, difficulty: 0.3 }, 5);
        let trainer = Trainer::new(settings(), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_trainer(&path, &trainer, "echo").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_trainer(&path);
        match err {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 99"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn trunk_hash_tracks_bit_identity() {
        let cfg = settings().trunk;
        let a = TrunkParams::init(&cfg, RngKey::from_seed(1)).unwrap();
        let b = TrunkParams::init(&cfg, RngKey::from_seed(1)).unwrap();
        let c = TrunkParams::init(&cfg, RngKey::from_seed(2)).unwrap();
        assert_eq!(trunk_sha256(&a), trunk_sha256(&b));
        assert_ne!(trunk_sha256(&a), trunk_sha256(&c));
        assert_eq!(trunk_sha256(&a).len(), 64);

        let mut d = TrunkParams::init(&cfg, RngKey::from_seed(1)).unwrap();
        d.blocks[0].linear.beta[0] += 1e-300;
        assert_ne!(trunk_sha256(&a), trunk_sha256(&d), "hash must see the smallest change");
    }
}
