//! Checkpoint container: magic `SPIN`, a `u32` version, named typed blocks and a SHA-256
//! trailer over everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geometry::Rotation;
use crate::objective::NoiseModel;
use crate::optim::AdamState;
use crate::particles::Pose;
use crate::trainer::{EpochLog, PoseEntry, PoseTable, TrainConfig, Trainer};
use crate::volume::MEVolume;

pub const MAGIC: &[u8; 4] = b"SPIN";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl BlockData {
    fn tag(&self) -> u8 {
        match self {
            BlockData::F64(_) => 0,
            BlockData::U64(_) => 1,
            BlockData::Bytes(_) => 2,
        }
    }

    fn count(&self) -> usize {
        match self {
            BlockData::F64(v) => v.len(),
            BlockData::U64(v) => v.len(),
            BlockData::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<(String, BlockData)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, data: BlockData) {
        self.blocks.push((name.to_string(), data));
    }

    pub fn get(&self, name: &str) -> Result<&BlockData> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, d)| d).ok_or_else(|| corrupt(format!("missing block {name}")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            BlockData::F64(v) => Ok(v),
            _ => Err(corrupt(format!("block {name} is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            BlockData::U64(v) => Ok(v),
            _ => Err(corrupt(format!("block {name} is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            BlockData::Bytes(v) => Ok(v),
            _ => Err(corrupt(format!("block {name} is not bytes"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, data) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.tag());
            out.extend_from_slice(&(data.count() as u64).to_le_bytes());
            match data {
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::Bytes(v) => out.extend_from_slice(v),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("block name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let count = usize::try_from(r.u64()?).map_err(|_| corrupt("block too large"))?;
            let width = match tag {
                0 | 1 => 8,
                2 => 1,
                t => return Err(corrupt(format!("unknown block type {t}"))),
            };
            let raw = r.take(count.checked_mul(width).ok_or_else(|| corrupt("block too large"))?)?;
            let data = match tag {
                0 => BlockData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                1 => BlockData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                _ => BlockData::Bytes(raw.to_vec()),
            };
            ck.blocks.push((name, data));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last block"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    l: usize,
    pixel_size: f64,
    epoch: usize,
    sigma: f64,
    rng_stream: u64,
    rng_word_pos: String,
    encoder_adam_step: u64,
    volume_adam_steps: [u64; 2],
    has_pose_table: bool,
    log: Vec<EpochLog>,
}

fn flatten_poses(poses: impl Iterator<Item = Pose>) -> Vec<f64> {
    poses.flat_map(|p| p.rotation.0.into_iter().flatten().chain(p.translation)).collect()
}

fn unflatten_poses(v: &[f64]) -> Result<Vec<Pose>> {
    if !v.len().is_multiple_of(11) {
        return Err(corrupt("pose block length"));
    }
    Ok(v.chunks_exact(11)
        .map(|c| {
            let m = [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]];
            Pose::new(Rotation(m), [c[9], c[10]])
        })
        .collect())
}

fn adam_state(ck: &Checkpoint, prefix: &str, step: u64, len: usize) -> Result<AdamState> {
    let (m, v) = (ck.f64s(&format!("{prefix}.m"))?, ck.f64s(&format!("{prefix}.v"))?);
    if m.len() != len || v.len() != len {
        return Err(corrupt(format!("{prefix} length")));
    }
    Ok(AdamState { m: m.to_vec(), v: v.to_vec(), step })
}

/// Serializes every piece of state that influences later epochs.
pub fn trainer_to_checkpoint(t: &Trainer) -> Result<Checkpoint> {
    let meta = Meta {
        config: t.config.clone(),
        l: t.l,
        pixel_size: t.volume.pixel_size,
        epoch: t.epoch,
        sigma: t.noise.sigma,
        rng_stream: t.rng.get_stream(),
        rng_word_pos: t.rng.get_word_pos().to_string(),
        encoder_adam_step: t.encoder.adam.step,
        volume_adam_steps: [t.volume.adam_m.step, t.volume.adam_e.step],
        has_pose_table: t.poses.is_some(),
        log: t.log.clone(),
    };
    let mut ck = Checkpoint::default();
    ck.push("meta", BlockData::Bytes(serde_json::to_vec(&meta)?));
    ck.push("rng.seed", BlockData::Bytes(t.rng.get_seed().to_vec()));
    ck.push("encoder.params", BlockData::F64(t.encoder.params.clone()));
    ck.push("encoder.adam.m", BlockData::F64(t.encoder.adam.m.clone()));
    ck.push("encoder.adam.v", BlockData::F64(t.encoder.adam.v.clone()));
    ck.push("volume.m", BlockData::F64(t.volume.m.clone()));
    ck.push("volume.e", BlockData::F64(t.volume.e.clone()));
    ck.push("volume.adam_m.m", BlockData::F64(t.volume.adam_m.m.clone()));
    ck.push("volume.adam_m.v", BlockData::F64(t.volume.adam_m.v.clone()));
    ck.push("volume.adam_e.m", BlockData::F64(t.volume.adam_e.m.clone()));
    ck.push("volume.adam_e.v", BlockData::F64(t.volume.adam_e.v.clone()));
    ck.push("winners.poses", BlockData::F64(flatten_poses(t.last_winners.iter().map(|w| w.0))));
    ck.push("winners.heads", BlockData::U64(t.last_winners.iter().map(|w| w.1 as u64).collect()));
    if let Some(table) = &t.poses {
        let e = &table.entries;
        ck.push("poses.poses", BlockData::F64(flatten_poses(e.iter().map(PoseEntry::pose))));
        ck.push("poses.adam_rot.m", BlockData::F64(e.iter().flat_map(|x| x.adam_rotation.m.clone()).collect()));
        ck.push("poses.adam_rot.v", BlockData::F64(e.iter().flat_map(|x| x.adam_rotation.v.clone()).collect()));
        ck.push("poses.adam_t.m", BlockData::F64(e.iter().flat_map(|x| x.adam_translation.m.clone()).collect()));
        ck.push("poses.adam_t.v", BlockData::F64(e.iter().flat_map(|x| x.adam_translation.v.clone()).collect()));
        ck.push(
            "poses.steps",
            BlockData::U64(e.iter().flat_map(|x| [x.adam_rotation.step, x.adam_translation.step]).collect()),
        );
        ck.push("poses.heads", BlockData::U64(e.iter().map(|x| x.head as u64).collect()));
        ck.push("poses.loss", BlockData::F64(e.iter().map(|x| x.loss).collect()));
    }
    Ok(ck)
}

pub fn trainer_from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
    let meta: Meta = serde_json::from_slice(ck.bytes("meta")?).map_err(|e| corrupt(format!("meta: {e}")))?;
    meta.config.validate()?;
    let mut encoder = Encoder::new(meta.config.encoder_config(meta.l))?;
    let n = encoder.n_params();
    let params = ck.f64s("encoder.params")?;
    if params.len() != n {
        return Err(corrupt("encoder parameter count"));
    }
    encoder.params = params.to_vec();
    encoder.adam = adam_state(ck, "encoder.adam", meta.encoder_adam_step, n)?;
    let mut volume = MEVolume::from_fields(meta.l, meta.pixel_size, ck.f64s("volume.m")?.to_vec(), ck.f64s("volume.e")?.to_vec())
        .map_err(|_| corrupt("volume size"))?;
    volume.adam_m = adam_state(ck, "volume.adam_m", meta.volume_adam_steps[0], volume.len())?;
    volume.adam_e = adam_state(ck, "volume.adam_e", meta.volume_adam_steps[1], volume.len())?;
    let seed: [u8; 32] = ck.bytes("rng.seed")?.try_into().map_err(|_| corrupt("rng seed length"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(meta.rng_word_pos.parse::<u128>().map_err(|_| corrupt("rng position"))?);
    let win_poses = unflatten_poses(ck.f64s("winners.poses")?)?;
    let win_heads = ck.u64s("winners.heads")?;
    if win_heads.len() != win_poses.len() {
        return Err(corrupt("winner table length"));
    }
    let last_winners = win_poses.into_iter().zip(win_heads.iter().map(|&h| h as usize)).collect();
    let poses = if meta.has_pose_table {
        let p = unflatten_poses(ck.f64s("poses.poses")?)?;
        let k = p.len();
        let (rm, rv) = (ck.f64s("poses.adam_rot.m")?, ck.f64s("poses.adam_rot.v")?);
        let (tm, tv) = (ck.f64s("poses.adam_t.m")?, ck.f64s("poses.adam_t.v")?);
        let (steps, heads, loss) = (ck.u64s("poses.steps")?, ck.u64s("poses.heads")?, ck.f64s("poses.loss")?);
        if rm.len() != 3 * k || rv.len() != 3 * k || tm.len() != 2 * k || tv.len() != 2 * k || steps.len() != 2 * k || heads.len() != k || loss.len() != k {
            return Err(corrupt("pose table length"));
        }
        let entries = (0..k)
            .map(|i| PoseEntry {
                rotation: p[i].rotation,
                translation: p[i].translation,
                adam_rotation: AdamState { m: rm[3 * i..3 * i + 3].to_vec(), v: rv[3 * i..3 * i + 3].to_vec(), step: steps[2 * i] },
                adam_translation: AdamState { m: tm[2 * i..2 * i + 2].to_vec(), v: tv[2 * i..2 * i + 2].to_vec(), step: steps[2 * i + 1] },
                head: heads[i] as usize,
                loss: loss[i],
            })
            .collect();
        Some(PoseTable { entries })
    } else {
        None
    };
    Ok(Trainer {
        config: meta.config,
        l: meta.l,
        encoder,
        volume,
        noise: NoiseModel::new(meta.sigma)?,
        poses,
        epoch: meta.epoch,
        rng,
        log: meta.log,
        last_winners,
    })
}

pub fn save_trainer(path: &Path, t: &Trainer) -> Result<()> {
    trainer_to_checkpoint(t)?.save(path)
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    trainer_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{phantom_for_spec, synthesize_dataset, SimSpec};
    use crate::trainer::Preset;

    fn tiny() -> (crate::particles::ParticleStack, TrainConfig) {
        let spec = SimSpec::new(24, 16, 9);
        let stack = synthesize_dataset(&phantom_for_spec(&spec).unwrap(), &spec).unwrap();
        let cfg = TrainConfig {
            heads: 2,
            batch_size: 8,
            epochs_total: 3,
            switch_epoch: 1,
            encoder_channels: vec![4, 4],
            encoder_hidden: 4,
            workers: 1,
            eval_subsample: 24,
            ..TrainConfig::preset(Preset::Desk)
        };
        (stack, cfg)
    }

    #[test]
    fn container_roundtrip_and_corruption() {
        let mut ck = Checkpoint::default();
        ck.push("a", BlockData::F64(vec![1.5, -0.0, f64::MIN_POSITIVE]));
        ck.push("b", BlockData::U64(vec![7, u64::MAX]));
        ck.push("c", BlockData::Bytes(b"hello".to_vec()));
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SPIN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn trainer_save_load_save_is_identical() {
        let (stack, cfg) = tiny();
        let mut t = Trainer::new(cfg, &stack).unwrap();
        t.run_epoch(&stack).unwrap();
        t.run_epoch(&stack).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.spin");
        save_trainer(&p, &t).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = load_trainer(&p).unwrap();
        save_trainer(&p, &loaded).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn resume_reproduces_losses() {
        let (stack, cfg) = tiny();
        let mut full = Trainer::new(cfg.clone(), &stack).unwrap();
        full.run(&stack, |_| Ok(())).unwrap();
        let mut part = Trainer::new(cfg, &stack).unwrap();
        part.run_epoch(&stack).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.spin");
        save_trainer(&p, &part).unwrap();
        let mut resumed = load_trainer(&p).unwrap();
        resumed.run(&stack, |_| Ok(())).unwrap();
        let key = |t: &Trainer| t.log.iter().map(|l| (l.mean_wta_loss, l.head_usage.clone(), l.median_pose_error)).collect::<Vec<_>>();
        assert_eq!(key(&full), key(&resumed));
        assert_eq!(full.volume.m, resumed.volume.m);
    }
}
