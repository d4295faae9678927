//! Two-stage training: amortized auto-encoding with a winner-takes-all loss, then
//! per-particle pose refinement alternating with volume updates.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{preprocess, Encoder, EncoderConfig, HeadUpstream, Pooling};
use crate::error::{Error, Result};
use crate::evaluation::pose_error_stats;
use crate::geometry::{rotation_from_axis_angle, AxisAngle, Rotation};
use crate::objective::{estimate_sigma, nll, nll_loss, wta_select, NoiseModel};
use crate::optim::{Adam, AdamState};
use crate::parallel::{map_indexed, with_workers};
use crate::particles::{ParticleStack, Pose};
use crate::transforms::{hartley_2d, pose_gradient, rotation_gradient, slice_backprop_into, FrequencyGrid, Mask};
use crate::volume::MEVolume;

/// Images per work unit; partial sums are reduced in unit order.
pub const CHUNK: usize = 8;
/// Orthonormality drift that triggers re-orthonormalization of a stored rotation.
pub const DRIFT_TOLERANCE: f64 = 1e-6;
/// Images used to calibrate the encoder heads.
pub const CALIBRATION_SAMPLE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Synthetic,
    Desk,
    RealStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub heads: usize,
    pub batch_size: usize,
    pub epochs_total: usize,
    pub switch_epoch: usize,
    pub lr_encoder: f64,
    pub lr_decoder_stage1: f64,
    pub lr_decoder_stage2: f64,
    pub lr_pose: f64,
    pub lr_translation: f64,
    pub pose_steps_per_volume_step: usize,
    pub freq_march: bool,
    /// Mask radius at epoch 0 is `L / mask_start_divisor`.
    pub mask_start_divisor: f64,
    pub estimate_translation: bool,
    /// Continue auto-encoding past the switch epoch instead of auto-decoding.
    pub fully_amortized: bool,
    pub freeze_volume: bool,
    /// Scale of the random low-frequency starting volume; `0` starts from zero.
    pub volume_init_scale: f64,
    pub encoder_channels: Vec<usize>,
    pub encoder_hidden: usize,
    pub encoder_pooling: Pooling,
    /// Standardize head activations over a data sample before training.
    pub encoder_calibration: bool,
    /// Multiply the encoder input by the sign of its CTF.
    pub encoder_phase_flip: bool,
    /// Zero encoder-input frequencies beyond this index radius.
    pub encoder_lowpass_radius: Option<f64>,
    /// Particles used for the per-epoch median pose error.
    pub eval_subsample: usize,
    /// Thread count; `1` is serial, `0` uses every core.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Synthetic)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> TrainConfig {
        let base = TrainConfig {
            heads: 7,
            batch_size: 64,
            epochs_total: 20,
            switch_epoch: 7,
            lr_encoder: 1e-4,
            lr_decoder_stage1: 0.05,
            lr_decoder_stage2: 0.02,
            lr_pose: 0.05,
            lr_translation: 0.05,
            pose_steps_per_volume_step: 5,
            freq_march: true,
            mask_start_divisor: 8.0,
            estimate_translation: false,
            fully_amortized: false,
            freeze_volume: false,
            volume_init_scale: 1.0,
            encoder_channels: vec![16, 32, 64, 128],
            encoder_hidden: 64,
            encoder_pooling: Pooling::Average,
            encoder_calibration: true,
            encoder_phase_flip: false,
            encoder_lowpass_radius: None,
            eval_subsample: 500,
            workers: 0,
            seed: 0,
        };
        match preset {
            Preset::Synthetic => base,
            Preset::RealStyle => TrainConfig { heads: 15, epochs_total: 30, switch_epoch: 15, estimate_translation: true, ..base },
            Preset::Desk => TrainConfig {
                heads: 4,
                epochs_total: 20,
                switch_epoch: 12,
                batch_size: 4,
                lr_encoder: 1e-3,
                lr_decoder_stage1: 0.002,
                encoder_phase_flip: true,
                encoder_lowpass_radius: Some(12.0),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 {
            return bad("heads must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.switch_epoch < 1 || self.switch_epoch > self.epochs_total {
            return bad("switch_epoch must lie in 1..=epochs_total");
        }
        let lrs = [self.lr_encoder, self.lr_decoder_stage1, self.lr_decoder_stage2, self.lr_pose, self.lr_translation];
        if lrs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.volume_init_scale >= 0.0 && self.volume_init_scale.is_finite()) {
            return bad("volume_init_scale must be non-negative");
        }
        if self.pose_steps_per_volume_step == 0 {
            return bad("pose_steps_per_volume_step must be at least 1");
        }
        if !(self.mask_start_divisor >= 2.0) {
            return bad("mask_start_divisor must be at least 2");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) || self.encoder_hidden == 0 {
            return bad("encoder sizes must be positive");
        }
        Ok(())
    }

    pub fn encoder_config(&self, l: usize) -> EncoderConfig {
        EncoderConfig {
            channels: self.encoder_channels.clone(),
            hidden: self.encoder_hidden,
            estimate_translation: self.estimate_translation,
            pooling: self.encoder_pooling,
            ..EncoderConfig::new(l, self.heads, self.seed)
        }
    }
}

/// Loss band radius in index units for `epoch`.
pub fn frequency_mask_radius(epoch: usize, cfg: &TrainConfig, l: usize) -> f64 {
    let r_max = Mask::max_radius(l);
    if !cfg.freq_march || epoch >= cfg.switch_epoch {
        return r_max;
    }
    let r0 = l as f64 / cfg.mask_start_divisor;
    (r0 + (r_max - r0) * epoch as f64 / cfg.switch_epoch as f64).round()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    AutoEncode,
    AutoDecode,
}

/// Per-particle pose state refined during auto-decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEntry {
    pub rotation: Rotation,
    pub translation: [f64; 2],
    /// Moments of the axis-angle increment, which itself restarts at zero every step.
    pub adam_rotation: AdamState,
    pub adam_translation: AdamState,
    /// Head that won at the switch.
    pub head: usize,
    pub loss: f64,
}

impl PoseEntry {
    pub fn new(pose: Pose, head: usize, loss: f64) -> PoseEntry {
        PoseEntry {
            rotation: pose.rotation,
            translation: pose.translation,
            adam_rotation: AdamState::new(3),
            adam_translation: AdamState::new(2),
            head,
            loss,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseTable {
    pub entries: Vec<PoseEntry>,
}

impl PoseTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(PoseEntry::pose).collect()
    }
}

/// Statistics of one auto-encoding epoch.
#[derive(Clone, Debug)]
pub struct AutoencodeStats {
    pub mean_wta_loss: f64,
    pub head_counts: Vec<u64>,
    /// Winning pose and head per particle, as evaluated during the epoch.
    pub winners: Vec<(Pose, usize)>,
}

#[derive(Clone, Debug)]
pub struct AutodecodeStats {
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub wall_seconds: f64,
    pub mean_wta_loss: f64,
    pub head_usage: Vec<u64>,
    pub mask_radius: f64,
    pub median_pose_error: Option<f64>,
}

/// Normalized encoder input for particle `i`, optionally phase-flipped and low-passed.
pub fn encoder_input(stack: &ParticleStack, i: usize, cfg: &TrainConfig) -> Vec<f64> {
    if !cfg.encoder_phase_flip && cfg.encoder_lowpass_radius.is_none() {
        return preprocess(&stack.images[i]);
    }
    let l = stack.l;
    let mut h = stack.hartley_image(i);
    if cfg.encoder_phase_flip {
        for (v, c) in h.iter_mut().zip(stack.ctf_image(i)) {
            if c < 0.0 {
                *v = -*v;
            }
        }
    }
    if let Some(r) = cfg.encoder_lowpass_radius {
        let grid = FrequencyGrid::new(l, 1.0);
        for (idx, v) in h.iter_mut().enumerate() {
            let (kx, ky) = grid.coords(idx);
            if ((kx * kx + ky * ky) as f64) > r * r {
                *v = 0.0;
            }
        }
    }
    preprocess(&hartley_2d(&h, l))
}

/// Random starting volume inside the epoch-0 mask whose shell power matches the
/// CTF-corrected signal power of the data.
pub fn initial_volume(stack: &ParticleStack, noise: &NoiseModel, cfg: &TrainConfig) -> Result<MEVolume> {
    let l = stack.l;
    let vol = MEVolume::new(l, stack.pixel_size);
    if cfg.volume_init_scale == 0.0 {
        return Ok(vol);
    }
    let radius = frequency_mask_radius(0, cfg, l);
    let shells = radius.ceil() as usize + 1;
    let grid = FrequencyGrid::new(l, 1.0);
    let shell_of = |idx: usize| {
        let (kx, ky) = grid.coords(idx);
        ((kx * kx + ky * ky) as f64).sqrt().round() as usize
    };
    let (mut y2, mut c2, mut count) = (vec![0.0; shells], vec![0.0; shells], vec![0usize; shells]);
    let take = stack.len().min(500);
    for j in 0..take {
        let i = j * stack.len() / take;
        let (h, c) = (stack.hartley_image(i), stack.ctf_image(i));
        for idx in 0..grid.len() {
            let s = shell_of(idx);
            if s < shells {
                y2[s] += h[idx] * h[idx];
                c2[s] += c[idx] * c[idx];
                count[s] += 1;
            }
        }
    }
    let sigma2 = noise.sigma * noise.sigma;
    let std: Vec<f64> = (0..shells)
        .map(|s| {
            let n = count[s].max(1) as f64;
            let signal = (y2[s] / n - sigma2).max(0.0);
            cfg.volume_init_scale * (signal / (c2[s] / n).max(1e-3)).sqrt()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - 1);
    let h = (l / 2) as i64;
    let mut m = vec![0.0; l * l * l];
    for z in 0..l {
        for y in 0..l {
            for x in 0..l {
                let k = [x as i64 - h, y as i64 - h, z as i64 - h];
                let r = ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt();
                if r <= radius {
                    m[(z * l + y) * l + x] = std[r.round() as usize] * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    MEVolume::from_fields(l, stack.pixel_size, m, vec![0.0; l * l * l])
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

struct AeChunk {
    encoder_grad: Vec<f64>,
    volume_grad: Vec<f64>,
    loss: f64,
    winners: Vec<(usize, Pose, usize)>,
}

fn candidate_losses(
    stack: &ParticleStack,
    i: usize,
    poses: &[Pose],
    volume: &MEVolume,
    noise: &NoiseModel,
    mask: &Mask,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let image_h = stack.hartley_image(i);
    let ctf = stack.ctf_image(i);
    let losses = poses
        .iter()
        .map(|p| {
            let (slice, _) = volume.extract_slice(&p.rotation, mask);
            nll_loss(&slice, p.translation, &ctf, &image_h, noise, mask)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((losses, image_h, ctf))
}

fn autoencode_chunk(
    stack: &ParticleStack,
    idx: &[usize],
    encoder: &Encoder,
    volume: &MEVolume,
    noise: &NoiseModel,
    mask: &Mask,
    cfg: &TrainConfig,
) -> Result<AeChunk> {
    let want_volume = !cfg.freeze_volume;
    let mut out = AeChunk {
        encoder_grad: vec![0.0; encoder.n_params()],
        volume_grad: if want_volume { vec![0.0; volume.len()] } else { Vec::new() },
        loss: 0.0,
        winners: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let (poses, cache) = encoder.forward(&encoder_input(stack, i, cfg))?;
        let (losses, image_h, ctf) = candidate_losses(stack, i, &poses, volume, noise, mask)?;
        let (loss, w) = wta_select(&losses)?;
        let pose = poses[w];
        let (slice, sc) = volume.extract_slice(&pose.rotation, mask);
        let terms = nll(&slice, pose.translation, &ctf, &image_h, noise, mask)?;
        let dense = if want_volume { Some(out.volume_grad.as_mut_slice()) } else { None };
        let coords = slice_backprop_into(&terms.grad_slice, &sc, volume.me_value(), mask, dense, true)?;
        let up = HeadUpstream { head: w, grad_rotation: rotation_gradient(&coords, mask), grad_translation: terms.grad_translation };
        encoder.backward(&up, &cache, &mut out.encoder_grad)?;
        out.loss += loss;
        out.winners.push((i, pose, w));
    }
    Ok(out)
}

fn add_into(acc: &mut [f64], part: &[f64]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// One pass over `order` in batches: winner-only gradients update the encoder and, unless
/// frozen, the volume.
pub fn run_autoencode_epoch(
    stack: &ParticleStack,
    encoder: &mut Encoder,
    volume: &mut MEVolume,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    order: &[usize],
    mask: &Mask,
) -> Result<AutoencodeStats> {
    let m = encoder.config.heads;
    let mut stats =
        AutoencodeStats { mean_wta_loss: 0.0, head_counts: vec![0; m], winners: vec![(Pose::default(), 0); stack.len()] };
    let mut total = 0.0;
    let want_volume = !cfg.freeze_volume;
    for batch in batches(order, cfg.batch_size) {
        let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
        let parts = {
            let (enc, vol) = (&*encoder, &*volume);
            map_indexed(chunks.len(), |c| autoencode_chunk(stack, chunks[c], enc, vol, noise, mask, cfg))
        };
        let mut enc_grad = vec![0.0; encoder.n_params()];
        let mut vol_grad = if want_volume { vec![0.0; volume.len()] } else { Vec::new() };
        for part in parts {
            let part = part?;
            add_into(&mut enc_grad, &part.encoder_grad);
            add_into(&mut vol_grad, &part.volume_grad);
            total += part.loss;
            for (i, pose, w) in part.winners {
                stats.head_counts[w] += 1;
                stats.winners[i] = (pose, w);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        enc_grad.iter_mut().for_each(|g| *g *= inv);
        encoder.step(&enc_grad, cfg.lr_encoder)?;
        if want_volume {
            vol_grad.iter_mut().for_each(|g| *g *= inv);
            volume.step_from_value_gradient(&vol_grad, cfg.lr_decoder_stage1)?;
        }
    }
    stats.mean_wta_loss = total / order.len().max(1) as f64;
    Ok(stats)
}

/// Stores each particle's lowest-loss encoder candidate in a fresh pose table.
pub fn switch_to_autodecode(
    stack: &ParticleStack,
    encoder: &Encoder,
    volume: &MEVolume,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    mask: &Mask,
) -> Result<PoseTable> {
    let n = stack.len();
    let n_chunks = n.div_ceil(CHUNK);
    let parts = map_indexed(n_chunks, |c| {
        (c * CHUNK..((c + 1) * CHUNK).min(n))
            .map(|i| {
                let (poses, _) = encoder.forward(&encoder_input(stack, i, cfg))?;
                let (losses, _, _) = candidate_losses(stack, i, &poses, volume, noise, mask)?;
                let (loss, w) = wta_select(&losses)?;
                Ok(PoseEntry::new(poses[w], w, loss))
            })
            .collect::<Result<Vec<PoseEntry>>>()
    });
    let mut entries = Vec::with_capacity(n);
    for p in parts {
        entries.extend(p?);
    }
    Ok(PoseTable { entries })
}

struct AdChunk {
    volume_grad: Vec<f64>,
    loss: f64,
    entries: Vec<(usize, PoseEntry)>,
}

fn refine_particle(
    stack: &ParticleStack,
    i: usize,
    mut entry: PoseEntry,
    volume: &MEVolume,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    mask: &Mask,
    volume_grad: Option<&mut [f64]>,
) -> Result<PoseEntry> {
    let image_h = stack.hartley_image(i);
    let ctf = stack.ctf_image(i);
    let adam = Adam::default();
    for _ in 0..cfg.pose_steps_per_volume_step {
        let (slice, sc) = volume.extract_slice(&entry.rotation, mask);
        let terms = nll(&slice, entry.translation, &ctf, &image_h, noise, mask)?;
        let coords = slice_backprop_into(&terms.grad_slice, &sc, volume.me_value(), mask, None, true)?;
        let g = pose_gradient(&coords, &entry.rotation, mask);
        let mut w = [0.0; 3];
        adam.step(&mut w, &g, &mut entry.adam_rotation, cfg.lr_pose)?;
        let mut r = rotation_from_axis_angle(AxisAngle(w)) * entry.rotation;
        if r.orthonormality_error() > DRIFT_TOLERANCE {
            r = r.reorthonormalize();
        }
        entry.rotation = r;
        if cfg.estimate_translation {
            adam.step(&mut entry.translation, &terms.grad_translation, &mut entry.adam_translation, cfg.lr_translation)?;
        }
    }
    let (slice, sc) = volume.extract_slice(&entry.rotation, mask);
    let terms = nll(&slice, entry.translation, &ctf, &image_h, noise, mask)?;
    if let Some(d) = volume_grad {
        slice_backprop_into(&terms.grad_slice, &sc, volume.me_value(), mask, Some(d), false)?;
    }
    entry.loss = terms.loss;
    Ok(entry)
}

/// One pass of pose refinement: per batch, every particle takes the configured number of
/// pose steps against the fixed volume, then the volume takes one step.
pub fn run_autodecode_round(
    stack: &ParticleStack,
    table: &mut PoseTable,
    volume: &mut MEVolume,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    order: &[usize],
    mask: &Mask,
) -> Result<AutodecodeStats> {
    if table.len() != stack.len() {
        return Err(Error::DimensionMismatch { expected: stack.len(), got: table.len() });
    }
    let want_volume = !cfg.freeze_volume;
    let mut total = 0.0;
    for batch in batches(order, cfg.batch_size) {
        let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
        let parts = {
            let (vol, tab) = (&*volume, &*table);
            map_indexed(chunks.len(), |c| -> Result<AdChunk> {
                let mut out = AdChunk {
                    volume_grad: if want_volume { vec![0.0; vol.len()] } else { Vec::new() },
                    loss: 0.0,
                    entries: Vec::with_capacity(chunks[c].len()),
                };
                for &i in chunks[c] {
                    let dense = if want_volume { Some(out.volume_grad.as_mut_slice()) } else { None };
                    let e = refine_particle(stack, i, tab.entries[i].clone(), vol, noise, cfg, mask, dense)?;
                    out.loss += e.loss;
                    out.entries.push((i, e));
                }
                Ok(out)
            })
        };
        let mut vol_grad = if want_volume { vec![0.0; volume.len()] } else { Vec::new() };
        for part in parts {
            let part = part?;
            add_into(&mut vol_grad, &part.volume_grad);
            total += part.loss;
            for (i, e) in part.entries {
                table.entries[i] = e;
            }
        }
        if want_volume {
            let inv = 1.0 / batch.len() as f64;
            vol_grad.iter_mut().for_each(|g| *g *= inv);
            volume.step_from_value_gradient(&vol_grad, cfg.lr_decoder_stage2)?;
        }
    }
    Ok(AutodecodeStats { mean_loss: total / order.len().max(1) as f64 })
}

/// Median aligned geodesic error on an evenly spaced subsample, when ground truth exists.
pub fn median_pose_error(stack: &ParticleStack, poses: &[Pose], subsample: usize) -> Result<Option<f64>> {
    let Some(gt) = &stack.gt_poses else { return Ok(None) };
    let n = poses.len().min(gt.len());
    if n == 0 {
        return Ok(None);
    }
    let take = n.min(subsample.max(1));
    let idx: Vec<usize> = (0..take).map(|j| j * n / take).collect();
    let pred: Vec<Rotation> = idx.iter().map(|&i| poses[i].rotation).collect();
    let truth: Vec<Rotation> = idx.iter().map(|&i| gt[i].rotation).collect();
    Ok(Some(pose_error_stats(&pred, &truth)?.median))
}

/// Complete training state; everything needed to resume a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub l: usize,
    pub encoder: Encoder,
    pub volume: MEVolume,
    pub noise: NoiseModel,
    pub poses: Option<PoseTable>,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<EpochLog>,
    /// Winners of the most recent auto-encoding epoch.
    pub last_winners: Vec<(Pose, usize)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, stack: &ParticleStack) -> Result<Trainer> {
        config.validate()?;
        if stack.is_empty() {
            return Err(Error::EmptyStack);
        }
        let mut encoder = Encoder::new(config.encoder_config(stack.l))?;
        if config.encoder_calibration {
            let take = stack.len().min(CALIBRATION_SAMPLE);
            let inputs: Vec<Vec<f64>> = (0..take).map(|j| encoder_input(stack, j * stack.len() / take, &config)).collect();
            if inputs.len() >= 2 {
                encoder.calibrate(&inputs)?;
            }
        }
        let noise = estimate_sigma(stack)?;
        let volume = initial_volume(stack, &noise, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        Ok(Trainer { config, l: stack.l, encoder, volume, noise, poses: None, epoch: 0, rng, log: Vec::new(), last_winners: Vec::new() })
    }

    pub fn stage(&self) -> Stage {
        if self.poses.is_some() {
            Stage::AutoDecode
        } else {
            Stage::AutoEncode
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs_total
    }

    pub fn mask(&self) -> Mask {
        Mask::new(self.l, frequency_mask_radius(self.epoch, &self.config, self.l))
    }

    /// Current best pose per particle: the pose table, or the latest encoder winners.
    pub fn current_poses(&self) -> Vec<Pose> {
        match &self.poses {
            Some(t) => t.poses(),
            None => self.last_winners.iter().map(|w| w.0).collect(),
        }
    }

    fn check_stack(&self, stack: &ParticleStack) -> Result<()> {
        if stack.l != self.l {
            return Err(Error::DimensionMismatch { expected: self.l, got: stack.l });
        }
        if let Some(t) = &self.poses {
            if t.len() != stack.len() {
                return Err(Error::DimensionMismatch { expected: t.len(), got: stack.len() });
            }
        }
        Ok(())
    }

    /// Runs one epoch, switching stage first when the switch epoch is reached.
    pub fn run_epoch(&mut self, stack: &ParticleStack) -> Result<EpochLog> {
        self.check_stack(stack)?;
        let workers = self.config.workers;
        with_workers(workers, || self.run_epoch_inner(stack))
    }

    fn run_epoch_inner(&mut self, stack: &ParticleStack) -> Result<EpochLog> {
        let start = Instant::now();
        let mask = self.mask();
        let mut order: Vec<usize> = (0..stack.len()).collect();
        order.shuffle(&mut self.rng);
        let autoencode = self.epoch < self.config.switch_epoch || self.config.fully_amortized;
        let log = if autoencode {
            let s = run_autoencode_epoch(stack, &mut self.encoder, &mut self.volume, &self.noise, &self.config, &order, &mask)?;
            let poses: Vec<Pose> = s.winners.iter().map(|w| w.0).collect();
            let err = median_pose_error(stack, &poses, self.config.eval_subsample)?;
            self.last_winners = s.winners;
            EpochLog {
                epoch: self.epoch,
                stage: Stage::AutoEncode,
                wall_seconds: 0.0,
                mean_wta_loss: s.mean_wta_loss,
                head_usage: s.head_counts,
                mask_radius: mask.radius,
                median_pose_error: err,
            }
        } else {
            if self.poses.is_none() {
                self.poses = Some(switch_to_autodecode(stack, &self.encoder, &self.volume, &self.noise, &self.config, &mask)?);
            }
            let table = self.poses.as_mut().expect("pose table initialized");
            let s = run_autodecode_round(stack, table, &mut self.volume, &self.noise, &self.config, &order, &mask)?;
            let mut usage = vec![0u64; self.config.heads];
            for e in &table.entries {
                usage[e.head] += 1;
            }
            let err = median_pose_error(stack, &table.poses(), self.config.eval_subsample)?;
            EpochLog {
                epoch: self.epoch,
                stage: Stage::AutoDecode,
                wall_seconds: 0.0,
                mean_wta_loss: s.mean_loss,
                head_usage: usage,
                mask_radius: mask.radius,
                median_pose_error: err,
            }
        };
        let log = EpochLog { wall_seconds: start.elapsed().as_secs_f64(), ..log };
        self.epoch += 1;
        self.log.push(log.clone());
        Ok(log)
    }

    /// Trains until `epochs_total`, calling `after_epoch` once per completed epoch.
    pub fn run(&mut self, stack: &ParticleStack, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(stack)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_degrees;
    use crate::simulator::{model_image, phantom_for_spec, synthesize_dataset, SimSpec};
    use rand::Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            heads: 2,
            batch_size: 16,
            epochs_total: 3,
            switch_epoch: 2,
            encoder_channels: vec![4, 8, 8, 8],
            encoder_hidden: 8,
            eval_subsample: 50,
            workers: 1,
            seed: 5,
            ..TrainConfig::preset(Preset::Desk)
        }
    }

    fn stack(n: usize, l: usize, snr: f64, seed: u64) -> (ParticleStack, MEVolume) {
        let spec = SimSpec { snr, ..SimSpec::new(n, l, seed) };
        let ph = phantom_for_spec(&spec).unwrap();
        let vol = MEVolume::from_density(&ph.density, l, spec.pixel_size).unwrap();
        (synthesize_dataset(&ph, &spec).unwrap(), vol)
    }

    #[test]
    fn mask_schedule_cases() {
        let cfg = TrainConfig { switch_epoch: 7, epochs_total: 20, ..TrainConfig::default() };
        assert_eq!(frequency_mask_radius(0, &cfg, 128), 16.0);
        assert_eq!(frequency_mask_radius(7, &cfg, 128), 63.0);
        assert_eq!(frequency_mask_radius(15, &cfg, 128), 63.0);
        let mut last = 0.0;
        for e in 0..10 {
            let r = frequency_mask_radius(e, &cfg, 128);
            assert!(r >= last);
            last = r;
        }
        let off = TrainConfig { freq_march: false, ..cfg };
        assert!((0..10).all(|e| frequency_mask_radius(e, &off, 128) == 63.0));
    }

    #[test]
    fn presets_and_validation() {
        let s = TrainConfig::preset(Preset::Synthetic);
        assert_eq!((s.heads, s.batch_size, s.switch_epoch, s.epochs_total), (7, 64, 7, 20));
        assert_eq!((s.lr_encoder, s.lr_decoder_stage1, s.lr_decoder_stage2, s.lr_pose), (1e-4, 0.05, 0.02, 0.05));
        assert_eq!(s.pose_steps_per_volume_step, 5);
        let r = TrainConfig::preset(Preset::RealStyle);
        assert_eq!((r.heads, r.epochs_total, r.switch_epoch), (15, 30, 15));
        let d = TrainConfig::preset(Preset::Desk);
        assert_eq!((d.heads, d.epochs_total, d.switch_epoch), (4, 20, 12));
        for p in [s, r, d] {
            p.validate().unwrap();
        }
        assert!(TrainConfig { switch_epoch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { switch_epoch: 21, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_pose: 0.0, ..TrainConfig::default() }.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let broken = json.replacen("\"heads\"", "\"headz\"", 1);
        assert!(serde_json::from_str::<TrainConfig>(&broken).is_err());
    }

    #[test]
    fn head_usage_conserves_images_and_switch_matches_min() {
        let (st, _) = stack(40, 16, 0.5, 1);
        let mut tr = Trainer::new(small_cfg(), &st).unwrap();
        let log = tr.run_epoch(&st).unwrap();
        assert_eq!(log.head_usage.iter().sum::<u64>(), 40);
        let mask = tr.mask();
        let table = switch_to_autodecode(&st, &tr.encoder, &tr.volume, &tr.noise, &tr.config, &mask).unwrap();
        for (i, e) in table.entries.iter().enumerate() {
            let (poses, _) = tr.encoder.forward(&encoder_input(&st, i, &tr.config)).unwrap();
            let (losses, _, _) = candidate_losses(&st, i, &poses, &tr.volume, &tr.noise, &mask).unwrap();
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(e.loss, min);
            assert_eq!(e.rotation, poses[e.head].rotation);
        }
    }

    #[test]
    fn single_head_switch_copies_the_head() {
        let (st, _) = stack(12, 16, 0.5, 2);
        let cfg = TrainConfig { heads: 1, ..small_cfg() };
        let tr = Trainer::new(cfg, &st).unwrap();
        let table = switch_to_autodecode(&st, &tr.encoder, &tr.volume, &tr.noise, &tr.config, &tr.mask()).unwrap();
        for (i, e) in table.entries.iter().enumerate() {
            let (poses, _) = tr.encoder.forward(&encoder_input(&st, i, &tr.config)).unwrap();
            assert_eq!(e.pose(), poses[0]);
            assert_eq!(e.head, 0);
        }
    }

    #[test]
    fn encoder_frozen_after_switch() {
        let (st, _) = stack(24, 16, 0.5, 3);
        let mut tr = Trainer::new(small_cfg(), &st).unwrap();
        tr.run_epoch(&st).unwrap();
        tr.run_epoch(&st).unwrap();
        let params = tr.encoder.params.clone();
        let log = tr.run_epoch(&st).unwrap();
        assert_eq!(log.stage, Stage::AutoDecode);
        assert_eq!(tr.encoder.params, params);
        for e in &tr.poses.as_ref().unwrap().entries {
            assert!(e.rotation.orthonormality_error() < 1e-6);
        }
    }

    #[test]
    fn serial_runs_are_identical_and_threads_do_not_matter() {
        let (st, _) = stack(30, 16, 0.5, 4);
        let run = |workers: usize| {
            let mut tr = Trainer::new(TrainConfig { workers, ..small_cfg() }, &st).unwrap();
            tr.run(&st, |_| Ok(())).unwrap();
            tr.log.iter().map(|l| (l.mean_wta_loss, l.head_usage.clone(), l.median_pose_error)).collect::<Vec<_>>()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(2));
    }

    #[test]
    fn pose_refinement_converges_on_ground_truth_volume() {
        let l = 32;
        let (mut st, vol) = stack(100, l, 1e6, 6);
        let gt = st.gt_poses.clone().unwrap();
        for i in 0..st.len() {
            st.images[i] = model_image(&vol, &gt[i], &st.ctf[i]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let entries = gt
            .iter()
            .map(|p| {
                let axis = crate::geometry::normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
                let w = crate::geometry::scale(axis, 10f64.to_radians());
                PoseEntry::new(Pose::new(rotation_from_axis_angle(AxisAngle(w)) * p.rotation, p.translation), 0, 0.0)
            })
            .collect();
        let mut table = PoseTable { entries };
        let cfg = TrainConfig { freeze_volume: true, workers: 1, batch_size: 100, ..small_cfg() };
        let mut vol = vol;
        let noise = NoiseModel::new(1.0).unwrap();
        let mask = Mask::new(l, (l / 4) as f64);
        let order: Vec<usize> = (0..100).collect();
        for _ in 0..10 {
            run_autodecode_round(&st, &mut table, &mut vol, &noise, &cfg, &order, &mask).unwrap();
        }
        let mut errs: Vec<f64> = table.entries.iter().zip(&gt).map(|(e, g)| geodesic_degrees(&e.rotation, &g.rotation)).collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[50] < 1.0, "median {}", errs[50]);
    }

    #[test]
    fn frozen_volume_encoder_learns_poses() {
        let l = 16;
        let (st, vol) = stack(500, l, 10.0, 8);
        let gt: Vec<Rotation> = st.gt_poses.as_ref().unwrap().iter().map(|p| p.rotation).collect();
        let cfg = TrainConfig { heads: 1, freeze_volume: true, lr_encoder: 1e-3, batch_size: 16, ..small_cfg() };
        let mut enc = Encoder::new(cfg.encoder_config(l)).unwrap();
        let mut vol = vol;
        let noise = estimate_sigma(&st).unwrap();
        let mask = Mask::new(l, 4.0);
        let order: Vec<usize> = (0..st.len()).collect();
        let mean_err = |s: &AutoencodeStats| {
            s.winners.iter().zip(&gt).map(|(w, g)| geodesic_degrees(&w.0.rotation, g)).sum::<f64>() / gt.len() as f64
        };
        let mut errs = Vec::new();
        for _ in 0..4 {
            let s = run_autoencode_epoch(&st, &mut enc, &mut vol, &noise, &cfg, &order, &mask).unwrap();
            errs.push(mean_err(&s));
        }
        assert!(errs[3] < errs[0], "{errs:?}");
    }
}
