//! Compact convolutional pose encoder with `M` independent heads.
//!
//! Each head maps the shared 128-d feature to six S2S2 numbers and two translation
//! logits. All parameters live in one flat vector so one Adam state covers the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{rotation_from_s2s2, s2s2_backward, Mat3, S2S2Param};
use crate::optim::{Adam, AdamState};
use crate::particles::Pose;

pub const LEAKY_SLOPE: f64 = 0.1;
/// Added to every head's raw S2S2 output before conversion.
pub const S2S2_JITTER: [f64; 6] = [1e-6, 0.0, 0.0, 0.0, 1e-6, 0.0];
const HEAD_OUT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub l: usize,
    pub heads: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Translation bound in pixels.
    pub t_max: f64,
    pub estimate_translation: bool,
    pub pooling: Pooling,
    pub seed: u64,
}

/// How the last feature map becomes the head input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Channel means, one value per channel.
    #[default]
    Average,
    /// The whole map, channel-major.
    Flatten,
}

impl EncoderConfig {
    pub fn new(l: usize, heads: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            l,
            heads,
            channels: vec![16, 32, 64, 128],
            hidden: 64,
            t_max: l as f64 / 8.0,
            estimate_translation: true,
            pooling: Pooling::Average,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayout {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    hin: usize,
    hout: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: Vec<f64>,
    pub adam: AdamState,
    convs: Vec<ConvLayout>,
    heads: Vec<HeadLayout>,
    backbone_len: usize,
}

/// Activations of one forward pass, consumed by [`Encoder::backward`].
#[derive(Clone, Debug)]
pub struct EncoderCache {
    n_params: usize,
    /// `acts[0]` is the input; `acts[i + 1]` the output of conv stage `i`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    feature: Vec<f64>,
    hidden_pre: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    raw: Vec<[f64; HEAD_OUT]>,
}

/// Gradient of the winning loss with respect to one head's pose.
#[derive(Clone, Copy, Debug)]
pub struct HeadUpstream {
    pub head: usize,
    pub grad_rotation: Mat3,
    pub grad_translation: [f64; 2],
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Zero-mean, unit-variance copy of `image`.
pub fn preprocess(image: &[f64]) -> Vec<f64> {
    let n = image.len().max(1) as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    image.iter().map(|v| (v - mean) / sd).collect()
}

fn conv_forward(w: &[f64], b: &[f64], input: &[f64], c: &ConvLayout, out: &mut [f64]) {
    let (hin, hout) = (c.hin as isize, c.hout);
    for co in 0..c.cout {
        let o = &mut out[co * hout * hout..(co + 1) * hout * hout];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c.cin {
            let k = &w[(co * c.cin + ci) * 9..(co * c.cin + ci + 1) * 9];
            let inp = &input[ci * c.hin * c.hin..(ci + 1) * c.hin * c.hin];
            for ky in 0..3 {
                for oy in 0..hout {
                    let iy = 2 * oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= hin {
                        continue;
                    }
                    let row = &inp[iy as usize * c.hin..(iy as usize + 1) * c.hin];
                    let orow = &mut o[oy * hout..(oy + 1) * hout];
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = 2 * ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < hin {
                                *ov += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `grad_in` is given, the input gradient.
fn conv_backward(
    w: &[f64],
    input: &[f64],
    grad_out: &[f64],
    c: &ConvLayout,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let (hin, hout) = (c.hin as isize, c.hout);
    for co in 0..c.cout {
        let go = &grad_out[co * hout * hout..(co + 1) * hout * hout];
        grad_b[co] += go.iter().sum::<f64>();
        for ci in 0..c.cin {
            let base = (co * c.cin + ci) * 9;
            let inp = &input[ci * c.hin * c.hin..(ci + 1) * c.hin * c.hin];
            for ky in 0..3 {
                for oy in 0..hout {
                    let iy = 2 * oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= hin {
                        continue;
                    }
                    let row_off = iy as usize * c.hin;
                    let grow = &go[oy * hout..(oy + 1) * hout];
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for (ox, &g) in grow.iter().enumerate() {
                            let ix = 2 * ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < hin {
                                acc += g * inp[row_off + ix as usize];
                            }
                        }
                        grad_w[base + ky * 3 + kx] += acc;
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let wv = w[base + ky * 3 + kx];
                            let gi = &mut gi[ci * c.hin * c.hin + row_off..];
                            for (ox, &g) in grow.iter().enumerate() {
                                let ix = 2 * ox as isize + kx as isize - 1;
                                if ix >= 0 && ix < hin {
                                    gi[ix as usize] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Encoder> {
        if config.l < 16 || !config.l.is_multiple_of(2) {
            return Err(Error::Config(format!("encoder needs an even image size >= 16, got {}", config.l)));
        }
        if config.heads == 0 || config.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one head and one stage".into()));
        }
        let mut off = 0;
        let mut convs = Vec::new();
        let (mut cin, mut h) = (1, config.l);
        for &cout in &config.channels {
            let hout = h.div_ceil(2);
            let w = off;
            off += cout * cin * 9;
            let b = off;
            off += cout;
            convs.push(ConvLayout { w, b, cin, cout, hin: h, hout });
            cin = cout;
            h = hout;
        }
        let backbone_len = off;
        let feat = match config.pooling {
            Pooling::Average => cin,
            Pooling::Flatten => cin * h * h,
        };
        let mut heads = Vec::new();
        for _ in 0..config.heads {
            let w1 = off;
            off += config.hidden * feat;
            let b1 = off;
            off += config.hidden;
            let w2 = off;
            off += HEAD_OUT * config.hidden;
            let b2 = off;
            off += HEAD_OUT;
            heads.push(HeadLayout { w1, b1, w2, b2 });
        }
        let mut params = vec![0.0; off];
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for c in &convs {
            let bound = gain * (3.0 / (c.cin * 9) as f64).sqrt();
            params[c.w..c.b].iter_mut().for_each(|p| *p = rng.random_range(-bound..bound));
        }
        for (j, hl) in heads.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(j as u64 + 1);
            let b1 = gain * (3.0 / feat as f64).sqrt();
            params[hl.w1..hl.b1].iter_mut().for_each(|p| *p = rng.random_range(-b1..b1));
            let b2 = (3.0 / config.hidden as f64).sqrt();
            params[hl.w2..hl.b2].iter_mut().for_each(|p| *p = rng.random_range(-b2..b2));
        }
        let adam = AdamState::new(off);
        Ok(Encoder { config, params, adam, convs, heads, backbone_len })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    pub fn head_len(&self) -> usize {
        (self.params.len() - self.backbone_len) / self.config.heads
    }

    /// Parameter range owned by head `j`.
    pub fn head_range(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.heads[j].w1;
        start..start + self.head_len()
    }

    pub fn feature_len(&self) -> usize {
        self.convs.last().map_or(0, |c| match self.config.pooling {
            Pooling::Average => c.cout,
            Pooling::Flatten => c.cout * c.hout * c.hout,
        })
    }

    /// Candidate poses for a preprocessed image.
    pub fn forward(&self, image: &[f64]) -> Result<(Vec<Pose>, EncoderCache)> {
        let l = self.config.l;
        check_len(l * l, image.len())?;
        let p = &self.params;
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        let mut pre = Vec::with_capacity(self.convs.len());
        acts.push(image.to_vec());
        for c in &self.convs {
            let mut out = vec![0.0; c.cout * c.hout * c.hout];
            conv_forward(&p[c.w..c.b], &p[c.b..c.b + c.cout], &acts[acts.len() - 1], c, &mut out);
            let act = out.iter().map(|&v| leaky(v)).collect();
            pre.push(out);
            acts.push(act);
        }
        let last = self.convs.last().expect("at least one stage");
        let area = (last.hout * last.hout) as f64;
        let top = &acts[acts.len() - 1];
        let feature: Vec<f64> = match self.config.pooling {
            Pooling::Average => (0..last.cout)
                .map(|ch| top[ch * last.hout * last.hout..(ch + 1) * last.hout * last.hout].iter().sum::<f64>() / area)
                .collect(),
            Pooling::Flatten => top.clone(),
        };
        let (feat, hid) = (feature.len(), self.config.hidden);
        let mut poses = Vec::with_capacity(self.heads.len());
        let mut hidden_pre = Vec::with_capacity(self.heads.len());
        let mut hidden = Vec::with_capacity(self.heads.len());
        let mut raw = Vec::with_capacity(self.heads.len());
        for hl in &self.heads {
            let hp: Vec<f64> = (0..hid)
                .map(|r| p[hl.b1 + r] + (0..feat).map(|c| p[hl.w1 + r * feat + c] * feature[c]).sum::<f64>())
                .collect();
            let ha: Vec<f64> = hp.iter().map(|&v| leaky(v)).collect();
            let mut out = [0.0; HEAD_OUT];
            for (r, o) in out.iter_mut().enumerate() {
                *o = p[hl.b2 + r] + (0..hid).map(|c| p[hl.w2 + r * hid + c] * ha[c]).sum::<f64>();
            }
            poses.push(self.decode_head(&out)?);
            hidden_pre.push(hp);
            hidden.push(ha);
            raw.push(out);
        }
        let cache = EncoderCache { n_params: p.len(), acts, pre, feature, hidden_pre, hidden, raw };
        Ok((poses, cache))
    }

    fn s2s2_input(raw: &[f64; HEAD_OUT]) -> S2S2Param {
        S2S2Param(std::array::from_fn(|i| raw[i] + S2S2_JITTER[i]))
    }

    fn decode_head(&self, raw: &[f64; HEAD_OUT]) -> Result<Pose> {
        let rotation = rotation_from_s2s2(&Self::s2s2_input(raw))?;
        let translation = if self.config.estimate_translation {
            [self.config.t_max * raw[6].tanh(), self.config.t_max * raw[7].tanh()]
        } else {
            [0.0, 0.0]
        };
        Ok(Pose { rotation, translation })
    }

    /// Adds the parameter gradient of the winning head's loss into `grads`.
    pub fn backward(&self, up: &HeadUpstream, cache: &EncoderCache, grads: &mut [f64]) -> Result<()> {
        if cache.n_params != self.params.len() || cache.raw.len() != self.heads.len() || up.head >= self.heads.len() {
            return Err(Error::StaleCache);
        }
        check_len(self.params.len(), grads.len())?;
        let p = &self.params;
        let hl = &self.heads[up.head];
        let raw = &cache.raw[up.head];
        let mut d_raw = [0.0; HEAD_OUT];
        d_raw[..6].copy_from_slice(&s2s2_backward(&Self::s2s2_input(raw), &up.grad_rotation));
        if self.config.estimate_translation {
            for d in 0..2 {
                let th = raw[6 + d].tanh();
                d_raw[6 + d] = up.grad_translation[d] * self.config.t_max * (1.0 - th * th);
            }
        }
        if d_raw.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        let (feat, hid) = (cache.feature.len(), self.config.hidden);
        let ha = &cache.hidden[up.head];
        let hp = &cache.hidden_pre[up.head];
        let mut d_hidden = vec![0.0; hid];
        for (r, &g) in d_raw.iter().enumerate() {
            grads[hl.b2 + r] += g;
            for c in 0..hid {
                grads[hl.w2 + r * hid + c] += g * ha[c];
                d_hidden[c] += g * p[hl.w2 + r * hid + c];
            }
        }
        let mut d_feature = vec![0.0; feat];
        for r in 0..hid {
            let g = d_hidden[r] * leaky_grad(hp[r]);
            grads[hl.b1 + r] += g;
            for c in 0..feat {
                grads[hl.w1 + r * feat + c] += g * cache.feature[c];
                d_feature[c] += g * p[hl.w1 + r * feat + c];
            }
        }
        let last = self.convs.last().expect("at least one stage");
        let area = last.hout * last.hout;
        let mut d_act: Vec<f64> = match self.config.pooling {
            Pooling::Average => (0..last.cout * area).map(|i| d_feature[i / area] / area as f64).collect(),
            Pooling::Flatten => d_feature,
        };
        for (s, c) in self.convs.iter().enumerate().rev() {
            let d_pre: Vec<f64> = d_act.iter().zip(&cache.pre[s]).map(|(g, &x)| g * leaky_grad(x)).collect();
            let mut d_in = if s > 0 { Some(vec![0.0; c.cin * c.hin * c.hin]) } else { None };
            let (gw, rest) = grads[c.w..].split_at_mut(c.b - c.w);
            conv_backward(&p[c.w..c.b], &cache.acts[s], &d_pre, c, gw, &mut rest[..c.cout], d_in.as_deref_mut());
            if let Some(d) = d_in {
                d_act = d;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        Adam::default().step(&mut self.params, grads, &mut self.adam, lr)
    }

    /// Data-dependent initialization: rescales both layers of every head so that their
    /// pre-activations have zero mean and unit variance over `inputs`.
    pub fn calibrate(&mut self, inputs: &[Vec<f64>]) -> Result<()> {
        if inputs.len() < 2 {
            return Err(Error::EmptyInput);
        }
        let mut features = Vec::with_capacity(inputs.len());
        for x in inputs {
            features.push(self.forward(x)?.1.feature);
        }
        let (feat, hid) = (self.feature_len(), self.config.hidden);
        for hl in self.heads.clone() {
            let p = &mut self.params;
            let hidden_pre: Vec<Vec<f64>> = features
                .iter()
                .map(|f| (0..hid).map(|r| p[hl.b1 + r] + (0..feat).map(|c| p[hl.w1 + r * feat + c] * f[c]).sum::<f64>()).collect())
                .collect();
            standardize_layer(p, hl.w1, hl.b1, feat, &hidden_pre);
            let hidden: Vec<Vec<f64>> = features
                .iter()
                .map(|f| {
                    (0..hid)
                        .map(|r| leaky(p[hl.b1 + r] + (0..feat).map(|c| p[hl.w1 + r * feat + c] * f[c]).sum::<f64>()))
                        .collect()
                })
                .collect();
            let raw: Vec<Vec<f64>> = hidden
                .iter()
                .map(|h| (0..HEAD_OUT).map(|r| p[hl.b2 + r] + (0..hid).map(|c| p[hl.w2 + r * hid + c] * h[c]).sum::<f64>()).collect())
                .collect();
            standardize_layer(p, hl.w2, hl.b2, hid, &raw);
        }
        Ok(())
    }
}

/// Rescales the rows of a dense layer so each output has zero mean and unit variance
/// over the observed `outputs` (one row per sample).
fn standardize_layer(p: &mut [f64], w: usize, b: usize, fan_in: usize, outputs: &[Vec<f64>]) {
    let n = outputs.len() as f64;
    for r in 0..outputs[0].len() {
        let mean = outputs.iter().map(|o| o[r]).sum::<f64>() / n;
        let sd = (outputs.iter().map(|o| (o[r] - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd < 1e-12 {
            continue;
        }
        for c in 0..fan_in {
            p[w + r * fan_in + c] /= sd;
        }
        p[b + r] = (p[b + r] - mean) / sd;
    }
}
